//! Sampled checks of the structural assumptions and Kawashima compensating matrices.

use crate::error::{Error, Result};
use crate::linalg::real_eig;
use crate::model::{lax_index, ModelSystem};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Indeterminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_id: String,
    pub verdict: Verdict,
    pub witness: Option<Vec<f64>>,
    pub margin: f64,
    pub seed: u64,
    pub detail: String,
}

impl CheckReport {
    fn new(id: &str, pass: bool, margin: f64, witness: Option<Vec<f64>>, seed: u64, detail: String) -> Self {
        let verdict = if pass { Verdict::Pass } else { Verdict::Fail };
        let witness = if pass { witness } else { Some(witness.unwrap_or_else(|| vec![margin])) };
        let margin = if margin.is_finite() { margin } else { f64::MAX };
        CheckReport { check_id: id.into(), verdict, witness, margin, seed, detail }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensatingMatrix {
    pub xi: Vec<f64>,
    /// Strictly upper-triangular parameters, row-major.
    pub params: Vec<f64>,
    pub theta: f64,
}

impl CompensatingMatrix {
    pub fn k(&self, n: usize) -> DMatrix<f64> {
        skew_from_params(n, &self.params)
    }
}

fn skew_from_params(n: usize, p: &[f64]) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i + 1..n {
            k[(i, j)] = p[idx];
            k[(j, i)] = -p[idx];
            idx += 1;
        }
    }
    k
}

pub const RH_TOL: f64 = 1e-10;
pub const GAP_TOL: f64 = 1e-8;
pub const KERNEL_TOL: f64 = 1e-8;

pub fn check_rankine_hugoniot(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], s: f64) -> Result<CheckReport> {
    let m = model.in_frame(0.0);
    for u in [u_minus, u_plus] {
        if !m.in_domain(u) {
            return Err(Error::OutOfDomain(u.to_vec()));
        }
    }
    let jump = DVector::from_column_slice(u_plus) - DVector::from_column_slice(u_minus);
    let res = (m.flux(0, u_plus) - m.flux(0, u_minus) - jump * s).norm();
    Ok(CheckReport::new("S1_rankine_hugoniot", res < RH_TOL, RH_TOL - res, Some(vec![res]), 0, format!("residual {res:e}")))
}

/// Lax classification; `p` is `None` when no unique index satisfies the inequalities.
pub fn classify_lax(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], s: f64) -> Result<(Option<usize>, CheckReport)> {
    let m = model.in_frame(0.0);
    let mut gap = f64::INFINITY;
    let mut lams = Vec::new();
    for u in [u_minus, u_plus] {
        let (l, _, _) = real_eig(&m.jac(0, u))?;
        for w in l.windows(2) {
            gap = gap.min(w[1] - w[0]);
        }
        lams.push(l);
    }
    if gap < GAP_TOL {
        return Err(Error::NotStrictlyHyperbolic(gap));
    }
    let p = lax_index(&m, u_minus, u_plus, s)?;
    let margin = match p {
        Some(p) => {
            let k = p - 1;
            let mut mg = (s - lams[1][k]).min(lams[0][k] - s);
            if k > 0 {
                mg = mg.min(s - lams[0][k - 1]);
            }
            if k + 1 < m.n {
                mg = mg.min(lams[1][k + 1] - s);
            }
            mg
        }
        None => 0.0,
    };
    let mut w = lams[0].clone();
    w.extend(&lams[1]);
    let detail = match p {
        Some(p) => format!("p = {p}"),
        None => "no unique Lax index".into(),
    };
    Ok((p, CheckReport::new("S1_lax", p.is_some(), margin, Some(w), 0, detail)))
}

/// lambda_p(u) for the eigenvalues of df_1 (speed-independent ordering).
fn lambda_p(model: &ModelSystem, u: &[f64], p: usize) -> Result<f64> {
    Ok(real_eig(&model.jac(0, u))?.0[p - 1])
}

pub fn check_gnl_and_diffusion(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], p: usize) -> Result<CheckReport> {
    let n = model.n;
    let nseg = 33;
    let mut gnl_min = f64::INFINITY;
    let mut worst_u = u_minus.to_vec();
    for k in 0..nseg {
        let t = k as f64 / (nseg - 1) as f64;
        let u: Vec<f64> = (0..n).map(|i| (1.0 - t) * u_minus[i] + t * u_plus[i]).collect();
        let (_, r, _) = real_eig(&model.jac(0, &u))?;
        let rp = r.column(p - 1).into_owned();
        let h = 1e-6;
        let up: Vec<f64> = (0..n).map(|i| u[i] + h * rp[i]).collect();
        let um: Vec<f64> = (0..n).map(|i| u[i] - h * rp[i]).collect();
        let d = (lambda_p(model, &up, p)? - lambda_p(model, &um, p)?) / (2.0 * h);
        if d.abs() < gnl_min {
            gnl_min = d.abs();
            worst_u = u;
        }
    }
    let mut diff_min = f64::INFINITY;
    for u in [u_minus, u_plus] {
        let (_, r, rinv) = real_eig(&model.jac(0, u))?;
        let lb = &model.l * model.dg(u).transpose();
        let val = (rinv.row(p - 1) * lb * r.column(p - 1))[(0, 0)];
        diff_min = diff_min.min(val);
    }
    let pass = gnl_min > 1e-8 && diff_min > 1e-10;
    let mut w = worst_u;
    w.push(gnl_min);
    w.push(diff_min);
    Ok(CheckReport::new(
        "S2_gnl_diffusion",
        pass,
        (gnl_min - 1e-8).min(diff_min - 1e-10),
        Some(w),
        0,
        format!("min |grad lambda_p . r_p| = {gnl_min:e}, min l_p (L dg) r_p = {diff_min:e}"),
    ))
}

/// Quasi-uniform unit vectors in R^d with a seeded random offset/rotation.
pub fn sphere_samples(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match d {
        2 => {
            let phi: f64 = rng.random();
            (0..n)
                .map(|k| {
                    let t = 2.0 * std::f64::consts::PI * (k as f64 + phi) / n as f64;
                    vec![t.cos(), t.sin()]
                })
                .collect()
        }
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let rot: f64 = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
            (0..n)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * k as f64 + rot;
                    vec![r * t.cos(), r * t.sin(), z]
                })
                .collect()
        }
        _ => (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d)
                    .map(|_| {
                        let (u1, u2): (f64, f64) = (rng.random(), rng.random());
                        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect();
                let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / nrm).collect()
            })
            .collect(),
    }
}

fn end_state(side: Side, u_minus: &[f64], u_plus: &[f64]) -> Vec<f64> {
    match side {
        Side::Plus => u_plus.to_vec(),
        Side::Minus => u_minus.to_vec(),
    }
}

/// Eigenvalues (ascending) and eigenvectors of A(xi) through the symmetrizer A0.
fn sym_eig(model: &ModelSystem, xi: &[f64], u: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let a = model.symbol(xi, u);
    let a0 = model.a0(u);
    let se = SymmetricEigen::new(a0.clone());
    let isq = &se.eigenvectors * DMatrix::from_diagonal(&se.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt())) * se.eigenvectors.transpose();
    let s = &isq * (&a0 * &a) * &isq;
    let s = (&s + s.transpose()) * 0.5;
    let e = SymmetricEigen::new(s);
    let mut idx: Vec<usize> = (0..model.n).collect();
    idx.sort_by(|&i, &j| e.eigenvalues[i].partial_cmp(&e.eigenvalues[j]).unwrap());
    let vals = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(model.n, model.n);
    for (c, &i) in idx.iter().enumerate() {
        let v = &isq * e.eigenvectors.column(i);
        vecs.set_column(c, &(v.normalize()));
    }
    (vals, vecs)
}

pub fn check_symmetrizer(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], n_samples: usize, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<Vec<f64>> = vec![u_minus.to_vec(), u_plus.to_vec()];
    for _ in 0..n_samples {
        pts.push(model.domain.iter().map(|(lo, hi)| lo + (hi - lo) * (0.05 + 0.9 * rng.random::<f64>())).collect());
    }
    let mut margin = f64::INFINITY;
    let mut witness = None;
    let mut why = String::new();
    for u in &pts {
        let a0 = model.a0(u);
        let asym = (&a0 - a0.transpose()).amax();
        let min_eig = SymmetricEigen::new((&a0 + a0.transpose()) * 0.5).eigenvalues.min();
        let mut sym_err: f64 = asym;
        for j in 0..model.d {
            let m = &a0 * model.jac(j, u);
            sym_err = sym_err.max((&m - m.transpose()).amax() / m.amax().max(1.0));
        }
        let ald = &a0 * &model.l * model.dg(u).transpose();
        let psd = SymmetricEigen::new((&ald + ald.transpose()) * 0.5).eigenvalues.min();
        let scale = ald.amax().max(1.0);
        let local = min_eig.min(1e-10 - sym_err).min(psd + 1e-12 * scale);
        if local < margin {
            margin = local;
            if local <= 0.0 {
                witness = Some(u.clone());
                why = format!("min eig A0 {min_eig:e}, symmetry defect {sym_err:e}, min eig sym(A0 L dg) {psd:e}");
            }
        }
    }
    let pass = margin > 0.0;
    if pass {
        why = format!("{} states sampled", pts.len());
    }
    CheckReport::new("A1_symmetrizer", pass, margin, witness, seed, why)
}

fn side_tag(side: Side) -> &'static str {
    match side {
        Side::Plus => "plus",
        Side::Minus => "minus",
    }
}

fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn neighbours(samples: &[Vec<f64>], d: usize) -> Vec<(usize, usize)> {
    let n = samples.len();
    if d == 2 {
        return (0..n).map(|k| (k, (k + 1) % n)).collect();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let mut dist: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (samples[i].iter().zip(&samples[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
            .collect();
        dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, j) in dist.iter().take(4) {
            if i < j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Kernel functional |L| (dg . v) for eigenvector k with sign aligned to `reference`.
fn kernel_value(model: &ModelSystem, xi: &[f64], u: &[f64], k: usize, reference: Option<&DVector<f64>>) -> (f64, DVector<f64>) {
    let (_, vecs) = sym_eig(model, xi, u);
    let mut v = vecs.column(k).into_owned();
    if let Some(r) = reference {
        if v.dot(r) < 0.0 {
            v = -v;
        }
    }
    (model.l.norm() * model.dg(u).dot(&v), v)
}

/// Sampled (A2) check. Sign changes of the kernel functional between adjacent
/// samples are bisected so that isolated kernel directions are located.
pub fn check_kawashima(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], side: Side, n_samples: usize, seed: u64) -> Result<CheckReport> {
    if n_samples < 16 {
        return Err(Error::InvalidInput("check_kawashima needs at least 16 samples".into()));
    }
    let u = end_state(side, u_minus, u_plus);
    let samples = sphere_samples(model.d, n_samples, seed);
    let n = model.n;
    let per_sample: Vec<(Vec<f64>, DMatrix<f64>)> = samples.par_iter().map(|xi| sym_eig(model, xi, &u)).collect();
    let id = format!("A2_kawashima_{}", side_tag(side));
    let mut margin = f64::INFINITY;
    let mut witness: Option<Vec<f64>> = None;
    let lnorm = model.l.norm();
    let dg = model.dg(&u);
    for (i, (_, vecs)) in per_sample.iter().enumerate() {
        for k in 0..n {
            let v = vecs.column(k);
            let m = lnorm * dg.dot(&v).abs();
            if m < margin {
                margin = m;
                if m < KERNEL_TOL {
                    let mut w = samples[i].clone();
                    w.extend(v.iter());
                    witness = Some(w);
                }
            }
        }
    }
    if witness.is_none() {
        for (a, b) in neighbours(&samples, model.d) {
            for k in 0..n {
                let va = per_sample[a].1.column(k).into_owned();
                let (fa, _) = kernel_value(model, &samples[a], &u, k, Some(&va));
                let (fb, _) = kernel_value(model, &samples[b], &u, k, Some(&va));
                if fa * fb >= 0.0 {
                    continue;
                }
                let (mut lo, mut hi) = (0.0, 1.0);
                let mut vref = va.clone();
                let mut flo = fa;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let xi = slerp(&samples[a], &samples[b], mid);
                    let (fm, vm) = kernel_value(model, &xi, &u, k, Some(&vref));
                    if fm * flo > 0.0 {
                        lo = mid;
                        flo = fm;
                        vref = vm;
                    } else {
                        hi = mid;
                    }
                }
                let xi = slerp(&samples[a], &samples[b], 0.5 * (lo + hi));
                let (f, v) = kernel_value(model, &xi, &u, k, Some(&vref));
                margin = margin.min(f.abs());
                let mut w = xi;
                w.extend(v.iter());
                witness = Some(w);
                break;
            }
            if witness.is_some() {
                break;
            }
        }
    }
    let pass = witness.is_none();
    let detail = if pass {
        format!("{n_samples} directions, min |L dg v| / |v| = {margin:e}")
    } else {
        "eigenvector of sum xi_j df_j in ker(L dg) at witness xi (witness = xi, v)".into()
    };
    Ok(CheckReport::new(&id, pass, margin, witness, seed, detail))
}

/// Sizes of eigenvalue clusters of A(xi), ascending.
fn cluster_pattern(vals: &[f64]) -> Vec<usize> {
    let rad = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-7 * rad.max(1e-300);
    let mut sizes = Vec::new();
    let mut cur = 1;
    for w in vals.windows(2) {
        if w[1] - w[0] <= tol {
            cur += 1;
        } else {
            sizes.push(cur);
            cur = 1;
        }
    }
    sizes.push(cur);
    sizes.sort();
    sizes
}

fn normalized_gap(model: &ModelSystem, xi: &[f64], u: &[f64]) -> (Vec<f64>, f64) {
    let (vals, _) = sym_eig(model, xi, u);
    let rad = vals.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let gap = vals.windows(2).map(|w| (w[1] - w[0]) / rad).fold(f64::INFINITY, f64::min);
    (vals, gap)
}

/// Sampled (H1) check; the eigenvalue gap is also minimized along every arc
/// between neighbouring samples so that isolated crossings are not missed.
pub fn check_constant_multiplicity(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], side: Side, n_samples: usize, seed: u64) -> Result<CheckReport> {
    if n_samples < 16 {
        return Err(Error::InvalidInput("check_constant_multiplicity needs at least 16 samples".into()));
    }
    let u = end_state(side, u_minus, u_plus);
    let samples = sphere_samples(model.d, n_samples, seed);
    let mut probes: Vec<(Vec<f64>, Vec<usize>, f64)> = samples
        .par_iter()
        .map(|xi| {
            let (vals, gap) = normalized_gap(model, xi, &u);
            (xi.clone(), cluster_pattern(&vals), gap)
        })
        .collect();
    if model.n > 1 {
        let refined: Vec<(Vec<f64>, Vec<usize>, f64)> = neighbours(&samples, model.d)
            .par_iter()
            .map(|&(a, b)| {
                let g = |t: f64| normalized_gap(model, &slerp(&samples[a], &samples[b], t), &u).1;
                let r = 0.5 * (5f64.sqrt() - 1.0);
                let (mut lo, mut hi) = (0.0, 1.0);
                let (mut x1, mut x2) = (hi - r * (hi - lo), lo + r * (hi - lo));
                let (mut f1, mut f2) = (g(x1), g(x2));
                for _ in 0..60 {
                    if f1 < f2 {
                        hi = x2;
                        x2 = x1;
                        f2 = f1;
                        x1 = hi - r * (hi - lo);
                        f1 = g(x1);
                    } else {
                        lo = x1;
                        x1 = x2;
                        f1 = f2;
                        x2 = lo + r * (hi - lo);
                        f2 = g(x2);
                    }
                }
                let xi = slerp(&samples[a], &samples[b], 0.5 * (lo + hi));
                let (vals, gap) = normalized_gap(model, &xi, &u);
                (xi, cluster_pattern(&vals), gap)
            })
            .collect();
        probes.extend(refined);
    }
    let first = probes[0].1.clone();
    let mut witness = None;
    for (xi, p, _) in &probes {
        if *p != first {
            let mut w = probes[0].0.clone();
            w.extend(xi);
            witness = Some(w);
            break;
        }
    }
    let min_gap = probes.iter().map(|(_, _, g)| *g).fold(f64::INFINITY, f64::min);
    let pass = witness.is_none();
    let detail = if pass {
        format!("pattern {first:?} at all {} probed directions", probes.len())
    } else {
        "multiplicity pattern differs between the two witness directions".into()
    };
    Ok(CheckReport::new(
        &format!("H1_multiplicity_{}", side_tag(side)),
        pass,
        if min_gap.is_finite() { min_gap } else { 1.0 },
        witness,
        seed,
        detail,
    ))
}

/// theta(K) = min eig of the symmetric part of A0 L dg |xi|^2 - K sum_j xi_j A_j.
pub fn coercivity(model: &ModelSystem, u: &[f64], xi: &[f64], k: &DMatrix<f64>) -> f64 {
    let a0 = model.a0(u);
    let x2: f64 = xi.iter().map(|v| v * v).sum();
    let m = &a0 * &model.l * model.dg(u).transpose() * x2 - k * model.symbol(xi, u);
    SymmetricEigen::new((&m + m.transpose()) * 0.5).eigenvalues.min()
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], step: f64, iters: usize) -> (Vec<f64>, f64) {
    let dim = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += step;
        simplex.push(x);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    for _ in 0..iters {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[dim] - vals[0]).abs() < 1e-15 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..dim).map(|j| simplex[..dim].iter().map(|x| x[j]).sum::<f64>() / dim as f64).collect();
        let lerp = |t: f64| -> Vec<f64> { (0..dim).map(|j| centroid[j] + t * (simplex[dim][j] - centroid[j])).collect() };
        let xr = lerp(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = lerp(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[dim] = xe;
                vals[dim] = fe;
            } else {
                simplex[dim] = xr;
                vals[dim] = fr;
            }
        } else if fr < vals[dim - 1] {
            simplex[dim] = xr;
            vals[dim] = fr;
        } else {
            let xc = if fr < vals[dim] { lerp(-0.5) } else { lerp(0.5) };
            let fc = f(&xc);
            if fc < vals[dim].min(fr) {
                simplex[dim] = xc;
                vals[dim] = fc;
            } else {
                for i in 1..=dim {
                    simplex[i] = (0..dim).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=dim).min_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap()).unwrap();
    (simplex[best].clone(), vals[best])
}

/// Skew-symmetric K maximizing the coercivity constant at end state `side`.
pub fn compensating_matrix(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], side: Side, xi: &[f64], seed: u64) -> Result<CompensatingMatrix> {
    let n = model.n;
    let u = end_state(side, u_minus, u_plus);
    let xn = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let xi: Vec<f64> = xi.iter().map(|v| v / xn).collect();
    let np = n * (n - 1) / 2;
    if np == 0 {
        let theta = coercivity(model, &u, &xi, &DMatrix::zeros(n, n));
        if theta <= 1e-10 {
            return Err(Error::NoCoercivity(theta));
        }
        return Ok(CompensatingMatrix { xi, params: vec![], theta });
    }
    let a0 = model.a0(&u);
    let lb = (&a0 * &model.l * model.dg(&u).transpose()).norm();
    let ax = model.symbol(&xi, &u).norm().max(1e-12);
    let scale = (lb / ax).max(1e-3);
    let obj = |p: &[f64]| -coercivity(model, &u, &xi, &skew_from_params(n, p));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in 0..8 {
        let x0: Vec<f64> = if start == 0 { vec![0.0; np] } else { (0..np).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect() };
        let (mut x, mut fx) = nelder_mead(&obj, &x0, 0.5 * scale, 2000);
        for _ in 0..3 {
            let (x2, f2) = nelder_mead(&obj, &x, 0.05 * scale, 2000);
            if f2 < fx {
                x = x2;
                fx = f2;
            }
        }
        if best.as_ref().is_none_or(|b| fx < b.1) {
            best = Some((x, fx));
        }
    }
    let (params, negtheta) = best.unwrap();
    let theta = coercivity(model, &u, &xi, &skew_from_params(n, &params));
    debug_assert!((theta + negtheta).abs() < 1e-12);
    if theta <= 1e-10 {
        return Err(Error::NoCoercivity(theta));
    }
    Ok(CompensatingMatrix { xi, params, theta })
}

/// Complete assumption suite for one shock, in report order.
pub fn run_all(model: &ModelSystem, u_minus: &[f64], u_plus: &[f64], s: f64, n_samples: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = vec![check_rankine_hugoniot(model, u_minus, u_plus, s)?];
    let lax = match classify_lax(model, u_minus, u_plus, s) {
        Ok(r) => r,
        Err(Error::NotStrictlyHyperbolic(g)) => {
            out.push(CheckReport::new("S1_lax", false, g, Some(vec![g]), 0, "df_1 not strictly hyperbolic".into()));
            (None, out.last().unwrap().clone())
        }
        Err(e) => return Err(e),
    };
    let (p, rep) = lax;
    if out.last().map(|r| r.check_id.as_str()) != Some("S1_lax") {
        out.push(rep);
    }
    let framed = model.in_frame(s);
    match p {
        Some(p) => out.push(check_gnl_and_diffusion(&framed, u_minus, u_plus, p)?),
        None => out.push(CheckReport {
            check_id: "S2_gnl_diffusion".into(),
            verdict: Verdict::Indeterminate,
            witness: None,
            margin: 0.0,
            seed: 0,
            detail: "no Lax index".into(),
        }),
    }
    out.push(check_symmetrizer(model, u_minus, u_plus, 100, seed));
    for side in [Side::Minus, Side::Plus] {
        out.push(check_kawashima(&framed, u_minus, u_plus, side, n_samples, seed)?);
        out.push(check_constant_multiplicity(&framed, u_minus, u_plus, side, n_samples, seed)?);
    }
    for side in [Side::Minus, Side::Plus] {
        let a2 = out.iter().find(|r| r.check_id == format!("A2_kawashima_{}", side_tag(side))).unwrap().clone();
        let mut dirs = sphere_samples(model.d, 16, seed ^ 0x5eed);
        if let Some(w) = &a2.witness {
            if !a2.passed() {
                dirs.push(w[..model.d].to_vec());
            }
        }
        let mut min_theta = f64::INFINITY;
        let mut bad: Option<Vec<f64>> = None;
        for xi in &dirs {
            match compensating_matrix(&framed, u_minus, u_plus, side, xi, seed) {
                Ok(k) => min_theta = min_theta.min(k.theta),
                Err(Error::NoCoercivity(t)) => {
                    min_theta = min_theta.min(t);
                    bad = Some(xi.clone());
                }
                Err(e) => return Err(e),
            }
        }
        let pass = bad.is_none();
        let detail = if pass { format!("theta > 0 at {} directions", dirs.len()) } else { "no coercive K at witness xi".into() };
        out.push(CheckReport::new(&format!("K1_compensating_{}", side_tag(side)), pass, min_theta, bad, seed, detail));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, ShockData};

    fn crossing_model() -> ModelSystem {
        let src = "name='x'\nn=2\nd=2\nflux_1=['u1','-u2']\nflux_2=['u1','u2']\ng='u1+u2'\nL=[1,1]\nA0=[['1','0'],['0','1']]\ndomain_box=[[-1,1],[-1,1]]\n";
        ModelSystem::from_toml(src).unwrap()
    }

    #[test]
    fn rh_examples() {
        let m = builtin_model("hamer2d").unwrap();
        assert!(check_rankine_hugoniot(&m, &[0.1], &[-0.1], 0.0).unwrap().passed());
        assert!(check_rankine_hugoniot(&m, &[1.0], &[-0.5], 0.25).unwrap().passed());
        let r = check_rankine_hugoniot(&m, &[1.0], &[0.5], 0.0).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert!((r.witness.unwrap()[0] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn lax_examples() {
        let m = builtin_model("hamer2d").unwrap();
        let (p, r) = classify_lax(&m, &[0.1], &[-0.1], 0.0).unwrap();
        assert_eq!(p, Some(1));
        assert!(r.passed());
        let (p, r) = classify_lax(&m, &[0.1], &[0.1], 0.0).unwrap();
        assert_eq!(p, None);
        assert_eq!(r.verdict, Verdict::Fail);
        let c = builtin_model("coupled2x2").unwrap();
        let sh = ShockData::from_eps(&c, 0.1).unwrap();
        let (p, _) = classify_lax(&c, &sh.u_minus, &sh.u_plus, 0.0).unwrap();
        assert_eq!(p, Some(1));
    }

    #[test]
    fn gnl_examples() {
        let m = builtin_model("hamer2d").unwrap();
        let r = check_gnl_and_diffusion(&m, &[0.1], &[-0.1], 1).unwrap();
        assert!(r.passed());
        let w = r.witness.unwrap();
        assert!((w[1] - 1.0).abs() < 1e-6 && (w[2] - 1.0).abs() < 1e-12);
        let src = "name='c'\nn=1\nd=2\nflux_1=['u1^2/2']\nflux_2=['0']\ng='3'\nL=[1]\nA0=[['1']]\ndomain_box=[[-1,1]]\n";
        let flat = ModelSystem::from_toml(src).unwrap();
        assert_eq!(check_gnl_and_diffusion(&flat, &[0.1], &[-0.1], 1).unwrap().verdict, Verdict::Fail);
    }

    #[test]
    fn kawashima_examples() {
        let m = builtin_model("hamer2d").unwrap();
        assert!(check_kawashima(&m, &[0.1], &[-0.1], Side::Plus, 32, 42).unwrap().passed());
        let src = "name='z'\nn=1\nd=2\nflux_1=['u1^2/2']\nflux_2=['u1^2/2']\ng='u1'\nL=[0]\nA0=[['1']]\ndomain_box=[[-1,1]]\n";
        let z = ModelSystem::from_toml(src).unwrap();
        let r = check_kawashima(&z, &[0.1], &[-0.1], Side::Plus, 32, 42).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert!(r.witness.is_some());
        assert!(check_kawashima(&m, &[0.1], &[-0.1], Side::Plus, 8, 42).is_err());
    }

    #[test]
    fn kawashima_bisection_finds_isolated_kernel_direction() {
        let c = builtin_model("coupled2x2").unwrap();
        let sh = ShockData::from_eps(&c, 0.1).unwrap();
        // phase offset keeps xi = (0, +-1) off the sample set
        let r = check_kawashima(&c, &sh.u_minus, &sh.u_plus, Side::Plus, 64, 42).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let w = r.witness.unwrap();
        assert!(w[0].abs() < 1e-9, "witness xi {:?}", &w[..2]);
        assert!(w[2].abs() < 1e-6);
    }

    #[test]
    fn multiplicity_examples() {
        let m = builtin_model("hamer2d").unwrap();
        assert!(check_constant_multiplicity(&m, &[0.1], &[-0.1], Side::Plus, 16, 1).unwrap().passed());
        let c = builtin_model("coupled2x2").unwrap();
        let sh = ShockData::from_eps(&c, 0.1).unwrap();
        let r = check_constant_multiplicity(&c, &sh.u_minus, &sh.u_plus, Side::Plus, 64, 42).unwrap();
        assert!(r.passed(), "{r:?}");
        // A(xi) = diag(xi1 + xi2, xi2 - xi1) has a double eigenvalue at xi = (0, 1)
        let x = crossing_model();
        let samples = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let pats: Vec<_> = samples.iter().map(|xi| cluster_pattern(&sym_eig(&x, xi, &[0.0, 0.0]).0)).collect();
        assert_eq!(pats[0], vec![1, 1]);
        assert_eq!(pats[1], vec![2]);
        let r = check_constant_multiplicity(&x, &[0.0, 0.0], &[0.0, 0.0], Side::Plus, 16, 0).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
    }

    #[test]
    fn compensating_scalar() {
        let m = builtin_model("hamer2d").unwrap();
        let k = compensating_matrix(&m, &[0.1], &[-0.1], Side::Plus, &[0.6, 0.8], 42).unwrap();
        assert!(k.params.is_empty());
        assert!((k.theta - 1.0).abs() < 1e-14);
    }

    #[test]
    fn compensating_coupled_recomputed() {
        let c = builtin_model("coupled2x2").unwrap();
        let sh = ShockData::from_eps(&c, 0.1).unwrap();
        let k = compensating_matrix(&c, &sh.u_minus, &sh.u_plus, Side::Plus, &[1.0, 0.0], 42).unwrap();
        assert!(k.theta > 0.0);
        let km = k.k(2);
        assert_eq!(km[(0, 1)], -km[(1, 0)]);
        let again = coercivity(&c, &sh.u_plus, &[1.0, 0.0], &km);
        assert!((again - k.theta).abs() < 1e-10);
        // A2 fails at xi = (0, 1): no skew K can be coercive there
        let bad = compensating_matrix(&c, &sh.u_minus, &sh.u_plus, Side::Plus, &[0.0, 1.0], 42);
        assert!(matches!(bad, Err(Error::NoCoercivity(_))));
    }

    #[test]
    fn compensating_homogeneity() {
        let c = builtin_model("coupled2x2").unwrap();
        let sh = ShockData::from_eps(&c, 0.1).unwrap();
        let a = compensating_matrix(&c, &sh.u_minus, &sh.u_plus, Side::Minus, &[0.8, 0.6], 3).unwrap();
        let b = compensating_matrix(&c, &sh.u_minus, &sh.u_plus, Side::Minus, &[1.6, 1.2], 3).unwrap();
        assert!((a.theta - b.theta).abs() < 1e-9);
    }

    #[test]
    fn suite_hamer_all_pass() {
        let m = builtin_model("hamer2d").unwrap();
        let reps = run_all(&m, &[0.1], &[-0.1], 0.0, 64, 42).unwrap();
        for r in &reps {
            assert!(r.passed(), "{r:?}");
        }
        assert_eq!(reps, run_all(&m, &[0.1], &[-0.1], 0.0, 64, 42).unwrap());
    }
}

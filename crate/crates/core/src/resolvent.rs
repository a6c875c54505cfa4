//! Green kernel of the resolvent ODE, the direct finite-difference resolvent
//! and the empirical bound envelopes.
//!
//! Everything is in (u, q^1, p^1) coordinates, where the ODE reads
//! (M W)' = N W + F with M = diag(A_1, 1, 1) and F = (f, 0, 0).

use crate::error::{Error, Result};
use crate::hypotheses::Side;
use crate::linalg::{c, fd_weights, linfit, Banded, CMat, CVec, C64};
use crate::spectral_ode::{basis_counts, mode_path, singular_modes, ModePath, SpectralContext, SpectralPoint, ZeroSide};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelOrdering {
    XGtY,
    XBetween,
    XLtY,
}

#[derive(Debug, Clone)]
pub struct GreenKernelSample {
    pub x1: f64,
    pub y1: f64,
    pub point: SpectralPoint,
    pub g: CMat,
    pub log_scale: f64,
    pub ordering: KernelOrdering,
}

fn cmax<R: nalgebra::Dim, Cc: nalgebra::Dim, S: nalgebra::RawStorage<C64, R, Cc>>(m: &nalgebra::Matrix<C64, R, Cc, S>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn cond(m: &CMat) -> f64 {
    let s = m.singular_values();
    let mx = s.iter().cloned().fold(0.0, f64::max);
    let mn = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if mn == 0.0 { f64::INFINITY } else { mx / mn }
}

/// Coefficients of G(., y) for one source point.
#[derive(Debug, Clone)]
pub struct Source {
    pub y: f64,
    iy: usize,
    a: CMat,
    b: CMat,
    /// G(y+, y) for y < 0, G(y-, y) for y > 0.
    z: CMat,
    pub jump: CMat,
}

/// Mode paths and slow maps shared by all kernel evaluations at one frequency.
pub struct GreenSolver<'a> {
    ctx: &'a SpectralContext,
    pt: SpectralPoint,
    plus: ModePath,
    minus: ModePath,
    mr1: CMat,
    ml1: CMat,
}

impl<'a> GreenSolver<'a> {
    /// `points` lists every x and y the solver will be asked about.
    pub fn new(ctx: &'a SpectralContext, pt: &SpectralPoint, points: &[f64]) -> Result<Self> {
        let mut ps: Vec<f64> = points.iter().cloned().filter(|x| *x > 0.0).collect();
        let mut ms: Vec<f64> = points.iter().cloned().filter(|x| *x < 0.0).collect();
        ps.push(1.0);
        ms.push(-1.0);
        let plus = mode_path(ctx, pt, Side::Plus, &ps)?;
        let minus = mode_path(ctx, pt, Side::Minus, &ms)?;
        Ok(GreenSolver {
            ctx,
            pt: pt.clone(),
            plus,
            minus,
            mr1: ctx.slow_map(pt, Side::Plus)?,
            ml1: ctx.slow_map(pt, Side::Minus)?,
        })
    }

    fn idx(&self, x: f64) -> Result<usize> {
        let path = if x > 0.0 { &self.plus } else { &self.minus };
        path.index(x).ok_or_else(|| Error::InvalidInput(format!("x = {x} was not registered with the solver")))
    }

    /// Cramer solve for the coefficients of G(., y): slow traces of the two
    /// sides agree at the singular point and G jumps by M(y)^{-1} at y.
    pub fn source(&self, y: f64) -> Result<Source> {
        if y == 0.0 {
            return Err(Error::InvalidInput("source at the singular point".into()));
        }
        let (mm, _, _) = self.ctx.regular_coeffs(y, &self.pt);
        let cm = cond(&mm);
        if cm > 1e10 {
            return Err(Error::NearSingularSolve(cm));
        }
        let jump = mm.try_inverse().ok_or(Error::NearSingularSolve(f64::INFINITY))?;
        let my = self.ctx.slow_map_from(&self.pt, y)?;
        let iy = self.idx(y)?;
        let (kp, km) = basis_counts(self.ctx.n, self.ctx.p);
        let rows = self.ctx.n + 1;
        let mut s = CMat::zeros(rows, kp + km);
        let (left, right) = if y < 0.0 {
            let i1 = self.idx(1.0)?;
            (&self.mr1 * &self.plus.q[i1], -(&my * &self.minus.q[iy]))
        } else {
            let im1 = self.idx(-1.0)?;
            (&my * &self.plus.q[iy], -(&self.ml1 * &self.minus.q[im1]))
        };
        s.view_mut((0, 0), (rows, kp)).copy_from(&left);
        s.view_mut((0, kp), (rows, km)).copy_from(&right);
        let cs = cond(&s);
        if cs > 1e10 {
            return Err(Error::NearSingularSolve(cs));
        }
        let sol = s.lu().solve(&(&my * &jump)).ok_or(Error::NearSingularSolve(cs))?;
        let m = self.ctx.n + 2;
        let a = sol.view((0, 0), (kp, m)).into_owned();
        let b = sol.view((kp, 0), (km, m)).into_owned();
        let z = if y < 0.0 { &self.minus.q[iy] * &b + &jump } else { &self.plus.q[iy] * &a - &jump };
        Ok(Source { y, iy, a, b, z, jump })
    }

    pub fn ordering(x: f64, y: f64) -> KernelOrdering {
        if (y < 0.0 && x < y) || (y > 0.0 && x < 0.0) {
            KernelOrdering::XLtY
        } else if (y < 0.0 && x > 0.0) || (y > 0.0 && x > y) {
            KernelOrdering::XGtY
        } else {
            KernelOrdering::XBetween
        }
    }

    /// G(x, y) v; at x = y the value on the singular-point side is returned.
    pub fn apply(&self, src: &Source, x: f64, v: &CMat) -> Result<CMat> {
        if x == 0.0 {
            return Err(Error::InvalidInput("kernel at the singular point".into()));
        }
        let y = src.y;
        match Self::ordering(x, y) {
            KernelOrdering::XBetween => self.ctx.propagate(&self.pt, y, x, &(&src.z * v)),
            KernelOrdering::XLtY if y < 0.0 => {
                let ix = self.idx(x)?;
                Ok(&self.minus.q[ix] * self.minus.transfer(src.iy, ix, &(&src.b * v))?)
            }
            KernelOrdering::XLtY => {
                let (ix, im1) = (self.idx(x)?, self.idx(-1.0)?);
                Ok(&self.minus.q[ix] * self.minus.transfer(im1, ix, &(&src.b * v))?)
            }
            KernelOrdering::XGtY if y < 0.0 => {
                let (ix, i1) = (self.idx(x)?, self.idx(1.0)?);
                Ok(&self.plus.q[ix] * self.plus.transfer(i1, ix, &(&src.a * v))?)
            }
            KernelOrdering::XGtY => {
                let ix = self.idx(x)?;
                Ok(&self.plus.q[ix] * self.plus.transfer(src.iy, ix, &(&src.a * v))?)
            }
        }
    }

    /// G(y+, y) - G(y-, y), each side from its own representation.
    pub fn jump(&self, src: &Source) -> Result<CMat> {
        let m = self.ctx.n + 2;
        let id = CMat::identity(m, m);
        let between = self.apply(src, src.y, &id)?;
        let outer = if src.y < 0.0 {
            &self.minus.q[src.iy] * self.minus.transfer(src.iy, src.iy, &src.b)?
        } else {
            &self.plus.q[src.iy] * self.plus.transfer(src.iy, src.iy, &src.a)?
        };
        Ok(if src.y < 0.0 { between - outer } else { outer - between })
    }

    pub fn sample(&self, x: f64, y: f64) -> Result<GreenKernelSample> {
        let src = self.source(y)?;
        let m = self.ctx.n + 2;
        let g = self.apply(&src, x, &CMat::identity(m, m))?;
        Ok(GreenKernelSample { x1: x, y1: y, point: self.pt.clone(), g, log_scale: 0.0, ordering: Self::ordering(x, y) })
    }
}

pub fn green_kernel(ctx: &SpectralContext, pt: &SpectralPoint, x1: f64, y1: f64) -> Result<GreenKernelSample> {
    GreenSolver::new(ctx, pt, &[x1, y1])?.sample(x1, y1)
}

const GL_X: [f64; 4] = [0.1834346424956498, 0.5255324099163290, 0.7966664774136267, 0.9602898564975363];
const GL_W: [f64; 4] = [0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763];

/// Composite 8-point Gauss-Legendre nodes on [a, b].
pub fn gauss_nodes(a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(8 * panels);
    let h = (b - a) / panels as f64;
    for k in 0..panels {
        let mid = a + (k as f64 + 0.5) * h;
        for j in 0..4 {
            for s in [-1.0, 1.0] {
                out.push((mid + s * GL_X[j] * h / 2.0, GL_W[j] * h / 2.0));
            }
        }
    }
    out
}

/// W(x) = int G(x, y) (f(y), 0, 0) dy at each x, by quadrature over the
/// support intervals (which must avoid the singular point), split at x.
pub fn kernel_resolvent(
    ctx: &SpectralContext,
    pt: &SpectralPoint,
    f: &(dyn Fn(f64) -> Vec<C64> + Sync),
    support: &[(f64, f64)],
    xs: &[f64],
    panels: usize,
) -> Result<Vec<CVec>> {
    let m = ctx.n + 2;
    let mut nodes = Vec::new();
    for &(a, b) in support {
        if a * b <= 0.0 {
            return Err(Error::InvalidInput("support interval contains the singular point".into()));
        }
        let mut cuts: Vec<f64> = vec![a, b];
        cuts.extend(xs.iter().cloned().filter(|x| *x > a && *x < b));
        cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
        for w in cuts.windows(2) {
            nodes.extend(gauss_nodes(w[0], w[1], panels));
        }
    }
    let mut pts: Vec<f64> = xs.to_vec();
    pts.extend(nodes.iter().map(|(y, _)| *y));
    let solver = GreenSolver::new(ctx, pt, &pts)?;
    let parts: Vec<Vec<CVec>> = nodes
        .par_iter()
        .map(|&(y, w)| {
            let src = solver.source(y)?;
            let fy = f(y);
            let mut v = CMat::zeros(m, 1);
            for (k, fk) in fy.iter().enumerate() {
                v[(k, 0)] = fk * w;
            }
            xs.iter()
                .map(|&x| Ok(CVec::from_column_slice(solver.apply(&src, x, &v)?.as_slice())))
                .collect::<Result<Vec<CVec>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = vec![CVec::zeros(m); xs.len()];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    Ok(out)
}

/// Stretched grid x = X sinh(beta s) / sinh(beta), s uniform on [-1, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub half_width: f64,
    pub center_spacing: f64,
}

impl GridSpec {
    /// 400 nodes over a couple of profile decay lengths.
    pub fn for_context(ctx: &SpectralContext) -> Self {
        GridSpec { n: 400, half_width: (2.0 / ctx.profile.eta).clamp(10.0, ctx.profile.l_dom), center_spacing: 0.05 }
    }

    /// Wide grid for low-frequency samples, whose solutions decay slowly.
    pub fn wide(ctx: &SpectralContext) -> Self {
        GridSpec { n: 1601, half_width: (12.0 / ctx.profile.eta).clamp(10.0, ctx.profile.l_dom), center_spacing: 0.02 }
    }

    /// Nodes and dx/ds.
    pub fn nodes(&self) -> (Vec<f64>, Vec<f64>) {
        let ds = 2.0 / (self.n - 1) as f64;
        let target = self.center_spacing / (self.half_width * ds);
        let x_w = self.half_width;
        let s: Vec<f64> = (0..self.n).map(|i| -1.0 + i as f64 * ds).collect();
        if target >= 1.0 {
            return (s.iter().map(|v| x_w * v).collect(), vec![x_w; self.n]);
        }
        // beta / sinh(beta) decreases from 1
        let (mut lo, mut hi) = (1e-8f64, 60.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid / mid.sinh() > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b = 0.5 * (lo + hi);
        let x = s.iter().map(|v| x_w * (b * v).sinh() / b.sinh()).collect();
        let dx = s.iter().map(|v| x_w * b * (b * v).cosh() / b.sinh()).collect();
        (x, dx)
    }
}

#[derive(Debug, Clone)]
pub struct DirectSolution {
    pub x: Vec<f64>,
    /// (u, q^1, p^1) at each node.
    pub w: Vec<CVec>,
    pub log_det: C64,
    pub min_pivot: f64,
}

impl DirectSolution {
    /// Trapezoidal L^2 norm of the u block.
    pub fn u_l2(&self, n: usize) -> f64 {
        let v: Vec<f64> = self.w.iter().map(|w| w.rows(0, n).norm_squared()).collect();
        trapezoid(&self.x, &v).sqrt()
    }

    pub fn u_linf(&self, n: usize) -> f64 {
        self.w.iter().map(|w| cmax(&w.rows(0, n).into_owned())).fold(0.0, f64::max)
    }
}

pub fn trapezoid(x: &[f64], v: &[f64]) -> f64 {
    x.windows(2).zip(v.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

fn stencil(i: usize, n: usize) -> std::ops::Range<usize> {
    let lo = i.saturating_sub(3).min(n - 7);
    lo..lo + 7
}

/// Sixth-order finite differences for (M W)' - N W = F on the stretched grid,
/// closed by projecting onto the far-field subspaces at both ends.
pub fn direct_resolvent(
    ctx: &SpectralContext,
    pt: &SpectralPoint,
    f: &dyn Fn(f64) -> Vec<C64>,
    grid: &GridSpec,
) -> Result<DirectSolution> {
    let n = ctx.n;
    let m = n + 2;
    let np = grid.n;
    if np < 7 {
        return Err(Error::InvalidInput("grid needs at least 7 nodes".into()));
    }
    let (x, dx) = grid.nodes();
    let ds = 2.0 / (np - 1) as f64;
    let s: Vec<f64> = (0..np).map(|i| -1.0 + i as f64 * ds).collect();
    let coeffs: Vec<(CMat, CMat)> = x
        .par_iter()
        .map(|&xi| {
            let (mm, nm, _) = ctx.regular_coeffs(xi, pt);
            (mm, nm)
        })
        .collect();
    let band = 7 * m;
    let mut a = Banded::<C64>::zeros(np * m, band, band);
    let mut rhs = vec![c(0.0); np * m];
    let (keep_m, rest_m) = ctx.far_field_split(Side::Minus, pt)?;
    let (keep_p, rest_p) = ctx.far_field_split(Side::Plus, pt)?;

    // ODE row for node i projected by `proj` (rows x m) into rows starting at r0
    let ode_rows = |a: &mut Banded<C64>, rhs: &mut [C64], i: usize, proj: &CMat, r0: usize| {
        let st = stencil(i, np);
        let nodes: Vec<f64> = st.clone().map(|j| s[j]).collect();
        let w = fd_weights(s[i], &nodes, 1);
        let fi = f(x[i]);
        let mut fv = CVec::zeros(m);
        for k in 0..n {
            fv[k] = fi[k];
        }
        let pf = proj * fv * c(dx[i]);
        for pr in 0..proj.nrows() {
            let row = r0 + pr;
            for (jj, j) in st.clone().enumerate() {
                let blk = proj.row(pr) * &coeffs[j].0 * c(w[1][jj]);
                for col in 0..m {
                    a.add(row, j * m + col, blk[col]);
                }
            }
            let blk = proj.row(pr) * &coeffs[i].1 * c(-dx[i]);
            for col in 0..m {
                a.add(row, i * m + col, blk[col]);
            }
            rhs[row] = pf[pr];
        }
    };
    let id = CMat::identity(m, m);
    for i in 1..np - 1 {
        ode_rows(&mut a, &mut rhs, i, &id, i * m);
    }
    for (node, rest, keep) in [(0, &rest_m, &keep_m), (np - 1, &rest_p, &keep_p)] {
        for r in 0..rest.nrows() {
            for col in 0..m {
                a.add(node * m + r, node * m + col, rest[(r, col)]);
            }
        }
        ode_rows(&mut a, &mut rhs, node, keep, node * m + rest.nrows());
    }
    let scale = (0..np * m).map(|i| a.get(i, i).norm()).fold(0.0, f64::max);
    let min_pivot = a.factor()?;
    if min_pivot < 1e-13 * scale {
        return Err(Error::SolverSingular(min_pivot));
    }
    a.solve(&mut rhs);
    let w = (0..np).map(|i| CVec::from_column_slice(&rhs[i * m..(i + 1) * m])).collect();
    Ok(DirectSolution { x, w, log_det: a.log_det(), min_pivot })
}

/// (1 / 2 pi i) times the contour integral of d/dlambda log det over a
/// lambda circle, for the direct-solve matrix (analyticity proxy). The
/// derivative is a central difference, which is itself analytic, and the
/// periodic trapezoid rule converges geometrically.
pub fn log_det_winding(
    ctx: &SpectralContext,
    center: C64,
    radius: f64,
    xi_t: &[f64],
    grid: &GridSpec,
    samples: usize,
) -> Result<C64> {
    let zero = |_: f64| vec![c(0.0); ctx.n];
    let ld = |lam: C64| -> Result<C64> {
        Ok(direct_resolvent(ctx, &SpectralPoint::new(lam, xi_t.to_vec()), &zero, grid)?.log_det)
    };
    let h = 1e-3 * radius;
    let terms: Vec<C64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let e = C64::from_polar(1.0, 2.0 * PI * k as f64 / samples as f64);
            let lam = center + e * radius;
            let d = ld(lam + h)? - ld(lam - h)?;
            let d = C64::new(d.re, (d.im + PI).rem_euclid(2.0 * PI) - PI);
            Ok(d / (2.0 * h) * C64::i() * e * radius)
        })
        .collect::<Result<_>>()?;
    let total: C64 = terms.iter().sum::<C64>() * (2.0 * PI / samples as f64);
    Ok(total / (2.0 * PI * C64::i()))
}

/// Smooth compactly supported bump exp(1 - 1/(1 - s^2)), s = (y - center)/half_width.
pub fn bump(y: f64, center: f64, half_width: f64) -> f64 {
    let s = (y - center) / half_width;
    if s.abs() >= 1.0 { 0.0 } else { (1.0 - 1.0 / (1.0 - s * s)).exp() }
}

/// Test forcing: bumps on [-4.5, -1.5] and [1.5, 3.5], weighted per component.
pub fn test_forcing(n: usize) -> (impl Fn(f64) -> Vec<C64> + Sync, Vec<(f64, f64)>) {
    let f = move |y: f64| {
        let b = bump(y, -3.0, 1.5) + C64::new(0.5, 0.3) * bump(y, 2.5, 1.0);
        (0..n).map(|k| b * (1.0 - 0.3 * k as f64)).collect()
    };
    (f, vec![(-4.5, -1.5), (1.5, 3.5)])
}

/// Kernel convolution against the direct solve for the test forcing, at the
/// grid nodes nearest `targets`: max |u_direct - u_kernel| / max |u_kernel|.
pub fn oracle_error(ctx: &SpectralContext, pt: &SpectralPoint, grid: &GridSpec, targets: &[f64]) -> Result<f64> {
    let n = ctx.n;
    let (f, sup) = test_forcing(n);
    let (xg, _) = grid.nodes();
    let idx: Vec<usize> = targets
        .iter()
        .map(|t| (0..xg.len()).min_by(|&a, &b| (xg[a] - t).abs().partial_cmp(&(xg[b] - t).abs()).unwrap()).unwrap())
        .collect();
    if idx.iter().any(|&i| xg[i] == 0.0) {
        return Err(Error::InvalidInput("oracle sample on the singular point".into()));
    }
    let xs: Vec<f64> = idx.iter().map(|&i| xg[i]).collect();
    let d = direct_resolvent(ctx, pt, &f, grid)?;
    let k = kernel_resolvent(ctx, pt, &f, &sup, &xs, 12)?;
    let scale = k.iter().map(|v| v.rows(0, n).norm()).fold(0.0, f64::max);
    let err = idx.iter().zip(&k).map(|(&i, v)| (d.w[i].rows(0, n) - v.rows(0, n)).norm()).fold(0.0, f64::max);
    Ok(err / scale)
}

/// |f|_{L^2}(1 + |xi|) + |f'|_{L^2} on a fine uniform grid.
pub fn h1_hat_norm(f: &dyn Fn(f64) -> Vec<C64>, support: &[(f64, f64)], xi_abs: f64) -> f64 {
    let mut l2 = 0.0;
    let mut d2 = 0.0;
    for &(a, b) in support {
        let k = 4000;
        let h = (b - a) / k as f64;
        for i in 0..k {
            let y = a + (i as f64 + 0.5) * h;
            let f0 = f(y);
            let fp = f(y + 1e-5);
            let fm = f(y - 1e-5);
            for j in 0..f0.len() {
                l2 += f0[j].norm_sqr() * h;
                d2 += ((fp[j] - fm[j]) / 2e-5).norm_sqr() * h;
            }
        }
    }
    l2.sqrt() * (1.0 + xi_abs) + d2.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundFamily {
    LowFreqKernel,
    LowFreqResolvent,
    HighFreq,
    MidFreq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundSample {
    pub point: SpectralPoint,
    pub x1: Option<f64>,
    pub y1: Option<f64>,
    pub measured: f64,
    pub envelope: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCheck {
    pub family: BoundFamily,
    pub samples: Vec<BoundSample>,
    pub c_fit: f64,
    /// C_fit from every other sample.
    pub c_fit_half: f64,
    pub possible_glancing: bool,
    pub pass: bool,
    /// Log-log slope of measured against rho (or |lambda| for high_freq).
    pub exponent: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSpec {
    pub rhos: Vec<f64>,
    pub directions: usize,
    pub theta1: f64,
    /// Decay constant in the kernel envelope; defaults to eta / 2.
    pub theta: Option<f64>,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub grid: Option<GridSpec>,
}

impl SampleSpec {
    pub fn for_family(family: BoundFamily) -> Self {
        let base = SampleSpec {
            rhos: vec![1e-2, 3e-2, 1e-1],
            directions: 4,
            theta1: 0.05,
            theta: None,
            xs: vec![-20.0, -8.0, -2.0, 2.0, 8.0, 20.0],
            ys: vec![-12.0, -6.0, 6.0, 12.0],
            grid: None,
        };
        match family {
            BoundFamily::LowFreqKernel | BoundFamily::LowFreqResolvent => base,
            BoundFamily::HighFreq => SampleSpec {
                rhos: (0..8).map(|k| 10.0 * 20f64.powf(k as f64 / 7.0)).collect(),
                directions: 3,
                ..base
            },
            BoundFamily::MidFreq => SampleSpec { rhos: vec![0.2, 0.5, 1.0, 2.0, 5.0], directions: 4, ..base },
        }
    }
}

/// Points on Gamma: Re lambda = -theta1 (xi^2 + Im lambda^2), |(lambda, xi)| ~ rho.
pub fn gamma_points(rho: f64, directions: usize, theta1: f64) -> Vec<SpectralPoint> {
    (0..directions)
        .map(|k| {
            let phi = -PI / 2.0 + PI * (k as f64 + 0.5) / directions as f64;
            let (im, xi) = (rho * phi.cos(), rho * phi.sin());
            SpectralPoint::new(C64::new(-theta1 * rho * rho, im), vec![xi])
        })
        .collect()
}

fn finish(family: BoundFamily, samples: Vec<BoundSample>, exponent: Option<f64>, mut notes: Vec<String>) -> BoundCheck {
    let ratio = |s: &BoundSample| s.measured / s.envelope;
    let c_fit = samples.iter().map(ratio).fold(0.0, f64::max);
    let c_fit_half = samples.iter().step_by(2).map(ratio).fold(0.0, f64::max);
    let finite = samples.iter().all(|s| s.measured.is_finite());
    let possible_glancing = c_fit > 1e3;
    if possible_glancing {
        notes.push("C_fit above 1e3: possible glancing sample".into());
    }
    let stable = c_fit_half > 0.0 && c_fit / c_fit_half < 2.0;
    BoundCheck { family, samples, c_fit, c_fit_half, possible_glancing, pass: finite && stable, exponent, notes }
}

pub fn bound_envelope_check(ctx: &SpectralContext, family: BoundFamily, spec: &SampleSpec) -> Result<BoundCheck> {
    let n = ctx.n;
    let grid = spec.grid.unwrap_or_else(|| GridSpec::wide(ctx));
    let (f, support) = test_forcing(n);
    let mut notes = Vec::new();
    match family {
        BoundFamily::LowFreqKernel => {
            let theta = spec.theta.unwrap_or(ctx.profile.eta / 2.0);
            let pts: Vec<(f64, SpectralPoint)> = spec
                .rhos
                .iter()
                .flat_map(|&r| gamma_points(r, spec.directions, spec.theta1).into_iter().map(move |p| (r, p)))
                .collect();
            let mut all: Vec<f64> = spec.xs.clone();
            all.extend(&spec.ys);
            let per: Vec<Vec<BoundSample>> = pts
                .par_iter()
                .map(|(rho, pt)| {
                    let solver = GreenSolver::new(ctx, pt, &all)?;
                    let m = n + 2;
                    let id = CMat::identity(m, m);
                    let mut out = Vec::new();
                    for &y in &spec.ys {
                        let src = solver.source(y)?;
                        for &x in &spec.xs {
                            if x == y {
                                continue;
                            }
                            let g = solver.apply(&src, x, &id)?;
                            let env = rho.recip() * (-theta * x.abs()).exp() * (-theta * rho * rho * y.abs()).exp()
                                + (-theta * rho * rho * (x - y).abs()).exp();
                            out.push(BoundSample {
                                point: pt.clone(),
                                x1: Some(x),
                                y1: Some(y),
                                measured: cmax(&g),
                                envelope: env,
                            });
                        }
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?;
            let samples: Vec<BoundSample> = per.into_iter().flatten().collect();
            let exponent = rho_exponent(&samples, &spec.rhos, |s| s.measured);
            Ok(finish(family, samples, exponent, notes))
        }
        BoundFamily::LowFreqResolvent => {
            let f_l1 = l1_norm(&f, &support);
            let f_inf = 1.0;
            let pts: Vec<(f64, SpectralPoint)> = spec
                .rhos
                .iter()
                .flat_map(|&r| gamma_points(r, spec.directions, spec.theta1).into_iter().map(move |p| (r, p)))
                .collect();
            let samples: Vec<BoundSample> = pts
                .par_iter()
                .map(|(rho, pt)| {
                    let sol = direct_resolvent(ctx, pt, &f, &grid)?;
                    Ok(BoundSample {
                        point: pt.clone(),
                        x1: None,
                        y1: None,
                        measured: sol.u_linf(n),
                        envelope: f_l1 / rho + f_inf,
                    })
                })
                .collect::<Result<_>>()?;
            let exponent = rho_exponent(&samples, &spec.rhos, |s| s.measured);
            Ok(finish(family, samples, exponent, notes))
        }
        BoundFamily::HighFreq | BoundFamily::MidFreq => {
            let xi = 0.5;
            let fh = h1_hat_norm(&f, &support, xi);
            let fl2 = h1_hat_norm(&f, &support, 0.0).min(fh);
            let pts: Vec<(f64, SpectralPoint)> = spec
                .rhos
                .iter()
                .flat_map(|&r| {
                    (0..spec.directions).map(move |k| {
                        let phi = if spec.directions == 1 {
                            0.0
                        } else {
                            -PI / 4.0 + PI / 2.0 * k as f64 / (spec.directions - 1) as f64
                        };
                        (r, SpectralPoint::new(C64::from_polar(r, phi), vec![xi]))
                    })
                })
                .collect();
            let samples: Vec<BoundSample> = pts
                .par_iter()
                .map(|(r, pt)| {
                    let sol = direct_resolvent(ctx, pt, &f, &grid)?;
                    let (measured, envelope) = if family == BoundFamily::HighFreq {
                        (sol.u_l2(n) / fh, r.powf(-0.5))
                    } else {
                        (sol.u_l2(n) / fl2, 1.0)
                    };
                    Ok(BoundSample { point: pt.clone(), x1: None, y1: None, measured, envelope })
                })
                .collect::<Result<_>>()?;
            let exponent = if family == BoundFamily::HighFreq {
                let mut worst: Option<f64> = None;
                for k in 0..spec.directions {
                    let sub: Vec<&BoundSample> = samples.iter().skip(k).step_by(spec.directions).collect();
                    let xs: Vec<f64> = sub.iter().map(|s| s.point.lambda.norm().ln()).collect();
                    let ys: Vec<f64> = sub.iter().map(|s| s.measured.ln()).collect();
                    let e = linfit(&xs, &ys).0;
                    worst = Some(worst.map_or(e, |w: f64| w.max(e)));
                }
                worst
            } else {
                None
            };
            if family == BoundFamily::MidFreq {
                notes.push("mid-frequency family verifies finiteness only".into());
            }
            Ok(finish(family, samples, exponent, notes))
        }
    }
}

fn l1_norm(f: &dyn Fn(f64) -> Vec<C64>, support: &[(f64, f64)]) -> f64 {
    support
        .iter()
        .map(|&(a, b)| gauss_nodes(a, b, 40).iter().map(|(y, w)| w * f(*y).iter().map(|z| z.norm()).sum::<f64>()).sum::<f64>())
        .sum()
}

/// Slope of ln(max over samples at each rho) against ln rho.
fn rho_exponent(samples: &[BoundSample], rhos: &[f64], val: impl Fn(&BoundSample) -> f64) -> Option<f64> {
    if rhos.len() < 2 {
        return None;
    }
    let ys: Vec<f64> = rhos
        .iter()
        .map(|&r| {
            samples
                .iter()
                .filter(|s| (s.point.rho() / r - 1.0).abs() < 0.01)
                .map(&val)
                .fold(0.0, f64::max)
                .ln()
        })
        .collect();
    let xs: Vec<f64> = rhos.iter().map(|r| r.ln()).collect();
    Some(linfit(&xs, &ys).0)
}

/// Log-log slope in rho of max |d_y G| / max |G| over the kernel sample
/// pairs, with d_y by fourth-order central differences.
pub fn derivative_gain(ctx: &SpectralContext, spec: &SampleSpec) -> Result<(f64, Vec<(f64, f64)>)> {
    let h = 1e-3;
    let m = ctx.n + 2;
    let mut all = spec.xs.clone();
    for &y in &spec.ys {
        all.extend((-2..=2).map(|k| y + k as f64 * h));
    }
    let per: Vec<(f64, f64)> = spec
        .rhos
        .par_iter()
        .map(|&rho| {
            let mut g_max: f64 = 0.0;
            let mut d_max: f64 = 0.0;
            for pt in gamma_points(rho, spec.directions, spec.theta1) {
                let solver = GreenSolver::new(ctx, &pt, &all)?;
                let id = CMat::identity(m, m);
                for &y in &spec.ys {
                    let srcs: Vec<Source> = [-2.0, -1.0, 1.0, 2.0, 0.0]
                        .iter()
                        .map(|k| solver.source(y + k * h))
                        .collect::<Result<_>>()?;
                    for &x in spec.xs.iter().filter(|x| (*x - y).abs() > 0.1) {
                        let g: Vec<CMat> = srcs.iter().map(|s| solver.apply(s, x, &id)).collect::<Result<_>>()?;
                        let dg = (&g[0] - &g[1] * c(8.0) + &g[2] * c(8.0) - &g[3]) / c(12.0 * h);
                        g_max = g_max.max(cmax(&g[4]));
                        d_max = d_max.max(cmax(&dg));
                    }
                }
            }
            Ok((rho, d_max / g_max))
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = per.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = per.iter().map(|p| p.1.ln()).collect();
    Ok((linfit(&xs, &ys).0, per))
}

/// |G(x, y)| for y approaching the singular point, with ln of the envelope
/// 1 + |x|^a / (|a_p(y)| |y|^a), a the fitted fast-mode exponent.
pub fn near_zero_growth(ctx: &SpectralContext, pt: &SpectralPoint, x1: f64, ys: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    let side = if x1 < 0.0 { ZeroSide::Left } else { ZeroSide::Right };
    let alpha = singular_modes(ctx, pt, side, x1.signum())?.alpha_hat.unwrap_or(0.0);
    let mut all = ys.to_vec();
    all.push(x1);
    let solver = GreenSolver::new(ctx, pt, &all)?;
    let m = ctx.n + 2;
    ys.iter()
        .map(|&y| {
            let src = solver.source(y)?;
            let g = solver.apply(&src, x1, &CMat::identity(m, m))?;
            let ap = ctx.diagonalizer(y)?.0[ctx.p - 1].abs();
            let t = alpha * (x1 / y).abs().ln() - ap.ln();
            let ln_env = if t > 30.0 { t } else { t.exp().ln_1p() };
            Ok((y, cmax(&g), ln_env))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, ShockData};
    use crate::profile::{solve_profile, ProfileOptions};
    use crate::radau::OdeOptions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ctx(name: &str, eps: f64) -> SpectralContext {
        let m = builtin_model(name).unwrap();
        let sh = ShockData::from_eps(&m, eps).unwrap();
        let p = solve_profile(&m, &sh, &ProfileOptions::default()).unwrap();
        SpectralContext::new(&m, &p, OdeOptions::default()).unwrap()
    }

    fn pt(re: f64, im: f64, xi: f64) -> SpectralPoint {
        SpectralPoint::new(C64::new(re, im), vec![xi])
    }

    fn rel(a: &CMat, b: &CMat) -> f64 {
        cmax(&(a - b)) / cmax(b)
    }

    #[test]
    fn jump_is_inverse_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for name in ["hamer2d", "coupled2x2"] {
            let cx = ctx(name, 0.1);
            for _ in 0..10 {
                let q = pt(rng.random_range(0.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
                let y = rng.random_range(0.2..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let gs = GreenSolver::new(&cx, &q, &[y]).unwrap();
                let src = gs.source(y).unwrap();
                let (mm, _, _) = cx.regular_coeffs(y, &q);
                let want = mm.try_inverse().unwrap();
                assert!(rel(&gs.jump(&src).unwrap(), &want) < 1e-8, "{name} y = {y}");
            }
        }
    }

    #[test]
    fn hamer_jump_at_quarter_state() {
        let cx = ctx("hamer2d", 0.1);
        let (mut lo, mut hi) = (0.0, 50.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cx.profile.at(mid).u[0] > -0.05 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let y = 0.5 * (lo + hi);
        let q = pt(0.3, 0.2, 0.1);
        let gs = GreenSolver::new(&cx, &q, &[y]).unwrap();
        let j = gs.jump(&gs.source(y).unwrap()).unwrap();
        let want = CMat::from_diagonal(&CVec::from_vec(vec![c(-20.0), c(1.0), c(1.0)]));
        assert!(rel(&j, &want) < 1e-8, "{j}");
    }

    #[test]
    fn kernel_solves_homogeneous_ode_off_diagonal() {
        let cx = ctx("hamer2d", 0.1);
        let q = pt(0.2, -0.4, 0.3);
        let h = 1e-3;
        for (x, y) in [(2.0, -3.0), (-4.0, -1.5), (1.2, 2.5), (-2.0, 1.0)] {
            let xs: Vec<f64> = (-2..=2).map(|k| x + k as f64 * h).collect();
            let mut all = xs.clone();
            all.push(y);
            let gs = GreenSolver::new(&cx, &q, &all).unwrap();
            let src = gs.source(y).unwrap();
            let id = CMat::identity(3, 3);
            let g: Vec<CMat> = xs.iter().map(|&t| gs.apply(&src, t, &id).unwrap()).collect();
            let dg = (&g[0] - &g[1] * c(8.0) + &g[3] * c(8.0) - &g[4]) / c(12.0 * h);
            let (mm, nm, dm) = cx.regular_coeffs(x, &q);
            let res = &mm * dg - (nm - dm) * &g[2];
            assert!(cmax(&res) < 1e-6 * cmax(&g[2]).max(1e-3), "x {x} y {y}: {}", cmax(&res));
        }
    }

    #[test]
    fn zero_forcing_gives_zero() {
        let cx = ctx("hamer2d", 0.1);
        let zero = |_: f64| vec![c(0.0)];
        let d = direct_resolvent(&cx, &pt(0.5, 0.1, 0.2), &zero, &GridSpec::for_context(&cx)).unwrap();
        assert!(d.w.iter().all(|w| w.norm() == 0.0));
    }

    #[test]
    fn direct_matches_kernel_convolution() {
        let cx = ctx("hamer2d", 0.1);
        let grid = GridSpec::for_context(&cx);
        let targets = [-6.0, -3.0, -0.5, 0.7, 2.5, 5.0];
        for q in [pt(0.2, 0.3, 0.1), pt(0.05, -0.2, 0.4), pt(0.5, 0.0, 0.0)] {
            let e = oracle_error(&cx, &q, &grid, &targets).unwrap();
            assert!(e < 1e-4, "{}: {e:.2e}", q.lambda);
        }
        let e = oracle_error(&cx, &pt(0.2, 0.3, 0.1), &GridSpec::wide(&cx), &targets).unwrap();
        assert!(e < 1e-5, "{e:.2e}");
    }

    #[test]
    fn log_det_has_no_winding_in_resolvent_set() {
        let cx = ctx("hamer2d", 0.1);
        let w = log_det_winding(&cx, C64::new(0.6, 0.0), 0.1, &[0.1], &GridSpec::for_context(&cx), 64).unwrap();
        assert!(w.norm() < 1e-6, "{w}");
    }

    #[test]
    fn high_frequency_decay() {
        let cx = ctx("hamer2d", 0.1);
        let chk = bound_envelope_check(&cx, BoundFamily::HighFreq, &SampleSpec::for_family(BoundFamily::HighFreq)).unwrap();
        let e = chk.exponent.unwrap();
        assert!(e <= -0.4, "{e}");
        assert!(chk.samples.iter().all(|s| s.measured.is_finite()));
    }

    #[test]
    fn source_near_singular_point_is_rejected() {
        let cx = ctx("hamer2d", 0.1);
        let q = pt(0.3, 0.0, 0.0);
        let gs = GreenSolver::new(&cx, &q, &[1e-13]).unwrap();
        assert!(matches!(gs.source(1e-13), Err(Error::NearSingularSolve(_))));
        assert!(matches!(gs.source(0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn grid_is_stretched_and_symmetric() {
        let g = GridSpec { n: 101, half_width: 100.0, center_spacing: 0.1 };
        let (x, dx) = g.nodes();
        assert!((x[0] + 100.0).abs() < 1e-9 && (x[100] - 100.0).abs() < 1e-9);
        assert!((x[51] - x[50] - 0.1).abs() < 2e-3);
        assert!(x.iter().zip(x.iter().rev()).all(|(a, b)| (a + b).abs() < 1e-9));
        assert!(dx[0] > dx[50]);
    }

    #[test]
    fn low_frequency_envelopes_hold_with_stable_constant() {
        let cx = ctx("hamer2d", 0.1);
        for fam in [BoundFamily::LowFreqKernel, BoundFamily::LowFreqResolvent, BoundFamily::MidFreq] {
            let chk = bound_envelope_check(&cx, fam, &SampleSpec::for_family(fam)).unwrap();
            assert!(chk.pass && !chk.possible_glancing, "{fam:?}: {} {}", chk.c_fit, chk.c_fit_half);
            assert!(chk.samples.len() >= 12);
        }
    }

    #[test]
    fn derivative_gains_one_power_of_rho() {
        let cx = ctx("hamer2d", 0.1);
        let base = SampleSpec::for_family(BoundFamily::LowFreqKernel);
        let spec = SampleSpec { rhos: vec![1e-4, 3e-4, 1e-3], ..base.clone() };
        let (e, _) = derivative_gain(&cx, &spec).unwrap();
        assert!((e - 1.0).abs() < 0.3, "{e}");
        // above the slow-mode branch point the gain is only sqrt(rho)
        let (e, _) = derivative_gain(&cx, &base).unwrap();
        assert!((e - 0.5).abs() < 0.15, "{e}");
    }

    #[test]
    fn kernel_stays_under_singular_envelope() {
        let cx = ctx("hamer2d", 0.1);
        let q = pt(0.1, 0.05, 0.1);
        for x in [-2.0f64, 2.0] {
            let ys: Vec<f64> = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3].iter().map(|v| v * x.signum()).collect();
            let rows = near_zero_growth(&cx, &q, x, &ys).unwrap();
            let c_fit = rows.iter().map(|(_, g, le)| g.ln() - le).fold(f64::NEG_INFINITY, f64::max);
            assert!(rows.iter().all(|r| r.1.is_finite()));
            assert!(c_fit.exp() < 10.0);
        }
    }

    #[test]
    fn coupled_direct_matches_kernel() {
        let cx = ctx("coupled2x2", 0.1);
        let e = oracle_error(&cx, &pt(0.3, 0.2, 0.2), &GridSpec::for_context(&cx), &[-3.0, -0.5, 0.7, 2.5]).unwrap();
        assert!(e < 1e-4, "{e:.2e}");
    }
}

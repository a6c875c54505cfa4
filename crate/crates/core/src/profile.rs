//! Radiative shock profiles (U, Q^1) of the one-dimensional system
//!
//! ```text
//! f_1(U) + L Q = f_1(u_-)
//! -Q'' + Q + g(U)' = 0
//! ```
//!
//! solved by damped Newton on a uniform grid with fourth-order differences,
//! Robin far-field conditions and the phase condition lambda_p(U(0)) = 0.

use crate::error::{Error, Result};
use crate::linalg::{fd_weights, linfit, real_eig, Banded};
use crate::model::{ModelSystem, ShockData};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Newton residual tolerance.
    pub tol: f64,
    /// Initial truncation half-length; default 20 / eta_estimate.
    pub l_dom_hint: Option<f64>,
    /// Grid spacing.
    pub h: f64,
    /// Required |U(+-L) - u+-| and |Q(+-L)|.
    pub tail_tol: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions { tol: 1e-10, l_dom_hint: None, h: 0.25, tail_tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Profile {
    pub grid: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub q1: Vec<f64>,
    pub du: Vec<Vec<f64>>,
    pub dq1: Vec<f64>,
    pub eta: f64,
    pub x_singular: f64,
    pub dap0: f64,
    pub l_dom: f64,
    pub h: f64,
    pub residual: f64,
    /// Bordered phase unknown; vanishes for an exact translation family.
    pub sigma: f64,
    pub shock: ShockData,
    pub n: usize,
}

/// Profile state at an arbitrary point.
#[derive(Debug, Clone)]
pub struct ProfilePoint {
    pub u: Vec<f64>,
    pub du: Vec<f64>,
    pub q: f64,
    pub dq: f64,
}

fn hermite(x0: f64, h: f64, f0: f64, f1: f64, d0: f64, d1: f64, x: f64) -> (f64, f64) {
    let t = (x - x0) / h;
    let t2 = t * t;
    let t3 = t2 * t;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + t;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    let v = h00 * f0 + h10 * h * d0 + h01 * f1 + h11 * h * d1;
    let dh00 = (6.0 * t2 - 6.0 * t) / h;
    let dh10 = 3.0 * t2 - 4.0 * t + 1.0;
    let dh01 = (-6.0 * t2 + 6.0 * t) / h;
    let dh11 = 3.0 * t2 - 2.0 * t;
    let dv = dh00 * f0 + dh10 * d0 + dh01 * f1 + dh11 * d1;
    (v, dv)
}

impl Profile {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Cubic Hermite evaluation; end states are returned outside the grid.
    pub fn at(&self, x: f64) -> ProfilePoint {
        let n = self.n;
        let l = self.l_dom;
        if x >= l || x <= -l {
            let u = if x > 0.0 { self.shock.u_plus.clone() } else { self.shock.u_minus.clone() };
            return ProfilePoint { u, du: vec![0.0; n], q: 0.0, dq: 0.0 };
        }
        let s = (x + l) / self.h;
        let i = (s.floor() as usize).min(self.grid.len() - 2);
        let x0 = self.grid[i];
        let mut u = vec![0.0; n];
        let mut du = vec![0.0; n];
        for k in 0..n {
            let (v, d) = hermite(x0, self.h, self.u[i][k], self.u[i + 1][k], self.du[i][k], self.du[i + 1][k], x);
            u[k] = v;
            du[k] = d;
        }
        let (q, dq) = hermite(x0, self.h, self.q1[i], self.q1[i + 1], self.dq1[i], self.dq1[i + 1], x);
        ProfilePoint { u, du, q, dq }
    }

    pub fn center_index(&self) -> usize {
        self.grid.len() / 2
    }
}

/// Decaying Robin rate r (Q' = r Q) at an end state: root of r^2 + c r - 1 = 0
/// with c = dg A^{-1} L, decaying toward +inf (`plus`) or -inf.
fn robin_rate(model: &ModelSystem, u: &[f64], plus: bool) -> Result<f64> {
    let a = model.jac(0, u);
    let ainv = a.try_inverse().ok_or_else(|| Error::InvalidInput("singular df_1 at end state".into()))?;
    let c = (model.dg(u).transpose() * ainv * &model.l)[(0, 0)];
    let disc = (c * c + 4.0).sqrt();
    let (r1, r2) = ((-c - disc) / 2.0, (-c + disc) / 2.0);
    Ok(if plus { r1.min(r2) } else { r1.max(r2) })
}

fn lambda_p(model: &ModelSystem, u: &[f64], p: usize) -> Result<f64> {
    Ok(real_eig(&model.jac(0, u))?.0[p - 1])
}

fn grad_lambda_p(model: &ModelSystem, u: &[f64], p: usize) -> Result<Vec<f64>> {
    let mut g = vec![0.0; u.len()];
    let mut w = u.to_vec();
    for k in 0..u.len() {
        let h = 1e-7 * u[k].abs().max(1.0);
        w[k] = u[k] + h;
        let lp = lambda_p(model, &w, p)?;
        w[k] = u[k] - h;
        let lm = lambda_p(model, &w, p)?;
        w[k] = u[k];
        g[k] = (lp - lm) / (2.0 * h);
    }
    Ok(g)
}

struct Stencils {
    /// (first node, weights d1, weights d2) per node
    rows: Vec<(usize, Vec<f64>, Vec<f64>)>,
    bnd_first: (Vec<f64>, Vec<f64>),
}

fn stencils(nn: usize, h: f64) -> Stencils {
    let mut rows = Vec::with_capacity(nn);
    for i in 0..nn {
        let (start, len) = if i < 2 {
            (0, 6)
        } else if i + 2 >= nn {
            (nn - 6, 6)
        } else {
            (i - 2, 5)
        };
        let xs: Vec<f64> = (start..start + len).map(|j| (j as f64 - i as f64) * h).collect();
        let w = fd_weights(0.0, &xs, 2);
        rows.push((start, w[1].clone(), w[2].clone()));
    }
    let xs: Vec<f64> = (0..5).map(|j| j as f64 * h).collect();
    let left = fd_weights(0.0, &xs, 1)[1].clone();
    let right: Vec<f64> = left.iter().rev().map(|w| -w).collect();
    Stencils { rows, bnd_first: (left, right) }
}

struct System<'a> {
    model: &'a ModelSystem,
    shock: &'a ShockData,
    nn: usize,
    h: f64,
    st: Stencils,
    f_minus: Vec<f64>,
    r_minus: f64,
    r_plus: f64,
}

impl System<'_> {
    fn m(&self) -> usize {
        self.model.n + 1
    }

    fn center(&self) -> usize {
        self.nn / 2
    }

    /// Global index of component `c` at node `i`; sigma sits right after the center node.
    fn idx(&self, i: usize, c: usize) -> usize {
        let base = i * self.m() + c;
        if i > self.center() {
            base + 1
        } else {
            base
        }
    }

    fn sigma_idx(&self) -> usize {
        self.center() * self.m() + self.m()
    }

    fn size(&self) -> usize {
        self.nn * self.m() + 1
    }

    fn unpack(&self, z: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, f64) {
        let n = self.model.n;
        let u = (0..self.nn).map(|i| (0..n).map(|k| z[self.idx(i, k)]).collect()).collect();
        let q = (0..self.nn).map(|i| z[self.idx(i, n)]).collect();
        (u, q, z[self.sigma_idx()])
    }

    fn residual(&self, z: &[f64]) -> Result<Vec<f64>> {
        let n = self.model.n;
        let (u, q, sigma) = self.unpack(z);
        let g: Vec<f64> = u.iter().map(|ui| self.model.g(ui)).collect();
        let mut f = vec![0.0; self.size()];
        for i in 0..self.nn {
            let fi = self.model.flux(0, &u[i]);
            for k in 0..n {
                f[self.idx(i, k)] = fi[k] + self.model.l[k] * q[i] - self.f_minus[k];
            }
            let row = self.idx(i, n);
            if i == 0 || i == self.nn - 1 {
                let (w, r, base) = if i == 0 {
                    (&self.st.bnd_first.0, self.r_minus, 0)
                } else {
                    (&self.st.bnd_first.1, self.r_plus, self.nn - 5)
                };
                let dq: f64 = w.iter().enumerate().map(|(j, wj)| wj * q[base + j]).sum::<f64>() / self.h;
                f[row] = dq - r * q[i];
            } else {
                let (start, w1, w2) = &self.st.rows[i];
                let mut v = q[i];
                for j in 0..w1.len() {
                    v += -w2[j] * q[start + j] + w1[j] * g[start + j];
                }
                if i == self.center() {
                    v += sigma;
                }
                f[row] = v;
            }
        }
        let c = self.center();
        f[self.sigma_idx()] = lambda_p(self.model, &u[c], self.shock.p)?;
        Ok(f)
    }

    fn jacobian(&self, z: &[f64]) -> Result<Banded<f64>> {
        let n = self.model.n;
        let m = self.m();
        let bw = 6 * m + 2;
        let mut jm = Banded::<f64>::zeros(self.size(), bw, bw);
        let (u, _, _) = self.unpack(z);
        let dgs: Vec<_> = u.iter().map(|ui| self.model.dg(ui)).collect();
        for i in 0..self.nn {
            let a = self.model.jac(0, &u[i]);
            for k in 0..n {
                let row = self.idx(i, k);
                for j in 0..n {
                    jm.add(row, self.idx(i, j), a[(k, j)]);
                }
                jm.add(row, self.idx(i, n), self.model.l[k]);
            }
            let row = self.idx(i, n);
            if i == 0 || i == self.nn - 1 {
                let (w, r, base) = if i == 0 {
                    (&self.st.bnd_first.0, self.r_minus, 0)
                } else {
                    (&self.st.bnd_first.1, self.r_plus, self.nn - 5)
                };
                for (j, wj) in w.iter().enumerate() {
                    jm.add(row, self.idx(base + j, n), wj / self.h);
                }
                jm.add(row, self.idx(i, n), -r);
            } else {
                let (start, w1, w2) = &self.st.rows[i];
                jm.add(row, self.idx(i, n), 1.0);
                for j in 0..w1.len() {
                    let node = start + j;
                    jm.add(row, self.idx(node, n), -w2[j]);
                    for k in 0..n {
                        jm.add(row, self.idx(node, k), w1[j] * dgs[node][k]);
                    }
                }
                if i == self.center() {
                    jm.add(row, self.sigma_idx(), 1.0);
                }
            }
        }
        let c = self.center();
        let gl = grad_lambda_p(self.model, &u[c], self.shock.p)?;
        for k in 0..n {
            jm.add(self.sigma_idx(), self.idx(c, k), gl[k]);
        }
        Ok(jm)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton(sys: &System, z: &mut [f64], tol: f64) -> Result<f64> {
    let mut f = sys.residual(z)?;
    let mut fn0 = inf_norm(&f);
    for _ in 0..60 {
        if fn0 < tol {
            return Ok(fn0);
        }
        let mut jm = sys.jacobian(z)?;
        jm.factor().map_err(|_| Error::NoConvergence("singular Newton matrix".into()))?;
        let mut dz: Vec<f64> = f.iter().map(|v| -v).collect();
        jm.solve(&mut dz);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + t * b).collect();
            let ft = sys.residual(&trial);
            if let Ok(ft) = ft {
                let nt = inf_norm(&ft);
                if nt.is_finite() && (nt < (1.0 - 1e-4 * t) * fn0 || nt < tol) {
                    z.copy_from_slice(&trial);
                    f = ft;
                    fn0 = nt;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-6 {
                return Err(Error::NoConvergence(format!("line search stalled at residual {fn0:e}")));
            }
        }
    }
    if fn0 < tol {
        Ok(fn0)
    } else {
        Err(Error::NoConvergence(format!("residual {fn0:e} after 60 iterations")))
    }
}

/// Derivative of nodal data by 7-point central differences (one-sided at the ends).
fn differentiate(v: &[f64], h: f64) -> Vec<f64> {
    let nn = v.len();
    (0..nn)
        .map(|i| {
            let start = i.saturating_sub(3).min(nn - 7);
            let xs: Vec<f64> = (start..start + 7).map(|j| (j as f64 - i as f64) * h).collect();
            let w = fd_weights(0.0, &xs, 1);
            (0..7).map(|j| w[1][j] * v[start + j]).sum()
        })
        .collect()
}

/// Smallest decay rate from the Robin roots of both end states.
pub fn eta_estimate(model: &ModelSystem, shock: &ShockData) -> Result<f64> {
    let m = model.in_frame(shock.s);
    Ok(robin_rate(&m, &shock.u_plus, true)?.abs().min(robin_rate(&m, &shock.u_minus, false)?.abs()))
}

pub fn solve_profile(model: &ModelSystem, shock: &ShockData, opts: &ProfileOptions) -> Result<Profile> {
    if shock.amplitude > 0.3 {
        return Err(Error::AmplitudeTooLarge(shock.amplitude));
    }
    if shock.amplitude < 1e-8 {
        return Err(Error::NoConvergence("zero-amplitude shock has no profile".into()));
    }
    let model = model.in_frame(shock.s);
    let n = model.n;
    let p = shock.p;
    let r_plus = robin_rate(&model, &shock.u_plus, true)?;
    let r_minus = robin_rate(&model, &shock.u_minus, false)?;
    let eta0 = r_plus.abs().min(r_minus.abs());
    let h = opts.h;
    let mut l_dom = opts.l_dom_hint.unwrap_or(20.0 / eta0);
    let f_minus: Vec<f64> = model.flux(0, &shock.u_minus).iter().copied().collect();

    // tanh guess with the viscous width from the p-th diffusion coefficient
    let (lm, rm, rmi) = real_eig(&model.jac(0, &shock.u_minus))?;
    let (lpl, _, _) = real_eig(&model.jac(0, &shock.u_plus))?;
    let lb = &model.l * model.dg(&shock.u_minus).transpose();
    let beta = (rmi.row(p - 1) * lb * rm.column(p - 1))[(0, 0)].max(1e-3);
    let width = 4.0 * beta / (lm[p - 1] - lpl[p - 1]).max(1e-6);
    let mid: Vec<f64> = (0..n).map(|k| 0.5 * (shock.u_minus[k] + shock.u_plus[k])).collect();
    let half: Vec<f64> = (0..n).map(|k| 0.5 * (shock.u_plus[k] - shock.u_minus[k])).collect();
    let lnorm2 = model.l.norm_squared();

    let mut prev: Option<Profile> = None;
    for _attempt in 0..8 {
        let half_n = (l_dom / h).ceil() as usize;
        let l_eff = half_n as f64 * h;
        let nn = 2 * half_n + 1;
        let grid: Vec<f64> = (0..nn).map(|i| -l_eff + i as f64 * h).collect();
        let sys = System { model: &model, shock, nn, h, st: stencils(nn, h), f_minus: f_minus.clone(), r_minus, r_plus };
        let mut z = vec![0.0; sys.size()];
        for (i, &x) in grid.iter().enumerate() {
            let (u, q) = match &prev {
                Some(pr) => {
                    let pt = pr.at(x);
                    (pt.u, pt.q)
                }
                None => {
                    let t = (x / width).tanh();
                    let u: Vec<f64> = (0..n).map(|k| mid[k] + half[k] * t).collect();
                    let fu = model.flux(0, &u);
                    let q = (0..n).map(|k| model.l[k] * (f_minus[k] - fu[k])).sum::<f64>() / lnorm2;
                    (u, q)
                }
            };
            for k in 0..n {
                z[sys.idx(i, k)] = u[k];
            }
            z[sys.idx(i, n)] = q;
        }
        let res = newton(&sys, &mut z, opts.tol)?;
        let (u, q, sigma) = sys.unpack(&z);
        let du: Vec<Vec<f64>> = {
            let cols: Vec<Vec<f64>> = (0..n).map(|k| differentiate(&u.iter().map(|v| v[k]).collect::<Vec<_>>(), h)).collect();
            (0..nn).map(|i| (0..n).map(|k| cols[k][i]).collect()).collect()
        };
        let dq1 = differentiate(&q, h);
        let mut prof = Profile {
            grid,
            u,
            q1: q,
            du,
            dq1,
            eta: eta0,
            x_singular: 0.0,
            dap0: 0.0,
            l_dom: l_eff,
            h,
            residual: res,
            sigma,
            shock: shock.clone(),
            n,
        };
        let tail = tail_size(&prof);
        if tail < opts.tail_tol {
            let (x0, dap0) = locate_singular_point(&model, &prof)?;
            if dap0.abs() < 1e-6 {
                return Err(Error::DegenerateSingularPoint(dap0));
            }
            prof.x_singular = x0;
            prof.dap0 = dap0;
            prof.eta = profile_decay_rate(&prof)?.0;
            return Ok(prof);
        }
        prev = Some(prof);
        l_dom = l_eff * 1.5;
    }
    Err(Error::NoConvergence("tails did not reach tolerance while growing L_dom".into()))
}

fn tail_size(p: &Profile) -> f64 {
    let last = p.len() - 1;
    let du0: f64 = p.u[0].iter().zip(&p.shock.u_minus).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let du1: f64 = p.u[last].iter().zip(&p.shock.u_plus).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    du0.max(du1).max(p.q1[0].abs()).max(p.q1[last].abs())
}

/// eta = min of the one-sided log-linear decay slopes over the outer thirds;
/// returns (eta, max deviation of the log data from the fitted lines).
pub fn profile_decay_rate(profile: &Profile) -> Result<(f64, f64)> {
    let nn = profile.len();
    let third = nn / 3;
    let mut etas = Vec::new();
    let mut worst: f64 = 0.0;
    for side in 0..2 {
        let (range, end): (Vec<usize>, &Vec<f64>) = if side == 0 {
            ((0..third).collect(), &profile.shock.u_minus)
        } else {
            ((nn - third..nn).collect(), &profile.shock.u_plus)
        };
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &i in &range {
            let d = profile.u[i].iter().zip(end).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if d < 1e-12 {
                continue;
            }
            xs.push(profile.grid[i].abs());
            ys.push(d.ln());
        }
        if xs.len() < 10 {
            return Err(Error::FitFailed(format!("only {} tail samples above the 1e-12 floor", xs.len())));
        }
        let (slope, _, res) = linfit(&xs, &ys);
        etas.push(-slope);
        worst = worst.max(res);
    }
    let eta = etas[0].min(etas[1]);
    if eta <= 0.0 {
        return Err(Error::FitFailed(format!("non-positive decay slope {eta}")));
    }
    Ok((eta, worst))
}

/// Sign-change locations of a sampled trace (linear interpolation between nodes).
pub fn sign_changes(grid: &[f64], trace: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..trace.len() - 1 {
        let (a, b) = (trace[i], trace[i + 1]);
        if a == 0.0 {
            out.push(grid[i]);
        } else if a * b < 0.0 {
            out.push(grid[i] + (grid[i + 1] - grid[i]) * a / (a - b));
        }
    }
    out
}

/// Singular point of lambda_p(U(x)) by bisection on the interpolant, and its slope.
pub fn locate_singular_point(model: &ModelSystem, profile: &Profile) -> Result<(f64, f64)> {
    let p = profile.shock.p;
    let trace: Vec<f64> = profile.u.iter().map(|u| lambda_p(model, u, p)).collect::<Result<_>>()?;
    let zs = sign_changes(&profile.grid, &trace);
    if zs.len() != 1 {
        return Err(Error::MultipleSingularPoints(zs.len()));
    }
    let f = |x: f64| lambda_p(model, &profile.at(x).u, p);
    let (mut lo, mut hi) = (zs[0] - profile.h, zs[0] + profile.h);
    let mut flo = f(lo)?;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if fm * flo > 0.0 {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let x0 = 0.5 * (lo + hi);
    let dx = 1e-3;
    let dap0 = (f(x0 + dx)? - f(x0 - dx)?) / (2.0 * dx);
    Ok((x0, dap0))
}

/// Max residual of both profile equations evaluated with the stored
/// derivatives and the first integral.
pub fn first_integral_defect(model: &ModelSystem, profile: &Profile) -> f64 {
    let m = model.in_frame(profile.shock.s);
    let fm = m.flux(0, &profile.shock.u_minus);
    profile
        .u
        .iter()
        .zip(&profile.q1)
        .map(|(u, q)| (m.flux(0, u) + &m.l * *q - &fm).amax())
        .fold(0.0, f64::max)
}

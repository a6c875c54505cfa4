//! The eigenvalue ODE (Theta W)' = A(x, lambda, xi) W in W = (v, q^1, p^1),
//! its asymptotic modes, integrated decaying/growing bases and the fast modes
//! at the singular point.
//!
//! Integration is carried out in the unknowns (u, q^1, p^1) with u = T v,
//! where the system reads M W' = (N - M') W with M = diag(A_1, 1, 1).

use crate::error::{Error, Result};
use crate::hypotheses::Side;
use crate::linalg::{c, eig, linfit, qr_positive, real_eig, to_complex, CMat, C64, I};
use crate::model::{ModelSystem, ShockData};
use crate::profile::Profile;
use crate::radau::{integrate, LinearDae, OdeOptions};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralPoint {
    pub lambda: C64,
    pub xi_t: Vec<f64>,
}

impl SpectralPoint {
    pub fn new(lambda: C64, xi_t: Vec<f64>) -> Self {
        SpectralPoint { lambda, xi_t }
    }

    pub fn rho(&self) -> f64 {
        (self.lambda.norm_sqr() + self.xi_sq()).sqrt()
    }

    pub fn xi_sq(&self) -> f64 {
        self.xi_t.iter().map(|x| x * x).sum()
    }

    /// (Re lambda, Im lambda, xi_t) / rho.
    pub fn zhat(&self) -> Vec<f64> {
        let r = self.rho();
        let mut z = vec![self.lambda.re / r, self.lambda.im / r];
        z.extend(self.xi_t.iter().map(|x| x / r));
        z
    }

    pub fn from_polar(rho: f64, zhat: &[f64]) -> Self {
        let nrm = zhat.iter().map(|x| x * x).sum::<f64>().sqrt();
        let z: Vec<f64> = zhat.iter().map(|x| x / nrm).collect();
        SpectralPoint { lambda: C64::new(rho * z[0], rho * z[1]), xi_t: z[2..].iter().map(|x| rho * x).collect() }
    }

    /// The point (conj lambda, -xi_t).
    pub fn conj(&self) -> Self {
        SpectralPoint { lambda: self.lambda.conj(), xi_t: self.xi_t.iter().map(|x| -x).collect() }
    }

    /// Re lambda >= -theta_1 (|xi_t|^2 + |Im lambda|^2).
    pub fn in_gamma_region(&self, theta1: f64) -> bool {
        self.lambda.re >= -theta1 * (self.xi_sq() + self.lambda.im * self.lambda.im)
    }
}

#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub theta: DMatrix<f64>,
    pub abb: CMat,
    pub t: DMatrix<f64>,
    pub a_p: f64,
    pub cond: f64,
}

#[derive(Debug, Clone)]
pub struct AsymptoticModes {
    pub eigenvalues: Vec<C64>,
    pub eigenvectors: CMat,
    pub dim_u: usize,
    pub dim_s: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeKind {
    Fast,
    Slow,
    SingularFast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Want {
    Decaying,
    Growing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZeroSide {
    Left,
    Right,
}

/// Columns sampled along the integration path in (u, q^1, p^1) coordinates.
///
/// The represented solution at node k is `columns[k] * exp(log_scale[k])`
/// (for singular fast modes additionally times |x|^kappa). `log_scale` is the
/// accumulated ln det of the stripped triangular factors, shared by all columns.
#[derive(Debug, Clone)]
pub struct ModeBasis {
    pub side: Side,
    pub kinds: Vec<ModeKind>,
    pub mu: Vec<C64>,
    pub x: Vec<f64>,
    pub columns: Vec<CMat>,
    pub log_scale: Vec<f64>,
    pub kappa: Option<C64>,
    pub alpha_hat: Option<f64>,
}

impl ModeBasis {
    pub fn at_end(&self) -> (&CMat, f64) {
        (self.columns.last().unwrap(), *self.log_scale.last().unwrap())
    }
}

/// Precomputed data for spectral computations about one profile.
#[derive(Debug, Clone)]
pub struct SpectralContext {
    pub model: ModelSystem,
    pub profile: Profile,
    pub ode: OdeOptions,
    pub delta_inner: f64,
    pub n: usize,
    pub p: usize,
    /// Eigen-decomposition of df_1 at U(0): values, R, R^{-1}.
    center_eig: (Vec<f64>, DMatrix<f64>, DMatrix<f64>),
    ref_plus: CMat,
    ref_minus: CMat,
}

fn mat_block(n: usize) -> (CMat, CMat) {
    (CMat::zeros(n + 2, n + 2), CMat::zeros(n + 2, n + 2))
}

/// Spectral projector onto the `k` eigenvalues of `a` with smallest (`lowest`)
/// or largest real parts; returns (P, selected eigenvalues, all eigenvalues).
fn group_projector(a: &CMat, k: usize, lowest: bool) -> Result<(CMat, Vec<C64>, Vec<C64>)> {
    let m = a.nrows();
    let (vals, v) = eig(a)?;
    let (_, w) = eig(&a.adjoint())?;
    let idx: Vec<usize> = if lowest { (0..k).collect() } else { (m - k..m).collect() };
    let vs = CMat::from_fn(m, k, |i, j| v[(i, idx[j])]);
    let ws = CMat::from_fn(m, k, |i, j| w[(i, idx[j])]);
    let g = (ws.adjoint() * &vs)
        .try_inverse()
        .ok_or_else(|| Error::EigenbasisFailure("degenerate spectral group".into()))?;
    let sel = idx.iter().map(|&i| vals[i]).collect();
    Ok((&vs * g * ws.adjoint(), sel, vals))
}

fn real_frame(p: &CMat, k: usize) -> CMat {
    let pr = p.map(|z| z.re);
    let svd = pr.svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].partial_cmp(&svd.singular_values[a]).unwrap());
    CMat::from_fn(p.nrows(), k, |i, j| c(u[(i, order[j])]))
}

/// Expected basis sizes: decaying at +inf (n-p+1) and growing at -inf (p).
pub fn basis_counts(n: usize, p: usize) -> (usize, usize) {
    (n - p + 1, p)
}

impl SpectralContext {
    pub fn new(model: &ModelSystem, profile: &Profile, ode: OdeOptions) -> Result<Self> {
        let model = model.in_frame(profile.shock.s);
        let n = model.n;
        let p = profile.shock.p;
        let center_eig = real_eig(&model.jac(0, &profile.at(0.0).u))?;
        let delta_inner = 1e-3 / profile.eta;
        let mut ctx = SpectralContext {
            model,
            profile: profile.clone(),
            ode,
            delta_inner,
            n,
            p,
            center_eig,
            ref_plus: CMat::zeros(0, 0),
            ref_minus: CMat::zeros(0, 0),
        };
        let (kp, km) = basis_counts(n, p);
        let pt = SpectralPoint::new(c(1.0), vec![0.0; ctx.model.d - 1]);
        let (pp, _, _) = group_projector(&ctx.asymptotic_matrix_u(Side::Plus, &pt), kp, true)?;
        let (pm, _, _) = group_projector(&ctx.asymptotic_matrix_u(Side::Minus, &pt), km, false)?;
        ctx.ref_plus = real_frame(&pp, kp);
        ctx.ref_minus = real_frame(&pm, km);
        Ok(ctx)
    }

    fn end_state(&self, side: Side) -> &[f64] {
        match side {
            Side::Plus => &self.profile.shock.u_plus,
            Side::Minus => &self.profile.shock.u_minus,
        }
    }

    /// (M, N) at state u with the x-derivative of df_1 along du.
    fn mn_at(&self, u: &[f64], pt: &SpectralPoint) -> (CMat, CMat, DMatrix<f64>) {
        let n = self.n;
        let a1 = self.model.jac(0, u);
        let b = self.model.dg(u);
        let axi = self.model.transverse_symbol(&pt.xi_t, u);
        let xi2 = pt.xi_sq();
        let (mut m, mut nm) = mat_block(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = c(a1[(i, j)]);
                let mut v = -(I * axi[(i, j)]) - c(self.model.l[i] * b[j]);
                if i == j {
                    v -= pt.lambda;
                }
                nm[(i, j)] = v;
            }
            nm[(i, n + 1)] = c(self.model.l[i] / (1.0 + xi2));
            nm[(n, i)] = c(b[i]);
        }
        m[(n, n)] = c(1.0);
        m[(n + 1, n + 1)] = c(1.0);
        nm[(n, n + 1)] = c(-1.0);
        nm[(n + 1, n)] = c(-(1.0 + xi2));
        (m, nm, a1)
    }

    fn da1(&self, u: &[f64], du: &[f64]) -> DMatrix<f64> {
        let size = du.iter().map(|x| x * x).sum::<f64>().sqrt();
        if size == 0.0 {
            return DMatrix::zeros(self.n, self.n);
        }
        let h = 1e-3 / size.max(1.0);
        let up: Vec<f64> = u.iter().zip(du).map(|(a, b)| a + h * b).collect();
        let um: Vec<f64> = u.iter().zip(du).map(|(a, b)| a - h * b).collect();
        (self.model.jac(0, &up) - self.model.jac(0, &um)) / (2.0 * h)
    }

    /// (M, N) of the system (M W)' = N W in (u, q^1, p^1), plus M'.
    pub fn regular_coeffs(&self, x: f64, pt: &SpectralPoint) -> (CMat, CMat, CMat) {
        let pp = self.profile.at(x);
        let (m, nm, _) = self.mn_at(&pp.u, pt);
        let da = self.da1(&pp.u, &pp.du);
        let mut dm = CMat::zeros(self.n + 2, self.n + 2);
        dm.view_mut((0, 0), (self.n, self.n)).copy_from(&to_complex(&da));
        (m, nm, dm)
    }

    /// M_pm^{-1} N_pm at an end state.
    pub fn asymptotic_matrix_u(&self, side: Side, pt: &SpectralPoint) -> CMat {
        let (m, nm, _) = self.mn_at(self.end_state(side), pt);
        m.try_inverse().expect("end state is non-characteristic") * nm
    }

    /// Diagonalizer T(x) with columns signed consistently with T at the singular point.
    pub fn diagonalizer(&self, x: f64) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let u = self.profile.at(x).u;
        let (vals, mut r, mut rinv) = real_eig(&self.model.jac(0, &u))?;
        for k in 0..self.n {
            if r.column(k).dot(&self.center_eig.1.column(k)) < 0.0 {
                r.column_mut(k).neg_mut();
                rinv.row_mut(k).neg_mut();
            }
        }
        Ok((vals, r, rinv))
    }

    /// Maps (u, q, p) columns to (v, q, p) at x.
    pub fn to_diagonal(&self, x: f64, w: &CMat) -> Result<CMat> {
        let (_, _, tinv) = self.diagonalizer(x)?;
        Ok(self.s_inv(&tinv) * w)
    }

    fn s_inv(&self, tinv: &DMatrix<f64>) -> CMat {
        let n = self.n;
        let mut s = CMat::identity(n + 2, n + 2);
        s.view_mut((0, 0), (n, n)).copy_from(&to_complex(tinv));
        s
    }

    /// det of the (u, q, p) -> (v, q, p) map at x.
    pub fn det_s_inv(&self, x: f64) -> Result<f64> {
        Ok(self.diagonalizer(x)?.2.determinant())
    }

    /// Exponent of the fast mode at the singular point:
    /// kappa = (A_pp(0) - a_p'(0)) / a_p'(0).
    pub fn kappa(&self, pt: &SpectralPoint) -> C64 {
        let (_, r, rinv) = &self.center_eig;
        let p = self.p - 1;
        let u0 = self.profile.at(0.0).u;
        let axi = self.model.transverse_symbol(&pt.xi_t, &u0);
        let b = self.model.dg(&u0);
        let lp = rinv.row(p);
        let rp = r.column(p);
        let app = -(pt.lambda + I * (lp * &axi * rp)[(0, 0)] + c((lp * &self.model.l)[(0, 0)] * b.dot(&rp)));
        let ap = self.profile.dap0;
        (app - ap) / ap
    }

    /// Slow coordinates at the singular point: T^{-1}(0) u without row p, then q, p.
    fn slow_projector(&self) -> CMat {
        let n = self.n;
        let rinv = &self.center_eig.2;
        let mut pr = CMat::zeros(n + 1, n + 2);
        let mut row = 0;
        for k in 0..n {
            if k == self.p - 1 {
                continue;
            }
            for j in 0..n {
                pr[(row, j)] = c(rinv[(k, j)]);
            }
            row += 1;
        }
        pr[(n - 1, n)] = c(1.0);
        pr[(n, n + 1)] = c(1.0);
        pr
    }

    /// Map from W(+-1) to the slow coordinates of the continued solution at 0.
    pub fn slow_map(&self, pt: &SpectralPoint, side: Side) -> Result<CMat> {
        self.slow_map_from(pt, if side == Side::Plus { 1.0 } else { -1.0 })
    }

    /// As `slow_map` from an arbitrary nonzero x0.
    pub fn slow_map_from(&self, pt: &SpectralPoint, x0: f64) -> Result<CMat> {
        if x0 == 0.0 {
            return Err(Error::InvalidInput("slow map from the singular point".into()));
        }
        let id = CMat::identity(self.n + 2, self.n + 2);
        Ok(self.slow_projector() * self.propagate(pt, x0, 0.0, &id)?)
    }

    /// Plain solution of (M W)' = N W from x0 to x1 (no rescaling).
    pub fn propagate(&self, pt: &SpectralPoint, x0: f64, x1: f64, w0: &CMat) -> Result<CMat> {
        if x0 == x1 {
            return Ok(w0.clone());
        }
        let sys = Shifted { ctx: self, pt, shift: c(0.0), kappa: None };
        Ok(integrate(&sys, x0, x1, w0, &self.ode, false, false)?.last().0.clone())
    }

    /// Rows selecting the kept far-field group (decaying at +inf / growing at
    /// -inf) and rows annihilating it; fixed real frames times spectral
    /// projectors, so both depend analytically on the frequency.
    pub fn far_field_split(&self, side: Side, pt: &SpectralPoint) -> Result<(CMat, CMat)> {
        let (kp, km) = basis_counts(self.n, self.p);
        let (k, lowest) = match side {
            Side::Plus => (kp, true),
            Side::Minus => (km, false),
        };
        let refpt = SpectralPoint::new(c(1.0), vec![0.0; self.model.d - 1]);
        let (p0, _, _) = group_projector(&self.asymptotic_matrix_u(side, &refpt), k, lowest)?;
        let (p, _, _) = group_projector(&self.asymptotic_matrix_u(side, pt), k, lowest)?;
        let m = p.nrows();
        let id = CMat::identity(m, m);
        let keep = real_frame(&p0.transpose(), k).transpose() * &p;
        let rest = real_frame(&(&id - &p0).transpose(), m - k).transpose() * (&id - &p);
        Ok((keep, rest))
    }
}

struct Shifted<'a> {
    ctx: &'a SpectralContext,
    pt: &'a SpectralPoint,
    shift: C64,
    kappa: Option<C64>,
}

impl LinearDae for Shifted<'_> {
    fn dim(&self) -> usize {
        self.ctx.n + 2
    }

    fn coeffs(&self, x: f64) -> Result<(CMat, CMat)> {
        let (m, nm, dm) = self.ctx.regular_coeffs(x, self.pt);
        let mut rhs = nm - dm - &m * self.shift;
        if let Some(k) = self.kappa {
            rhs -= &m * (k / x);
        }
        Ok((m, rhs))
    }
}

/// The matrices Theta and A of the diagonalized system at x1.
pub fn assemble_system(ctx: &SpectralContext, x1: f64, pt: &SpectralPoint) -> Result<SystemMatrices> {
    let n = ctx.n;
    let (vals, t, tinv) = ctx.diagonalizer(x1)?;
    let cond = t.norm() * tinv.norm();
    if cond > 1e6 {
        return Err(Error::IllConditionedDiagonalizer(cond));
    }
    let dx = 1e-3;
    let (_, _, tp) = ctx.diagonalizer(x1 + dx)?;
    let (_, _, tm) = ctx.diagonalizer(x1 - dx)?;
    let dtinv = (tp - tm) / (2.0 * dx);
    let u = ctx.profile.at(x1).u;
    let (_, nm, a1) = ctx.mn_at(&u, pt);
    let s = {
        let mut s = CMat::identity(n + 2, n + 2);
        s.view_mut((0, 0), (n, n)).copy_from(&to_complex(&t));
        s
    };
    let mut abb = ctx.s_inv(&tinv) * nm * s;
    let corr = to_complex(&(dtinv * a1 * &t));
    let mut blk = abb.view_mut((0, 0), (n, n));
    blk += corr;
    let mut theta = DMatrix::identity(n + 2, n + 2);
    for k in 0..n {
        theta[(k, k)] = vals[k];
    }
    abb.iter_mut().for_each(|z| {
        if z.norm() < 1e-300 {
            *z = c(0.0)
        }
    });
    Ok(SystemMatrices { theta, abb, t, a_p: vals[ctx.p - 1], cond })
}

/// Asymptotic matrix A_pm(lambda, xi) in diagonalized coordinates.
pub fn asymptotic_matrix(model: &ModelSystem, shock: &ShockData, side: Side, pt: &SpectralPoint) -> Result<CMat> {
    let m = model.in_frame(shock.s);
    let n = m.n;
    let u = if side == Side::Plus { &shock.u_plus } else { &shock.u_minus };
    let (vals, t, tinv) = real_eig(&m.jac(0, u))?;
    let axi = to_complex(&(&tinv * m.transverse_symbol(&pt.xi_t, u) * &t));
    let lt = &tinv * &m.l;
    let bt = m.dg(u).transpose() * &t;
    let xi2 = pt.xi_sq();
    let mut a = CMat::zeros(n + 2, n + 2);
    for i in 0..n {
        for j in 0..n {
            let mut v = I * axi[(i, j)] + c(lt[i] * bt[j]);
            if i == j {
                v += pt.lambda;
            }
            a[(i, j)] = -v / vals[i];
        }
        a[(i, n + 1)] = c(lt[i] / (1.0 + xi2) / vals[i]);
        a[(n, i)] = c(bt[i]);
    }
    a[(n, n + 1)] = c(-1.0);
    a[(n + 1, n)] = c(-(1.0 + xi2));
    Ok(a)
}

pub fn asymptotic_modes(model: &ModelSystem, shock: &ShockData, side: Side, pt: &SpectralPoint) -> Result<AsymptoticModes> {
    let a = asymptotic_matrix(model, shock, side, pt)?;
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let (vals, vecs) = eig(&a)?;
    let tol = 1e-12 * scale.max(1.0);
    if pt.lambda.re > 1e-8 && vals.iter().any(|z| z.re.abs() < 1e-12) {
        let worst = vals.iter().map(|z| z.re.abs()).fold(f64::INFINITY, f64::min);
        return Err(Error::CenterEigenvalue(worst));
    }
    let dim_u = vals.iter().filter(|z| z.re > tol).count();
    let dim_s = vals.iter().filter(|z| z.re < -tol).count();
    if pt.lambda.re > 1e-8 {
        let n = model.n;
        let expected_u = if side == Side::Plus { shock.p + 1 } else { shock.p };
        if dim_u + dim_s != n + 2 || dim_u != expected_u {
            return Err(Error::ColumnCountMismatch { expected: expected_u, got: dim_u });
        }
    }
    Ok(AsymptoticModes { eigenvalues: vals, eigenvectors: vecs, dim_u, dim_s })
}

/// Decaying modes at +inf or growing modes at -inf, integrated from the
/// truncation boundary to `x_match`.
pub fn integrate_modes(ctx: &SpectralContext, pt: &SpectralPoint, side: Side, want: Want, x_match: f64) -> Result<ModeBasis> {
    let (kp, km) = basis_counts(ctx.n, ctx.p);
    let (k, lowest, frame, x0) = match (side, want) {
        (Side::Plus, Want::Decaying) => (kp, true, &ctx.ref_plus, ctx.profile.l_dom),
        (Side::Minus, Want::Growing) => (km, false, &ctx.ref_minus, -ctx.profile.l_dom),
        _ => return Err(Error::InvalidInput("only decaying modes at +inf and growing modes at -inf are unique".into())),
    };
    if (x_match - x0) * x0 > 0.0 || x_match * x0 <= 0.0 {
        return Err(Error::InvalidInput(format!("x_match {x_match} not between the singular point and {x0}")));
    }
    let a = ctx.asymptotic_matrix_u(side, pt);
    let (proj, sel, all) = group_projector(&a, k, lowest)?;
    if pt.lambda.re > 1e-8 {
        let ok = if lowest {
            sel.iter().all(|z| z.re < 0.0) && all[k..].iter().all(|z| z.re > 0.0)
        } else {
            sel.iter().all(|z| z.re > 0.0) && all[..all.len() - k].iter().all(|z| z.re < 0.0)
        };
        if !ok {
            let got = all.iter().filter(|z| (z.re < 0.0) == lowest).count();
            return Err(Error::ColumnCountMismatch { expected: k, got });
        }
    }
    let shift = sel.iter().sum::<C64>() / k as f64;
    let w0 = proj * frame;
    let sys = Shifted { ctx, pt, shift, kappa: None };
    let tr = integrate(&sys, x0, x_match, &w0, &ctx.ode, true, true)?;
    let mut columns = Vec::with_capacity(tr.x.len());
    let mut log_scale = Vec::with_capacity(tr.x.len());
    for ((x, w), ls) in tr.x.iter().zip(tr.w).zip(tr.log_scale) {
        let e = shift * *x;
        columns.push(w * C64::from_polar(1.0, e.im));
        log_scale.push(ls + k as f64 * e.re);
    }
    let fast = sel
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.re.abs().partial_cmp(&b.1.re.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let kinds = (0..k).map(|i| if i == fast { ModeKind::Fast } else { ModeKind::Slow }).collect();
    Ok(ModeBasis { side, kinds, mu: sel, x: tr.x, columns, log_scale, kappa: None, alpha_hat: None })
}

/// Fast mode vanishing like |x|^kappa at the singular point, on the given side,
/// integrated from the inner collar to `x_match`. Columns hold |x|^{-kappa} W.
pub fn singular_modes(ctx: &SpectralContext, pt: &SpectralPoint, zero_side: ZeroSide, x_match: f64) -> Result<ModeBasis> {
    let kappa = ctx.kappa(pt);
    if kappa.re < 1e-3 {
        return Err(Error::NoFastDirection(kappa.re));
    }
    let sgn = if zero_side == ZeroSide::Right { 1.0 } else { -1.0 };
    if x_match * sgn <= ctx.delta_inner {
        return Err(Error::InvalidInput(format!("x_match {x_match} inside the collar")));
    }
    let x0 = sgn * ctx.delta_inner;
    let (_, r, _) = ctx.diagonalizer(x0)?;
    let mut w0 = CMat::zeros(ctx.n + 2, 1);
    for k in 0..ctx.n {
        w0[(k, 0)] = c(r[(k, ctx.p - 1)]);
    }
    let sys = Shifted { ctx, pt, shift: c(0.0), kappa: Some(kappa) };
    let tr = integrate(&sys, x0, x_match, &w0, &ctx.ode, true, true)?;
    let near: Vec<(f64, f64)> = tr
        .x
        .iter()
        .zip(&tr.log_scale)
        .filter(|(x, _)| x.abs() <= 10.0 * ctx.delta_inner)
        .map(|(x, ls)| (x.abs().ln(), kappa.re * x.abs().ln() + ls))
        .collect();
    let alpha_hat = if near.len() >= 3 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = near.into_iter().unzip();
        Some(linfit(&xs, &ys).0)
    } else {
        Some(kappa.re)
    };
    let side = if zero_side == ZeroSide::Right { Side::Plus } else { Side::Minus };
    Ok(ModeBasis {
        side,
        kinds: vec![ModeKind::SingularFast],
        mu: vec![],
        x: tr.x,
        columns: tr.w,
        log_scale: tr.log_scale,
        kappa: Some(kappa),
        alpha_hat,
    })
}

/// Far-field basis carried through a list of stops. `r[k]` maps coefficients
/// in the orthonormal basis `q[k]` to those in `q[k + 1]`.
#[derive(Debug, Clone)]
pub struct ModePath {
    pub side: Side,
    pub stops: Vec<f64>,
    pub q: Vec<CMat>,
    pub r: Vec<CMat>,
}

impl ModePath {
    pub fn index(&self, x: f64) -> Option<usize> {
        self.stops.iter().position(|s| *s == x)
    }

    pub fn transfer(&self, from: usize, to: usize, coef: &CMat) -> Result<CMat> {
        let mut cf = coef.clone();
        if to >= from {
            for k in from..to {
                cf = &self.r[k] * cf;
            }
        } else {
            for k in (to..from).rev() {
                cf = self.r[k]
                    .solve_upper_triangular(&cf)
                    .ok_or_else(|| Error::NearSingularSolve(f64::INFINITY))?;
            }
        }
        Ok(cf)
    }
}

/// Decaying modes at +inf (`Side::Plus`) or growing modes at -inf carried
/// through `stops`, all on the same side of the singular point.
pub fn mode_path(ctx: &SpectralContext, pt: &SpectralPoint, side: Side, stops: &[f64]) -> Result<ModePath> {
    let sgn = if side == Side::Plus { 1.0 } else { -1.0 };
    let mut st: Vec<f64> = stops.to_vec();
    if st.is_empty() || st.iter().any(|x| x * sgn <= 0.0 || x.abs() >= ctx.profile.l_dom) {
        return Err(Error::InvalidInput("path stops must lie strictly inside one half-line".into()));
    }
    st.sort_by(|a, b| (b * sgn).partial_cmp(&(a * sgn)).unwrap());
    st.dedup();
    let want = if side == Side::Plus { Want::Decaying } else { Want::Growing };
    let first = integrate_modes(ctx, pt, side, want, st[0])?;
    let q0 = first.at_end().0.clone();
    let sys = Shifted { ctx, pt, shift: c(0.0), kappa: None };
    let mut q = vec![q0];
    let mut r = Vec::new();
    for k in 1..st.len() {
        let (a, b) = (st[k - 1], st[k]);
        let pieces = ((a - b).abs() / 0.25).ceil().max(1.0) as usize;
        let mut w = q[k - 1].clone();
        let mut rt = CMat::identity(w.ncols(), w.ncols());
        for j in 0..pieces {
            let xa = a + (b - a) * j as f64 / pieces as f64;
            let xb = if j + 1 == pieces { b } else { a + (b - a) * (j + 1) as f64 / pieces as f64 };
            let out = integrate(&sys, xa, xb, &w, &ctx.ode, false, false)?.last().0.clone();
            let qr = out.qr();
            w = qr.q();
            rt = qr.r() * rt;
        }
        q.push(w);
        r.push(rt);
    }
    Ok(ModePath { side, stops: st, q, r })
}

/// Right inverse M^H (M M^H)^{-1} of a full-row-rank matrix.
pub fn right_inverse(m: &CMat) -> Result<CMat> {
    let g = (m * m.adjoint())
        .try_inverse()
        .ok_or_else(|| Error::BasisDegeneracy("slow map lost rank".into()))?;
    Ok(m.adjoint() * g)
}

/// Orthonormalized copy of `w` and ln det of the stripped factor.
pub fn orthonormal(w: &CMat) -> Result<(CMat, f64)> {
    qr_positive(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use crate::profile::{solve_profile, ProfileOptions};

    fn ctx(name: &str, eps: f64) -> SpectralContext {
        let m = builtin_model(name).unwrap();
        let sh = ShockData::from_eps(&m, eps).unwrap();
        let p = solve_profile(&m, &sh, &ProfileOptions::default()).unwrap();
        SpectralContext::new(&m, &p, OdeOptions::default()).unwrap()
    }

    fn pt(re: f64, im: f64, xi: f64) -> SpectralPoint {
        SpectralPoint::new(C64::new(re, im), vec![xi])
    }

    #[test]
    fn hamer_matrix_at_origin() {
        let cx = ctx("hamer2d", 0.1);
        for x in [-3.0, 0.5, 7.0] {
            let s = assemble_system(&cx, x, &pt(0.0, 0.0, 0.0)).unwrap();
            let want = [[-1.0, 0.0, 1.0], [1.0, 0.0, -1.0], [0.0, -1.0, 0.0]];
            for i in 0..3 {
                for j in 0..3 {
                    assert!((s.abb[(i, j)] - c(want[i][j])).norm() < 1e-12);
                }
            }
            assert!((s.theta[(0, 0)] - cx.profile.at(x).u[0]).abs() < 1e-14);
        }
        let s = assemble_system(&cx, 0.0, &pt(0.0, 0.0, 1.0)).unwrap();
        assert!((s.abb[(2, 1)] - c(-2.0)).norm() < 1e-14);
        assert!(s.theta.determinant().abs() < 1e-10);
    }

    #[test]
    fn theta_drops_rank_once() {
        let cx = ctx("coupled2x2", 0.1);
        let d = |x: f64| assemble_system(&cx, x, &pt(0.0, 0.0, 0.0)).unwrap().theta.determinant();
        assert!(d(0.0).abs() < 1e-10);
        assert!(d(-0.5) * d(0.5) < 0.0);
    }

    #[test]
    fn hamer_asymptotic_eigenvalues() {
        let m = builtin_model("hamer2d").unwrap();
        let sh = ShockData::from_eps(&m, 0.1).unwrap();
        let am = asymptotic_modes(&m, &sh, Side::Plus, &pt(0.0, 0.0, 0.0)).unwrap();
        let up = -0.1f64;
        let b = 1.0 / up;
        let r1 = (-b - (b * b + 4.0).sqrt()) / 2.0;
        let r2 = (-b + (b * b + 4.0).sqrt()) / 2.0;
        let want = [r1, 0.0, r2];
        for (z, w) in am.eigenvalues.iter().zip(want) {
            assert!((z - c(w)).norm() < 1e-10, "{z} vs {w}");
        }
        assert!((r1 + 0.09902).abs() < 1e-5 && (r2 - 10.09902).abs() < 1e-5);
    }

    #[test]
    fn dimension_counts() {
        let m = builtin_model("hamer2d").unwrap();
        let sh = ShockData::from_eps(&m, 0.1).unwrap();
        let q = pt(0.3, -0.2, 0.4);
        let ap = asymptotic_modes(&m, &sh, Side::Plus, &q).unwrap();
        let am = asymptotic_modes(&m, &sh, Side::Minus, &q).unwrap();
        assert_eq!((ap.dim_u, ap.dim_s), (2, 1));
        assert_eq!((am.dim_u, am.dim_s), (1, 2));
        // stable count at -inf differs from the stable count at +inf
        assert_ne!(am.dim_s, ap.dim_s);
    }

    #[test]
    fn u_and_v_asymptotic_matrices_similar() {
        let cx = ctx("coupled2x2", 0.1);
        let q = pt(0.2, 0.1, 0.3);
        for side in [Side::Plus, Side::Minus] {
            let au = cx.asymptotic_matrix_u(side, &q);
            let av = asymptotic_matrix(&cx.model, &cx.profile.shock, side, &q).unwrap();
            let (eu, _) = eig(&au).unwrap();
            let (ev, _) = eig(&av).unwrap();
            for (a, b) in eu.iter().zip(&ev) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn decaying_mode_at_origin_is_profile_derivative() {
        let cx = ctx("hamer2d", 0.1);
        let mb = integrate_modes(&cx, &pt(0.0, 0.0, 0.0), Side::Plus, Want::Decaying, 1.0).unwrap();
        assert_eq!(mb.columns[0].ncols(), 1);
        for (x, w) in mb.x.iter().zip(&mb.columns).filter(|(x, _)| **x < 60.0) {
            let pp = cx.profile.at(*x);
            let wbar = [pp.du[0], pp.dq, -pp.q];
            let nrm = wbar.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: C64 = (0..3).map(|i| w[(i, 0)] * (wbar[i] / nrm)).sum();
            assert!((dot.norm() - 1.0).abs() < 1e-6, "x={x} overlap {}", dot.norm());
        }
    }

    #[test]
    fn mode_count_and_tolerance_halving() {
        let cx = ctx("hamer2d", 0.1);
        let q = pt(0.01, 0.0, 0.0);
        let a = integrate_modes(&cx, &q, Side::Plus, Want::Decaying, 1.0).unwrap();
        assert_eq!(a.columns[0].ncols(), 1);
        let mut cx2 = cx.clone();
        cx2.ode = OdeOptions { rtol: cx.ode.rtol / 2.0, atol: cx.ode.atol / 2.0, ..cx.ode };
        let b = integrate_modes(&cx2, &q, Side::Plus, Want::Decaying, 1.0).unwrap();
        let (wa, la) = a.at_end();
        let (wb, lb) = b.at_end();
        let za = wa[(0, 0)] * la.exp();
        let zb = wb[(0, 0)] * lb.exp();
        assert!(((za - zb) / za).norm() < 1e-6);
        let m = integrate_modes(&cx, &q, Side::Minus, Want::Growing, -1.0).unwrap();
        assert_eq!(m.columns[0].ncols(), 1);
        assert!(integrate_modes(&cx, &q, Side::Plus, Want::Growing, 1.0).is_err());
    }

    /// Dense unnormalized solution on [x0, x1] with small steps.
    fn dense(cx: &SpectralContext, q: &SpectralPoint, x0: f64, x1: f64, w0: &CMat) -> (Vec<f64>, Vec<CMat>) {
        let sys = Shifted { ctx: cx, pt: q, shift: c(0.0), kappa: None };
        let opts = OdeOptions { h_max: 2e-4, h_init: 2e-4, ..cx.ode };
        let tr = integrate(&sys, x0, x1, w0, &opts, false, true).unwrap();
        (tr.x, tr.w)
    }

    fn fd3(xs: &[f64], f: &dyn Fn(usize) -> CMat, i: usize) -> CMat {
        let (h0, h1) = (xs[i] - xs[i - 1], xs[i + 1] - xs[i]);
        f(i + 1) * c(h0 / (h1 * (h0 + h1))) - f(i - 1) * c(h1 / (h0 * (h0 + h1))) + f(i) * c((h1 - h0) / (h0 * h1))
    }

    #[test]
    fn mode_columns_solve_the_ode() {
        let cx = ctx("coupled2x2", 0.1);
        let q = pt(0.05, 0.02, 0.1);
        let mb = integrate_modes(&cx, &q, Side::Plus, Want::Decaying, 1.0).unwrap();
        let (w, _) = mb.at_end();
        let (xs, ws) = dense(&cx, &q, 1.0, 1.05, w);
        let mut worst: f64 = 0.0;
        for i in 1..xs.len() - 1 {
            let mw = |j: usize| cx.regular_coeffs(xs[j], &q).0 * &ws[j];
            let d = fd3(&xs, &mw, i);
            let (_, nm, _) = cx.regular_coeffs(xs[i], &q);
            worst = worst.max((d - nm * &ws[i]).norm() / ws[i].norm());
        }
        assert!(worst < 1e-4, "residual {worst}");
    }

    #[test]
    fn diagonalized_system_consistent() {
        // a (u,q,p) solution mapped to (v,q,p) satisfies (Theta W)' = A W
        let cx = ctx("coupled2x2", 0.1);
        let q = pt(0.05, 0.0, 0.1);
        let w0 = CMat::from_fn(cx.n + 2, 1, |i, _| c(1.0 + i as f64));
        let (xs, ws) = dense(&cx, &q, 3.0, 3.01, &w0);
        let i = xs.len() / 2;
        let wv = |j: usize| cx.to_diagonal(xs[j], &ws[j]).unwrap();
        let s = |j: usize| assemble_system(&cx, xs[j], &q).unwrap();
        let tw = |j: usize| to_complex(&s(j).theta) * wv(j);
        let d = fd3(&xs, &tw, i);
        let res = (&d - s(i).abb * wv(i)).norm() / wv(i).norm();
        assert!(res < 2e-4, "residual {res}");
        // flipping the sign of the (T^{-1})' A_1 T term breaks the identity
        let n = cx.n;
        let (_, t, _) = cx.diagonalizer(xs[i]).unwrap();
        let (_, _, tp) = cx.diagonalizer(xs[i] + 1e-3).unwrap();
        let (_, _, tm) = cx.diagonalizer(xs[i] - 1e-3).unwrap();
        let a1 = cx.model.jac(0, &cx.profile.at(xs[i]).u);
        let corr = to_complex(&((tp - tm) / 2e-3 * a1 * t));
        let mut flipped = s(i).abb.clone();
        let mut blk = flipped.view_mut((0, 0), (n, n));
        blk -= corr * c(2.0);
        let bad = (&d - flipped * wv(i)).norm() / wv(i).norm();
        assert!(bad > 10.0 * res, "{bad} vs {res}");
    }

    #[test]
    fn singular_fast_mode_vanishes() {
        let cx = ctx("hamer2d", 0.1);
        let mb = singular_modes(&cx, &pt(0.0, 0.0, 0.0), ZeroSide::Right, 1.0).unwrap();
        let kappa = mb.kappa.unwrap();
        assert!((kappa.re - (1.0 / 0.005 - 1.0)).abs() < 25.0, "kappa {kappa}");
        let a = mb.alpha_hat.unwrap();
        assert!(a > 0.0 && (a - kappa.re).abs() < 0.05 * kappa.re);
        // non-p components small relative to the p component, shrinking with x
        let ratio = |j: usize| {
            let w = &mb.columns[j];
            (w[(1, 0)].norm() + w[(2, 0)].norm()) / w[(0, 0)].norm()
        };
        let j_near = 1;
        let j_far = mb.x.len() - 1;
        assert!(ratio(j_near) < ratio(j_far));
        let ap_near = cx.profile.at(mb.x[j_near]).u[0].abs();
        assert!(ratio(j_near) < 10.0 * ap_near, "{} vs {}", ratio(j_near), ap_near);
        assert!(singular_modes(&cx, &pt(0.0, 0.0, 0.0), ZeroSide::Left, -1.0).is_ok());
    }

    #[test]
    fn slow_map_kernel_is_fast_mode() {
        let cx = ctx("hamer2d", 0.1);
        let q = pt(0.02, 0.01, 0.05);
        let mr = cx.slow_map(&q, Side::Plus).unwrap();
        let wr = singular_modes(&cx, &q, ZeroSide::Right, 1.0).unwrap();
        let v = wr.at_end().0;
        let r = (&mr * v).norm() / (mr.norm() * v.norm());
        assert!(r < 1e-6, "{r}");
        let ml = cx.slow_map(&q, Side::Minus).unwrap();
        let wl = singular_modes(&cx, &q, ZeroSide::Left, -1.0).unwrap();
        let v = wl.at_end().0;
        assert!((&ml * v).norm() / (ml.norm() * v.norm()) < 1e-6);
    }

    #[test]
    fn conjugation_symmetry() {
        let cx = ctx("hamer2d", 0.1);
        let q = pt(0.1, 0.3, 0.2);
        let a = integrate_modes(&cx, &q, Side::Plus, Want::Decaying, 1.0).unwrap();
        let b = integrate_modes(&cx, &q.conj(), Side::Plus, Want::Decaying, 1.0).unwrap();
        let (wa, la) = a.at_end();
        let (wb, lb) = b.at_end();
        assert!((la - lb).abs() < 1e-9);
        assert!((wa.map(|z| z.conj()) - wb).norm() < 1e-8);
    }

    #[test]
    fn slow_eigenvalues_second_order() {
        let m = builtin_model("coupled2x2").unwrap();
        let sh = ShockData::from_eps(&m, 0.1).unwrap();
        let zh = [0.6, 0.3, 0.74];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let (vals, t, tinv) = real_eig(&m.jac(0, &sh.u_plus)).unwrap();
        for k in 0..8 {
            let rho = 1e-6 * 10f64.powf(2.0 * k as f64 / 7.0);
            let q = SpectralPoint::from_polar(rho, &zh);
            let a = asymptotic_matrix(&m, &sh, Side::Plus, &q).unwrap();
            let (mu, _) = eig(&a).unwrap();
            let axi = to_complex(&(&tinv * m.transverse_symbol(&q.xi_t, &sh.u_plus) * &t));
            let mut h = axi * I + CMat::identity(2, 2) * q.lambda;
            for i in 0..2 {
                for j in 0..2 {
                    h[(i, j)] = -h[(i, j)] / vals[i];
                }
            }
            let (mu0, _) = eig(&h).unwrap();
            let err = mu0
                .iter()
                .map(|z0| mu.iter().map(|z| (z - z0).norm()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max);
            xs.push(rho.ln());
            ys.push(err.ln());
        }
        let (slope, _, _) = linfit(&xs, &ys);
        assert!(slope >= 1.8, "slope {slope}");
    }
}

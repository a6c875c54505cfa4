//! The two Evans functions D_+ and D_-, winding-number scans and the
//! low-frequency checks against the Lopatinski determinant.

use crate::error::{Error, Result};
use crate::hypotheses::Side;
use crate::linalg::{c, eig, linfit, CMat, C64, I};
use crate::model::{ModelSystem, ShockData};
use crate::spectral_ode::{
    basis_counts, integrate_modes, right_inverse, singular_modes, SpectralContext, SpectralPoint, Want, ZeroSide,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    Plus,
    Minus,
}

/// The number `value * exp(log_scale)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvansValue {
    pub value: C64,
    pub log_scale: f64,
    pub point: SpectralPoint,
    pub which: Which,
    pub y1: f64,
}

impl EvansValue {
    fn new(raw: C64, log_scale: f64, point: SpectralPoint, which: Which) -> Self {
        let y1 = if which == Which::Plus { 1.0 } else { -1.0 };
        let m = raw.norm();
        let (value, log_scale) = if m > 0.0 && !(1e-2..=1e2).contains(&m) {
            (raw / m, log_scale + m.ln())
        } else {
            (raw, log_scale)
        };
        EvansValue { value, log_scale, point, which, y1 }
    }

    pub fn complex(&self) -> C64 {
        self.value * self.log_scale.exp()
    }

    pub fn abs(&self) -> f64 {
        self.value.norm() * self.log_scale.exp()
    }

    pub fn arg(&self) -> f64 {
        self.value.arg()
    }
}

/// Both Evans functions at one point, sharing the mode computations.
pub fn evans_pair(ctx: &SpectralContext, pt: &SpectralPoint) -> Result<(EvansValue, EvansValue)> {
    let id: Vec<usize> = (0..ctx.n + 2).collect();
    evans_pair_perm(ctx, pt, &id)
}

/// As `evans_pair` with the determinant columns taken in the order `perm`.
pub fn evans_pair_perm(ctx: &SpectralContext, pt: &SpectralPoint, perm: &[usize]) -> Result<(EvansValue, EvansValue)> {
    let (kp, km) = basis_counts(ctx.n, ctx.p);
    let phi_p = integrate_modes(ctx, pt, Side::Plus, Want::Decaying, 1.0)?;
    let phi_m = integrate_modes(ctx, pt, Side::Minus, Want::Growing, -1.0)?;
    let (pp, lp) = phi_p.at_end();
    let (pm, lm) = phi_m.at_end();
    if pp.ncols() != kp || pm.ncols() != km {
        return Err(Error::ColumnCountMismatch { expected: kp + km, got: pp.ncols() + pm.ncols() });
    }
    let wr = singular_modes(ctx, pt, ZeroSide::Right, 1.0)?;
    let wl = singular_modes(ctx, pt, ZeroSide::Left, -1.0)?;
    let (wr, lwr) = wr.at_end();
    let (wl, lwl) = wl.at_end();
    let mr = ctx.slow_map(pt, Side::Plus)?;
    let ml = ctx.slow_map(pt, Side::Minus)?;
    let m = ctx.n + 2;
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..m).collect::<Vec<_>>() {
        return Err(Error::InvalidInput(format!("{perm:?} is not a permutation of {m} columns")));
    }

    let cont_m = right_inverse(&mr)? * &ml * pm;
    let mut a = CMat::zeros(m, m);
    a.view_mut((0, 0), (m, kp)).copy_from(pp);
    a.view_mut((0, kp), (m, 1)).copy_from(wr);
    a.view_mut((0, kp + 1), (m, km)).copy_from(&cont_m);
    let a = CMat::from_fn(m, m, |i, j| a[(i, perm[j])]);
    let dp = a.determinant() * ctx.det_s_inv(1.0)?;

    let cont_p = right_inverse(&ml)? * &mr * pp;
    let mut b = CMat::zeros(m, m);
    b.view_mut((0, 0), (m, kp)).copy_from(&cont_p);
    b.view_mut((0, kp), (m, 1)).copy_from(wl);
    b.view_mut((0, kp + 1), (m, km)).copy_from(pm);
    let b = CMat::from_fn(m, m, |i, j| b[(i, perm[j])]);
    let dm = b.determinant() * ctx.det_s_inv(-1.0)?;

    Ok((
        EvansValue::new(dp, lp + lwr + lm, pt.clone(), Which::Plus),
        EvansValue::new(dm, lp + lwl + lm, pt.clone(), Which::Minus),
    ))
}

pub fn evans_eval(ctx: &SpectralContext, pt: &SpectralPoint, which: Which) -> Result<EvansValue> {
    let (p, m) = evans_pair(ctx, pt)?;
    Ok(if which == Which::Plus { p } else { m })
}

/// Piece of a closed contour in the lambda plane.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Piece {
    Arc { r: f64, th0: f64, th1: f64 },
    Line { a: C64, b: C64 },
}

impl Piece {
    fn at(&self, t: f64) -> C64 {
        match *self {
            Piece::Arc { r, th0, th1 } => C64::from_polar(r, th0 + t * (th1 - th0)),
            Piece::Line { a, b } => a + (b - a) * t,
        }
    }
}

/// Counterclockwise closed contour in lambda at fixed transverse frequency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Contour {
    pub xi_t: Vec<f64>,
    pub pieces: Vec<Piece>,
}

impl Contour {
    /// Boundary of {Re lambda >= 0, |lambda| <= radius} minus the ball
    /// |(lambda, xi_t)| < punch.
    pub fn semicircle(xi_t: Vec<f64>, radius: f64, punch: f64) -> Result<Contour> {
        if punch <= 0.0 {
            return Err(Error::InvalidInput("rho_punch must be positive".into()));
        }
        let xi2: f64 = xi_t.iter().map(|x| x * x).sum();
        let r_in = if xi2 < punch * punch { (punch * punch - xi2).sqrt() } else { 0.0 };
        let h = PI / 2.0;
        let mut pieces = vec![Piece::Arc { r: radius, th0: -h, th1: h }];
        if r_in > 0.0 {
            pieces.push(Piece::Line { a: I * radius, b: I * r_in });
            pieces.push(Piece::Arc { r: r_in, th0: h, th1: -h });
            pieces.push(Piece::Line { a: -I * r_in, b: -I * radius });
        } else {
            pieces.push(Piece::Line { a: I * radius, b: -I * radius });
        }
        Ok(Contour { xi_t, pieces })
    }

    /// The two halves of `semicircle` split along the positive real axis.
    pub fn semicircle_halves(xi_t: Vec<f64>, radius: f64, punch: f64) -> Result<(Contour, Contour)> {
        let full = Contour::semicircle(xi_t.clone(), radius, punch)?;
        let h = PI / 2.0;
        let r_in = match full.pieces.get(2) {
            Some(Piece::Arc { r, .. }) => *r,
            _ => 0.0,
        };
        let mut upper = vec![Piece::Arc { r: radius, th0: 0.0, th1: h }];
        let mut lower = vec![Piece::Line { a: c(r_in), b: c(radius) }, Piece::Arc { r: radius, th0: -h, th1: 0.0 }];
        if r_in > 0.0 {
            upper.push(Piece::Line { a: I * radius, b: I * r_in });
            upper.push(Piece::Arc { r: r_in, th0: h, th1: 0.0 });
            lower.insert(0, Piece::Line { a: -I * r_in, b: -I * radius });
            lower.insert(0, Piece::Arc { r: r_in, th0: 0.0, th1: -h });
        } else {
            upper.push(Piece::Line { a: I * radius, b: c(0.0) });
            lower.insert(0, Piece::Line { a: c(0.0), b: -I * radius });
        }
        upper.push(Piece::Line { a: c(radius), b: c(r_in) });
        Ok((Contour { xi_t: xi_t.clone(), pieces: upper }, Contour { xi_t, pieces: lower }))
    }

    fn at(&self, s: f64) -> C64 {
        let k = (s.floor() as usize).min(self.pieces.len() - 1);
        self.pieces[k].at(s - k as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindingResult {
    pub winding: i64,
    pub raw: f64,
    pub n_points: usize,
    pub min_abs: f64,
}

fn wrap(d: f64) -> f64 {
    let mut d = d % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    }
    if d < -PI {
        d += 2.0 * PI;
    }
    d
}

fn eval_many(ctx: &SpectralContext, contour: &Contour, ss: &[f64], which: Which) -> Result<Vec<EvansValue>> {
    ss.par_iter()
        .map(|&s| evans_eval(ctx, &SpectralPoint::new(contour.at(s), contour.xi_t.clone()), which))
        .collect()
}

/// Winding number of D along the contour with adaptive refinement until
/// consecutive phase increments are below pi/3. `per_piece` sets the
/// initial resolution.
pub fn winding_number(ctx: &SpectralContext, contour: &Contour, which: Which, per_piece: usize) -> Result<WindingResult> {
    let np = contour.pieces.len();
    let total = np * per_piece;
    let mut ss: Vec<f64> = (0..=total).map(|k| k as f64 * np as f64 / total as f64).collect();
    let mut vals = eval_many(ctx, contour, &ss, which)?;
    let jump_max = PI / 3.0;
    for _round in 0..40 {
        let mut new_s = Vec::new();
        for k in 0..ss.len() - 1 {
            let d = wrap(vals[k + 1].arg() - vals[k].arg());
            if d.abs() >= jump_max {
                if ss[k + 1] - ss[k] < 1e-9 {
                    return Err(Error::PhaseJumpTooLarge(d.abs()));
                }
                new_s.push(0.5 * (ss[k] + ss[k + 1]));
            }
        }
        if new_s.is_empty() {
            let raw: f64 = (0..ss.len() - 1).map(|k| wrap(vals[k + 1].arg() - vals[k].arg())).sum::<f64>() / (2.0 * PI);
            let min_abs = vals.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            return Ok(WindingResult { winding: raw.round() as i64, raw, n_points: ss.len(), min_abs });
        }
        let new_v = eval_many(ctx, contour, &new_s, which)?;
        let mut merged: Vec<(f64, EvansValue)> = ss.into_iter().zip(vals).chain(new_s.into_iter().zip(new_v)).collect();
        merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        (ss, vals) = merged.into_iter().unzip();
    }
    Err(Error::PhaseJumpTooLarge(jump_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityVerdict {
    Stable,
    Unstable,
    Indeterminate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContourRecord {
    pub xi_t: Vec<f64>,
    pub radius: f64,
    pub punch: f64,
    pub winding: Option<i64>,
    pub winding_fine: Option<i64>,
    pub n_points: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioRecord {
    pub zhat: Vec<f64>,
    pub rho: Vec<f64>,
    pub ratio: Vec<f64>,
    pub spread: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanReport {
    pub contours: Vec<ContourRecord>,
    pub windings: Vec<i64>,
    pub rho_punch: f64,
    pub verdict_d: StabilityVerdict,
    pub m_hat: Option<[f64; 2]>,
    pub slope_consistency: Option<f64>,
    pub first_order_ratio_spread: f64,
    pub ratios: Vec<RatioRecord>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanOptions {
    pub xi_slices: Vec<f64>,
    pub rho_max: f64,
    pub rho_punch: f64,
    pub per_piece: usize,
    pub ratio_rho: Vec<f64>,
    pub check_refined: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            xi_slices: vec![0.0, 0.1, 0.5],
            rho_max: 5.0,
            rho_punch: 1e-2,
            per_piece: 12,
            ratio_rho: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            check_refined: true,
        }
    }
}

/// Directions on the closed half-sphere {Re lambda >= 0} in (Re lambda, Im lambda, xi_t).
pub fn half_sphere_samples(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut pts = crate::hypotheses::sphere_samples(d + 1, n, seed);
    for z in &mut pts {
        z[0] = z[0].abs();
    }
    pts
}

/// Relative spread (max - min) / mean of |D(rho zhat)| / rho.
pub fn first_order_ratio(ctx: &SpectralContext, zhat: &[f64], rhos: &[f64], which: Which) -> Result<RatioRecord> {
    let vals: Vec<EvansValue> = rhos
        .par_iter()
        .map(|&r| evans_eval(ctx, &SpectralPoint::from_polar(r, zhat), which))
        .collect::<Result<_>>()?;
    let ratio: Vec<f64> = vals.iter().zip(rhos).map(|(v, r)| v.abs() / r).collect();
    let mx = ratio.iter().cloned().fold(0.0, f64::max);
    let mn = ratio.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = ratio.iter().sum::<f64>() / ratio.len() as f64;
    Ok(RatioRecord { zhat: zhat.to_vec(), rho: rhos.to_vec(), ratio, spread: (mx - mn) / mean })
}

/// Winding scan over transverse slices plus the first-order vanishing test.
pub fn stability_scan(ctx: &SpectralContext, zhat_samples: &[Vec<f64>], opts: &ScanOptions) -> Result<ScanReport> {
    if opts.rho_punch <= 0.0 {
        return Err(Error::InvalidInput("rho_punch must be positive".into()));
    }
    let mut notes = Vec::new();
    let mut contours = Vec::new();
    let mut windings = Vec::new();
    let mut indeterminate = false;
    let mut punch_used = opts.rho_punch;
    for &xi in &opts.xi_slices {
        let mut xi_t = vec![0.0; ctx.model.d - 1];
        xi_t[0] = xi;
        let radius = (opts.rho_max * opts.rho_max - xi * xi).max(0.0).sqrt();
        if radius <= 0.0 {
            continue;
        }
        let mut punch = opts.rho_punch;
        let mut rec = None;
        for _shrink in 0..=3 {
            let contour = Contour::semicircle(xi_t.clone(), radius, punch)?;
            match winding_number(ctx, &contour, Which::Plus, opts.per_piece) {
                Ok(w) => {
                    let fine = if opts.check_refined {
                        winding_number(ctx, &contour, Which::Plus, 2 * opts.per_piece).ok().map(|f| f.winding)
                    } else {
                        Some(w.winding)
                    };
                    rec = Some(ContourRecord {
                        xi_t: xi_t.clone(),
                        radius,
                        punch,
                        winding: Some(w.winding),
                        winding_fine: fine,
                        n_points: w.n_points,
                        error: None,
                    });
                    break;
                }
                Err(Error::PhaseJumpTooLarge(_)) => {
                    notes.push(format!("xi={xi}: phase jump on contour, punch shrunk to {}", punch / 2.0));
                    punch /= 2.0;
                }
                Err(e) => {
                    rec = Some(ContourRecord {
                        xi_t: xi_t.clone(),
                        radius,
                        punch,
                        winding: None,
                        winding_fine: None,
                        n_points: 0,
                        error: Some(e.to_string()),
                    });
                    break;
                }
            }
        }
        punch_used = punch_used.min(punch);
        let rec = rec.unwrap_or(ContourRecord {
            xi_t: xi_t.clone(),
            radius,
            punch,
            winding: None,
            winding_fine: None,
            n_points: 0,
            error: Some("phase jumps persisted after 3 punch shrinks".into()),
        });
        match (rec.winding, rec.winding_fine) {
            (Some(w), Some(f)) if w == f => windings.push(w),
            (Some(w), _) => {
                windings.push(w);
                indeterminate = true;
                notes.push(format!("xi={xi}: winding changed under refinement"));
            }
            _ => indeterminate = true,
        }
        contours.push(rec);
    }

    let mut ratios = Vec::new();
    let mut spread: f64 = 0.0;
    for z in zhat_samples {
        match first_order_ratio(ctx, z, &opts.ratio_rho, Which::Plus) {
            Ok(r) => {
                spread = spread.max(r.spread);
                ratios.push(r);
            }
            Err(e) => {
                indeterminate = true;
                notes.push(format!("ratio test failed at {z:?}: {e}"));
            }
        }
    }

    let (m_hat, slope) = {
        let mut zl = vec![1.0, 0.0];
        zl.extend(vec![0.0; ctx.model.d - 1]);
        let grid: Vec<f64> = (0..8).map(|k| 1e-3 * 10f64.powf(2.0 * k as f64 / 7.0)).collect();
        match low_freq_checks(ctx, &zl, &grid) {
            Ok(lf) => (Some([lf.m_hat.re, lf.m_hat.im]), Some(lf.slope_consistency)),
            Err(e) => {
                notes.push(format!("low-frequency consistency fit failed: {e}"));
                (None, None)
            }
        }
    };

    let verdict_d = if windings.iter().any(|w| *w != 0) {
        StabilityVerdict::Unstable
    } else if indeterminate || spread >= 0.1 {
        if spread >= 0.1 {
            notes.push(format!("first-order vanishing not confirmed: ratio spread {spread:.3}"));
        }
        StabilityVerdict::Indeterminate
    } else {
        StabilityVerdict::Stable
    };
    Ok(ScanReport {
        contours,
        windings,
        rho_punch: punch_used,
        verdict_d,
        m_hat,
        slope_consistency: slope,
        first_order_ratio_spread: spread,
        ratios,
        notes,
    })
}

/// Lopatinski determinant det(r^+_stable, r^-_unstable, lambda [u] + i [f^xi]).
pub fn lopatinski(model: &ModelSystem, shock: &ShockData, pt: &SpectralPoint) -> Result<C64> {
    let m = model.in_frame(shock.s);
    let n = m.n;
    let p = shock.p;
    let jump: Vec<C64> = (0..n)
        .map(|k| {
            let mut fj = C64::new(0.0, 0.0);
            for (j, xi) in pt.xi_t.iter().enumerate() {
                fj += c(xi * (m.flux(j + 1, &shock.u_plus)[k] - m.flux(j + 1, &shock.u_minus)[k]));
            }
            pt.lambda * (shock.u_plus[k] - shock.u_minus[k]) + I * fj
        })
        .collect();
    let mut cols: Vec<Vec<C64>> = Vec::new();
    for (u, take, lowest) in [(&shock.u_plus, n - p, true), (&shock.u_minus, p - 1, false)] {
        if take == 0 {
            continue;
        }
        let a = m.jac(0, u);
        let ainv = a.try_inverse().ok_or_else(|| Error::EigenbasisFailure("characteristic end state".into()))?;
        let axi = m.transverse_symbol(&pt.xi_t, u);
        let mat = CMat::from_fn(n, n, |i, j| {
            let mut s = C64::new(0.0, 0.0);
            for k in 0..n {
                let mut inner = I * axi[(k, j)];
                if k == j {
                    inner += pt.lambda;
                }
                s += -ainv[(i, k)] * inner;
            }
            s
        });
        let (_, vecs) = eig(&mat)?;
        let idx: Vec<usize> = if lowest { (0..take).collect() } else { (n - take..n).collect() };
        for i in idx {
            cols.push(vecs.column(i).iter().cloned().collect());
        }
    }
    cols.push(jump);
    let d = CMat::from_fn(n, n, |i, j| cols[j][i]);
    Ok(d.determinant())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowFreqReport {
    pub zhat: Vec<f64>,
    pub rho: Vec<f64>,
    pub m_hat: C64,
    pub slope_consistency: f64,
    /// D_+ - m_hat D_- is at round-off level on the whole grid.
    pub consistency_exact: bool,
    pub lop_relation_slope: f64,
    pub gamma_plus: C64,
    pub gamma_minus: C64,
    pub consistency_residual: Vec<f64>,
}

/// Complex least-squares line y = a + b x; returns (a, b).
fn complex_linfit(x: &[f64], y: &[C64]) -> (C64, C64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<C64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: C64 = x.iter().zip(y).map(|(a, b)| (b - my) * (a - mx)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { c(0.0) };
    (my - b * mx, b)
}

fn loglog_slope(rho: &[f64], r: &[f64]) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = rho.iter().zip(r).filter(|(_, v)| **v > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pairs.len() < 3 {
        return Err(Error::FitFailed("too few positive residuals".into()));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(linfit(&xs, &ys).0)
}

/// m_hat: rho -> 0 limit of D_+/D_- (intercept of a linear fit in rho);
/// slope of |D_+ - m_hat D_-| against rho; likewise for D_pm against
/// gamma_pm Delta / det A_1(+-1).
pub fn low_freq_checks(ctx: &SpectralContext, zhat: &[f64], rho_grid: &[f64]) -> Result<LowFreqReport> {
    if rho_grid.len() < 8 {
        return Err(Error::FitFailed(format!("need at least 8 grid points, got {}", rho_grid.len())));
    }
    let pairs: Vec<(EvansValue, EvansValue)> = rho_grid
        .par_iter()
        .map(|&r| evans_pair(ctx, &SpectralPoint::from_polar(r, zhat)))
        .collect::<Result<_>>()?;
    let dp: Vec<C64> = pairs.iter().map(|p| p.0.complex()).collect();
    let dm: Vec<C64> = pairs.iter().map(|p| p.1.complex()).collect();
    if dm.iter().any(|z| z.norm() == 0.0) {
        return Err(Error::FitFailed("D_- vanishes on the grid".into()));
    }
    let ratio: Vec<C64> = dp.iter().zip(&dm).map(|(a, b)| a / b).collect();
    let (m_hat, _) = complex_linfit(rho_grid, &ratio);
    if m_hat.norm() < 1e-300 {
        return Err(Error::FitFailed("m_hat vanishes".into()));
    }
    let resid: Vec<f64> = dp.iter().zip(&dm).map(|(a, b)| (a - m_hat * b).norm()).collect();
    let slope_consistency = loglog_slope(rho_grid, &resid)?;
    let consistency_exact = resid.iter().zip(&dp).all(|(r, d)| *r < 1e-9 * d.norm());

    let a1p = ctx.model.jac(0, &ctx.profile.at(1.0).u).determinant();
    let a1m = ctx.model.jac(0, &ctx.profile.at(-1.0).u).determinant();
    let lop: Vec<C64> = rho_grid
        .iter()
        .map(|&r| lopatinski(&ctx.model, &ctx.profile.shock, &SpectralPoint::from_polar(r, zhat)))
        .collect::<Result<_>>()?;
    let mut gammas = [c(0.0); 2];
    let mut slopes = [0.0; 2];
    for (k, (d, det)) in [(&dp, a1p), (&dm, a1m)].into_iter().enumerate() {
        let base: Vec<C64> = lop.iter().map(|l| l / det).collect();
        let g: Vec<C64> = d.iter().zip(&base).map(|(a, b)| a / b).collect();
        let (g0, _) = complex_linfit(rho_grid, &g);
        let r: Vec<f64> = d.iter().zip(&base).map(|(a, b)| (a - g0 * b).norm()).collect();
        gammas[k] = g0;
        slopes[k] = loglog_slope(rho_grid, &r)?;
    }
    Ok(LowFreqReport {
        zhat: zhat.to_vec(),
        rho: rho_grid.to_vec(),
        m_hat,
        slope_consistency,
        consistency_exact,
        lop_relation_slope: slopes[0].min(slopes[1]),
        gamma_plus: gammas[0],
        gamma_minus: gammas[1],
        consistency_residual: resid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use crate::profile::{solve_profile, ProfileOptions};
    use crate::radau::OdeOptions;

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
    fn conjugation_symmetry() {
        let cx = ctx("hamer2d", 0.1);
        for (re, im, xi) in [(0.3, 0.7, 0.2), (0.05, -0.4, -0.6), (1.5, 2.0, 0.1)] {
            let a = evans_eval(&cx, &pt(re, im, xi), Which::Plus).unwrap();
            let b = evans_eval(&cx, &pt(re, -im, -xi), Which::Plus).unwrap();
            assert!((a.log_scale - b.log_scale).abs() < 1e-12);
            assert!((a.value.conj() - b.value).norm() < 1e-8 * a.value.norm());
        }
    }

    #[test]
    fn which_sets_matching_point() {
        let cx = ctx("hamer2d", 0.1);
        let (a, b) = evans_pair(&cx, &pt(0.2, 0.1, 0.3)).unwrap();
        assert_eq!((a.which, a.y1), (Which::Plus, 1.0));
        assert_eq!((b.which, b.y1), (Which::Minus, -1.0));
        let v = a.value.norm();
        assert!(v == 0.0 || (1e-2..=1e2).contains(&v));
    }

    #[test]
    fn vanishes_at_origin() {
        let cx = ctx("hamer2d", 0.1);
        let (a, b) = evans_pair(&cx, &pt(0.0, 0.0, 0.0)).unwrap();
        let scale = evans_eval(&cx, &pt(1e-2, 0.0, 0.0), Which::Plus).unwrap().abs();
        assert!(a.abs() < 1e-7 * scale, "{}", a.abs());
        assert!(b.abs() < 1e-7 * scale, "{}", b.abs());
    }

    #[test]
    fn first_order_vanishing_in_asymptotic_range() {
        // linear regime is rho << eps^2/4
        let cx = ctx("hamer2d", 0.1);
        let rhos = [1e-7, 1e-6, 1e-5];
        let r = first_order_ratio(&cx, &[1.0, 0.0, 0.0], &rhos, Which::Plus).unwrap();
        assert!(r.spread < 0.01, "{:?}", r);
        assert!(r.ratio[0] > 1.0);
    }

    #[test]
    fn saturation_scale_tracks_amplitude() {
        // |D|/rho halves near rho ~ eps^2/4
        for eps in [0.05, 0.1] {
            let cx = ctx("hamer2d", eps);
            let z = [1.0, 0.0, 0.0];
            let r = first_order_ratio(&cx, &z, &[1e-8, eps * eps / 4.0], Which::Plus).unwrap();
            let q = r.ratio[1] / r.ratio[0];
            assert!(q > 0.3 && q < 0.75, "eps {eps}: {q}");
        }
    }

    #[test]
    fn nonzero_away_from_origin() {
        let cx = ctx("hamer2d", 0.05);
        let v = evans_eval(&cx, &pt(0.5, 0.0, 0.2), Which::Plus).unwrap();
        assert!(v.value.norm() > 1e-6);
        assert!(v.abs() > 1e-6);
    }

    #[test]
    fn tolerance_halving() {
        let m = builtin_model("hamer2d").unwrap();
        let sh = ShockData::from_eps(&m, 0.1).unwrap();
        let p = solve_profile(&m, &sh, &ProfileOptions::default()).unwrap();
        let a = SpectralContext::new(&m, &p, OdeOptions::with_tol(1e-9)).unwrap();
        let b = SpectralContext::new(&m, &p, OdeOptions::with_tol(5e-10)).unwrap();
        for q in [pt(0.4, 0.3, 0.2), pt(0.01, -0.02, 0.05)] {
            let x = evans_eval(&a, &q, Which::Plus).unwrap().complex();
            let y = evans_eval(&b, &q, Which::Plus).unwrap().complex();
            assert!((x - y).norm() < 1e-6 * x.norm(), "{x} {y}");
        }
    }

    fn parity(p: &[usize]) -> f64 {
        let mut inv = 0;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                if p[i] > p[j] {
                    inv += 1;
                }
            }
        }
        if inv % 2 == 0 { 1.0 } else { -1.0 }
    }

    #[test]
    fn column_permutation_is_constant_factor() {
        let cx = ctx("coupled2x2", 0.1);
        let q = [pt(0.3, 0.2, 0.1), pt(1.0, -0.5, 0.4), pt(0.05, 0.0, 0.0)];
        for perm in [[1usize, 0, 2, 3], [3, 2, 1, 0], [0, 3, 1, 2]] {
            for pnt in &q {
                let (d, dm) = evans_pair_perm(&cx, pnt, &perm).unwrap();
                let (e, em) = evans_pair(&cx, pnt).unwrap();
                let s = parity(&perm);
                assert!((d.complex() - e.complex() * s).norm() < 1e-10 * e.abs());
                assert!((dm.complex() - em.complex() * s).norm() < 1e-10 * em.abs());
            }
        }
    }

    #[test]
    fn contour_without_zeros() {
        let cx = ctx("hamer2d", 0.1);
        let z = |re: f64, im: f64| C64::new(re, im);
        let square = Contour {
            xi_t: vec![0.2],
            pieces: vec![
                Piece::Line { a: z(0.7, -0.3), b: z(1.3, -0.3) },
                Piece::Line { a: z(1.3, -0.3), b: z(1.3, 0.3) },
                Piece::Line { a: z(1.3, 0.3), b: z(0.7, 0.3) },
                Piece::Line { a: z(0.7, 0.3), b: z(0.7, -0.3) },
            ],
        };
        assert_eq!(winding_number(&cx, &square, Which::Plus, 6).unwrap().winding, 0);
        let w = winding_number(&cx, &Contour::semicircle(vec![0.2], 1.0, 1e-2).unwrap(), Which::Minus, 8).unwrap();
        assert_eq!(w.winding, 0);
    }

    #[test]
    fn winding_additivity() {
        let cx = ctx("hamer2d", 0.1);
        for xi in [0.0, 0.3] {
            let full = Contour::semicircle(vec![xi], 3.0, 2e-2).unwrap();
            let (u, l) = Contour::semicircle_halves(vec![xi], 3.0, 2e-2).unwrap();
            let wf = winding_number(&cx, &full, Which::Plus, 8).unwrap();
            let wu = winding_number(&cx, &u, Which::Plus, 8).unwrap();
            let wl = winding_number(&cx, &l, Which::Plus, 8).unwrap();
            assert_eq!(wf.winding, wu.winding + wl.winding);
            assert!((wf.raw - wu.raw - wl.raw).abs() < 1e-9);
        }
    }

    #[test]
    fn hamer_slice_has_no_zeros() {
        let cx = ctx("hamer2d", 0.05);
        let c = Contour::semicircle(vec![0.1], (25.0f64 - 0.01).sqrt(), 1e-2).unwrap();
        let a = winding_number(&cx, &c, Which::Plus, 8).unwrap();
        let b = winding_number(&cx, &c, Which::Plus, 16).unwrap();
        assert_eq!(a.winding, 0);
        assert_eq!(b.winding, 0);
    }

    #[test]
    fn punch_must_be_positive() {
        let cx = ctx("hamer2d", 0.1);
        let opts = ScanOptions { rho_punch: 0.0, ..Default::default() };
        assert!(matches!(stability_scan(&cx, &[], &opts), Err(Error::InvalidInput(_))));
        assert!(Contour::semicircle(vec![0.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn half_sphere_directions() {
        let z = half_sphere_samples(2, 32, 42);
        assert_eq!(z.len(), 32);
        for v in &z {
            assert!(v[0] >= 0.0);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lopatinski_values() {
        let m = builtin_model("hamer2d").unwrap();
        let sh = ShockData::from_eps(&m, 0.1).unwrap();
        for xi in [0.0, 0.7, -3.0] {
            let d = lopatinski(&m, &sh, &pt(0.01, 0.0, xi)).unwrap();
            assert!((d - c(-0.002)).norm() < 1e-15);
        }
        assert_eq!(lopatinski(&m, &sh, &pt(0.0, 0.0, 0.0)).unwrap().norm(), 0.0);
        let m = builtin_model("coupled2x2").unwrap();
        let sh = ShockData::from_eps(&m, 0.1).unwrap();
        assert_eq!(lopatinski(&m, &sh, &pt(0.0, 0.0, 0.0)).unwrap().norm(), 0.0);
        let d = lopatinski(&m, &sh, &pt(0.1, 0.0, 0.1)).unwrap();
        assert!(d.norm() > 1e-6);
    }

    #[test]
    fn consistency_factor() {
        let cx = ctx("hamer2d", 0.1);
        let grid: Vec<f64> = (0..8).map(|k| 1e-3 * 10f64.powf(2.0 * k as f64 / 7.0)).collect();
        let r = low_freq_checks(&cx, &[1.0, 0.0, 0.0], &grid).unwrap();
        // symmetric shock: D_+ = D_- identically
        assert!((r.m_hat - c(1.0)).norm() < 1e-8);
        assert!(r.consistency_exact);
        let fine: Vec<f64> = (0..15).map(|k| 1e-3 * 10f64.powf(2.0 * k as f64 / 14.0)).collect();
        let s = low_freq_checks(&cx, &[1.0, 0.0, 0.0], &fine).unwrap();
        assert!((s.m_hat - r.m_hat).norm() < 0.01 * r.m_hat.norm());
        assert!(low_freq_checks(&cx, &[1.0, 0.0, 0.0], &grid[..5]).is_err());
    }

    #[test]
    fn second_order_relations_in_asymptotic_range() {
        let grid: Vec<f64> = (0..8).map(|k| 1e-7 * 10f64.powf(2.0 * k as f64 / 7.0)).collect();
        let cx = ctx("hamer2d", 0.1);
        let r = low_freq_checks(&cx, &[1.0, 0.0, 0.0], &grid).unwrap();
        assert!(r.lop_relation_slope >= 1.8, "{}", r.lop_relation_slope);
        let r = low_freq_checks(&cx, &[0.6, 0.0, 0.8], &grid).unwrap();
        assert!(r.slope_consistency >= 1.8, "{}", r.slope_consistency);
        let cx = ctx("coupled2x2", 0.1);
        let r = low_freq_checks(&cx, &[1.0, 0.0, 0.0], &grid).unwrap();
        assert!(r.lop_relation_slope >= 1.8, "{}", r.lop_relation_slope);
        assert!(r.m_hat.norm() > 1e-6);
    }
}

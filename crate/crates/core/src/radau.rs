//! Three-stage Radau IIA (order 5) for linear systems M(x) W' = N(x) W with a
//! possibly singular mass matrix at the end of the interval.
//!
//! Step-size control by step doubling. Columns may be orthonormalized after
//! every accepted step, the stripped triangular factor being accumulated as
//! ln det R.

use crate::error::{Error, Result};
use crate::linalg::{c, qr_positive, CMat};
use serde::{Deserialize, Serialize};

pub trait LinearDae: Sync {
    fn dim(&self) -> usize;
    /// Returns (M(x), N(x)).
    fn coeffs(&self, x: f64) -> Result<(CMat, CMat)>;
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-9, atol: 1e-11, h_init: 0.05, h_min: 1e-12, h_max: 8.0, max_steps: 200_000 }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        OdeOptions { rtol: tol, atol: tol * 1e-2, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub w: Vec<CMat>,
    /// Accumulated ln det R at each stored node.
    pub log_scale: Vec<f64>,
}

impl Trajectory {
    pub fn last(&self) -> (&CMat, f64) {
        (self.w.last().unwrap(), *self.log_scale.last().unwrap())
    }
}

struct Tableau {
    c: [f64; 3],
    a: [[f64; 3]; 3],
}

fn tableau() -> Tableau {
    let s6 = 6f64.sqrt();
    Tableau {
        c: [(4.0 - s6) / 10.0, (4.0 + s6) / 10.0, 1.0],
        a: [
            [(88.0 - 7.0 * s6) / 360.0, (296.0 - 169.0 * s6) / 1800.0, (-2.0 + 3.0 * s6) / 225.0],
            [(296.0 + 169.0 * s6) / 1800.0, (88.0 + 7.0 * s6) / 360.0, (-2.0 - 3.0 * s6) / 225.0],
            [(16.0 - s6) / 36.0, (16.0 + s6) / 36.0, 1.0 / 9.0],
        ],
    }
}

fn radau_step(sys: &dyn LinearDae, tab: &Tableau, x: f64, h: f64, w: &CMat) -> Result<CMat> {
    let m = sys.dim();
    let k = w.ncols();
    let mut g = CMat::zeros(3 * m, 3 * m);
    let mut rhs = CMat::zeros(3 * m, k);
    for i in 0..3 {
        let (mm, nn) = sys.coeffs(x + tab.c[i] * h)?;
        for j in 0..3 {
            let f = c(-h * tab.a[i][j]);
            let mut blk = nn.clone() * f;
            if i == j {
                blk += &mm;
            }
            g.view_mut((i * m, j * m), (m, m)).copy_from(&blk);
        }
        rhs.view_mut((i * m, 0), (m, k)).copy_from(&(&nn * w));
    }
    let lu = g.lu();
    let kk = lu
        .solve(&rhs)
        .ok_or_else(|| Error::StiffnessFailure(x))?;
    let mut out = w.clone();
    for j in 0..3 {
        out += kk.view((j * m, 0), (m, k)) * c(h * tab.a[2][j]);
    }
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::StiffnessFailure(x));
    }
    Ok(out)
}

/// Integrates from `x0` to `x1` (either direction) starting at `w0`.
pub fn integrate(
    sys: &dyn LinearDae,
    x0: f64,
    x1: f64,
    w0: &CMat,
    opts: &OdeOptions,
    orthonormalize: bool,
    keep_path: bool,
) -> Result<Trajectory> {
    let tab = tableau();
    let dir = if x1 >= x0 { 1.0 } else { -1.0 };
    let span = (x1 - x0).abs();
    let mut x = x0;
    let mut w = w0.clone();
    let mut ls = 0.0;
    if orthonormalize {
        let (q, l) = qr_positive(&w)?;
        w = q;
        ls = l;
    }
    let mut traj = Trajectory { x: vec![x], w: vec![w.clone()], log_scale: vec![ls] };
    let mut h = opts.h_init.min(span);
    let mut steps = 0;
    while (x1 - x) * dir > 1e-14 * span.max(1.0) {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::StiffnessFailure(x));
        }
        let remaining = (x1 - x).abs();
        let last = h >= remaining * 0.999;
        let hs = if last { remaining } else { h };
        let sh = hs * dir;
        let full = radau_step(sys, &tab, x, sh, &w);
        let half = radau_step(sys, &tab, x, sh / 2.0, &w).and_then(|m| radau_step(sys, &tab, x + sh / 2.0, sh / 2.0, &m));
        let (full, half) = match (full, half) {
            (Ok(a), Ok(b)) => (a, b),
            _ => {
                h = hs / 4.0;
                if h < opts.h_min {
                    return Err(Error::StiffnessFailure(x));
                }
                continue;
            }
        };
        let scale = half.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let tol = opts.atol + opts.rtol * scale;
        let err = (&half - &full).iter().map(|z| z.norm()).fold(0.0, f64::max) / 31.0 / tol;
        if err <= 1.0 {
            x = if last { x1 } else { x + sh };
            w = half;
            if orthonormalize {
                let (q, l) = qr_positive(&w)?;
                w = q;
                ls += l;
            }
            if keep_path || x == x1 {
                traj.x.push(x);
                traj.w.push(w.clone());
                traj.log_scale.push(ls);
            }
            let fac = if err == 0.0 { 4.0 } else { (0.9 * err.powf(-1.0 / 6.0)).clamp(0.2, 4.0) };
            h = (hs * fac).min(opts.h_max);
        } else {
            h = hs * (0.9 * err.powf(-1.0 / 6.0)).clamp(0.1, 0.9);
            if h < opts.h_min {
                return Err(Error::StiffnessFailure(x));
            }
        }
    }
    if traj.x.last() != Some(&x1) {
        traj.x.push(x1);
        traj.w.push(w);
        traj.log_scale.push(ls);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;
    use nalgebra::DMatrix;

    fn cz(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    struct Scalar {
        mu: C64,
    }

    impl LinearDae for Scalar {
        fn dim(&self) -> usize {
            1
        }
        fn coeffs(&self, _x: f64) -> Result<(CMat, CMat)> {
            Ok((CMat::identity(1, 1), CMat::from_element(1, 1, self.mu)))
        }
    }

    /// x W' = k W with solution x^k, singular at 0.
    struct Euler {
        k: f64,
    }

    impl LinearDae for Euler {
        fn dim(&self) -> usize {
            2
        }
        fn coeffs(&self, x: f64) -> Result<(CMat, CMat)> {
            let m = DMatrix::from_row_slice(2, 2, &[x, 0.0, 0.0, 1.0]).map(c);
            let n = DMatrix::from_row_slice(2, 2, &[self.k, 1.0, 0.0, 0.0]).map(c);
            Ok((m, n))
        }
    }

    #[test]
    fn exponential_accuracy() {
        let sys = Scalar { mu: cz(-0.7, 2.0) };
        let w0 = CMat::from_element(1, 1, c(1.0));
        let t = integrate(&sys, 0.0, 3.0, &w0, &OdeOptions::default(), false, false).unwrap();
        let exact = (sys.mu * 3.0).exp();
        assert!((t.last().0[(0, 0)] - exact).norm() < 1e-8);
    }

    #[test]
    fn backward_and_stiff() {
        let sys = Scalar { mu: c(-2000.0) };
        let w0 = CMat::from_element(1, 1, c(1.0));
        let t = integrate(&sys, 0.0, 1.0, &w0, &OdeOptions::default(), false, false).unwrap();
        assert!(t.last().0[(0, 0)].norm() < 1e-10);
        assert!(t.x.len() < 50);
        let sys = Scalar { mu: c(0.5) };
        let t = integrate(&sys, 2.0, 0.0, &w0, &OdeOptions::default(), false, false).unwrap();
        assert!((t.last().0[(0, 0)].re - (-1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn log_scale_tracks_growth() {
        let sys = Scalar { mu: c(3.0) };
        let w0 = CMat::from_element(1, 1, c(1.0));
        let t = integrate(&sys, 0.0, 10.0, &w0, &OdeOptions::default(), true, true).unwrap();
        let (w, ls) = t.last();
        assert!((w[(0, 0)] - c(1.0)).norm() < 1e-12);
        assert!((ls - 30.0).abs() < 1e-7);
    }

    #[test]
    fn lands_on_singular_point() {
        // particular solution W = (-1/k, 1) regular at 0; homogeneous part x^k dies
        let sys = Euler { k: 40.0 };
        let w0 = CMat::from_column_slice(2, 1, &[c(1.0), c(1.0)]);
        let t = integrate(&sys, 1.0, 0.0, &w0, &OdeOptions::default(), false, false).unwrap();
        let w = t.last().0;
        assert!((w[(0, 0)] + c(1.0 / 40.0)).norm() < 1e-9, "{}", w[(0, 0)]);
    }
}

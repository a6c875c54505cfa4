//! Dense and banded linear algebra helpers on top of nalgebra.

use crate::error::{Error, Result};
use nalgebra::{ComplexField, DMatrix, DVector, Schur};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn to_complex(m: &DMatrix<f64>) -> CMat {
    m.map(c)
}

/// Eigen-decomposition of a general complex matrix via the complex Schur form.
///
/// Returns eigenvalues sorted by (Re, Im) and unit eigenvectors as columns,
/// each with its largest-modulus entry made real positive.
pub fn eig(m: &CMat) -> Result<(Vec<C64>, CMat)> {
    let n = m.nrows();
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
    let schur = Schur::try_new(m.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::EigenbasisFailure("Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    let vals: Vec<C64> = (0..n).map(|k| t[(k, k)]).collect();
    let mut vecs = CMat::zeros(n, n);
    for k in 0..n {
        let mut y = CVec::zeros(n);
        y[k] = c(1.0);
        for j in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for l in j + 1..=k {
                s += t[(j, l)] * y[l];
            }
            let mut den = t[(j, j)] - vals[k];
            if den.norm() < 1e-14 * scale {
                den = c(1e-14 * scale);
            }
            y[j] = -s / den;
        }
        let v = &q * y;
        vecs.set_column(k, &normalize_phase(v));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        vals[a]
            .re
            .partial_cmp(&vals[b].re)
            .unwrap()
            .then(vals[a].im.partial_cmp(&vals[b].im).unwrap())
    });
    let svals = order.iter().map(|&k| vals[k]).collect();
    let svecs = CMat::from_fn(n, n, |i, j| vecs[(i, order[j])]);
    Ok((svals, svecs))
}

/// Unit vector with its largest-modulus entry rotated onto the positive real axis.
pub fn normalize_phase(v: CVec) -> CVec {
    let norm = v.norm();
    let (mut best, mut bi) = (0.0, 0);
    for (i, z) in v.iter().enumerate() {
        if z.norm() > best * (1.0 + 1e-12) {
            best = z.norm();
            bi = i;
        }
    }
    if norm == 0.0 {
        return v;
    }
    let ph = v[bi].conj() / v[bi].norm();
    v.map(|z| z * ph / norm)
}

/// Real eigen-decomposition of a matrix known to have real distinct eigenvalues.
///
/// Returns ascending eigenvalues, right eigenvectors (unit columns) and the
/// inverse of the eigenvector matrix (rows are left eigenvectors).
pub fn real_eig(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if n == 1 {
        return Ok((vec![m[(0, 0)]], DMatrix::identity(1, 1), DMatrix::identity(1, 1)));
    }
    let scale = m.norm().max(1e-300);
    let (vals, vecs) = eig(&to_complex(m))?;
    for z in &vals {
        if z.im.abs() > 1e-9 * scale {
            return Err(Error::NotStrictlyHyperbolic(z.im.abs()));
        }
    }
    let mut r = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let col = vecs.column(j).map(|z| z.re);
        let nrm = col.norm();
        r.set_column(j, &(col / nrm));
    }
    let rinv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::EigenbasisFailure("defective eigenvector matrix".into()))?;
    Ok((vals.iter().map(|z| z.re).collect(), r, rinv))
}

/// Orthonormalizes the columns of `m` with a real positive diagonal in R.
///
/// Returns the orthonormal factor and ln det R (real because diag R > 0).
pub fn qr_positive(m: &CMat) -> Result<(CMat, f64)> {
    let k = m.ncols();
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    let mut logdet = 0.0;
    for j in 0..k {
        let d = r[(j, j)];
        let nd = d.norm();
        if !(nd > 1e-300) || !nd.is_finite() {
            return Err(Error::BasisDegeneracy(format!("R[{j},{j}] = {nd:e}")));
        }
        logdet += nd.ln();
        let ph = d / nd;
        for i in 0..q.nrows() {
            q[(i, j)] *= ph;
        }
    }
    Ok((q, logdet))
}

/// Least-squares line y = a + b x; returns (slope b, intercept a, max |residual|).
pub fn linfit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let res = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - icpt - slope * a).abs())
        .fold(0.0, f64::max);
    (slope, icpt, res)
}

/// Finite-difference weights for derivatives 0..=m at `z` from nodes `x`.
/// Returns w[k][j] = weight of node j for the k-th derivative.
pub fn fd_weights(z: f64, x: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut w = vec![vec![0.0; n]; m + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    w[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    w[k][i] = c1 * (k as f64 * w[k - 1][i - 1] - c5 * w[k][i - 1]) / c2;
                }
                w[0][i] = -c1 * c5 * w[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                w[k][j] = (c4 * w[k][j] - k as f64 * w[k - 1][j]) / c3;
            }
            w[0][j] = c4 * w[0][j] / c3;
        }
        c1 = c2;
    }
    w
}

/// Banded matrix with `kl` sub- and `ku` super-diagonals, LU-factorized in place
/// with partial pivoting (fill-in stored in `kl` extra super-diagonals).
#[derive(Debug, Clone)]
pub struct Banded<T> {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    ld: usize,
    data: Vec<T>,
    piv: Vec<usize>,
    factored: bool,
}

impl<T: ComplexField<RealField = f64> + Copy> Banded<T> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        Banded { n, kl, ku, ld, data: vec![T::zero(); ld * n], piv: vec![0; n], factored: false }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        // row offset inside column j; diagonal sits at kl + ku
        j * self.ld + (self.kl + self.ku + i - j)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i + self.ku >= j && j + self.kl >= i
    }

    pub fn add(&mut self, i: usize, j: usize, v: T) {
        assert!(self.in_band(i, j), "entry ({i},{j}) outside band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if !self.in_band(i, j) {
            return T::zero();
        }
        self.data[self.idx(i, j)]
    }

    /// y = A x (only valid before factorization).
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert!(!self.factored);
        let mut y = vec![T::zero(); self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for i in lo..=hi {
                y[i] += self.data[self.idx(i, j)] * x[j];
            }
        }
        y
    }

    /// In-place LU with partial pivoting. Returns the smallest pivot modulus.
    pub fn factor(&mut self) -> Result<f64> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let kv = kl + ku;
        let mut minpiv = f64::INFINITY;
        for j in 0..n {
            let last = (j + kl).min(n - 1);
            let mut p = j;
            let mut best = self.data[self.idx(j, j)].modulus();
            for i in j + 1..=last {
                let v = self.data[j * self.ld + kv + i - j].modulus();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            self.piv[j] = p;
            minpiv = minpiv.min(best);
            if best == 0.0 || !best.is_finite() {
                return Err(Error::SolverSingular(best));
            }
            let jmax = (j + kv).min(n - 1);
            if p != j {
                for col in j..=jmax {
                    let a = col * self.ld + kv + j - col;
                    let b = col * self.ld + kv + p - col;
                    self.data.swap(a, b);
                }
            }
            let d = self.data[j * self.ld + kv];
            for i in j + 1..=last {
                let k = j * self.ld + kv + i - j;
                self.data[k] /= d;
            }
            for col in j + 1..=jmax {
                let u = self.data[col * self.ld + kv + j - col];
                if u == T::zero() {
                    continue;
                }
                for i in j + 1..=last {
                    let l = self.data[j * self.ld + kv + i - j];
                    let k = col * self.ld + kv + i - col;
                    self.data[k] -= l * u;
                }
            }
        }
        self.factored = true;
        Ok(minpiv)
    }

    pub fn solve(&self, b: &mut [T]) {
        assert!(self.factored);
        let n = self.n;
        let kv = self.kl + self.ku;
        for j in 0..n {
            let p = self.piv[j];
            if p != j {
                b.swap(j, p);
            }
            let last = (j + self.kl).min(n - 1);
            let bj = b[j];
            for i in j + 1..=last {
                b[i] -= self.data[j * self.ld + kv + i - j] * bj;
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.data[j * self.ld + kv];
            let bj = b[j];
            let first = j.saturating_sub(kv);
            for i in first..j {
                b[i] -= self.data[j * self.ld + kv + i - j] * bj;
            }
        }
    }
}

impl Banded<C64> {
    /// ln det of the factorized matrix (branch of the imaginary part arbitrary).
    pub fn log_det(&self) -> C64 {
        assert!(self.factored);
        let kv = self.kl + self.ku;
        let mut s = C64::new(0.0, 0.0);
        for j in 0..self.n {
            s += self.data[j * self.ld + kv].ln();
            if self.piv[j] != j {
                s += C64::new(0.0, std::f64::consts::PI);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eig_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..6 {
            let m = CMat::from_fn(n, n, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            let (vals, vecs) = eig(&m).unwrap();
            for k in 0..n {
                let v = vecs.column(k);
                let r = &m * v - v * vals[k];
                assert!(r.norm() < 1e-12, "residual {}", r.norm());
            }
            for k in 1..n {
                assert!(vals[k - 1].re <= vals[k].re);
            }
        }
    }

    #[test]
    fn real_eig_of_symmetric_pair() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 0.3, 0.3, 2.0]);
        let (vals, r, rinv) = real_eig(&m).unwrap();
        assert!(vals[0] < vals[1]);
        let d = &rinv * &m * &r;
        assert!((d[(0, 1)]).abs() < 1e-13 && (d[(0, 0)] - vals[0]).abs() < 1e-13);
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!(matches!(real_eig(&rot), Err(Error::NotStrictlyHyperbolic(_))));
    }

    #[test]
    fn banded_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, kl, ku) = (40, 3, 2);
        let mut b = Banded::<C64>::zeros(n, kl, ku);
        let mut dense = CMat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if b.in_band(i, j) {
                    let v = C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                    b.add(i, j, v);
                    dense[(i, j)] = v;
                }
            }
        }
        let rhs: Vec<C64> = (0..n).map(|i| C64::new(i as f64, 1.0)).collect();
        let mut x = rhs.clone();
        b.factor().unwrap();
        b.solve(&mut x);
        let xd = dense.lu().solve(&CVec::from_vec(rhs)).unwrap();
        for i in 0..n {
            assert!((x[i] - xd[i]).norm() < 1e-9 * (1.0 + xd[i].norm()));
        }
    }

    #[test]
    fn fd_weights_classic() {
        let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert!((w[1][0] + 0.5).abs() < 1e-14 && (w[1][2] - 0.5).abs() < 1e-14);
        assert!((w[2][0] - 1.0).abs() < 1e-14 && (w[2][1] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn qr_positive_diagonal() {
        let m = CMat::from_row_slice(3, 2, &[c(1.0), I, c(2.0), c(0.0), I, c(1.0)]);
        let (q, logdet) = qr_positive(&m).unwrap();
        let gram = q.adjoint() * &q;
        assert!((gram - CMat::identity(2, 2)).norm() < 1e-13);
        let r = q.adjoint() * &m;
        assert!(r[(0, 0)].im.abs() < 1e-13 && r[(0, 0)].re > 0.0);
        assert!((logdet - (r[(0, 0)].re * r[(1, 1)].re).ln()).abs() < 1e-12);
    }

    #[test]
    fn linfit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (b, a, r) = linfit(&x, &y);
        assert!((b - 2.0).abs() < 1e-14 && (a - 1.0).abs() < 1e-14 && r < 1e-13);
    }
}

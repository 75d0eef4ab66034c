//! Dense symmetric linear algebra and deterministic random streams.
//!
//! All storage is row-major `f64`. Matrices here are desk scale (a few
//! hundred rows at most), so the implementations favor predictable
//! numerics over asymptotic cleverness: unblocked Cholesky with a relative
//! pivot test, cyclic Jacobi for eigenvalues, and central differences for
//! the finite-difference oracles.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Default relative finite-difference step; the per-coordinate step is
/// `h * (1 + |x_i|)`.
pub const FD_STEP: f64 = 1e-4;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dim("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dim("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ * v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "tr_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v[i];
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn add_scaled(&mut self, other: &Matrix, c: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Symmetric matrix; `entries[i][j] == entries[j][i]` holds exactly because
/// instances are only built through [`symmetrize`] or symmetric constructors.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in d.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix { rows: self.n, cols: self.n, data: self.data.clone() }
    }

    pub fn negated(&self) -> SymMatrix {
        SymMatrix { n: self.n, data: self.data.iter().map(|v| -v).collect() }
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        assert_eq!(self.n, other.n);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `(m + mᵀ) / 2`. Errors on non-square input.
pub fn symmetrize(m: &Matrix) -> Result<SymMatrix> {
    if m.rows() != m.cols() {
        return Err(Error::Dim(format!(
            "symmetrize needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = m.get(i, i);
        for j in 0..i {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Ok(SymMatrix { n, data })
}

/// Lower-triangular Cholesky factor of a positive-definite matrix, with the
/// log-determinant of the source matrix cached at construction.
#[derive(Debug, Clone)]
pub struct CholFactor {
    n: usize,
    lower: Vec<f64>,
    log_det: f64,
}

impl CholFactor {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn lower(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.n + j]
    }

    /// `2 Σ ln L[i][i]`, the log-determinant of the factored matrix.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solve `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let mut s = b[i];
            for j in 0..i {
                s -= self.lower[i * self.n + j] * y[j];
            }
            y[i] = s / self.lower[i * self.n + i];
        }
        y
    }

    /// Solve `Lᵀ y = b` by back substitution.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for j in i + 1..self.n {
                s -= self.lower[j * self.n + i] * y[j];
            }
            y[i] = s / self.lower[i * self.n + i];
        }
        y
    }

    /// Solve `(L Lᵀ) y = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `L Lᵀ`, for reconstruction checks.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j.min(i) {
                    s += self.lower[i * n + k] * self.lower[j * n + k];
                }
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        SymMatrix { n, data }
    }
}

/// Cholesky factorization. Returns `None` when a pivot falls at or below
/// `1e-12 * max(1, max diagonal)`; callers treat `None` as "not PSD" and
/// decide whether that is a fallback condition or a hard error.
pub fn cholesky(s: &SymMatrix) -> Option<CholFactor> {
    let n = s.n();
    let max_diag = (0..n).map(|i| s.get(i, i)).fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * max_diag.max(1.0);
    let mut lower = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s.get(i, j);
            for k in 0..j {
                sum -= lower[i * n + k] * lower[j * n + k];
            }
            if i == j {
                // `!(sum > tol)` also rejects NaN pivots.
                if !(sum > tol) {
                    return None;
                }
                lower[i * n + i] = sum.sqrt();
            } else {
                lower[i * n + j] = sum / lower[j * n + j];
            }
        }
    }
    let log_det = 2.0 * (0..n).map(|i| lower[i * n + i].ln()).sum::<f64>();
    Some(CholFactor { n, lower, log_det })
}

/// Log-determinant of the matrix behind a Cholesky factor.
pub fn log_det_psd(f: &CholFactor) -> f64 {
    f.log_det()
}

/// All eigenvalues of a symmetric matrix via cyclic Jacobi, ascending.
pub fn eigenvalues(s: &SymMatrix) -> Vec<f64> {
    let n = s.n();
    if n == 1 {
        return vec![s.get(0, 0)];
    }
    let mut a = s.data.clone();
    let scale = s.data.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-13 * scale;
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // Stable rotation: t = sign(theta) / (|theta| + sqrt(theta^2 + 1)).
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s_ = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s_ * akq;
                    a[k * n + q] = s_ * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s_ * aqk;
                    a[q * n + k] = s_ * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eigs
}

/// Smallest eigenvalue of a symmetric matrix, accurate to about 1e-8.
pub fn min_eigenvalue(s: &SymMatrix) -> f64 {
    eigenvalues(s)[0]
}

/// Deterministic, splittable random stream. The base seed plus a chain of
/// stream indices fully determines every draw, so disjoint streams can be
/// consumed concurrently without coordination.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    chacha: ChaCha12Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, chacha: ChaCha12Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream identified by `id`. Splitting does not
    /// perturb or depend on this stream's position.
    pub fn stream(&self, id: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(id.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    /// Child stream keyed by two indices (e.g. epoch and sample).
    pub fn stream2(&self, a: u64, b: u64) -> Rng {
        self.stream(a).stream(b)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.chacha.gen::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.chacha.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    pub fn gen_range_usize(&mut self, n: usize) -> usize {
        self.chacha.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.chacha);
    }
}

/// Draw from `N(mean, temp² · P⁻¹)` where `P = L Lᵀ` is the precision matrix
/// behind `prec_factor`: returns `mean + temp · y` with `Lᵀ y = ε`,
/// `ε ~ N(0, I)`. With `temp = 0` the mean is returned exactly.
pub fn sample_mvn_from_precision(
    mean: &[f64],
    prec_factor: &CholFactor,
    temp: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    assert_eq!(mean.len(), prec_factor.n(), "mean/precision dimension mismatch");
    let eps = rng.normal_vec(mean.len());
    let y = prec_factor.solve_upper(&eps);
    mean.iter().zip(&y).map(|(m, v)| m + temp * v).collect()
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} evaluated to {v}")))
    }
}

/// Central-difference gradient with per-coordinate step `h * (1 + |x_i|)`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let hi = h * (1.0 + x[i].abs());
        xp[i] = x[i] + hi;
        let fp = check_finite(f(&xp), "fd_gradient f(x+h)")?;
        xp[i] = x[i] - hi;
        let fm = check_finite(f(&xp), "fd_gradient f(x-h)")?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * hi);
    }
    Ok(g)
}

/// Central-difference Hessian (symmetrized) with per-coordinate steps
/// `h * (1 + |x_i|)`.
pub fn fd_hessian(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Result<SymMatrix> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let n = x.len();
    let f0 = check_finite(f(x), "fd_hessian f(x)")?;
    let steps: Vec<f64> = x.iter().map(|v| h * (1.0 + v.abs())).collect();
    let mut m = Matrix::zeros(n, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + steps[i];
        let fp = check_finite(f(&xp), "fd_hessian f(x+h)")?;
        xp[i] = x[i] - steps[i];
        let fm = check_finite(f(&xp), "fd_hessian f(x-h)")?;
        xp[i] = x[i];
        m.set(i, i, (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]));
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                xp[i] = x[i] + si * steps[i];
                xp[j] = x[j] + sj * steps[j];
                let v = check_finite(f(&xp), "fd_hessian corner")?;
                xp[i] = x[i];
                xp[j] = x[j];
                Ok(v)
            };
            let fpp = corner(1.0, 1.0)?;
            let fpm = corner(1.0, -1.0)?;
            let fmp = corner(-1.0, 1.0)?;
            let fmm = corner(-1.0, -1.0)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * steps[i] * steps[j]);
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    symmetrize(&m)
}

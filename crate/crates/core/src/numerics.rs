// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra and probability helpers.
//!
//! Everything here is `f64`, row-major and single-threaded so that identical
//! inputs always produce bit-identical outputs. General matrix products are
//! delegated to `matrixmultiply`; factorizations are written out directly.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative Frobenius residual that a regularized solve must reach.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;

/// Tolerance on the total mass of a [`Distribution`].
pub const DISTRIBUTION_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(n, m, rows.concat())
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(dim: usize, columns: &[&[f64]]) -> Result<Self> {
        let mut m = Self::zeros(dim, columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != dim {
                return Err(Error::Shape(format!(
                    "column {j} has length {}, expected {dim}",
                    col.len()
                )));
            }
            for (i, &v) in col.iter().enumerate() {
                m.data[i * m.cols + j] = v;
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            (&self.data, self.cols, 1),
            (&other.data, other.cols, 1),
            0.0,
            (&mut out.data, other.cols, 1),
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            1.0,
            (&self.data, self.cols, 1),
            (&other.data, 1, other.cols),
            0.0,
            (&mut out.data, other.rows, 1),
        );
        Ok(out)
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "mat_vec {}x{} by vector of {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add_assign {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

/// Strided operand: `(data, row_stride, col_stride)`.
pub(crate) type Operand<'a> = (&'a [f64], usize, usize);

/// `C = alpha·A·B + beta·C` for an `m×k` A and `k×n` B given by strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Operand<'_>,
    b: Operand<'_>,
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let (ad, rsa, csa) = a;
    let (bd, rsb, csb) = b;
    let (cd, rsc, csc) = c;
    assert!(k == 0 || ad.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || bd.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(cd.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index dgemm touches within the
    // three slices, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            ad.as_ptr(),
            rsa as isize,
            csa as isize,
            bd.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            cd.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense real vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector entry {bad}")));
        }
        Ok(Vector(data))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * s).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// ---------------------------------------------------------------------------
// Probability
// ---------------------------------------------------------------------------

/// Probability vector over a finite support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Distribution("empty support".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Distribution(format!(
                "entry {i} = {} is not a probability",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::Distribution(format!("mass {total} != 1")));
        }
        Ok(Self { probs })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Self::new(softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// `KL(p ‖ q) = Σ p·ln(p/q)`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Distribution(format!(
            "support sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::Distribution(format!(
                "q[{i}] = 0 where p[{i}] = {pi}"
            )));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

// ---------------------------------------------------------------------------
// Regularized solve
// ---------------------------------------------------------------------------

/// Solves `Δ = R·Kᵀ·(C + K·Kᵀ)⁻¹`.
///
/// `R` is `d_out×n`, `K` is `d_in×n` and `C` is a symmetric PSD `d_in×d_in`
/// matrix. The system matrix is factored with Cholesky and one step of
/// iterative refinement; the result is rejected unless the residual identity
/// `Δ(C + KKᵀ) = RKᵀ` holds to [`SOLVE_RESIDUAL_TOL`].
pub fn solve_regularized(r: &Matrix, k: &Matrix, c: &Matrix) -> Result<Matrix> {
    let (d_out, n) = r.shape();
    let d_in = k.rows();
    if k.cols() != n {
        return Err(Error::Shape(format!(
            "R has {n} columns but K has {}",
            k.cols()
        )));
    }
    if c.shape() != (d_in, d_in) {
        return Err(Error::Shape(format!(
            "C is {:?}, expected {d_in}x{d_in}",
            c.shape()
        )));
    }
    if !(r.is_finite() && k.is_finite() && c.is_finite()) {
        return Err(Error::NonFinite("solve operands".into()));
    }
    let scale = c.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for i in 0..d_in {
        for j in 0..i {
            if (c.get(i, j) - c.get(j, i)).abs() > 1e-10 * scale {
                return Err(Error::Invalid(format!("C is not symmetric at ({i}, {j})")));
            }
        }
    }

    let system = c.add(&k.matmul_t(k)?)?;
    // Δ·A = R·Kᵀ  ⇔  A·Δᵀ = K·Rᵀ since A is symmetric.
    let rhs = k.matmul_t(r)?;
    let chol = Cholesky::factor(&system)?;
    let mut x = chol.solve(&rhs);
    let residual = rhs.sub(&system.matmul(&x)?)?;
    let correction = chol.solve(&residual);
    x.add_assign(&correction)?;
    let delta = x.transpose();
    debug_assert_eq!(delta.shape(), (d_out, d_in));

    let rel = regularized_residual(&delta, r, k, c)?;
    if !(rel <= SOLVE_RESIDUAL_TOL) {
        return Err(Error::Singular(format!(
            "relative residual {rel:.3e} exceeds {SOLVE_RESIDUAL_TOL:.0e}; C + KKᵀ is ill-conditioned"
        )));
    }
    Ok(delta)
}

/// `‖Δ(C + KKᵀ) − RKᵀ‖_F / ‖RKᵀ‖_F`, or the absolute residual when `RKᵀ = 0`.
pub fn regularized_residual(delta: &Matrix, r: &Matrix, k: &Matrix, c: &Matrix) -> Result<f64> {
    let system = c.add(&k.matmul_t(k)?)?;
    let target = r.matmul_t(k)?;
    let diff = delta.matmul(&system)?.sub(&target)?.frobenius_norm();
    let denom = target.frobenius_norm();
    Ok(if denom > 0.0 { diff / denom } else { diff })
}

/// Lower-triangular Cholesky factor of an SPD matrix.
struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        let max_diag = (0..n).map(|i| a.get(i, i)).fold(0.0f64, f64::max);
        let floor = max_diag * n as f64 * f64::EPSILON;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for p in 0..j {
                d -= l[j * n + p] * l[j * n + p];
            }
            if !(d > floor) {
                return Err(Error::Singular(format!(
                    "pivot {j} is {d:.3e} (floor {floor:.3e}); keys are degenerate"
                )));
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    /// Solves `A·X = B` column by column.
    fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.n;
        let mut x = b.clone();
        let m = b.cols();
        let l = &self.l;
        for col in 0..m {
            for i in 0..n {
                let mut s = x.get(i, col);
                for p in 0..i {
                    s -= l[i * n + p] * x.get(p, col);
                }
                x.set(i, col, s / l[i * n + i]);
            }
            for i in (0..n).rev() {
                let mut s = x.get(i, col);
                for p in i + 1..n {
                    s -= l[p * n + i] * x.get(p, col);
                }
                x.set(i, col, s / l[i * n + i]);
            }
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Default finite-difference step, relative to each coordinate's scale.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Compares an analytic gradient `g` of `f` at `x` with central differences.
///
/// The step for coordinate `i` is `step · max(1, |x_i|)`. The returned error
/// is `max_i |g_i − fd_i|` divided by the larger of `‖g‖∞` and `‖fd‖∞`, and is
/// zero when both gradients vanish.
pub fn check_gradient<F>(mut f: F, x: &[f64], g: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if x.len() != g.len() {
        return Err(Error::Shape(format!(
            "point has {} coordinates, gradient {}",
            x.len(),
            g.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut fd = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("f near coordinate {i}")));
        }
        fd[i] = (up - down) / (2.0 * h);
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let scale = inf(g).max(inf(&fd));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let worst = g
        .iter()
        .zip(&fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(worst / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    /// Gauss-Jordan inverse with partial pivoting, independent of the
    /// Cholesky path used by `solve_regularized`.
    fn gauss_jordan_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = a.get(i, j);
            }
            aug[i][n + i] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[x][col].abs().partial_cmp(&aug[y][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, piv);
            let d = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= d;
            }
            for row in 0..n {
                if row != col {
                    let f = aug[row][col];
                    for j in 0..2 * n {
                        aug[row][j] -= f * aug[col][j];
                    }
                }
            }
        }
        Matrix::from_rows(&aug.iter().map(|r| r[n..].to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kl_identical_is_zero() {
        assert_eq!(kl_divergence(&dist(&[0.3, 0.7]), &dist(&[0.3, 0.7])).unwrap(), 0.0);
    }

    #[test]
    fn kl_point_mass_against_uniform() {
        let kl = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_direct_summation() {
        let p = [0.2, 0.8];
        let q = [0.6, 0.4];
        let oracle: f64 = 0.2 * (0.2f64 / 0.6).ln() + 0.8 * (0.8f64 / 0.4).ln();
        let kl = kl_divergence(&dist(&p), &dist(&q)).unwrap();
        assert!((kl - oracle).abs() < 1e-15, "{kl} vs {oracle}");
        assert!((kl - 0.334_795_286_714_334_3).abs() < 1e-12);
    }

    #[test]
    fn kl_errors() {
        assert!(kl_divergence(&dist(&[1.0]), &dist(&[0.5, 0.5])).is_err());
        assert!(kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![]).is_err());
        let d = Distribution::from_logits(&[1.0, 2.0, 3.0]).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solve_identity_keys_returns_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_matrix(&mut rng, 3, 4);
        let delta = solve_regularized(&r, &Matrix::identity(4), &Matrix::zeros(4, 4)).unwrap();
        for (a, b) in delta.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_single_key_halves_first_column() {
        let r = Matrix::from_rows(&[vec![1.5], vec![-2.0], vec![0.25]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let delta = solve_regularized(&r, &k, &Matrix::identity(2)).unwrap();
        let expected = [0.75, 0.0, -1.0, 0.0, 0.125, 0.0];
        for (a, b) in delta.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_matches_gauss_jordan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d_out, d_in, n) = (5, 8, 3);
        let r = random_matrix(&mut rng, d_out, n);
        let k = random_matrix(&mut rng, d_in, n);
        let k0 = random_matrix(&mut rng, d_in, 20);
        let c = k0.matmul_t(&k0).unwrap();
        let delta = solve_regularized(&r, &k, &c).unwrap();
        let inv = gauss_jordan_inverse(&c.add(&k.matmul_t(&k).unwrap()).unwrap());
        let oracle = r.matmul_t(&k).unwrap().matmul(&inv).unwrap();
        let err = delta.sub(&oracle).unwrap().frobenius_norm() / oracle.frobenius_norm();
        assert!(err < 1e-10, "relative error {err}");
    }

    #[test]
    fn solve_rejects_singular_and_bad_shapes() {
        let r = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        assert!(matches!(
            solve_regularized(&r, &k, &Matrix::zeros(2, 2)),
            Err(Error::Singular(_))
        ));
        assert!(matches!(
            solve_regularized(&r, &k, &Matrix::zeros(3, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gradient_check_quadratic_and_constant() {
        let x = [1.0, 2.0];
        let err = check_gradient(|v| Ok(v.iter().map(|a| a * a).sum()), &x, &[2.0, 4.0], DEFAULT_FD_STEP)
            .unwrap();
        assert!(err <= 1e-8, "{err}");
        let err = check_gradient(|_| Ok(3.0), &x, &[0.0, 0.0], DEFAULT_FD_STEP).unwrap();
        assert_eq!(err, 0.0);
        assert!(check_gradient(|_| Ok(f64::NAN), &x, &[0.0, 0.0], DEFAULT_FD_STEP).is_err());
    }

    #[test]
    fn solve_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_matrix(&mut rng, 4, 2);
        let k = random_matrix(&mut rng, 6, 2);
        let k0 = random_matrix(&mut rng, 6, 12);
        let c = k0.matmul_t(&k0).unwrap();
        let a = solve_regularized(&r, &k, &c).unwrap();
        let b = solve_regularized(&r, &k, &c).unwrap();
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(a in proptest::collection::vec(0.01f64..1.0, 2..8), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(0.01..1.0)).collect();
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let p = dist(&norm(&a));
            let q = dist(&norm(&b));
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn solve_residual_identity(seed in 0u64..200, d_in in 2usize..16, n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_matrix(&mut rng, 3, n);
            let k = random_matrix(&mut rng, d_in, n);
            let k0 = random_matrix(&mut rng, d_in, d_in + 4);
            let c = k0.matmul_t(&k0).unwrap();
            let delta = solve_regularized(&r, &k, &c).unwrap();
            prop_assert!(regularized_residual(&delta, &r, &k, &c).unwrap() <= SOLVE_RESIDUAL_TOL);
        }
    }
}

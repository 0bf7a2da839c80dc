//! Dense small-matrix linear algebra, generic over the scalar field.
//!
//! Everything here targets the low dimensions used by the samplers (d up to a
//! few dozen): row-major storage, cyclic Jacobi eigenfactorisation for
//! symmetric positive definite matrices, Gaussian log-densities and
//! divergences on top of the factor, and the sliced 1-Wasserstein distance
//! between sample sets.
//!
//! In dual mode, rotations whose angle is zero in value are still applied so
//! the factor's tangents converge along with the values; branch decisions
//! themselves resolve on values only.

use crate::rng::RngStream;
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NonSymmetric(f64),
    #[error("matrix is not positive definite (eigenvalue {0:.3e} after jitter)")]
    NonPositive(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty input")]
    EmptyInput,
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        assert!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn lift(m: &Matrix<f64>) -> Self {
        Matrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data.iter().map(|&x| S::lift(x)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn values(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.value()).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                let (orow, out_row) = (other.row(k), out.row_mut(i));
                for j in 0..orow.len() {
                    out_row[j] = a.mul_add(orow[j], out_row[j]);
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(self.cols, x.len(), "dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, c: S) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * c).collect(),
        }
    }

    /// Largest absolute value, by value.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.value().abs())
            .fold(0.0, f64::max)
    }

    /// Solve `self * x = rhs` by Gaussian elimination with partial pivoting
    /// (pivot choice by value). Intended for small well-conditioned systems.
    pub fn solve(&self, rhs: &[S]) -> Result<Vec<S>, LinalgError> {
        let n = self.rows;
        if self.cols != n || rhs.len() != n {
            return Err(LinalgError::DimensionMismatch(format!(
                "solve needs square matrix and matching rhs, got {}x{} and {}",
                self.rows,
                self.cols,
                rhs.len()
            )));
        }
        let mut a = self.clone();
        let mut b = rhs.to_vec();
        for col in 0..n {
            let mut pivot = col;
            let mut best = a[(col, col)].value().abs();
            for r in col + 1..n {
                let v = a[(r, col)].value().abs();
                if v > best {
                    best = v;
                    pivot = r;
                }
            }
            if best == 0.0 {
                return Err(LinalgError::NonPositive(0.0));
            }
            if pivot != col {
                for j in 0..n {
                    let tmp = a[(col, j)];
                    a[(col, j)] = a[(pivot, j)];
                    a[(pivot, j)] = tmp;
                }
                b.swap(col, pivot);
            }
            let inv = S::ONE / a[(col, col)];
            for r in col + 1..n {
                let f = a[(r, col)] * inv;
                for j in col..n {
                    let v = a[(col, j)];
                    a[(r, j)] = a[(r, j)] - f * v;
                }
                let bc = b[col];
                b[r] = b[r] - f * bc;
            }
        }
        for col in (0..n).rev() {
            let mut acc = b[col];
            for j in col + 1..n {
                acc = acc - a[(col, j)] * b[j];
            }
            b[col] = acc / a[(col, col)];
        }
        Ok(b)
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    #[inline(always)]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for Matrix<S> {
    #[inline(always)]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

#[inline(always)]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::ZERO;
    for i in 0..a.len() {
        acc = a[i].mul_add(b[i], acc);
    }
    acc
}

pub fn sub_vec<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
}

pub fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Eigenfactorisation of a symmetric positive definite matrix:
/// `m = vecs * diag(vals) * vecs^T` with eigenvalues sorted ascending.
#[derive(Clone, Debug)]
pub struct SpdFactor<S> {
    dim: usize,
    /// Columns are eigenvectors.
    vecs: Matrix<S>,
    vals: Vec<S>,
}

/// Default jitter policy: `1e-9 * trace/d`, floored so an all-zero matrix
/// (a single-particle covariance) still factorises.
pub fn default_jitter(trace_over_dim: f64) -> f64 {
    (1e-9 * trace_over_dim.max(0.0)).max(1e-15)
}

const JACOBI_MAX_SWEEPS: usize = 64;
/// Extra sweeps after value convergence; they are no-ops in value but polish
/// the tangents in dual mode.
const JACOBI_POLISH_SWEEPS: usize = 2;

/// Factorise a symmetric positive definite matrix by cyclic Jacobi rotation.
///
/// `jitter * I` is added before factorisation (`None` selects the default
/// policy) and eigenvalues are clamped from below at `jitter`.
///
/// Dual-mode caveat: when two eigenvalues coincide exactly in value, the
/// tangent coupling between their eigenvectors is left unresolved (the
/// eigenvector derivative is genuinely undefined there). Quantities that
/// depend on the matrix only through its spectrum — log-determinant, traces
/// of spectral functions — keep exact tangents regardless.
pub fn spd_eigh<S: Scalar>(m: &Matrix<S>, jitter: Option<f64>) -> Result<SpdFactor<S>, LinalgError> {
    let d = m.rows();
    if d == 0 {
        return Err(LinalgError::EmptyInput);
    }
    if m.cols() != d {
        return Err(LinalgError::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m.max_abs().max(1e-300);
    let mut asym: f64 = 0.0;
    for i in 0..d {
        for j in i + 1..d {
            asym = asym.max((m[(i, j)].value() - m[(j, i)].value()).abs());
        }
    }
    if asym > 1e-8 * scale {
        return Err(LinalgError::NonSymmetric(asym / scale));
    }

    let mut trace = 0.0;
    for i in 0..d {
        trace += m[(i, i)].value();
    }
    let jitter = jitter.unwrap_or_else(|| default_jitter(trace / d as f64));

    // Work on the symmetrised jittered copy.
    let mut a = Matrix::<S>::from_fn(d, d, |i, j| {
        let avg = (m[(i, j)] + m[(j, i)]) * S::lift(0.5);
        if i == j {
            avg + S::lift(jitter)
        } else {
            avg
        }
    });
    let mut q = Matrix::<S>::identity(d);

    let mut polish = 0usize;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off: f64 = 0.0;
        let mut diag: f64 = 0.0;
        for i in 0..d {
            diag += a[(i, i)].value().abs();
            for j in i + 1..d {
                off += a[(i, j)].value() * a[(i, j)].value();
            }
        }
        if off.sqrt() <= 1e-15 * diag.max(1e-300) {
            polish += 1;
            if polish > JACOBI_POLISH_SWEEPS {
                break;
            }
        } else {
            polish = 0;
        }
        for p in 0..d {
            for r in p + 1..d {
                jacobi_rotate(&mut a, &mut q, p, r);
            }
        }
    }

    let mut vals: Vec<S> = (0..d).map(|i| a[(i, i)]).collect();
    for (i, v) in vals.iter().enumerate() {
        if v.value() <= 0.0 {
            let _ = i;
            return Err(LinalgError::NonPositive(v.value()));
        }
    }
    if jitter > 0.0 {
        for v in vals.iter_mut() {
            *v = v.max_val(S::lift(jitter));
        }
    }

    // Sort eigenpairs ascending by value for a deterministic layout.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| vals[i].value().partial_cmp(&vals[j].value()).unwrap());
    let sorted_vals: Vec<S> = order.iter().map(|&i| vals[i]).collect();
    let vecs = Matrix::from_fn(d, d, |i, j| q[(i, order[j])]);

    Ok(SpdFactor {
        dim: d,
        vecs,
        vals: sorted_vals,
    })
}

/// One Jacobi rotation zeroing `a[p][r]`, applied even when the angle is zero
/// in value so dual tangents keep flowing.
fn jacobi_rotate<S: Scalar>(a: &mut Matrix<S>, q: &mut Matrix<S>, p: usize, r: usize) {
    let apr = a[(p, r)];
    let app0 = a[(p, p)];
    let arr0 = a[(r, r)];
    let diff = arr0 - app0;
    let t = if apr.value() == 0.0 && diff.value() == 0.0 {
        // Degenerate pair with nothing to rotate; the derivative is not
        // defined here, keep the identity.
        return;
    } else if apr.value().abs() < 1e-8 * diff.value().abs() {
        // First-order angle, avoids overflow in the cotangent formula.
        apr / diff
    } else {
        let tau = diff / (apr * S::lift(2.0));
        let root = (S::ONE + tau * tau).sqrt();
        if tau.value() >= 0.0 {
            S::ONE / (tau + root)
        } else {
            -(S::ONE) / (-tau + root)
        }
    };
    let c = S::ONE / (S::ONE + t * t).sqrt();
    let s = t * c;

    let d = a.rows();
    for k in 0..d {
        let akp = a[(k, p)];
        let akr = a[(k, r)];
        a[(k, p)] = c * akp - s * akr;
        a[(k, r)] = s * akp + c * akr;
    }
    for k in 0..d {
        let apk = a[(p, k)];
        let ark = a[(r, k)];
        a[(p, k)] = c * apk - s * ark;
        a[(r, k)] = s * apk + c * ark;
    }
    // The exact rotated diagonal, written in its cancellation-free form; the
    // eliminated pair is forced to exact (dual) zero.
    let corr = t * apr;
    a[(p, p)] = app0 - corr;
    a[(r, r)] = arr0 + corr;
    a[(p, r)] = S::ZERO;
    a[(r, p)] = S::ZERO;
    for k in 0..d {
        let qkp = q[(k, p)];
        let qkr = q[(k, r)];
        q[(k, p)] = c * qkp - s * qkr;
        q[(k, r)] = s * qkp + c * qkr;
    }
}

impl<S: Scalar> SpdFactor<S> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eigenvalues(&self) -> &[S] {
        &self.vals
    }

    pub fn eigenvectors(&self) -> &Matrix<S> {
        &self.vecs
    }

    pub fn log_det(&self) -> S {
        let mut acc = S::ZERO;
        for &v in &self.vals {
            acc += v.ln();
        }
        acc
    }

    /// Rotate into the eigenbasis: `vecs^T x`.
    pub fn rotate(&self, x: &[S]) -> Vec<S> {
        (0..self.dim)
            .map(|j| {
                let mut acc = S::ZERO;
                for i in 0..self.dim {
                    acc = self.vecs[(i, j)].mul_add(x[i], acc);
                }
                acc
            })
            .collect()
    }

    /// Rotate back from the eigenbasis: `vecs y`.
    pub fn unrotate(&self, y: &[S]) -> Vec<S> {
        (0..self.dim)
            .map(|i| {
                let mut acc = S::ZERO;
                for j in 0..self.dim {
                    acc = self.vecs[(i, j)].mul_add(y[j], acc);
                }
                acc
            })
            .collect()
    }

    /// `m x` without forming `m`.
    pub fn mul_vec(&self, x: &[S]) -> Vec<S> {
        let mut y = self.rotate(x);
        for (yi, &l) in y.iter_mut().zip(self.vals.iter()) {
            *yi = *yi * l;
        }
        self.unrotate(&y)
    }

    /// `m^{-1} x` without forming the inverse.
    pub fn solve_vec(&self, x: &[S]) -> Vec<S> {
        let mut y = self.rotate(x);
        for (yi, &l) in y.iter_mut().zip(self.vals.iter()) {
            *yi = *yi / l;
        }
        self.unrotate(&y)
    }

    /// `x^T m^{-1} x`.
    pub fn quad_form_inv(&self, x: &[S]) -> S {
        let y = self.rotate(x);
        let mut acc = S::ZERO;
        for (yi, &l) in y.iter().zip(self.vals.iter()) {
            acc += *yi * *yi / l;
        }
        acc
    }

    /// `m^{1/2} z`, the sampling transform for `N(0, m)`.
    pub fn sqrt_mul(&self, z: &[S]) -> Vec<S> {
        let mut y = vec![S::ZERO; self.dim];
        for (j, (yj, &l)) in y.iter_mut().zip(self.vals.iter()).enumerate() {
            *yj = l.sqrt() * z[j];
        }
        self.unrotate(&y)
    }

    pub fn to_matrix(&self) -> Matrix<S> {
        spd_fn(self, |l| l)
    }
}

/// Apply a scalar function to the spectrum: `vecs * diag(g(vals)) * vecs^T`.
pub fn spd_fn<S: Scalar>(f: &SpdFactor<S>, g: impl Fn(S) -> S) -> Matrix<S> {
    let d = f.dim;
    let gv: Vec<S> = f.vals.iter().map(|&l| g(l)).collect();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = S::ZERO;
            for k in 0..d {
                acc += f.vecs[(i, k)] * gv[k] * f.vecs[(j, k)];
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc;
        }
    }
    out
}

/// Log-density of `N(mean, cov)` at `x`.
pub fn gaussian_logpdf<S: Scalar>(
    x: &[S],
    mean: &[S],
    cov: &SpdFactor<S>,
) -> Result<S, LinalgError> {
    let d = cov.dim();
    if x.len() != d || mean.len() != d {
        return Err(LinalgError::DimensionMismatch(format!(
            "x has {}, mean has {}, cov has {}",
            x.len(),
            mean.len(),
            d
        )));
    }
    let diff = sub_vec(x, mean);
    let quad = cov.quad_form_inv(&diff);
    let log_norm = cov.log_det() + S::lift(d as f64 * (std::f64::consts::TAU).ln());
    Ok(S::lift(-0.5) * (quad + log_norm))
}

/// `KL(N(m1, f1) || N(m2, f2))`.
pub fn gaussian_kl<S: Scalar>(
    m1: &[S],
    f1: &SpdFactor<S>,
    m2: &[S],
    f2: &SpdFactor<S>,
) -> Result<S, LinalgError> {
    let d = f1.dim();
    if f2.dim() != d || m1.len() != d || m2.len() != d {
        return Err(LinalgError::DimensionMismatch(
            "KL needs matching dimensions".to_string(),
        ));
    }
    // trace(f2^{-1} f1) via the basis change b = vecs2^T vecs1.
    let mut tr = S::ZERO;
    for i in 0..d {
        // Row i of vecs2^T is column i of vecs2.
        for j in 0..d {
            let mut bij = S::ZERO;
            for k in 0..d {
                bij = f2.vecs[(k, i)].mul_add(f1.vecs[(k, j)], bij);
            }
            tr += bij * bij * f1.vals[j] / f2.vals[i];
        }
    }
    let diff = sub_vec(m2, m1);
    let quad = f2.quad_form_inv(&diff);
    let log_det_ratio = f2.log_det() - f1.log_det();
    Ok(S::lift(0.5) * (tr + quad - S::lift(d as f64) + log_det_ratio))
}

/// Weighted mean and covariance of row-stacked samples.
///
/// Weights must be normalised; the covariance is built from its upper
/// triangle so the result is exactly symmetric.
pub fn weighted_mean_cov<S: Scalar>(
    particles: &Matrix<S>,
    weights: &[S],
) -> Result<(Vec<S>, Matrix<S>), LinalgError> {
    let n = particles.rows();
    let d = particles.cols();
    if n == 0 || d == 0 {
        return Err(LinalgError::EmptyInput);
    }
    if weights.len() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "{n} particles but {} weights",
            weights.len()
        )));
    }
    let mut mean = vec![S::ZERO; d];
    for i in 0..n {
        let row = particles.row(i);
        let w = weights[i];
        for j in 0..d {
            mean[j] = w.mul_add(row[j], mean[j]);
        }
    }
    let mut cov = Matrix::zeros(d, d);
    let mut diff = vec![S::ZERO; d];
    for i in 0..n {
        let row = particles.row(i);
        let w = weights[i];
        for j in 0..d {
            diff[j] = row[j] - mean[j];
        }
        for j in 0..d {
            let wdj = w * diff[j];
            for k in j..d {
                cov[(j, k)] = wdj.mul_add(diff[k], cov[(j, k)]);
            }
        }
    }
    for j in 0..d {
        for k in j + 1..d {
            cov[(k, j)] = cov[(j, k)];
        }
    }
    Ok((mean, cov))
}

/// Sliced 1-Wasserstein distance between two sample sets (rows are samples).
///
/// Projections are Gaussian directions normalised to unit length, drawn from
/// an explicit seed so the distance is deterministic and symmetric in its
/// arguments. Each projected pair contributes the exact quantile-coupling
/// integral, which handles unequal sample counts.
pub fn sliced_w1<S: Scalar>(
    a: &Matrix<S>,
    b: &Matrix<S>,
    n_projections: usize,
    seed: u64,
) -> Result<S, LinalgError> {
    let d = a.cols();
    if b.cols() != d {
        return Err(LinalgError::DimensionMismatch(format!(
            "sample dimensions differ: {} vs {}",
            d,
            b.cols()
        )));
    }
    if a.rows() == 0 || b.rows() == 0 || n_projections == 0 {
        return Err(LinalgError::EmptyInput);
    }
    let root = RngStream::from_seed(seed);
    let mut acc = S::ZERO;
    let mut pa: Vec<S> = Vec::with_capacity(a.rows());
    let mut pb: Vec<S> = Vec::with_capacity(b.rows());
    for p in 0..n_projections {
        let mut stream = root.split(p as u64);
        let mut v = vec![0.0; d];
        loop {
            let mut norm2 = 0.0;
            for vi in v.iter_mut() {
                *vi = stream.draw_normal();
                norm2 += *vi * *vi;
            }
            if norm2 > 1e-24 {
                let inv = 1.0 / norm2.sqrt();
                for vi in v.iter_mut() {
                    *vi *= inv;
                }
                break;
            }
        }
        let vs: Vec<S> = v.iter().map(|&x| S::lift(x)).collect();
        pa.clear();
        pb.clear();
        for i in 0..a.rows() {
            pa.push(dot(a.row(i), &vs));
        }
        for i in 0..b.rows() {
            pb.push(dot(b.row(i), &vs));
        }
        pa.sort_unstable_by(|x, y| x.value().partial_cmp(&y.value()).unwrap());
        pb.sort_unstable_by(|x, y| x.value().partial_cmp(&y.value()).unwrap());
        acc += quantile_w1(&pa, &pb);
    }
    Ok(acc / S::lift(n_projections as f64))
}

/// Exact 1-d W1 between empirical distributions given sorted samples.
fn quantile_w1<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len();
    let m = b.len();
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut q = 0.0f64;
    let mut acc = S::ZERO;
    while ia < n && ib < m {
        let qa = (ia + 1) as f64 / n as f64;
        let qb = (ib + 1) as f64 / m as f64;
        let qn = qa.min(qb);
        acc += S::lift(qn - q) * (a[ia] - b[ib]).abs();
        q = qn;
        if qa <= qn + 1e-18 {
            ia += 1;
        }
        if qb <= qn + 1e-18 {
            ib += 1;
        }
    }
    acc
}

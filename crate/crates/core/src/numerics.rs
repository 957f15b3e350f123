//! Dense row-major matrices and the kernels the rest of the crate builds on:
//! row softmax, layer normalisation, GELU, a one-sided Jacobi SVD and
//! orthogonal projector construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense row-major `rows x cols` matrix of `f64`.
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| invalid(format!("matrix shape {rows}x{cols} overflows")))?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                context: format!("matrix data for {rows}x{cols}"),
                expected,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: format!("row {i}"),
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// `n x 1` column matrix.
    pub fn column_vector(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("{what} contains non-finite entries")))
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "matmul {}x{} * {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
                expected: self.cols,
                found: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T`, the natural product for weights stored as `out x in`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "matmul_t {}x{} * ({}x{})^T",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
                expected: self.cols,
                found: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * self`.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..self.cols {
                    g.data[i * self.cols + j] += a * row[j];
                }
            }
        }
        for i in 0..self.cols {
            for j in 0..i {
                g.data[i * self.cols + j] = g.data[j * self.cols + i];
            }
        }
        g
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "mat_vec".into(),
                expected: self.cols,
                found: v.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "elementwise {}x{} vs {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
                expected: self.data.len(),
                found: rhs.data.len(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute elementwise difference; `f64::INFINITY` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Dense row-major three-axis array, used for `heads x J x J` attention stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self {
            dims: [d0, d1, d2],
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let expected = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| invalid("tensor shape overflows"))?;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                context: format!("tensor data for {:?}", dims),
                expected,
                found: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    /// Stacks equally shaped matrices along the leading axis.
    pub fn stack(slabs: &[Matrix]) -> Result<Self> {
        let (r, c) = slabs.first().map_or((0, 0), Matrix::shape);
        let mut data = Vec::with_capacity(slabs.len() * r * c);
        for s in slabs {
            if s.shape() != (r, c) {
                return Err(invalid("cannot stack matrices of different shapes"));
            }
            data.extend_from_slice(s.as_slice());
        }
        Ok(Self {
            dims: [slabs.len(), r, c],
            data,
        })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Raw row-major view of slab `i`.
    pub fn slab_slice(&self, i: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn slab(&self, i: usize) -> Matrix {
        Matrix {
            rows: self.dims[1],
            cols: self.dims[2],
            data: self.slab_slice(i).to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

/// Which entries of a square score matrix take part in the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Positions strictly above the diagonal are excluded and come out as exact zeros.
    Causal,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix, mask: Mask) -> Result<Matrix> {
    m.ensure_finite("softmax input")?;
    if mask == Mask::Causal && m.rows() != m.cols() {
        return Err(invalid(format!(
            "causal mask needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let valid = match mask {
            Mask::None => m.cols(),
            Mask::Causal => r + 1,
        };
        let row = &m.row(r)[..valid];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out.row_mut(r)[..valid];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = libm::exp(v - max);
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalisation without affine parameters.
pub fn layer_norm_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let n = m.cols() as f64;
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// Thin singular value decomposition `m = u * diag(sigma) * vt`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `m x r`, orthonormal columns.
    pub u: Matrix,
    /// `r` values, descending, nonnegative.
    pub sigma: Vec<f64>,
    /// `r x n`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.sigma.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformable")
    }

    /// `n x k` matrix whose columns are the first `k` right singular vectors.
    pub fn right_vectors(&self, k: usize) -> Matrix {
        let n = self.vt.cols();
        Matrix::from_fn(n, k, |r, c| self.vt[(c, r)])
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD, run on whichever orientation has the
/// smaller Gram dimension.
///
/// Signs are fixed so that the largest-magnitude entry of every right
/// singular vector is nonnegative (first occurrence wins on ties).
pub fn svd_thin(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(invalid("svd of an empty matrix"));
    }
    m.ensure_finite("svd input")?;

    let (u, sigma, vt) = if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m);
        (u, s, v.transpose())
    } else {
        // m^T = U' S V'^T  =>  m = V' S U'^T
        let (u_t, s, v_t) = jacobi_tall(&m.transpose());
        (v_t, s, u_t.transpose())
    };

    let mut out = SvdResult { u, sigma, vt };
    fix_signs(&mut out);
    Ok(out)
}

/// Returns `(u: m x n, sigma: n, v: n x n)` for `m >= n`, sorted descending.
fn jacobi_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let (m, n) = a.shape();
    // Column-major working copies.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || libm::fabs(gamma) <= tol * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t =
                    libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = cols.iter().map(|c| norm(c)).enumerate().collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let cutoff = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (dst, &(src, s)) in order.iter().enumerate() {
        sigma.push(s);
        v_sorted.set_column(dst, &v[src]);
        if s > cutoff && s > 0.0 {
            let col: Vec<f64> = cols[src].iter().map(|x| x / s).collect();
            u.set_column(dst, &col);
        } else {
            missing.push(dst);
        }
    }
    complete_orthonormal_columns(&mut u, &missing);
    (u, sigma, v_sorted)
}

fn rotate_pair(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = vecs.split_at_mut(q);
    let vp = &mut head[p];
    let vq = &mut tail[0];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed columns with unit vectors orthogonal to all other columns.
fn complete_orthonormal_columns(u: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|c| !missing.contains(c)).collect();
    for &target in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for axis in 0..m {
            let mut cand = vec![0.0; m];
            cand[axis] = 1.0;
            for _ in 0..2 {
                for &f in &filled {
                    let col = u.column(f);
                    let proj = dot(&cand, &col);
                    for (x, y) in cand.iter_mut().zip(&col) {
                        *x -= proj * y;
                    }
                }
            }
            let nrm = norm(&cand);
            if best.as_ref().is_none_or(|b| nrm > b.0) {
                best = Some((nrm, cand));
            }
        }
        let (nrm, mut cand) = best.expect("at least one candidate axis");
        for x in cand.iter_mut() {
            *x /= nrm;
        }
        u.set_column(target, &cand);
        filled.push(target);
    }
}

fn fix_signs(svd: &mut SvdResult) {
    for r in 0..svd.vt.rows() {
        let row = svd.vt.row(r);
        let mut pivot = 0;
        for (i, v) in row.iter().enumerate() {
            if libm::fabs(*v) > libm::fabs(row[pivot]) {
                pivot = i;
            }
        }
        if row[pivot] < 0.0 {
            for v in svd.vt.row_mut(r) {
                *v = -*v;
            }
            for i in 0..svd.u.rows() {
                svd.u[(i, r)] = -svd.u[(i, r)];
            }
        }
    }
}

pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Largest entry of `|v^T v - I|`.
pub fn orthonormality_deviation(v: &Matrix) -> f64 {
    v.gram().max_abs_diff(&Matrix::identity(v.cols()))
}

/// `P = v_k v_k^T` for a basis with orthonormal columns.
pub fn projector_from_basis(v_k: &Matrix) -> Result<Matrix> {
    v_k.ensure_finite("projector basis")?;
    let deviation = orthonormality_deviation(v_k);
    if deviation > ORTHONORMAL_TOL {
        return Err(Error::Precondition {
            what: format!(
                "basis columns ({}x{}) are not orthonormal",
                v_k.rows(),
                v_k.cols()
            ),
            deviation,
        });
    }
    v_k.matmul_t(v_k)
}

//! Dense row-major matrices and singular value decomposition.
//!
//! The SVD is a one-sided Jacobi iteration: column pairs of a working copy
//! are rotated until every pair is numerically orthogonal, at which point
//! the column norms are the singular values. It is accurate to full
//! relative precision on the small and medium matrices this crate handles
//! and needs no external linear-algebra backend.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{invalid, shape_err};
use crate::math;
use crate::{Error, Result};

/// Stop rotating a column pair once `|a_p . a_q| <= TOL * |a_p| |a_q|`.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Singular values below `NULL_CUTOFF * sigma_max` get their left vector
/// rebuilt by basis completion; the normalised column is roundoff there.
const NULL_CUTOFF: f64 = 1e-13;

/// A real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Wraps a row-major buffer. Fails if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "buffer of length {} cannot hold a {}x{} matrix",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err!("row {} has {} entries, expected {}", i, r.len(), cols));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Outer product `q p^T`.
    pub fn outer(q: &[f64], p: &[f64]) -> Self {
        let mut m = Self::zeros(q.len(), p.len());
        for (i, &qi) in q.iter().enumerate() {
            for (j, &pj) in p.iter().enumerate() {
                m.data[i * p.len() + j] = qi * pj;
            }
        }
        m
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped matrices.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
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

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "{}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| math::abs(a - b))
            .fold(0.0, f64::max))
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(shape_err!(
                "cannot multiply {}x{} by {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
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

    /// `self^T * rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(shape_err!(
                "cannot multiply ({}x{})^T by {}x{}",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let b_row = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(shape_err!(
                "cannot multiply {}x{} by ({}x{})^T",
                self.rows,
                self.cols,
                rhs.rows,
                rhs.cols
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a_row, rhs.row(j));
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin SVD `A = left * diag(singular_values) * right^T`.
///
/// For an `m x n` input with `r = min(m, n)`, `left` is `m x r`, `right` is
/// `n x r`, and the singular values are sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub left: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub right: DenseMatrix,
}

impl SvdResult {
    pub fn rank_capacity(&self) -> usize {
        self.singular_values.len()
    }

    /// `left * diag(singular_values) * right^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let r = self.singular_values.len();
        let mut scaled = self.left.clone();
        for i in 0..scaled.rows() {
            for t in 0..r {
                let v = scaled.get(i, t) * self.singular_values[t];
                scaled.set(i, t, v);
            }
        }
        scaled
            .matmul_t(&self.right)
            .expect("SVD factors have consistent shapes")
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if a.rows == 0 || a.cols == 0 {
        return Err(invalid!("SVD of an empty {}x{} matrix", a.rows, a.cols));
    }
    if !a.is_finite() {
        return Err(invalid!("SVD input contains non-finite entries"));
    }

    // Work on the tall orientation; a wide matrix is handled via its transpose.
    let transposed = a.rows < a.cols;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = work.shape();

    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| work.column(c)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || math::abs(gamma) <= JACOBI_TOL * math::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (math::abs(zeta) + math::hypot(1.0, zeta));
                let c = 1.0 / math::hypot(1.0, t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| math::sqrt(dot(c, c))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: ties keep the Jacobi column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * NULL_CUTOFF;

    let mut left_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending_null = Vec::new();
    for (slot, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        if sigma > cutoff && sigma > 0.0 {
            left_cols.push(cols[src].iter().map(|x| x / sigma).collect());
        } else {
            left_cols.push(vec![0.0; m]);
            pending_null.push(slot);
        }
    }
    for slot in pending_null {
        left_cols[slot] = complete_basis(&left_cols, slot, m);
    }

    let singular_values: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let u = columns_to_matrix(&left_cols, m);
    let v_sorted: Vec<Vec<f64>> = order.iter().map(|&i| vcols[i].clone()).collect();
    let v = columns_to_matrix(&v_sorted, n);

    let (left, right) = if transposed { (v, u) } else { (u, v) };
    Ok(SvdResult {
        left,
        singular_values,
        right,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Unit vector orthogonal to every non-null column other than `slot`,
/// chosen as the standard basis vector with the largest residual.
fn complete_basis(cols: &[Vec<f64>], slot: usize, m: usize) -> Vec<f64> {
    let others: Vec<&Vec<f64>> = cols
        .iter()
        .enumerate()
        .filter(|(i, c)| *i != slot && c.iter().any(|&x| x != 0.0))
        .map(|(_, c)| c)
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        // Two Gram-Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for o in &others {
                let proj = dot(&v, o);
                for (vi, oi) in v.iter_mut().zip(o.iter()) {
                    *vi -= proj * oi;
                }
            }
        }
        let norm = math::sqrt(dot(&v, &v));
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, v));
        }
    }
    let (norm, mut v) = best.expect("m >= 1");
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn columns_to_matrix(cols: &[Vec<f64>], rows: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows, cols.len());
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            out.set(r, c, x);
        }
    }
    out
}

/// Rank-`k` truncation `sum_{i<k} gamma_i u_i v_i^T`.
pub fn low_rank_reconstruct(s: &SvdResult, k: usize) -> Result<DenseMatrix> {
    let r = s.singular_values.len();
    if k == 0 || k > r {
        return Err(Error::InvalidRank { rank: k, max: r });
    }
    let m = s.left.rows();
    let n = s.right.rows();
    let mut out = DenseMatrix::zeros(m, n);
    for t in 0..k {
        let g = s.singular_values[t];
        for i in 0..m {
            let gu = g * s.left.get(i, t);
            if gu == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o += gu * s.right.get(j, t);
            }
        }
    }
    Ok(out)
}

/// Frobenius norm of `G^T G - I` for a matrix with (supposedly) orthonormal columns.
pub fn orthonormality_defect(g: &DenseMatrix) -> f64 {
    let gram = g.t_matmul(g).expect("G^T G is always defined");
    let n = gram.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            let d = gram.get(i, j) - target;
            acc += d * d;
        }
    }
    math::sqrt(acc)
}

//! Singular-value spectra of posterior matrices and post-training low-rank
//! compression of mean-field standard deviations.

use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::linalg::{low_rank_reconstruct, svd, DenseMatrix};
use crate::math;
use crate::metrics::MetricSet;
use crate::model::{LayerPosterior, VariationalMlp};
use crate::{Error, Result};

/// Smallest standard deviation a compressed checkpoint may hold.
pub const ZERO_SIGMA_REPLACEMENT: f64 = 1e-12;

/// Singular values with their variance fractions `g_i^2 / sum g^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub variance_fractions: Vec<f64>,
    pub cumulative_fractions: Vec<f64>,
}

impl SpectrumReport {
    /// Cumulative fraction through the first `rank` values (1-based).
    pub fn cumulative_at(&self, rank: usize) -> f64 {
        let i = rank.clamp(1, self.cumulative_fractions.len()) - 1;
        self.cumulative_fractions[i]
    }
}

/// Spectrum of the raw (uncentred) matrix. An all-zero matrix puts its whole
/// mass on the first value.
pub fn spectrum(a: &DenseMatrix) -> Result<SpectrumReport> {
    let singular_values = svd(a)?.singular_values;
    let total: f64 = singular_values.iter().map(|g| g * g).sum();
    let variance_fractions: Vec<f64> = if total > 0.0 {
        singular_values.iter().map(|g| g * g / total).collect()
    } else {
        (0..singular_values.len()).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()
    };
    let mut running = 0.0;
    let cumulative_fractions = variance_fractions
        .iter()
        .map(|f| {
            running += f;
            running
        })
        .collect();
    Ok(SpectrumReport {
        singular_values,
        variance_fractions,
        cumulative_fractions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSigma {
    pub matrix: DenseMatrix,
    /// Entries the truncation pushed below the floor.
    pub clamped_count: usize,
}

/// Best rank-`k` approximation in Frobenius norm, before any clamping.
pub fn truncate_rank(a: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let s = svd(a)?;
    low_rank_reconstruct(&s, k)
}

/// Rank-`k` truncation of a positive sigma matrix, then `max(x, floor)`.
pub fn compress_sigma(a: &DenseMatrix, k: usize, floor: f64) -> Result<CompressedSigma> {
    if !(floor >= 0.0 && floor.is_finite()) {
        return Err(invalid!("floor must be a finite value >= 0, got {floor}"));
    }
    if a.as_slice().iter().any(|&x| !(x > 0.0)) {
        return Err(invalid!("sigma matrix must be strictly positive"));
    }
    let mut matrix = truncate_rank(a, k)?;
    let mut clamped_count = 0;
    for x in matrix.as_mut_slice() {
        if *x < floor {
            *x = floor;
            clamped_count += 1;
        }
    }
    Ok(CompressedSigma {
        matrix,
        clamped_count,
    })
}

/// Replace non-positive entries with [`ZERO_SIGMA_REPLACEMENT`].
pub fn promote_zeros(a: &DenseMatrix) -> DenseMatrix {
    a.map(|x| if x > 0.0 { x } else { ZERO_SIGMA_REPLACEMENT })
}

/// Reshape a `[k1, k2, c_in, c_out]` row-major tensor to
/// `(k1 * k2 * c_in) x c_out`; each column is one output filter.
pub fn flatten_conv(shape: &[usize], data: &[f64]) -> Result<DenseMatrix> {
    if shape.len() != 4 {
        return Err(shape_err!("expected a 4-axis tensor, got {} axes", shape.len()));
    }
    let rows = shape[0] * shape[1] * shape[2];
    let cols = shape[3];
    if rows * cols != data.len() {
        return Err(shape_err!("shape {:?} does not hold {} values", shape, data.len()));
    }
    DenseMatrix::from_vec(rows, cols, data.to_vec())
}

pub fn unflatten_conv(m: &DenseMatrix, shape: &[usize]) -> Result<Vec<f64>> {
    if shape.len() != 4 {
        return Err(shape_err!("expected a 4-axis tensor, got {} axes", shape.len()));
    }
    if m.rows() != shape[0] * shape[1] * shape[2] || m.cols() != shape[3] {
        return Err(shape_err!("{}x{} matrix does not fit shape {:?}", m.rows(), m.cols(), shape));
    }
    Ok(m.as_slice().to_vec())
}

/// Matrix view of a 2-axis or 4-axis tensor.
pub fn matrix_from_tensor(shape: &[usize], data: &[f64]) -> Result<DenseMatrix> {
    match shape.len() {
        2 => DenseMatrix::from_vec(shape[0], shape[1], data.to_vec()),
        4 => flatten_conv(shape, data),
        n => Err(shape_err!("cannot view a {n}-axis tensor as a matrix")),
    }
}

/// `b ~= q p^T` with `|q| = 1` and positive signs.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerFactors {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Factor a positive matrix as `q p^T`, which is the same as writing
/// `diag(vec(b))` as `diag(p) (x) diag(q)`. Returns `None` when the relative
/// Frobenius residual of the best rank-1 fit exceeds `tol`.
pub fn kronecker_diag_factorize(b: &DenseMatrix, tol: f64) -> Result<Option<KroneckerFactors>> {
    if let Some(bad) = b.as_slice().iter().find(|&&x| !(x > 0.0)) {
        return Err(invalid!("entries must be strictly positive, found {bad}"));
    }
    let s = svd(b)?;
    let gamma = s.singular_values[0];
    let mut q = s.left.column(0);
    let mut p: Vec<f64> = s.right.column(0).iter().map(|v| gamma * v).collect();
    if q.iter().sum::<f64>() < 0.0 {
        q.iter_mut().for_each(|x| *x = -*x);
        p.iter_mut().for_each(|x| *x = -*x);
    }
    let residual = b.sub(&DenseMatrix::outer(&q, &p))?.frobenius_norm() / b.frobenius_norm();
    Ok(if residual <= tol {
        Some(KroneckerFactors { p, q })
    } else {
        None
    })
}

/// Spectra of one layer's kernel mean and kernel sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpectra {
    pub layer: usize,
    pub means: SpectrumReport,
    pub sigmas: SpectrumReport,
}

pub fn analyze_model(model: &VariationalMlp) -> Result<Vec<LayerSpectra>> {
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(layer, l)| {
            Ok(LayerSpectra {
                layer,
                means: spectrum(l.kernel_mean())?,
                sigmas: spectrum(&l.kernel_sigma())?,
            })
        })
        .collect()
}

/// Outcome of compressing a checkpoint at one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub rank: usize,
    pub clamped_count: usize,
    pub pre_metrics: Option<MetricSet>,
    pub post_metrics: Option<MetricSet>,
}

/// Replace every kernel sigma of a mean-field model by its rank-`k`
/// compression, capped per layer at `min(m, n)` so layers already within
/// the rank are left as they are. Zeros left by the floor are promoted
/// before the log is stored. Returns the new model and the total clamped
/// count.
pub fn compress_model(model: &VariationalMlp, k: usize, floor: f64) -> Result<(VariationalMlp, usize)> {
    let arch = model.architecture();
    let max = (0..arch.num_layers())
        .map(|l| {
            let (m, n) = arch.layer_shape(l);
            m.min(n)
        })
        .max()
        .unwrap_or(0);
    if k == 0 || k > max {
        return Err(Error::InvalidRank { rank: k, max });
    }
    let mut out = model.clone();
    let mut clamped = 0;
    for layer in out.layers_mut() {
        let LayerPosterior::MeanField(p) = layer else {
            return Err(invalid!("only mean-field posteriors can be compressed"));
        };
        let (m, n) = p.kernel_mean.shape();
        let c = compress_sigma(&p.kernel_sigma(), k.min(m.min(n)), floor)?;
        clamped += c.clamped_count;
        p.kernel_log_sigma = promote_zeros(&c.matrix).map(math::ln);
    }
    Ok((out, clamped))
}

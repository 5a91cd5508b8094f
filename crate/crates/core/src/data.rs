//! In-memory datasets, preprocessing, splits and synthetic blobs.

use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::linalg::DenseMatrix;
use crate::rng::SeededRng;
use crate::Result;

/// Features (`N x d`) with integer labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(shape_err!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            ));
        }
        if labels.is_empty() {
            return Err(invalid!("dataset is empty"));
        }
        if num_classes == 0 {
            return Err(invalid!("num_classes must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid!("label {bad} outside 0..{num_classes}"));
        }
        if !features.is_finite() {
            return Err(invalid!("features contain non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> (DenseMatrix, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        (
            DenseMatrix::from_vec(indices.len(), d, data).expect("row lengths match"),
            labels,
        )
    }

    fn slice(&self, start: usize, end: usize) -> Self {
        let d = self.dim();
        let data = self.features.as_slice()[start * d..end * d].to_vec();
        Self {
            features: DenseMatrix::from_vec(end - start, d, data).expect("row lengths match"),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

/// Map pixel values in `[0, 255]` to `[-1, 1]` via `x / 127.5 - 1`.
pub fn normalize_minus_one_one(d: &Dataset) -> Result<Dataset> {
    if let Some(bad) = d
        .features
        .as_slice()
        .iter()
        .find(|&&x| !(0.0..=255.0).contains(&x))
    {
        return Err(invalid!("feature value {bad} outside [0, 255]"));
    }
    Ok(Dataset {
        features: d.features.map(|x| x / 127.5 - 1.0),
        labels: d.labels.clone(),
        num_classes: d.num_classes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
}

/// The last `validation_count` examples become the validation set.
pub fn holdout_split(d: &Dataset, validation_count: usize) -> Result<Split> {
    let n = d.len();
    if validation_count == 0 || validation_count >= n {
        return Err(invalid!(
            "validation count {validation_count} must be in 1..{n}"
        ));
    }
    let cut = n - validation_count;
    Ok(Split {
        train: d.slice(0, cut),
        validation: d.slice(cut, n),
    })
}

/// Unit-variance Gaussian clusters, one per class. Examples cycle through
/// the classes (`0, 1, .., C-1, 0, 1, ..`) so any tail split is balanced.
///
/// Class `c` is centred at `separation * (1 + floor(c / dim)) * e_(c mod dim)`
/// minus the mean of all centres, so every pair of centres is at least
/// `separation` apart and the layout works for any `num_classes` and `dim`.
pub fn synthetic_blobs(
    seed: u64,
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
) -> Result<Dataset> {
    if n_per_class == 0 || num_classes == 0 || dim == 0 {
        return Err(invalid!("blob counts must be positive"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(invalid!("separation must be positive, got {separation}"));
    }
    let mut centers = DenseMatrix::zeros(num_classes, dim);
    for c in 0..num_classes {
        centers.set(c, c % dim, separation * (1 + c / dim) as f64);
    }
    let centroid: Vec<f64> = (0..dim)
        .map(|j| centers.column(j).iter().sum::<f64>() / num_classes as f64)
        .collect();

    let mut rng = SeededRng::new(seed);
    let n = n_per_class * num_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for c in 0..num_classes {
            for j in 0..dim {
                data.push(centers.get(c, j) - centroid[j] + rng.standard_normal());
            }
            labels.push(c);
        }
    }
    Dataset::new(DenseMatrix::from_vec(n, dim, data)?, labels, num_classes)
}

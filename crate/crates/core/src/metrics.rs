//! Ensemble prediction and the predictive metrics: NLL, accuracy, Brier
//! score, ECE and the evaluation-time negative ELBO.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{invalid, shape_err};
use crate::linalg::DenseMatrix;
use crate::math;
use crate::model::{forward, nll_categorical, softmax_rows, VariationalMlp};
use crate::rng::SeededRng;
use crate::Result;

pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_EVAL_SAMPLES: usize = 100;

/// Class probabilities (`b x C`) with the true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub probs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl PredictiveDistribution {
    pub fn new(probs: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if probs.rows() != labels.len() {
            return Err(shape_err!("{} rows but {} labels", probs.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(invalid!("empty prediction set"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= probs.cols()) {
            return Err(invalid!("label {bad} outside 0..{}", probs.cols()));
        }
        Ok(Self { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn argmax(&self, r: usize) -> usize {
        let row = self.probs.row(r);
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        best
    }

    fn confidence(&self, r: usize) -> f64 {
        self.probs.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_fit(model: &VariationalMlp, data: &Dataset) -> Result<()> {
    let arch = model.architecture();
    if data.dim() != arch.input_width() {
        return Err(shape_err!(
            "data has {} features, network expects {}",
            data.dim(),
            arch.input_width()
        ));
    }
    if data.num_classes() > arch.num_classes() {
        return Err(shape_err!(
            "data has {} classes, network predicts {}",
            data.num_classes(),
            arch.num_classes()
        ));
    }
    Ok(())
}

/// Average of the softmax outputs over `num_samples` posterior draws.
pub fn ensemble_predict(
    model: &VariationalMlp,
    data: &Dataset,
    num_samples: usize,
    seed: u64,
) -> Result<PredictiveDistribution> {
    if num_samples == 0 {
        return Err(invalid!("need at least one posterior sample"));
    }
    check_fit(model, data)?;
    let mut rng = SeededRng::new(seed);
    let classes = model.architecture().num_classes();
    let mut total = vec![0.0; data.len() * classes];
    for _ in 0..num_samples {
        let weights = model.sample(&model.draw_noise(&mut rng))?;
        let probs = softmax_rows(&forward(&weights, data.features())?);
        for (acc, p) in total.iter_mut().zip(probs.as_slice()) {
            *acc += p;
        }
    }
    let probs = DenseMatrix::from_vec(data.len(), classes, total)?.map(|x| x / num_samples as f64);
    PredictiveDistribution::new(probs, data.labels().to_vec())
}

/// Fraction of rows whose argmax (lowest index on ties) is the label.
pub fn accuracy(pred: &PredictiveDistribution) -> f64 {
    let hits = (0..pred.len()).filter(|&r| pred.argmax(r) == pred.labels[r]).count();
    hits as f64 / pred.len() as f64
}

/// Mean of `-ln p[label]`, with `p` floored at `1e-12`.
pub fn nll(pred: &PredictiveDistribution) -> f64 {
    let total: f64 = pred
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -math::ln(pred.probs.get(r, y).max(PROB_FLOOR)))
        .sum();
    total / pred.len() as f64
}

/// Multiclass Brier score, in `[0, 2]`.
pub fn brier(pred: &PredictiveDistribution) -> f64 {
    let total: f64 = pred
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            pred.probs
                .row(r)
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    let d = p - if c == y { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    total / pred.len() as f64
}

/// Expected calibration error over `bins` equal-width, right-closed bins.
pub fn ece(pred: &PredictiveDistribution, bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(invalid!("ece needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for r in 0..pred.len() {
        let conf = pred.confidence(r);
        // bin b covers (b/bins, (b+1)/bins]
        let raw = math::ceil(conf * bins as f64 - 1e-12) - 1.0;
        let b = if raw < 0.0 { 0 } else { (raw as usize).min(bins - 1) };
        count[b] += 1;
        conf_sum[b] += conf;
        if pred.argmax(r) == pred.labels[r] {
            correct[b] += 1;
        }
    }
    let n = pred.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            nb / n * math::abs(correct[b] as f64 / nb - conf_sum[b] / nb)
        })
        .sum())
}

/// Per-example negative ELBO at full KL weight: Monte Carlo NLL over
/// `num_samples` draws plus `KL / dataset_size`.
pub fn neg_elbo_eval(
    model: &VariationalMlp,
    data: &Dataset,
    num_samples: usize,
    seed: u64,
    dataset_size: usize,
) -> Result<f64> {
    if num_samples == 0 {
        return Err(invalid!("need at least one posterior sample"));
    }
    if dataset_size == 0 {
        return Err(invalid!("dataset size must be positive"));
    }
    check_fit(model, data)?;
    let mut rng = SeededRng::new(seed);
    let mut total = 0.0;
    for _ in 0..num_samples {
        let weights = model.sample(&model.draw_noise(&mut rng))?;
        total += nll_categorical(&forward(&weights, data.features())?, data.labels())?;
    }
    Ok(total / num_samples as f64 + model.kl()? / dataset_size as f64)
}

/// The five headline metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub neg_elbo: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub brier: f64,
    pub ece: f64,
}

/// All metrics with one seed shared by the ELBO and the ensemble.
pub fn evaluate(
    model: &VariationalMlp,
    data: &Dataset,
    num_samples: usize,
    seed: u64,
    dataset_size: usize,
) -> Result<MetricSet> {
    let pred = ensemble_predict(model, data, num_samples, seed)?;
    Ok(MetricSet {
        neg_elbo: neg_elbo_eval(model, data, num_samples, seed, dataset_size)?,
        nll: nll(&pred),
        accuracy: accuracy(&pred),
        brier: brier(&pred),
        ece: ece(&pred, DEFAULT_ECE_BINS)?,
    })
}

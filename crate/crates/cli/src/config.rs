//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use ktied_core::data::{holdout_split, normalize_minus_one_one, synthetic_blobs, Dataset, Split};
use ktied_core::model::{PosteriorFamily, PriorSpec};
use ktied_core::schedule::AnnealSchedule;
use ktied_core::train::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::idx::load_idx_pair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        seed: u64,
        n_per_class: usize,
        num_classes: usize,
        dim: usize,
        separation: f64,
        validation_count: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        validation_count: usize,
        #[serde(default = "yes")]
        normalize: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Meanfield,
    Ktied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Fixed { sigma_p: f64 },
    HeScaled,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::Fixed {
            sigma_p: ktied_core::variational::IsotropicGaussianPrior::DEFAULT_SIGMA,
        }
    }
}

impl PriorConfig {
    pub fn to_spec(self) -> PriorSpec {
        match self {
            PriorConfig::Fixed { sigma_p } => PriorSpec::Fixed(sigma_p),
            PriorConfig::HeScaled => PriorSpec::HeScaled,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnnealConfig {
    StepWise {
        coefficient: f64,
        #[serde(default = "default_period")]
        period: u64,
    },
    EpochLinear {
        epochs_to_full: u64,
    },
    #[default]
    Constant,
}

fn default_period() -> u64 {
    AnnealSchedule::DEFAULT_PERIOD
}

impl AnnealConfig {
    pub fn to_schedule(self) -> AnnealSchedule {
        match self {
            AnnealConfig::StepWise { coefficient, period } => AnnealSchedule {
                period,
                ..AnnealSchedule::step_wise(coefficient)
            },
            AnnealConfig::EpochLinear { epochs_to_full } => AnnealSchedule::epoch_linear(epochs_to_full),
            AnnealConfig::Constant => AnnealSchedule::constant(),
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    128
}
fn default_max_steps() -> u64 {
    1000
}
fn default_eval_every() -> u64 {
    100
}
fn one() -> usize {
    1
}
fn default_eval_samples() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub architecture: Vec<usize>,
    pub posterior_family: FamilyName,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default)]
    pub anneal: AnnealConfig,
    #[serde(default = "one")]
    pub num_mc_samples: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub early_stopping: bool,
    pub output_dir: PathBuf,
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{name}: {msg}"))
}

fn positive_real(name: &str, x: f64) -> CliResult<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(field(name, format!("must be a positive finite number, got {x}")))
    }
}

fn positive_int(name: &str, x: u64) -> CliResult<()> {
    if x > 0 {
        Ok(())
    } else {
        Err(field(name, "must be positive"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Field-level checks; nothing is computed before these pass.
    pub fn validate(&self) -> CliResult<()> {
        match &self.dataset {
            DatasetConfig::Blobs {
                n_per_class,
                num_classes,
                dim,
                separation,
                validation_count,
                ..
            } => {
                positive_int("dataset.n_per_class", *n_per_class as u64)?;
                positive_int("dataset.num_classes", *num_classes as u64)?;
                positive_int("dataset.dim", *dim as u64)?;
                positive_real("dataset.separation", *separation)?;
                let n = n_per_class * num_classes;
                if *validation_count == 0 || *validation_count >= n {
                    return Err(field(
                        "dataset.validation_count",
                        format!("must be in 1..{n}, got {validation_count}"),
                    ));
                }
                if self.architecture.first() != Some(dim) {
                    return Err(field("architecture", format!("input width must equal dataset.dim = {dim}")));
                }
                if self.architecture.last() != Some(num_classes) {
                    return Err(field(
                        "architecture",
                        format!("output width must equal dataset.num_classes = {num_classes}"),
                    ));
                }
            }
            DatasetConfig::Idx { validation_count, .. } => {
                positive_int("dataset.validation_count", *validation_count as u64)?;
            }
        }
        if self.architecture.len() < 2 {
            return Err(field("architecture", "needs at least an input and an output width"));
        }
        if let Some(i) = self.architecture.iter().position(|&w| w == 0) {
            return Err(field(&format!("architecture[{i}]"), "must be positive"));
        }
        match (self.posterior_family, self.k) {
            (FamilyName::Meanfield, Some(_)) => {
                return Err(field("k", "must be absent when posterior_family is meanfield"))
            }
            (FamilyName::Ktied, None) => return Err(field("k", "is required when posterior_family is ktied")),
            (FamilyName::Ktied, Some(0)) => return Err(field("k", "must be positive")),
            _ => {}
        }
        if let PriorConfig::Fixed { sigma_p } = self.prior {
            positive_real("prior.sigma_p", sigma_p)?;
        }
        positive_real("lr", self.lr)?;
        positive_int("batch_size", self.batch_size as u64)?;
        positive_int("max_steps", self.max_steps)?;
        positive_int("eval_every", self.eval_every)?;
        positive_int("num_mc_samples", self.num_mc_samples as u64)?;
        positive_int("eval_samples", self.eval_samples as u64)?;
        match self.anneal {
            AnnealConfig::StepWise { coefficient, period } => {
                positive_real("anneal.coefficient", coefficient)?;
                positive_int("anneal.period", period)?;
            }
            AnnealConfig::EpochLinear { epochs_to_full } => positive_int("anneal.epochs_to_full", epochs_to_full)?,
            AnnealConfig::Constant => {}
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(field("output_dir", "must not be empty"));
        }
        self.training_config().validate()?;
        Ok(())
    }

    pub fn family(&self) -> PosteriorFamily {
        match self.posterior_family {
            FamilyName::Meanfield => PosteriorFamily::MeanField,
            FamilyName::Ktied => PosteriorFamily::KTied { k: self.k.unwrap_or(0) },
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            layer_widths: self.architecture.clone(),
            family: self.family(),
            prior: self.prior.to_spec(),
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            anneal: self.anneal.to_schedule(),
            num_mc_samples: self.num_mc_samples,
            eval_samples: self.eval_samples,
            seed: self.seed,
            early_stopping: self.early_stopping,
        }
    }
}

impl DatasetConfig {
    /// Build the dataset and split off the validation tail.
    pub fn load_split(&self) -> CliResult<Split> {
        let (full, count) = match self {
            DatasetConfig::Blobs {
                seed,
                n_per_class,
                num_classes,
                dim,
                separation,
                validation_count,
            } => (
                synthetic_blobs(*seed, *n_per_class, *num_classes, *dim, *separation)?,
                *validation_count,
            ),
            DatasetConfig::Idx {
                images,
                labels,
                validation_count,
                normalize,
            } => {
                let d = load_idx_pair(images, labels)?;
                let d = if *normalize { normalize_minus_one_one(&d)? } else { d };
                (d, *validation_count)
            }
        };
        if count >= full.len() {
            return Err(field(
                "dataset.validation_count",
                format!("must be below the dataset size {}", full.len()),
            ));
        }
        Ok(holdout_split(&full, count)?)
    }
}

/// Re-label a dataset with `classes` classes so it can meet a model whose
/// output width exceeds the largest label present.
pub fn widen_classes(d: Dataset, classes: usize) -> CliResult<Dataset> {
    if d.num_classes() >= classes {
        return Ok(d);
    }
    Ok(Dataset::new(d.features().clone(), d.labels().to_vec(), classes)?)
}

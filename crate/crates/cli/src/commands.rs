//! The four subcommands, independent of argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use ktied_core::analysis::{analyze_model, compress_model, SpectrumReport};
use ktied_core::data::{normalize_minus_one_one, Dataset};
use ktied_core::metrics::{evaluate as evaluate_metrics, MetricSet};
use ktied_core::model::PosteriorFamily;
use ktied_core::train::{format_sig9, train as train_model};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{widen_classes, RunConfig};
use crate::error::{CliError, CliResult};
use crate::idx::load_idx_pair;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const SPECTRUM_HEADER: &str = "layer,param,rank_index,singular_value,variance_fraction,cumulative_fraction";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Validation,
}

/// Where evaluation data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// The dataset section of a run config, either side of its split.
    RunConfig { path: PathBuf, split: SplitName },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        normalize: bool,
    },
}

impl DataSource {
    pub fn load(&self) -> CliResult<Dataset> {
        match self {
            DataSource::RunConfig { path, split } => {
                let s = RunConfig::load(path)?.dataset.load_split()?;
                Ok(match split {
                    SplitName::Train => s.train,
                    SplitName::Validation => s.validation,
                })
            }
            DataSource::Idx {
                images,
                labels,
                normalize,
            } => {
                let d = load_idx_pair(images, labels)?;
                Ok(if *normalize { normalize_minus_one_one(&d)? } else { d })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsJson {
    pub neg_elbo: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub brier: f64,
    pub ece: f64,
}

impl From<MetricSet> for MetricsJson {
    fn from(m: MetricSet) -> Self {
        Self {
            neg_elbo: m.neg_elbo,
            nll: m.nll,
            accuracy: m.accuracy,
            brier: m.brier,
            ece: m.ece,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationJson {
    #[serde(flatten)]
    pub metrics: MetricsJson,
    pub num_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionJson {
    pub rank: usize,
    pub clamped_count: usize,
    pub pre_metrics: Option<MetricsJson>,
    pub post_metrics: Option<MetricsJson>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub stopped_early: bool,
    pub output_dir: PathBuf,
}

fn write(path: &Path, contents: &[u8]) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

pub fn train(config_path: &Path) -> CliResult<TrainSummary> {
    let cfg = RunConfig::load(config_path)?;
    let split = cfg.dataset.load_split()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write(&dir.join(CONFIG_ECHO_FILE), cfg.to_json().as_bytes())?;

    let outcome = train_model(&cfg.training_config(), &split.train, &split.validation)?;
    let ckpt = Checkpoint {
        model: outcome.model,
        prior: cfg.prior,
        seed: cfg.seed,
        step_count: outcome.steps,
        dataset_size: split.train.len(),
        compressed_rank: None,
    };
    ckpt.write(&dir.join(CHECKPOINT_FILE))?;
    write(&dir.join(METRICS_FILE), outcome.log.to_csv().as_bytes())?;
    Ok(TrainSummary {
        steps: outcome.steps,
        stopped_early: outcome.stopped_early,
        output_dir: dir.clone(),
    })
}

fn spectrum_rows(out: &mut String, layer: usize, param: &str, r: &SpectrumReport) {
    for (i, ((s, f), c)) in r
        .singular_values
        .iter()
        .zip(&r.variance_fractions)
        .zip(&r.cumulative_fractions)
        .enumerate()
    {
        out.push_str(&format!(
            "{layer},{param},{},{},{},{}\n",
            i + 1,
            format_sig9(*s),
            format_sig9(*f),
            format_sig9(*c)
        ));
    }
}

pub fn analyze(checkpoint: &Path, out: &Path) -> CliResult<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let mut csv = format!("{SPECTRUM_HEADER}\n");
    for s in analyze_model(&ckpt.model)? {
        spectrum_rows(&mut csv, s.layer, "mean", &s.means);
        spectrum_rows(&mut csv, s.layer, "sigma", &s.sigmas);
    }
    write(out, csv.as_bytes())
}

fn metrics_on(ckpt: &Checkpoint, data: &Dataset, samples: usize, seed: u64) -> CliResult<MetricSet> {
    if samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let size = if ckpt.dataset_size > 0 { ckpt.dataset_size } else { data.len() };
    Ok(evaluate_metrics(&ckpt.model, data, samples, seed, size)?)
}

fn load_for(ckpt: &Checkpoint, source: &DataSource) -> CliResult<Dataset> {
    widen_classes(source.load()?, ckpt.model.architecture().num_classes())
}

pub struct CompressArgs<'a> {
    pub checkpoint: &'a Path,
    pub rank: usize,
    pub out: &'a Path,
    pub report: Option<&'a Path>,
    pub data: Option<DataSource>,
    pub samples: usize,
    pub seed: u64,
    pub floor: f64,
}

/// Compress a mean-field checkpoint; returns the report as JSON.
pub fn compress(args: &CompressArgs) -> CliResult<String> {
    let ckpt = Checkpoint::read(args.checkpoint)?;
    if let PosteriorFamily::KTied { k } = ckpt.family() {
        return Err(CliError::Usage(format!(
            "checkpoint is {k}-tied and already rank-bounded; only mean-field checkpoints can be compressed"
        )));
    }
    if args.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let data = args.data.as_ref().map(|s| load_for(&ckpt, s)).transpose()?;
    let (model, clamped_count) = compress_model(&ckpt.model, args.rank, args.floor)?;
    let compressed = Checkpoint {
        model,
        compressed_rank: Some(args.rank),
        ..ckpt.clone()
    };
    let (pre, post) = match &data {
        Some(d) => (
            Some(metrics_on(&ckpt, d, args.samples, args.seed)?.into()),
            Some(metrics_on(&compressed, d, args.samples, args.seed)?.into()),
        ),
        None => (None, None),
    };
    compressed.write(args.out)?;
    let json = to_json(&CompressionJson {
        rank: args.rank,
        clamped_count,
        pre_metrics: pre,
        post_metrics: post,
    });
    if let Some(path) = args.report {
        write(path, format!("{json}\n").as_bytes())?;
    }
    Ok(json)
}

pub fn evaluate(checkpoint: &Path, data: &DataSource, samples: usize, seed: u64) -> CliResult<String> {
    if samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    let ckpt = Checkpoint::read(checkpoint)?;
    let d = load_for(&ckpt, data)?;
    Ok(to_json(&EvaluationJson {
        metrics: metrics_on(&ckpt, &d, samples, seed)?.into(),
        num_samples: samples,
        seed,
    }))
}

//! The training loop: shuffled mini-batches, Adam, KL annealing, periodic
//! validation and per-layer gradient SNR.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::invalid;
use crate::metrics::{accuracy, ensemble_predict, neg_elbo_eval, nll};
use crate::model::{
    loss_and_gradients, ElboTerms, MlpArchitecture, PosteriorFamily, PriorSpec, VariationalMlp,
};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng::SeededRng;
use crate::schedule::{anneal_scale, AnnealSchedule};
use crate::snr::{SnrSummary, SnrTracker};
use crate::{Error, Result};

/// Offset mixed into the run seed for validation draws, so evaluation never
/// advances the training stream.
const EVAL_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;
const EARLY_STOP_DELTA: f64 = 1e-4;
const EARLY_STOP_PATIENCE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub layer_widths: Vec<usize>,
    pub family: PosteriorFamily,
    pub prior: PriorSpec,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub anneal: AnnealSchedule,
    /// Monte Carlo samples per training step.
    pub num_mc_samples: usize,
    /// Posterior samples per validation pass.
    pub eval_samples: usize,
    pub seed: u64,
    /// Stop once validation -ELBO has improved by less than `1e-4` for 5
    /// evaluations in a row.
    pub early_stopping: bool,
}

impl TrainingConfig {
    /// Defaults for everything but the architecture and family.
    pub fn new(layer_widths: Vec<usize>, family: PosteriorFamily) -> Self {
        Self {
            layer_widths,
            family,
            prior: PriorSpec::default(),
            learning_rate: 1e-3,
            batch_size: 128,
            max_steps: 1000,
            eval_every: 100,
            anneal: AnnealSchedule::constant(),
            num_mc_samples: 1,
            eval_samples: 10,
            seed: 0,
            early_stopping: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        MlpArchitecture::new(self.layer_widths.clone())?;
        if let PosteriorFamily::KTied { k } = self.family {
            if k == 0 {
                return Err(invalid!("k must be at least 1"));
            }
        }
        if let PriorSpec::Fixed(s) = self.prior {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid!("prior sigma must be positive, got {s}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(invalid!("batch_size, max_steps and eval_every must be positive"));
        }
        if self.num_mc_samples == 0 || self.eval_samples == 0 {
            return Err(invalid!("sample counts must be positive"));
        }
        if self.anneal.period == 0 {
            return Err(invalid!("anneal period must be positive"));
        }
        if !(self.anneal.coefficient >= 0.0 && self.anneal.coefficient.is_finite()) {
            return Err(invalid!("anneal coefficient must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One CSV row: an evaluation point crossed with a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub val_neg_elbo: f64,
    pub val_nll: f64,
    pub val_acc: f64,
    pub kl_scale: f64,
    pub layer: usize,
    pub snr_mean: f64,
    pub snr_median: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str =
        "step,loss,val_neg_elbo,val_nll,val_acc,kl_scale,layer,snr_mean,snr_median";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step,
                format_sig9(r.loss),
                format_sig9(r.val_neg_elbo),
                format_sig9(r.val_nll),
                format_sig9(r.val_acc),
                format_sig9(r.kl_scale),
                r.layer,
                format_sig9(r.snr_mean),
                format_sig9(r.snr_median),
            ));
        }
        out
    }

    /// Rows of the last evaluation point.
    pub fn last_eval(&self) -> &[MetricsRow] {
        match self.rows.last() {
            None => &[],
            Some(last) => {
                let start = self.rows.iter().position(|r| r.step == last.step).unwrap_or(0);
                &self.rows[start..]
            }
        }
    }
}

/// Nine significant digits, `%g` style: plain notation for exponents in
/// `-5..9`, scientific otherwise, trailing zeros dropped.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return String::from("nan");
    }
    if x.is_infinite() {
        return String::from(if x > 0.0 { "inf" } else { "-inf" });
    }
    if x == 0.0 {
        return String::from("0");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(String::from(mantissa)), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        String::from(s.trim_end_matches('0').trim_end_matches('.'))
    } else {
        s
    }
}

/// Validation metrics at one point in training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSnapshot {
    pub neg_elbo: f64,
    pub nll: f64,
    pub accuracy: f64,
}

/// Step-by-step driver; [`train`] wraps it with evaluation and logging.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    config: TrainingConfig,
    data: &'a Dataset,
    model: VariationalMlp,
    adam: AdamState,
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
    snr: Vec<SnrTracker>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainingConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let arch = MlpArchitecture::new(config.layer_widths.clone())?;
        if data.dim() != arch.input_width() {
            return Err(invalid!(
                "data has {} features, architecture expects {}",
                data.dim(),
                arch.input_width()
            ));
        }
        if data.num_classes() > arch.num_classes() {
            return Err(invalid!(
                "data has {} classes, architecture predicts {}",
                data.num_classes(),
                arch.num_classes()
            ));
        }
        let mut rng = SeededRng::new(config.seed);
        let model = VariationalMlp::init(arch, config.family, config.prior, &mut rng)?;
        let adam = AdamState::for_params(&model.arrays(), AdamHyper::with_lr(config.learning_rate))?;
        let snr = (0..model.layers().len()).map(|_| SnrTracker::new()).collect();
        let order = (0..data.len()).collect();
        Ok(Self {
            config,
            data,
            model,
            adam,
            rng,
            order,
            cursor: data.len(),
            step: 0,
            snr,
        })
    }

    pub fn model(&self) -> &VariationalMlp {
        &self.model
    }

    pub fn into_model(self) -> VariationalMlp {
        self.model
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    /// KL weight the next step will use.
    pub fn kl_scale(&self) -> f64 {
        anneal_scale(&self.config.anneal, self.step, self.steps_per_epoch())
    }

    /// Per-layer SNR of the kernel sigma parameters over the last 10 steps.
    pub fn snr_reports(&self) -> Vec<Result<SnrSummary>> {
        self.snr.iter().map(|t| t.report()).collect()
    }

    /// Per-scalar SNR values of one layer.
    pub fn snr_values(&self, layer: usize) -> Result<Vec<f64>> {
        self.snr[layer].per_scalar()
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// One optimisation step on the next mini-batch.
    pub fn step(&mut self) -> Result<ElboTerms> {
        let kl_scale = self.kl_scale();
        let indices = self.next_batch();
        let (x, labels) = self.data.select(&indices);
        let noise: Vec<_> = (0..self.config.num_mc_samples)
            .map(|_| self.model.draw_noise(&mut self.rng))
            .collect();
        let (terms, grads) =
            loss_and_gradients(&self.model, &x, &labels, &noise, kl_scale, self.data.len())?;
        if !grads.is_finite() || !terms.loss.is_finite() {
            return Err(Error::NonFiniteGradient {
                step: self.step as usize + 1,
            });
        }
        for (tracker, g) in self.snr.iter_mut().zip(&grads.layers) {
            tracker.push(&g.kernel_sigma_params())?;
        }
        adam_step(&mut self.model.arrays_mut(), &grads.arrays(), &mut self.adam)?;
        self.step += 1;
        if !representable(&self.model) {
            return Err(Error::Diverged {
                step: self.step as usize,
            });
        }
        Ok(terms)
    }

    /// Validation metrics with a fixed evaluation seed.
    pub fn evaluate(&self, validation: &Dataset) -> Result<EvalSnapshot> {
        let seed = self.config.seed.wrapping_add(EVAL_SEED_OFFSET);
        let samples = self.config.eval_samples;
        let pred = ensemble_predict(&self.model, validation, samples, seed)?;
        Ok(EvalSnapshot {
            neg_elbo: neg_elbo_eval(&self.model, validation, samples, seed, self.data.len())?,
            nll: nll(&pred),
            accuracy: accuracy(&pred),
        })
    }
}

fn representable(model: &VariationalMlp) -> bool {
    let sigma_ok = |s: f64| s > 0.0 && s.is_finite();
    model.arrays().iter().all(|a| a.iter().all(|x| x.is_finite()))
        && model.layers().iter().all(|l| {
            l.kernel_sigma().as_slice().iter().all(|&s| sigma_ok(s)) && l.bias_sigma().iter().all(|&s| sigma_ok(s))
        })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VariationalMlp,
    pub log: MetricsLog,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Train from scratch, evaluating on `validation` every `eval_every` steps.
pub fn train(config: &TrainingConfig, data: &Dataset, validation: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data)?;
    let mut log = MetricsLog::default();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut best = f64::INFINITY;
    let mut stalled = 0usize;
    let mut stopped_early = false;

    while trainer.step_count() < config.max_steps {
        let kl_scale = trainer.kl_scale();
        loss_sum += trainer.step()?.loss;
        loss_count += 1;
        let step = trainer.step_count();
        if step % config.eval_every != 0 {
            continue;
        }
        let eval = trainer.evaluate(validation)?;
        let loss = loss_sum / loss_count as f64;
        for (layer, report) in trainer.snr_reports().into_iter().enumerate() {
            let (snr_mean, snr_median) = match report {
                Ok(s) => (s.mean_snr, s.median_snr),
                Err(Error::InsufficientWindow { .. }) => (f64::NAN, f64::NAN),
                Err(e) => return Err(e),
            };
            log.rows.push(MetricsRow {
                step,
                loss,
                val_neg_elbo: eval.neg_elbo,
                val_nll: eval.nll,
                val_acc: eval.accuracy,
                kl_scale,
                layer,
                snr_mean,
                snr_median,
            });
        }
        loss_sum = 0.0;
        loss_count = 0;

        if config.early_stopping {
            if best - eval.neg_elbo < EARLY_STOP_DELTA {
                stalled += 1;
            } else {
                stalled = 0;
            }
            best = best.min(eval.neg_elbo);
            if stalled >= EARLY_STOP_PATIENCE {
                stopped_early = true;
                break;
            }
        }
    }

    let steps = trainer.step_count();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
        steps,
        stopped_early,
    })
}

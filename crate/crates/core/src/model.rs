//! A variational MLP: ReLU hidden layers, softmax-categorical output, and
//! either posterior family on every layer.
//!
//! Gradients are derived by hand. For one Monte Carlo sample the weights are
//! `W = mu + sigma * eps`, so after ordinary backprop gives `dL/dW`:
//!
//! - `dL/dmu = dL/dW`
//! - `dL/dsigma = dL/dW * eps`
//! - mean-field: `dL/dlog_sigma = dL/dsigma * sigma`
//! - k-tied: `dL/dlog_u[i,t] = u[i,t] * sum_j dL/dsigma[i,j] v[j,t]` and
//!   `dL/dlog_v[j,t] = v[j,t] * sum_i dL/dsigma[i,j] u[i,t]`
//!
//! The KL term contributes `mu / sigma_p^2` to the means and
//! `sigma / sigma_p^2 - 1 / sigma` to `dL/dsigma`, scaled by
//! `kl_scale / dataset_size`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::linalg::DenseMatrix;
use crate::math;
use crate::rng::SeededRng;
use crate::variational::{
    he_prior, kl_to_isotropic_prior, kl_vector_to_isotropic_prior, param_count, sample_weights,
    CovarianceFamily, IsotropicGaussianPrior, KTiedLayerPosterior, MeanFieldLayerPosterior,
};
use crate::Result;

/// Layer widths from input to class count, ReLU between hidden layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpArchitecture {
    layer_widths: Vec<usize>,
}

impl MlpArchitecture {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(invalid!("an MLP needs at least an input and an output width"));
        }
        if let Some(pos) = layer_widths.iter().position(|&w| w == 0) {
            return Err(invalid!("layer width {pos} is zero"));
        }
        Ok(Self { layer_widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("at least two widths")
    }

    /// Kernel shape `(fan_in, fan_out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_widths[l], self.layer_widths[l + 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorFamily {
    MeanField,
    KTied { k: usize },
}

/// How each layer's prior scale is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorSpec {
    /// One scale shared by all layers.
    Fixed(f64),
    /// `sigma_p^2 = 2 / fan_in` per layer, biases included.
    HeScaled,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Fixed(IsotropicGaussianPrior::DEFAULT_SIGMA)
    }
}

impl PriorSpec {
    pub fn for_layer(&self, fan_in: usize) -> Result<IsotropicGaussianPrior> {
        match *self {
            PriorSpec::Fixed(s) => IsotropicGaussianPrior::new(s),
            PriorSpec::HeScaled => Ok(he_prior(fan_in)),
        }
    }
}

/// Total variational parameter count of an MLP, biases (mean + sigma) included.
pub fn model_param_count(arch: &MlpArchitecture, family: PosteriorFamily) -> usize {
    (0..arch.num_layers())
        .map(|l| {
            let (m, n) = arch.layer_shape(l);
            let kernel = match family {
                PosteriorFamily::MeanField => param_count(m, n, CovarianceFamily::DiagonalNormal, None),
                PosteriorFamily::KTied { k } => param_count(m, n, CovarianceFamily::KTied, Some(k)),
            }
            .expect("architecture widths are positive");
            kernel + 2 * n
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerPosterior {
    MeanField(MeanFieldLayerPosterior),
    KTied(KTiedLayerPosterior),
}

impl LayerPosterior {
    pub fn kernel_mean(&self) -> &DenseMatrix {
        match self {
            LayerPosterior::MeanField(p) => &p.kernel_mean,
            LayerPosterior::KTied(p) => &p.kernel_mean,
        }
    }

    pub fn kernel_sigma(&self) -> DenseMatrix {
        match self {
            LayerPosterior::MeanField(p) => p.kernel_sigma(),
            LayerPosterior::KTied(p) => p.kernel_sigma(),
        }
    }

    pub fn bias_mean(&self) -> &[f64] {
        match self {
            LayerPosterior::MeanField(p) => &p.bias_mean,
            LayerPosterior::KTied(p) => &p.bias_mean,
        }
    }

    pub fn bias_log_sigma(&self) -> &[f64] {
        match self {
            LayerPosterior::MeanField(p) => &p.bias_log_sigma,
            LayerPosterior::KTied(p) => &p.bias_log_sigma,
        }
    }

    pub fn bias_sigma(&self) -> Vec<f64> {
        self.bias_log_sigma().iter().map(|&x| math::exp(x)).collect()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kernel_mean().shape()
    }

    pub fn family(&self) -> PosteriorFamily {
        match self {
            LayerPosterior::MeanField(_) => PosteriorFamily::MeanField,
            LayerPosterior::KTied(p) => PosteriorFamily::KTied { k: p.k() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerPosterior::MeanField(p) => p.validate(),
            LayerPosterior::KTied(p) => p.validate(),
        }
    }

    /// KL of kernel and bias to the layer prior.
    pub fn kl(&self, prior: IsotropicGaussianPrior) -> Result<f64> {
        let kernel = kl_to_isotropic_prior(self.kernel_mean(), &self.kernel_sigma(), prior)?;
        let bias = kl_vector_to_isotropic_prior(self.bias_mean(), &self.bias_sigma(), prior)?;
        Ok(kernel + bias)
    }

    /// Named trainable arrays in canonical order.
    pub fn named_arrays(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            LayerPosterior::MeanField(p) => vec![
                ("kernel_mean", p.kernel_mean.as_slice()),
                ("kernel_log_sigma", p.kernel_log_sigma.as_slice()),
                ("bias_mean", &p.bias_mean),
                ("bias_log_sigma", &p.bias_log_sigma),
            ],
            LayerPosterior::KTied(p) => vec![
                ("kernel_mean", p.kernel_mean.as_slice()),
                ("log_u", p.log_u.as_slice()),
                ("log_v", p.log_v.as_slice()),
                ("bias_mean", &p.bias_mean),
                ("bias_log_sigma", &p.bias_log_sigma),
            ],
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerPosterior::MeanField(p) => vec![
                p.kernel_mean.as_mut_slice(),
                p.kernel_log_sigma.as_mut_slice(),
                &mut p.bias_mean,
                &mut p.bias_log_sigma,
            ],
            LayerPosterior::KTied(p) => vec![
                p.kernel_mean.as_mut_slice(),
                p.log_u.as_mut_slice(),
                p.log_v.as_mut_slice(),
                &mut p.bias_mean,
                &mut p.bias_log_sigma,
            ],
        }
    }
}

/// One concrete draw of a layer's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub kernel: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Standard-normal noise for one layer, shaped like its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub kernel: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Posterior over all layers of an MLP, with the prior each layer is
/// regularised toward.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalMlp {
    arch: MlpArchitecture,
    layers: Vec<LayerPosterior>,
    priors: Vec<IsotropicGaussianPrior>,
}

impl VariationalMlp {
    /// Initialise every layer with the given family. Draw order: layer by
    /// layer, kernel means, then sigma parameters, then bias sigmas.
    pub fn init(
        arch: MlpArchitecture,
        family: PosteriorFamily,
        prior: PriorSpec,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if let PosteriorFamily::KTied { k } = family {
            if k == 0 {
                return Err(invalid!("k must be at least 1"));
            }
        }
        let mut layers = Vec::with_capacity(arch.num_layers());
        let mut priors = Vec::with_capacity(arch.num_layers());
        for l in 0..arch.num_layers() {
            let (m, n) = arch.layer_shape(l);
            priors.push(prior.for_layer(m)?);
            layers.push(match family {
                PosteriorFamily::MeanField => {
                    LayerPosterior::MeanField(MeanFieldLayerPosterior::init(m, n, rng))
                }
                PosteriorFamily::KTied { k } => {
                    LayerPosterior::KTied(KTiedLayerPosterior::init(m, n, k, rng))
                }
            });
        }
        Ok(Self { arch, layers, priors })
    }

    pub fn from_parts(
        arch: MlpArchitecture,
        layers: Vec<LayerPosterior>,
        priors: Vec<IsotropicGaussianPrior>,
    ) -> Result<Self> {
        if layers.len() != arch.num_layers() || priors.len() != arch.num_layers() {
            return Err(shape_err!(
                "architecture has {} layers, got {} posteriors and {} priors",
                arch.num_layers(),
                layers.len(),
                priors.len()
            ));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.shape() != arch.layer_shape(l) {
                let (m, n) = arch.layer_shape(l);
                return Err(shape_err!("layer {l} must be {m}x{n}"));
            }
            layer.validate()?;
        }
        Ok(Self { arch, layers, priors })
    }

    pub fn architecture(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerPosterior] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerPosterior] {
        &mut self.layers
    }

    pub fn priors(&self) -> &[IsotropicGaussianPrior] {
        &self.priors
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.named_arrays().iter().map(|(_, a)| a.len()).sum::<usize>())
            .sum()
    }

    /// Total KL to the prior over all layers.
    pub fn kl(&self) -> Result<f64> {
        self.layers
            .iter()
            .zip(&self.priors)
            .map(|(l, &p)| l.kl(p))
            .sum()
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.arrays_mut()).collect()
    }

    pub fn arrays(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| l.named_arrays().into_iter().map(|(_, a)| a))
            .collect()
    }

    /// Posterior means as a point-estimate network.
    pub fn mean_weights(&self) -> Vec<LayerWeights> {
        self.layers
            .iter()
            .map(|l| LayerWeights {
                kernel: l.kernel_mean().clone(),
                bias: l.bias_mean().to_vec(),
            })
            .collect()
    }

    /// Fresh noise for every layer: kernel row-major, then bias.
    pub fn draw_noise(&self, rng: &mut SeededRng) -> Vec<LayerNoise> {
        self.layers
            .iter()
            .map(|l| {
                let (m, n) = l.shape();
                let kernel = DenseMatrix::from_vec(m, n, rng.sample_standard_normal(m * n))
                    .expect("length matches");
                let bias = rng.sample_standard_normal(n);
                LayerNoise { kernel, bias }
            })
            .collect()
    }

    pub fn sample(&self, noise: &[LayerNoise]) -> Result<Vec<LayerWeights>> {
        let sigmas: Vec<(DenseMatrix, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (l.kernel_sigma(), l.bias_sigma()))
            .collect();
        self.sample_with(&sigmas, noise)
    }

    fn sample_with(
        &self,
        sigmas: &[(DenseMatrix, Vec<f64>)],
        noise: &[LayerNoise],
    ) -> Result<Vec<LayerWeights>> {
        if noise.len() != self.layers.len() {
            return Err(shape_err!(
                "noise for {} layers, model has {}",
                noise.len(),
                self.layers.len()
            ));
        }
        self.layers
            .iter()
            .zip(sigmas)
            .zip(noise)
            .map(|((l, (ks, bs)), e)| {
                let kernel = sample_weights(l.kernel_mean(), ks, &e.kernel)?;
                if e.bias.len() != bs.len() {
                    return Err(shape_err!("bias noise length {} vs {}", e.bias.len(), bs.len()));
                }
                let bias = l
                    .bias_mean()
                    .iter()
                    .zip(bs)
                    .zip(&e.bias)
                    .map(|((m, s), z)| m + s * z)
                    .collect();
                Ok(LayerWeights { kernel, bias })
            })
            .collect()
    }
}

struct ForwardTrace {
    /// Input to each layer; `inputs[0]` is the batch.
    inputs: Vec<DenseMatrix>,
    /// Pre-activations of each layer; the last one is the logits.
    pre_activations: Vec<DenseMatrix>,
}

fn affine(h: &DenseMatrix, w: &LayerWeights) -> Result<DenseMatrix> {
    if w.bias.len() != w.kernel.cols() {
        return Err(shape_err!(
            "bias length {} does not match kernel width {}",
            w.bias.len(),
            w.kernel.cols()
        ));
    }
    let mut a = h.matmul(&w.kernel)?;
    for r in 0..a.rows() {
        for (x, b) in a.row_mut(r).iter_mut().zip(&w.bias) {
            *x += b;
        }
    }
    Ok(a)
}

fn relu(a: &DenseMatrix) -> DenseMatrix {
    a.map(|x| if x > 0.0 { x } else { 0.0 })
}

fn forward_trace(weights: &[LayerWeights], x: &DenseMatrix) -> Result<ForwardTrace> {
    if weights.is_empty() {
        return Err(invalid!("network has no layers"));
    }
    let mut inputs = Vec::with_capacity(weights.len());
    let mut pre_activations = Vec::with_capacity(weights.len());
    let mut h = x.clone();
    for (l, w) in weights.iter().enumerate() {
        let a = affine(&h, w)?;
        let next = if l + 1 < weights.len() { Some(relu(&a)) } else { None };
        inputs.push(h);
        pre_activations.push(a);
        match next {
            Some(n) => h = n,
            None => break,
        }
    }
    Ok(ForwardTrace {
        inputs,
        pre_activations,
    })
}

/// Logits of a batch `x` (`b x d`) under concrete weights.
pub fn forward(weights: &[LayerWeights], x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut trace = forward_trace(weights, x)?;
    Ok(trace.pre_activations.pop().expect("at least one layer"))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = math::exp(*x - max);
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(shape_err!("{} labels for {} rows", labels.len(), rows));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid!("label {bad} outside 0..{classes}"));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn nll_categorical(logits: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols())?;
    if labels.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(row.iter().map(|&z| math::exp(z - max)).sum::<f64>());
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Per-example negative ELBO and its two parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub nll_per_example: f64,
    pub kl_per_example: f64,
    pub loss: f64,
}

fn check_elbo_args(
    model: &VariationalMlp,
    x: &DenseMatrix,
    labels: &[usize],
    num_samples: usize,
    kl_scale: f64,
    dataset_size: usize,
) -> Result<()> {
    if num_samples == 0 {
        return Err(invalid!("need at least one Monte Carlo sample"));
    }
    if !(0.0..=1.0).contains(&kl_scale) {
        return Err(invalid!("kl_scale {kl_scale} outside [0, 1]"));
    }
    if x.rows() == 0 {
        return Err(invalid!("empty batch"));
    }
    if dataset_size < x.rows() {
        return Err(invalid!(
            "dataset size {dataset_size} is smaller than the batch ({})",
            x.rows()
        ));
    }
    if x.cols() != model.arch.input_width() {
        return Err(shape_err!(
            "batch has {} features, network expects {}",
            x.cols(),
            model.arch.input_width()
        ));
    }
    check_labels(labels, x.rows(), model.arch.num_classes())
}

/// Draw `num_samples` noise sets from `rng` and evaluate the negative ELBO.
pub fn elbo_terms(
    model: &VariationalMlp,
    x: &DenseMatrix,
    labels: &[usize],
    rng: &mut SeededRng,
    num_samples: usize,
    kl_scale: f64,
    dataset_size: usize,
) -> Result<ElboTerms> {
    check_elbo_args(model, x, labels, num_samples, kl_scale, dataset_size)?;
    let noise: Vec<Vec<LayerNoise>> = (0..num_samples).map(|_| model.draw_noise(rng)).collect();
    elbo_with_noise(model, x, labels, &noise, kl_scale, dataset_size)
}

/// Negative ELBO with the noise given explicitly (one set per sample).
pub fn elbo_with_noise(
    model: &VariationalMlp,
    x: &DenseMatrix,
    labels: &[usize],
    noise: &[Vec<LayerNoise>],
    kl_scale: f64,
    dataset_size: usize,
) -> Result<ElboTerms> {
    check_elbo_args(model, x, labels, noise.len(), kl_scale, dataset_size)?;
    let mut nll = 0.0;
    for eps in noise {
        let logits = forward(&model.sample(eps)?, x)?;
        nll += nll_categorical(&logits, labels)?;
    }
    let nll_per_example = nll / noise.len() as f64;
    let kl_per_example = model.kl()? / dataset_size as f64;
    Ok(ElboTerms {
        nll_per_example,
        kl_per_example,
        loss: nll_per_example + kl_scale * kl_per_example,
    })
}

/// Gradient of the loss for one layer, mirroring its posterior.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGradient {
    MeanField {
        kernel_mean: DenseMatrix,
        kernel_log_sigma: DenseMatrix,
        bias_mean: Vec<f64>,
        bias_log_sigma: Vec<f64>,
    },
    KTied {
        kernel_mean: DenseMatrix,
        log_u: DenseMatrix,
        log_v: DenseMatrix,
        bias_mean: Vec<f64>,
        bias_log_sigma: Vec<f64>,
    },
}

impl LayerGradient {
    /// Arrays in the same order as [`LayerPosterior::named_arrays`].
    pub fn arrays(&self) -> Vec<&[f64]> {
        match self {
            LayerGradient::MeanField {
                kernel_mean,
                kernel_log_sigma,
                bias_mean,
                bias_log_sigma,
            } => vec![
                kernel_mean.as_slice(),
                kernel_log_sigma.as_slice(),
                bias_mean,
                bias_log_sigma,
            ],
            LayerGradient::KTied {
                kernel_mean,
                log_u,
                log_v,
                bias_mean,
                bias_log_sigma,
            } => vec![
                kernel_mean.as_slice(),
                log_u.as_slice(),
                log_v.as_slice(),
                bias_mean,
                bias_log_sigma,
            ],
        }
    }

    /// Gradient of the kernel standard-deviation parameters, flattened:
    /// `log sigma` for mean-field, `log_u` followed by `log_v` for k-tied.
    pub fn kernel_sigma_params(&self) -> Vec<f64> {
        match self {
            LayerGradient::MeanField {
                kernel_log_sigma, ..
            } => kernel_log_sigma.as_slice().to_vec(),
            LayerGradient::KTied { log_u, log_v, .. } => {
                let mut out = log_u.as_slice().to_vec();
                out.extend_from_slice(log_v.as_slice());
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
}

impl GradientSet {
    pub fn arrays(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.arrays()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Exact gradients of [`elbo_with_noise`]'s loss for the given noise.
pub fn backward(
    model: &VariationalMlp,
    x: &DenseMatrix,
    labels: &[usize],
    noise: &[Vec<LayerNoise>],
    kl_scale: f64,
    dataset_size: usize,
) -> Result<GradientSet> {
    loss_and_gradients(model, x, labels, noise, kl_scale, dataset_size).map(|(_, g)| g)
}

/// Loss and gradients in one pass over the samples.
pub fn loss_and_gradients(
    model: &VariationalMlp,
    x: &DenseMatrix,
    labels: &[usize],
    noise: &[Vec<LayerNoise>],
    kl_scale: f64,
    dataset_size: usize,
) -> Result<(ElboTerms, GradientSet)> {
    check_elbo_args(model, x, labels, noise.len(), kl_scale, dataset_size)?;
    let num_samples = noise.len() as f64;
    let batch = x.rows() as f64;

    let sigmas: Vec<(DenseMatrix, Vec<f64>)> = model
        .layers
        .iter()
        .map(|l| (l.kernel_sigma(), l.bias_sigma()))
        .collect();

    // Accumulators for dL/dmu and dL/dsigma, kernel and bias.
    let mut d_kmu: Vec<DenseMatrix> = model
        .layers
        .iter()
        .map(|l| DenseMatrix::zeros(l.shape().0, l.shape().1))
        .collect();
    let mut d_ksigma = d_kmu.clone();
    let mut d_bmu: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.shape().1]).collect();
    let mut d_bsigma = d_bmu.clone();

    let mut nll_total = 0.0;
    for eps in noise {
        let weights = model.sample_with(&sigmas, eps)?;
        let trace = forward_trace(&weights, x)?;
        let logits = trace.pre_activations.last().expect("non-empty");
        nll_total += nll_categorical(logits, labels)?;

        // dL/dlogits for the mean over batch and samples.
        let mut delta = softmax_rows(logits);
        for (r, &y) in labels.iter().enumerate() {
            let row = delta.row_mut(r);
            row[y] -= 1.0;
            for v in row.iter_mut() {
                *v /= batch * num_samples;
            }
        }

        for l in (0..weights.len()).rev() {
            let d_w = trace.inputs[l].t_matmul(&delta)?;
            let mut d_b = vec![0.0; delta.cols()];
            for r in 0..delta.rows() {
                for (acc, v) in d_b.iter_mut().zip(delta.row(r)) {
                    *acc += v;
                }
            }

            for (((gm, gs), &dw), &e) in d_kmu[l]
                .as_mut_slice()
                .iter_mut()
                .zip(d_ksigma[l].as_mut_slice())
                .zip(d_w.as_slice())
                .zip(eps[l].kernel.as_slice())
            {
                *gm += dw;
                *gs += dw * e;
            }
            for (((gm, gs), &db), &e) in d_bmu[l]
                .iter_mut()
                .zip(d_bsigma[l].iter_mut())
                .zip(&d_b)
                .zip(&eps[l].bias)
            {
                *gm += db;
                *gs += db * e;
            }

            if l > 0 {
                let mut upstream = delta.matmul_t(&weights[l].kernel)?;
                let pre = &trace.pre_activations[l - 1];
                for (g, &a) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    // ReLU'(0) := 0
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = upstream;
            }
        }
    }

    let kl_total = model.kl()?;
    let kl_coeff = kl_scale / dataset_size as f64;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let prior = model.priors[l];
        let inv_var = 1.0 / (prior.sigma() * prior.sigma());
        let (ksigma, bsigma) = &sigmas[l];

        if kl_coeff != 0.0 {
            for ((g, &mu), (gs, &s)) in d_kmu[l]
                .as_mut_slice()
                .iter_mut()
                .zip(layer.kernel_mean().as_slice())
                .zip(d_ksigma[l].as_mut_slice().iter_mut().zip(ksigma.as_slice()))
            {
                *g += kl_coeff * mu * inv_var;
                *gs += kl_coeff * (s * inv_var - 1.0 / s);
            }
            for ((g, &mu), (gs, &s)) in d_bmu[l]
                .iter_mut()
                .zip(layer.bias_mean())
                .zip(d_bsigma[l].iter_mut().zip(bsigma))
            {
                *g += kl_coeff * mu * inv_var;
                *gs += kl_coeff * (s * inv_var - 1.0 / s);
            }
        }

        let bias_log_sigma: Vec<f64> = d_bsigma[l].iter().zip(bsigma).map(|(g, s)| g * s).collect();
        let kernel_mean = core::mem::replace(&mut d_kmu[l], DenseMatrix::zeros(0, 0));
        let bias_mean = core::mem::take(&mut d_bmu[l]);
        layers.push(match layer {
            LayerPosterior::MeanField(_) => LayerGradient::MeanField {
                kernel_mean,
                kernel_log_sigma: d_ksigma[l].zip_map(ksigma, |g, s| g * s)?,
                bias_mean,
                bias_log_sigma,
            },
            LayerPosterior::KTied(p) => {
                let (log_u, log_v) = contract_tied_sigma_grad(&d_ksigma[l], &p.log_u, &p.log_v)?;
                LayerGradient::KTied {
                    kernel_mean,
                    log_u,
                    log_v,
                    bias_mean,
                    bias_log_sigma,
                }
            }
        });
    }

    let nll_per_example = nll_total / num_samples;
    let kl_per_example = kl_total / dataset_size as f64;
    Ok((
        ElboTerms {
            nll_per_example,
            kl_per_example,
            loss: nll_per_example + kl_scale * kl_per_example,
        },
        GradientSet { layers },
    ))
}

/// Chain `dL/dsigma` (`m x n`) through `sigma = exp(log_u) exp(log_v)^T`.
pub fn contract_tied_sigma_grad(
    d_sigma: &DenseMatrix,
    log_u: &DenseMatrix,
    log_v: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let u = log_u.map(math::exp);
    let v = log_v.map(math::exp);
    // (dS V) .* U and (dS^T U) .* V
    let d_log_u = d_sigma.matmul(&v)?.zip_map(&u, |g, u| g * u)?;
    let d_log_v = d_sigma.t_matmul(&u)?.zip_map(&v, |g, v| g * v)?;
    Ok((d_log_u, d_log_v))
}

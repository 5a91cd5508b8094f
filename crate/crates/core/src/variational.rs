//! Variational posterior families for one dense layer, the isotropic
//! Gaussian prior, and closed-form KL divergence.
//!
//! Both families keep a free mean per kernel weight. They differ in how the
//! kernel standard deviations are parameterised:
//!
//! - mean-field: one `log sigma` per weight (`m x n` parameters);
//! - k-tied: `sigma = exp(log_u) * exp(log_v)^T` with `log_u` of shape
//!   `m x k` and `log_v` of shape `n x k`, so `sigma` has rank at most `k`
//!   and every entry is strictly positive.
//!
//! Bias standard deviations are always plain mean-field.

use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::linalg::DenseMatrix;
use crate::math;
use crate::rng::SeededRng;
use crate::Result;

/// Initial standard deviation targeted by both families.
pub const INIT_SIGMA: f64 = 0.01;
/// Spread of the mean-field sigma initialisation.
pub const INIT_SIGMA_SPREAD: f64 = 0.001;
/// Mean-field sigma draws are truncated below at this value.
pub const INIT_SIGMA_FLOOR: f64 = 1e-4;
/// Symmetry-breaking noise added to the k-tied log factors.
pub const INIT_TIED_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldLayerPosterior {
    pub kernel_mean: DenseMatrix,
    pub kernel_log_sigma: DenseMatrix,
    pub bias_mean: Vec<f64>,
    pub bias_log_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KTiedLayerPosterior {
    pub kernel_mean: DenseMatrix,
    pub log_u: DenseMatrix,
    pub log_v: DenseMatrix,
    pub bias_mean: Vec<f64>,
    pub bias_log_sigma: Vec<f64>,
}

/// `N(0, sigma_p^2)` on every weight of a layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropicGaussianPrior {
    sigma_p: f64,
}

impl IsotropicGaussianPrior {
    /// Default prior scale; `0.3` is the other documented choice.
    pub const DEFAULT_SIGMA: f64 = 0.2;

    pub fn new(sigma_p: f64) -> Result<Self> {
        if !(sigma_p > 0.0 && sigma_p.is_finite()) {
            return Err(invalid!("prior sigma must be positive and finite, got {sigma_p}"));
        }
        Ok(Self { sigma_p })
    }

    #[inline]
    pub fn sigma(&self) -> f64 {
        self.sigma_p
    }
}

impl Default for IsotropicGaussianPrior {
    fn default() -> Self {
        Self {
            sigma_p: Self::DEFAULT_SIGMA,
        }
    }
}

/// He-scaled prior: `sigma_p^2 = 2 / fan_in`.
pub fn he_prior(fan_in: usize) -> IsotropicGaussianPrior {
    assert!(fan_in >= 1, "fan_in must be positive");
    IsotropicGaussianPrior {
        sigma_p: math::sqrt(2.0 / fan_in as f64),
    }
}

/// Reparameterised draw `mu + sigma * eps`.
pub fn sample_weights(mu: &DenseMatrix, sigma: &DenseMatrix, eps: &DenseMatrix) -> Result<DenseMatrix> {
    mu.check_same_shape(sigma)?;
    mu.check_same_shape(eps)?;
    let mut out = mu.clone();
    for ((o, &s), &e) in out
        .as_mut_slice()
        .iter_mut()
        .zip(sigma.as_slice())
        .zip(eps.as_slice())
    {
        *o += s * e;
    }
    Ok(out)
}

/// Materialised k-tied standard deviations `exp(log_u) exp(log_v)^T`.
pub fn tied_sigma(log_u: &DenseMatrix, log_v: &DenseMatrix) -> Result<DenseMatrix> {
    if log_u.cols() != log_v.cols() {
        return Err(shape_err!(
            "tied factors disagree on k: {} vs {}",
            log_u.cols(),
            log_v.cols()
        ));
    }
    let u = log_u.map(math::exp);
    let v = log_v.map(math::exp);
    u.matmul_t(&v)
}

fn kl_terms(mu: &[f64], sigma: &[f64], prior: IsotropicGaussianPrior) -> Result<f64> {
    let sp = prior.sigma();
    let inv_two_var = 1.0 / (2.0 * sp * sp);
    let log_sp = math::ln(sp);
    let mut total = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(invalid!("standard deviation must be positive, got {s}"));
        }
        total += log_sp - math::ln(s) + (s * s + m * m) * inv_two_var - 0.5;
    }
    Ok(total)
}

/// `KL(N(mu, diag(sigma^2)) || N(0, sigma_p^2 I))`, summed over entries.
pub fn kl_to_isotropic_prior(
    mu: &DenseMatrix,
    sigma: &DenseMatrix,
    prior: IsotropicGaussianPrior,
) -> Result<f64> {
    mu.check_same_shape(sigma)?;
    kl_terms(mu.as_slice(), sigma.as_slice(), prior)
}

/// Vector form of [`kl_to_isotropic_prior`], used for biases.
pub fn kl_vector_to_isotropic_prior(
    mu: &[f64],
    sigma: &[f64],
    prior: IsotropicGaussianPrior,
) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(shape_err!("{} means vs {} sigmas", mu.len(), sigma.len()));
    }
    kl_terms(mu, sigma, prior)
}

impl MeanFieldLayerPosterior {
    /// He-initialised means; sigmas drawn from `N(0.01, 0.001)` truncated
    /// below at `1e-4`, stored in log domain. Bias means start at zero.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let he = math::sqrt(2.0 / fan_in as f64);
        let kernel_mean = DenseMatrix::from_vec(
            fan_in,
            fan_out,
            (0..fan_in * fan_out).map(|_| rng.normal(0.0, he)).collect(),
        )
        .expect("length matches");
        let mut draw_log_sigma = || {
            math::ln(rng.normal(INIT_SIGMA, INIT_SIGMA_SPREAD).max(INIT_SIGMA_FLOOR))
        };
        let kernel_log_sigma = DenseMatrix::from_vec(
            fan_in,
            fan_out,
            (0..fan_in * fan_out).map(|_| draw_log_sigma()).collect(),
        )
        .expect("length matches");
        let bias_log_sigma = (0..fan_out).map(|_| draw_log_sigma()).collect();
        Self {
            kernel_mean,
            kernel_log_sigma,
            bias_mean: alloc::vec![0.0; fan_out],
            bias_log_sigma,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_mean.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.kernel_mean.cols()
    }

    pub fn kernel_sigma(&self) -> DenseMatrix {
        self.kernel_log_sigma.map(math::exp)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.kernel_mean.shape();
        if self.kernel_log_sigma.shape() != (m, n) {
            return Err(shape_err!("kernel_log_sigma must be {m}x{n}"));
        }
        check_bias(&self.bias_mean, &self.bias_log_sigma, n)?;
        check_finite_sigma(self.kernel_log_sigma.as_slice())?;
        check_finite_sigma(&self.bias_log_sigma)
    }
}

impl KTiedLayerPosterior {
    /// He-initialised means; every log factor starts at
    /// `0.5 * (ln 0.01 - ln k)` plus `N(0, 0.1)` noise, so each materialised
    /// sigma is 0.01 before the noise.
    pub fn init(fan_in: usize, fan_out: usize, k: usize, rng: &mut SeededRng) -> Self {
        assert!(k >= 1, "k must be at least 1");
        let he = math::sqrt(2.0 / fan_in as f64);
        let kernel_mean = DenseMatrix::from_vec(
            fan_in,
            fan_out,
            (0..fan_in * fan_out).map(|_| rng.normal(0.0, he)).collect(),
        )
        .expect("length matches");
        let base = tied_log_factor_init(k);
        let log_u = DenseMatrix::from_vec(
            fan_in,
            k,
            (0..fan_in * k).map(|_| rng.normal(base, INIT_TIED_NOISE)).collect(),
        )
        .expect("length matches");
        let log_v = DenseMatrix::from_vec(
            fan_out,
            k,
            (0..fan_out * k).map(|_| rng.normal(base, INIT_TIED_NOISE)).collect(),
        )
        .expect("length matches");
        let bias_log_sigma = (0..fan_out)
            .map(|_| math::ln(rng.normal(INIT_SIGMA, INIT_SIGMA_SPREAD).max(INIT_SIGMA_FLOOR)))
            .collect();
        Self {
            kernel_mean,
            log_u,
            log_v,
            bias_mean: alloc::vec![0.0; fan_out],
            bias_log_sigma,
        }
    }

    pub fn k(&self) -> usize {
        self.log_u.cols()
    }

    pub fn fan_in(&self) -> usize {
        self.kernel_mean.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.kernel_mean.cols()
    }

    pub fn kernel_sigma(&self) -> DenseMatrix {
        tied_sigma(&self.log_u, &self.log_v).expect("validated factor shapes")
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.kernel_mean.shape();
        let k = self.log_u.cols();
        if k == 0 {
            return Err(invalid!("k-tied posterior needs k >= 1"));
        }
        if self.log_u.shape() != (m, k) || self.log_v.shape() != (n, k) {
            return Err(shape_err!(
                "factors {}x{} and {}x{} do not fit a {m}x{n} kernel",
                self.log_u.rows(),
                self.log_u.cols(),
                self.log_v.rows(),
                self.log_v.cols()
            ));
        }
        check_bias(&self.bias_mean, &self.bias_log_sigma, n)?;
        check_finite_sigma(self.log_u.as_slice())?;
        check_finite_sigma(self.log_v.as_slice())?;
        check_finite_sigma(&self.bias_log_sigma)
    }
}

/// Log-domain starting value that makes every tied sigma equal `0.01`.
pub fn tied_log_factor_init(k: usize) -> f64 {
    0.5 * (math::ln(INIT_SIGMA) - math::ln(k as f64))
}

fn check_bias(mean: &[f64], log_sigma: &[f64], n: usize) -> Result<()> {
    if mean.len() != n || log_sigma.len() != n {
        return Err(shape_err!(
            "bias vectors have lengths {} and {}, expected {n}",
            mean.len(),
            log_sigma.len()
        ));
    }
    Ok(())
}

fn check_finite_sigma(log_values: &[f64]) -> Result<()> {
    if let Some(bad) = log_values
        .iter()
        .find(|&&x| !math::exp(x).is_finite() || math::exp(x) <= 0.0)
    {
        return Err(invalid!("log standard deviation {bad} does not give a positive finite sigma"));
    }
    Ok(())
}

/// Rewrites a k-tied posterior as the mean-field posterior with the same
/// distribution.
pub fn materialize_to_meanfield(p: &KTiedLayerPosterior) -> MeanFieldLayerPosterior {
    MeanFieldLayerPosterior {
        kernel_mean: p.kernel_mean.clone(),
        kernel_log_sigma: p.kernel_sigma().map(math::ln),
        bias_mean: p.bias_mean.clone(),
        bias_log_sigma: p.bias_log_sigma.clone(),
    }
}

/// Variational families compared by parameter count for an `m x n` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceFamily {
    MultivariateNormal,
    DiagonalNormal,
    MatrixNormal,
    MatrixNormalDiagonal,
    KTied,
}

/// Number of variational parameters (means included) for an `m x n` kernel.
pub fn param_count(m: usize, n: usize, family: CovarianceFamily, k: Option<usize>) -> Result<usize> {
    if m == 0 || n == 0 {
        return Err(invalid!("matrix dimensions must be positive, got {m}x{n}"));
    }
    let mn = m * n;
    match (family, k) {
        (CovarianceFamily::KTied, Some(k)) if k >= 1 => Ok(mn + k * (m + n)),
        (CovarianceFamily::KTied, Some(_)) => Err(invalid!("k must be at least 1")),
        (CovarianceFamily::KTied, None) => Err(invalid!("k-tied parameter count needs k")),
        (_, Some(_)) => Err(invalid!("k only applies to the k-tied family")),
        (CovarianceFamily::MultivariateNormal, None) => Ok(mn + mn * (mn + 1) / 2),
        (CovarianceFamily::DiagonalNormal, None) => Ok(mn + mn),
        (CovarianceFamily::MatrixNormal, None) => Ok(mn + m * (m + 1) / 2 + n * (n + 1) / 2),
        (CovarianceFamily::MatrixNormalDiagonal, None) => Ok(mn + m + n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use alloc::vec;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn zero_noise_sample_is_mean() {
        let mu = DenseMatrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let sigma = DenseMatrix::filled(2, 2, 0.7);
        let eps = DenseMatrix::zeros(2, 2);
        assert_eq!(sample_weights(&mu, &sigma, &eps).unwrap(), mu);
    }

    #[test]
    fn standardized_sample_is_noise() {
        let e = DenseMatrix::from_rows(&[[0.3, -1.2, 2.0]]).unwrap();
        let out = sample_weights(&DenseMatrix::zeros(1, 3), &DenseMatrix::filled(1, 3, 1.0), &e).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn one_line_sample() {
        let mu = DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let sigma = DenseMatrix::from_rows(&[[0.1, 0.2]]).unwrap();
        let eps = DenseMatrix::from_rows(&[[1.0, -1.0]]).unwrap();
        let w = sample_weights(&mu, &sigma, &eps).unwrap();
        assert!(approx(w.get(0, 0), 1.1, 1e-15) && approx(w.get(0, 1), 1.8, 1e-15));
    }

    #[test]
    fn sample_shape_mismatch() {
        let r = sample_weights(&DenseMatrix::zeros(1, 2), &DenseMatrix::zeros(2, 1), &DenseMatrix::zeros(1, 2));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn tied_sigma_outer_product() {
        let log_u = DenseMatrix::from_rows(&[[0.0], [2f64.ln()]]).unwrap();
        let log_v = DenseMatrix::from_rows(&[[3f64.ln()], [4f64.ln()]]).unwrap();
        let s = tied_sigma(&log_u, &log_v).unwrap();
        let expected = DenseMatrix::from_rows(&[[3.0, 4.0], [6.0, 8.0]]).unwrap();
        assert!(s.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn tied_sigma_rank_two_product() {
        let ln = |r: [f64; 2]| [r[0].ln(), r[1].ln()];
        let log_u = DenseMatrix::from_rows(&[ln([1.0, 1.0]), ln([2.0, 1.0])]).unwrap();
        let log_v = DenseMatrix::from_rows(&[ln([1.0, 2.0]), ln([3.0, 1.0])]).unwrap();
        let s = tied_sigma(&log_u, &log_v).unwrap();
        // Scalar triple loop.
        let u = [[1.0, 1.0], [2.0, 1.0]];
        let v = [[1.0, 2.0], [3.0, 1.0]];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for t in 0..2 {
                    acc += u[i][t] * v[j][t];
                }
                assert!(approx(s.get(i, j), acc, 1e-14));
            }
        }
        let expected = DenseMatrix::from_rows(&[[3.0, 4.0], [4.0, 7.0]]).unwrap();
        assert!(s.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn tied_init_value_gives_one_percent() {
        for k in 1..=4 {
            let base = tied_log_factor_init(k);
            let s = tied_sigma(&DenseMatrix::filled(3, k, base), &DenseMatrix::filled(5, k, base)).unwrap();
            for &x in s.as_slice() {
                assert!(approx(x, 0.01, 1e-15), "k={k}: {x}");
            }
        }
    }

    #[test]
    fn tied_sigma_k_mismatch() {
        let r = tied_sigma(&DenseMatrix::zeros(2, 1), &DenseMatrix::zeros(2, 2));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn kl_is_zero_at_prior() {
        let prior = IsotropicGaussianPrior::new(0.3).unwrap();
        let kl = kl_to_isotropic_prior(&DenseMatrix::zeros(3, 4), &DenseMatrix::filled(3, 4, 0.3), prior).unwrap();
        assert!(kl.abs() < 1e-12);
    }

    #[test]
    fn kl_single_weight() {
        let prior = IsotropicGaussianPrior::new(1.0).unwrap();
        let one = DenseMatrix::filled(1, 1, 1.0);
        assert!(approx(kl_to_isotropic_prior(&one, &one, prior).unwrap(), 0.5, 1e-15));
    }

    #[test]
    fn kl_rejects_non_positive_sigma() {
        let prior = IsotropicGaussianPrior::default();
        let r = kl_to_isotropic_prior(&DenseMatrix::zeros(1, 2), &DenseMatrix::from_rows(&[[0.1, 0.0]]).unwrap(), prior);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kl_positive_off_the_fixed_point() {
        let prior = IsotropicGaussianPrior::new(0.2).unwrap();
        let mut rng = SeededRng::new(17);
        for _ in 0..100 {
            let mu = DenseMatrix::from_vec(2, 3, rng.sample_standard_normal(6).iter().map(|x| 1e-3 * x).collect()).unwrap();
            let sigma = DenseMatrix::from_vec(2, 3, rng.sample_standard_normal(6).iter().map(|x| 0.2 * (1.0 + 1e-3 * x)).collect()).unwrap();
            assert!(kl_to_isotropic_prior(&mu, &sigma, prior).unwrap() > 0.0);
        }
    }

    #[test]
    fn materialized_k1_example() {
        let p = KTiedLayerPosterior {
            kernel_mean: DenseMatrix::zeros(2, 2),
            log_u: DenseMatrix::from_rows(&[[0.0], [2f64.ln()]]).unwrap(),
            log_v: DenseMatrix::from_rows(&[[3f64.ln()], [4f64.ln()]]).unwrap(),
            bias_mean: vec![0.0; 2],
            bias_log_sigma: vec![-1.0; 2],
        };
        let mf = materialize_to_meanfield(&p);
        let expected = [3f64.ln(), 4f64.ln(), 6f64.ln(), 8f64.ln()];
        for (a, b) in mf.kernel_log_sigma.as_slice().iter().zip(expected) {
            assert!(approx(*a, b, 1e-14));
        }
        assert_eq!(mf.bias_log_sigma, p.bias_log_sigma);
    }

    #[test]
    fn param_counts() {
        use CovarianceFamily::*;
        assert_eq!(param_count(2, 2, MultivariateNormal, None).unwrap(), 14);
        assert_eq!(param_count(400, 400, KTied, Some(2)).unwrap(), 161_600);
        assert_eq!(param_count(1, 1, DiagonalNormal, None).unwrap(), 2);
        assert!(matches!(param_count(3, 3, KTied, None), Err(Error::InvalidInput(_))));
        assert!(matches!(param_count(3, 3, DiagonalNormal, Some(2)), Err(Error::InvalidInput(_))));
        assert!(matches!(param_count(0, 3, DiagonalNormal, None), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn he_prior_values() {
        assert!(approx(he_prior(2).sigma(), 1.0, 1e-15));
        assert!(approx(he_prior(784).sigma().powi(2), 2.0 / 784.0, 1e-15));
        assert!(approx(he_prior(8).sigma(), 0.5, 1e-15));
    }

    #[test]
    fn init_shapes_and_ranges() {
        let mut rng = SeededRng::new(3);
        let mf = MeanFieldLayerPosterior::init(5, 4, &mut rng);
        mf.validate().unwrap();
        assert!(mf.kernel_sigma().as_slice().iter().all(|&s| (INIT_SIGMA_FLOOR..0.02).contains(&s)));
        let kt = KTiedLayerPosterior::init(5, 4, 3, &mut rng);
        kt.validate().unwrap();
        assert_eq!((kt.log_u.shape(), kt.log_v.shape()), ((5, 3), (4, 3)));
    }

    #[test]
    fn prior_rejects_bad_scale() {
        assert!(IsotropicGaussianPrior::new(0.0).is_err());
        assert!(IsotropicGaussianPrior::new(f64::NAN).is_err());
    }
}

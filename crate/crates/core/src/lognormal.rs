//! Closed-form calculus of log-normal distributions and their Monte-Carlo
//! mixtures.
//!
//! A stochastic forward pass t yields per-pixel parameters (μ_t, σ_t²) of a
//! log-normal force distribution. Over T such passes the mixture's moments
//! decompose into aleatoric and epistemic parts:
//!
//! - mean:       E[ŷ] = (1/T) Σ_t exp(μ_t + σ_t²/2)
//! - aleatoric:  (1/T) Σ_t exp(2μ_t + σ_t²)(exp(σ_t²) − 1)
//! - epistemic:  (1/T) Σ_t exp(μ_t + σ_t²/2)² − E[ŷ]²
//!
//! and their sum equals the exact mixture variance. The coefficient of
//! variation is (1/T) Σ_t sqrt(exp(σ_t²) − 1) (it deliberately ignores μ),
//! and the per-pixel entropy is (1/T) Σ_t log₂(σ_t·exp(μ_t + ½)/sqrt(2π))
//! bits. The entropy convention divides by sqrt(2π); the textbook log-normal
//! differential entropy (Kvalseth) multiplies by it, a constant offset of
//! log₂(2π) bits. The division form is kept on purpose so outputs stay
//! comparable with prior runs; do not "fix" it.
//!
//! All functions are pure, use fixed summation order, and are safe to call
//! from any number of threads.

use crate::grid::Grid;
use thiserror::Error;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// ln(sqrt(2π)), computed the same way the entropy term computes
/// 0.5·ln(σ²) so that σ² = 2π cancels bit-exactly.
#[inline]
fn ln_sqrt_2pi() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

#[derive(Debug, Error, PartialEq)]
pub enum LognormalError {
    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),
    #[error("ensemble has no samples")]
    EmptyEnsemble,
    #[error("zero variance in ensemble sample; entropy undefined")]
    ZeroVariance,
    #[error("non-positive mean {0}")]
    NonPositiveMean(f64),
    #[error("quantile {0} outside (0, 1)")]
    QuantileOutOfRange(f64),
    #[error("maps have mismatched shapes")]
    ShapeMismatch,
}

type Result<T> = std::result::Result<T, LognormalError>;

/// Parameters (μ, σ²) of one log-normal distribution: the predicted
/// log-force and the variance of the log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma2: f64,
}

/// One stochastic pass: per-pixel (μ, σ²) maps of equal shape.
#[derive(Debug, Clone)]
pub struct ParamGrid {
    mu: Grid<f64>,
    sigma2: Grid<f64>,
}

impl ParamGrid {
    pub fn new(mu: Grid<f64>, sigma2: Grid<f64>) -> Result<Self> {
        if !mu.same_shape(&sigma2) {
            return Err(LognormalError::ShapeMismatch);
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn mu(&self) -> &Grid<f64> {
        &self.mu
    }

    pub fn sigma2(&self) -> &Grid<f64> {
        &self.sigma2
    }
}

/// T stochastic passes over one input; the unit the mixture formulas
/// aggregate. Construction guarantees T ≥ 1 and a single shared shape.
#[derive(Debug, Clone)]
pub struct McEnsemble {
    samples: Vec<ParamGrid>,
}

impl McEnsemble {
    pub fn new(samples: Vec<ParamGrid>) -> Result<Self> {
        let first = samples.first().ok_or(LognormalError::EmptyEnsemble)?;
        let (h, w) = (first.mu.height(), first.mu.width());
        if samples.iter().any(|s| s.mu.height() != h || s.mu.width() != w) {
            return Err(LognormalError::ShapeMismatch);
        }
        Ok(Self { samples })
    }

    /// Ensemble of scalar parameter pairs (1×1 maps); test and tooling aid.
    pub fn from_scalars(params: &[LogNormalParams]) -> Result<Self> {
        Self::new(
            params
                .iter()
                .map(|p| {
                    ParamGrid::new(
                        Grid::from_fill(1, 1, p.mu),
                        Grid::from_fill(1, 1, p.sigma2),
                    )
                    .expect("scalar grids share shape")
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by construction
    }

    pub fn height(&self) -> usize {
        self.samples[0].mu.height()
    }

    pub fn width(&self) -> usize {
        self.samples[0].mu.width()
    }

    pub fn samples(&self) -> &[ParamGrid] {
        &self.samples
    }
}

/// Per-pixel moment maps of the mixture. `var_epistemic` is clamped to
/// [0, ∞) and `var_total` is the sum of the two published parts, so the
/// decomposition identity holds on the published values as well.
#[derive(Debug, Clone)]
pub struct PredictionMoments {
    pub mean: Grid<f64>,
    pub var_total: Grid<f64>,
    pub var_aleatoric: Grid<f64>,
    pub var_epistemic: Grid<f64>,
    pub cv: Grid<f64>,
    pub entropy: Grid<f64>,
}

impl PredictionMoments {
    pub fn from_ensemble(ens: &McEnsemble) -> Result<Self> {
        let mean = mixture_mean(ens);
        let raw = mixture_variance(ens);
        let cv = coefficient_of_variation(ens);
        let entropy = predictive_entropy(ens)?;
        let var_epistemic = raw.epistemic.map(|v| v.max(0.0));
        let mut var_total = raw.aleatoric.clone();
        for (t, &e) in var_total.data_mut().iter_mut().zip(var_epistemic.data()) {
            *t += e;
        }
        Ok(Self {
            mean,
            var_total,
            var_aleatoric: raw.aleatoric,
            var_epistemic,
            cv,
            entropy,
        })
    }
}

/// Squared softplus, `ln(1+exp(x))²`, the variance-head activation.
/// Computed overflow-safely: for large x the `x + ln1p(exp(−x))` form
/// degrades gracefully to the x² asymptote.
pub fn softplus_sq(x: f64) -> f64 {
    let sp = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    sp * sp
}

/// Inputs of the training loss: per-pixel ground-truth log-force and the
/// predicted (μ̂, σ̂²) maps.
#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    pub target_logmu: &'a Grid<f64>,
    pub pred_mu: &'a Grid<f64>,
    pub pred_sigma2: &'a Grid<f64>,
}

impl<'a> LossInput<'a> {
    fn validate(&self) -> Result<usize> {
        if !self.target_logmu.same_shape(self.pred_mu)
            || !self.target_logmu.same_shape(self.pred_sigma2)
        {
            return Err(LognormalError::ShapeMismatch);
        }
        if let Some(&bad) = self.pred_sigma2.data().iter().find(|&&v| v <= 0.0) {
            return Err(LognormalError::NonPositiveVariance(bad));
        }
        Ok(self.target_logmu.len())
    }
}

/// KL-divergence loss between the log-normal target (zero variance) and the
/// prediction:
///
/// `(1/n) Σ_i [ (μ_i − μ̂_i)² / (2σ̂_i²) + ½ ln σ̂_i² ]`
///
/// The proportionality constant of the full divergence is dropped; gradients
/// are unaffected.
pub fn kl_lognormal_loss(input: &LossInput) -> Result<f64> {
    let (data_term, log_term) = kl_lognormal_loss_parts(input)?;
    Ok(data_term + log_term)
}

/// The two loss terms separately: (mean squared-residual term, mean ½ln σ̂²
/// term). Their sum is [`kl_lognormal_loss`].
pub fn kl_lognormal_loss_parts(input: &LossInput) -> Result<(f64, f64)> {
    let n = input.validate()? as f64;
    let mut data_term = 0.0f64;
    let mut log_term = 0.0f64;
    for ((&t, &m), &s2) in input
        .target_logmu
        .data()
        .iter()
        .zip(input.pred_mu.data())
        .zip(input.pred_sigma2.data())
    {
        let r = t - m;
        data_term += r * r / (2.0 * s2);
        log_term += 0.5 * s2.ln();
    }
    Ok((data_term / n, log_term / n))
}

/// Analytic gradients of [`kl_lognormal_loss`] with respect to μ̂ and σ̂².
pub fn kl_lognormal_loss_grad(input: &LossInput) -> Result<(Grid<f64>, Grid<f64>)> {
    let n = input.validate()? as f64;
    let h = input.target_logmu.height();
    let w = input.target_logmu.width();
    let mut dmu = Vec::with_capacity(h * w);
    let mut dsigma2 = Vec::with_capacity(h * w);
    for ((&t, &m), &s2) in input
        .target_logmu
        .data()
        .iter()
        .zip(input.pred_mu.data())
        .zip(input.pred_sigma2.data())
    {
        let r = m - t;
        dmu.push(r / (s2 * n));
        dsigma2.push((0.5 / s2 - (r * r) / (2.0 * s2 * s2)) / n);
    }
    Ok((Grid::from_vec(h, w, dmu), Grid::from_vec(h, w, dsigma2)))
}

/// Mixture mean per pixel: `(1/T) Σ_t exp(μ_t + σ_t²/2)`. Strictly positive.
pub fn mixture_mean(ens: &McEnsemble) -> Grid<f64> {
    let t_inv = 1.0 / ens.len() as f64;
    let mut acc = Grid::from_fill(ens.height(), ens.width(), 0.0f64);
    for sample in ens.samples() {
        for ((a, &mu), &s2) in acc
            .data_mut()
            .iter_mut()
            .zip(sample.mu.data())
            .zip(sample.sigma2.data())
        {
            *a += (mu + 0.5 * s2).exp();
        }
    }
    acc.map(|v| v * t_inv)
}

/// The three variance maps of [`mixture_variance`]. `epistemic` is the raw
/// value of the closed form and may carry a tiny negative from cancellation;
/// [`PredictionMoments`] clamps it on output.
#[derive(Debug, Clone)]
pub struct MixtureVariance {
    pub total: Grid<f64>,
    pub aleatoric: Grid<f64>,
    pub epistemic: Grid<f64>,
}

/// Mixture variance per pixel, decomposed:
///
/// - aleatoric: `(1/T) Σ_t exp(2μ_t + σ_t²)(exp(σ_t²) − 1)`
/// - epistemic: `(1/T) Σ_t exp(μ_t + σ_t²/2)² − mean²`
/// - total: their sum, equal to the exact mixture second moment minus the
///   squared mean.
pub fn mixture_variance(ens: &McEnsemble) -> MixtureVariance {
    let t_inv = 1.0 / ens.len() as f64;
    let (h, w) = (ens.height(), ens.width());
    let mut aleatoric = Grid::from_fill(h, w, 0.0f64);
    let mut mean_sq_acc = Grid::from_fill(h, w, 0.0f64); // (1/T) Σ m_t²
    let mut mean_acc = Grid::from_fill(h, w, 0.0f64);
    for sample in ens.samples() {
        let it = sample.mu.data().iter().zip(sample.sigma2.data()).enumerate();
        for (i, (&mu, &s2)) in it {
            let m = (mu + 0.5 * s2).exp();
            aleatoric.data_mut()[i] += (2.0 * mu + s2).exp() * (s2.exp() - 1.0);
            mean_sq_acc.data_mut()[i] += m * m;
            mean_acc.data_mut()[i] += m;
        }
    }
    let mut epistemic = Grid::from_fill(h, w, 0.0f64);
    let mut total = Grid::from_fill(h, w, 0.0f64);
    for i in 0..h * w {
        let a = aleatoric.data()[i] * t_inv;
        let mean = mean_acc.data()[i] * t_inv;
        let e = mean_sq_acc.data()[i] * t_inv - mean * mean;
        aleatoric.data_mut()[i] = a;
        epistemic.data_mut()[i] = e;
        total.data_mut()[i] = a + e;
    }
    MixtureVariance { total, aleatoric, epistemic }
}

/// Coefficient of variation per pixel: `(1/T) Σ_t sqrt(exp(σ_t²) − 1)`.
/// The formula ignores μ by convention.
pub fn coefficient_of_variation(ens: &McEnsemble) -> Grid<f64> {
    let t_inv = 1.0 / ens.len() as f64;
    let mut acc = Grid::from_fill(ens.height(), ens.width(), 0.0f64);
    for sample in ens.samples() {
        for (a, &s2) in acc.data_mut().iter_mut().zip(sample.sigma2.data()) {
            *a += (s2.exp() - 1.0).sqrt();
        }
    }
    acc.map(|v| v * t_inv)
}

/// Predictive entropy per pixel in bits:
/// `(1/T) Σ_t log₂(σ_t · exp(μ_t + ½) / sqrt(2π))`.
///
/// See the module docs for the sqrt(2π) convention. Errors with
/// [`LognormalError::ZeroVariance`] if any σ_t² is zero.
pub fn predictive_entropy(ens: &McEnsemble) -> Result<Grid<f64>> {
    let t_inv = 1.0 / ens.len() as f64;
    let mut acc = Grid::from_fill(ens.height(), ens.width(), 0.0f64);
    for sample in ens.samples() {
        for ((a, &mu), &s2) in acc
            .data_mut()
            .iter_mut()
            .zip(sample.mu.data())
            .zip(sample.sigma2.data())
        {
            if s2 <= 0.0 {
                return Err(LognormalError::ZeroVariance);
            }
            // log2(sigma * exp(mu + 1/2) / sqrt(2pi)), evaluated in the log
            // domain so large mu cannot overflow the argument.
            *a += (0.5 * s2.ln() + mu + 0.5 - ln_sqrt_2pi()) / std::f64::consts::LN_2;
        }
    }
    Ok(acc.map(|v| v * t_inv))
}

/// The log-normal with exactly the given mean and variance:
/// `μ* = ln(mean²/sqrt(mean²+var))`, `σ*² = ln(1 + var/mean²)`.
pub fn moment_matched_params(mean: f64, var: f64) -> Result<LogNormalParams> {
    if !(mean > 0.0) {
        return Err(LognormalError::NonPositiveMean(mean));
    }
    if var < 0.0 {
        return Err(LognormalError::NonPositiveVariance(var));
    }
    let ratio = var / (mean * mean);
    Ok(LogNormalParams {
        mu: mean.ln() - 0.5 * ratio.ln_1p(),
        sigma2: ratio.ln_1p(),
    })
}

/// Quantile (percent-point) of a log-normal: `exp(μ + sqrt(σ²)·Φ⁻¹(q))`.
pub fn lognormal_quantile(p: LogNormalParams, q: f64) -> Result<f64> {
    if p.sigma2 < 0.0 {
        return Err(LognormalError::NonPositiveVariance(p.sigma2));
    }
    let z = normal_inv_cdf(q)?;
    Ok((p.mu + p.sigma2.sqrt() * z).exp())
}

/// Inverse CDF of the standard normal.
///
/// A rational approximation (Acklam) polished by one Halley step against the
/// internal [`erfc`]; absolute error stays below 1e−9 across
/// q ∈ [1e−12, 1−1e−12]. Reflection around ½ makes f(q) = −f(1−q) hold
/// bit-exactly whenever 1−q is itself exact (dyadic q).
pub fn normal_inv_cdf(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(LognormalError::QuantileOutOfRange(q));
    }
    if q == 0.5 {
        return Ok(0.0);
    }
    Ok(if q > 0.5 { -inv_cdf_lower(1.0 - q) } else { inv_cdf_lower(q) })
}

/// Φ⁻¹ on (0, 0.5]; returns a non-positive z.
fn inv_cdf_lower(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // One Halley step: e = Phi(x) - p, u = e * sqrt(2pi) * exp(x^2/2).
    let e = 0.5 * erfc(-x / SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x -= u / (1.0 + 0.5 * x * u);
    x
}

/// Complementary error function, accurate to ~1e−14 relative.
/// Series for small |x|, Lentz continued fraction for the tail; the switch
/// at 1.5 keeps the `1 − erf` cancellation below a few ulps.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 1.5 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

/// Taylor series of erf, adequate for 0 ≤ x < 1.5.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        let nf = n as f64;
        term *= -x2 / nf;
        let contrib = term / (2.0 * nf + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

/// Laplace continued fraction for erfc, x ≥ 1.5 (modified Lentz).
fn erfc_cf(x: f64) -> f64 {
    let x2 = x * x;
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for i in 0..200 {
        // b_0 = x ... then a_n alternating n/2 pattern for erfc CF in the
        // form erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/2/(x + 2/2/(x + ...)))
        let (a, b) = if i == 0 { (1.0, x) } else { (i as f64 / 2.0, x) };
        d = b + a * d;
        if d == 0.0 {
            d = TINY;
        }
        c = b + a / c;
        if c == 0.0 {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-x2).exp() / std::f64::consts::PI.sqrt() * f
}

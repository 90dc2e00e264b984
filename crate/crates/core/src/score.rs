//! Noise-predictor interface, closed-form Gaussian and Gaussian-mixture
//! priors, the Tweedie posterior mean and its Jacobian.
//!
//! Models work in a unitless "model space" `u`; an [`IntensityMap`] ties it to
//! attenuation in mm⁻¹ via `x = offset + scale · u`. Samplers convert at the
//! likelihood boundary.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{ensure_len, Error, Result};
use crate::image::{dot, GridShape, ImageGrid};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Affine map `x = offset + scale · u` from model space to mm⁻¹.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityMap {
    pub offset: f64,
    pub scale: f64,
}

impl IntensityMap {
    pub const IDENTITY: Self = Self {
        offset: 0.0,
        scale: 1.0,
    };

    pub fn new(offset: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite() && offset.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "intensity scale must be positive, got {scale}"
            )));
        }
        Ok(Self { offset, scale })
    }

    pub fn to_physical(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| self.offset + self.scale * v).collect()
    }

    pub fn to_model(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.offset) / self.scale).collect()
    }
}

impl Default for IntensityMap {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// A noise predictor `ε(x_t, t)`.
///
/// `jvp_eps` is optional; models without it cannot drive samplers that need
/// the exact posterior-mean Jacobian.
pub trait ScoreModel: Send + Sync {
    /// Number of pixels the model acts on.
    fn dim(&self) -> usize;

    fn predict_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>>;

    /// Directional derivative `(∇_x ε) v`.
    fn jvp_eps(&self, _x_t: &[f64], _t: usize, _schedule: &NoiseSchedule, _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::JacobianUnavailable)
    }

    /// Transposed product `(∇_x ε)ᵀ v`. A noise predictor derived from a
    /// true score has a symmetric Jacobian (a scaled Hessian of
    /// `log p_t`), so this defaults to the JVP.
    fn vjp_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule, v: &[f64]) -> Result<Vec<f64>> {
        self.jvp_eps(x_t, t, schedule, v)
    }

    fn supports_jacobian(&self) -> bool {
        false
    }

    fn intensity(&self) -> IntensityMap {
        IntensityMap::IDENTITY
    }
}

/// Independent-pixel Gaussian prior `N(μ, diag σ₀²)` in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    shape: GridShape,
    mean: Vec<f64>,
    variance: Vec<f64>,
    map: IntensityMap,
}

impl GaussianPrior {
    pub fn new(shape: GridShape, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        ensure_len(&mean, shape.len())?;
        ensure_len(&variance, shape.len())?;
        if variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("prior variances must be positive".into()));
        }
        Ok(Self {
            shape,
            mean,
            variance,
            map: IntensityMap::IDENTITY,
        })
    }

    /// Prior stated in physical units, stored in the model space of `map`.
    pub fn from_physical(mean: &ImageGrid, variance: &[f64], map: IntensityMap) -> Result<Self> {
        let u_mean = map.to_model(mean.data());
        let s2 = map.scale * map.scale;
        let u_var = variance.iter().map(|v| v / s2).collect();
        Ok(Self {
            map,
            ..Self::new(mean.shape(), u_mean, u_var)?
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn physical_mean(&self) -> Vec<f64> {
        self.map.to_physical(&self.mean)
    }

    pub fn physical_variance(&self) -> Vec<f64> {
        let s2 = self.map.scale * self.map.scale;
        self.variance.iter().map(|v| v * s2).collect()
    }

    /// Log-density of a model-space image under the prior.
    pub fn log_density(&self, u: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        u.iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), v)| -0.5 * ((x - m) * (x - m) / v + v.ln() + ln2pi))
            .sum()
    }

    /// One prior draw in mm⁻¹, clamped at zero attenuation.
    pub fn sample_physical(&self, seed: u64) -> ImageGrid {
        let z = rng::standard_normal(seed, rng::tag::PHANTOM, self.mean.len());
        let u: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.variance)
            .zip(&z)
            .map(|((m, v), z)| m + v.sqrt() * z)
            .collect();
        let x = self.map.to_physical(&u).into_iter().map(|v| v.max(0.0)).collect();
        ImageGrid::new(self.shape, x).expect("finite prior draw")
    }

    fn check(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<f64> {
        ensure_len(x, self.mean.len())?;
        schedule.check_step(t)?;
        Ok(schedule.alpha_bar(t))
    }
}

impl ScoreModel for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `ε = √(1−ᾱ)(ᾱσ₀² + 1−ᾱ)⁻¹(x_t − √ᾱ μ)`.
    fn predict_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        let ab = self.check(x_t, t, schedule)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t
            .iter()
            .zip(&self.mean)
            .zip(&self.variance)
            .map(|((x, m), v)| sn * (x - sa * m) / (ab * v + 1.0 - ab))
            .collect())
    }

    fn jvp_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule, v: &[f64]) -> Result<Vec<f64>> {
        let ab = self.check(x_t, t, schedule)?;
        ensure_len(v, self.mean.len())?;
        let sn = (1.0 - ab).sqrt();
        Ok(v.iter()
            .zip(&self.variance)
            .map(|(d, s2)| sn * d / (ab * s2 + 1.0 - ab))
            .collect())
    }

    fn supports_jacobian(&self) -> bool {
        true
    }

    fn intensity(&self) -> IntensityMap {
        self.map
    }
}

/// Gaussian mixture prior `Σ_k w_k N(m_k, v_k I)` in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    shape: GridShape,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
    map: IntensityMap,
}

/// Per-component quantities of the step-`t` marginal at one point.
struct MixtureState {
    responsibilities: Vec<f64>,
    /// `(x − √ᾱ m_k) / s_k`, the negated component scores.
    scaled_diffs: Vec<Vec<f64>>,
    spread: Vec<f64>,
    alpha_bar: f64,
}

impl GmmPrior {
    pub fn new(shape: GridShape, weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::InvalidArgument(
                "mixture needs matching, nonempty weight/mean/variance lists".into(),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("mixture weights must sum to 1".into()));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("component variances must be positive".into()));
        }
        for m in &means {
            ensure_len(m, shape.len())?;
        }
        Ok(Self {
            shape,
            weights,
            means,
            variances,
            map: IntensityMap::IDENTITY,
        })
    }

    pub fn with_intensity(mut self, map: IntensityMap) -> Self {
        self.map = map;
        self
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Log-density of a model-space image under the mixture.
    pub fn log_density(&self, u: &[f64]) -> f64 {
        let n = u.len() as f64;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let logits: Vec<f64> = (0..self.weights.len())
            .map(|k| {
                let sq: f64 = u.iter().zip(&self.means[k]).map(|(a, b)| (a - b) * (a - b)).sum();
                self.weights[k].ln() - 0.5 * n * (self.variances[k].ln() + ln2pi) - 0.5 * sq / self.variances[k]
            })
            .collect();
        log_sum_exp(&logits)
    }

    fn state(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<MixtureState> {
        ensure_len(x, self.shape.len())?;
        schedule.check_step(t)?;
        let ab = schedule.alpha_bar(t);
        let sa = ab.sqrt();
        let n = x.len() as f64;
        let mut logits = Vec::with_capacity(self.weights.len());
        let mut scaled_diffs = Vec::with_capacity(self.weights.len());
        let mut spread = Vec::with_capacity(self.weights.len());
        for k in 0..self.weights.len() {
            let s = ab * self.variances[k] + 1.0 - ab;
            let diff: Vec<f64> = x.iter().zip(&self.means[k]).map(|(x, m)| x - sa * m).collect();
            let sq = dot(&diff, &diff);
            logits.push(self.weights[k].ln() - 0.5 * n * s.ln() - 0.5 * sq / s);
            scaled_diffs.push(diff.into_iter().map(|d| d / s).collect());
            spread.push(s);
        }
        // shift by the max, then normalize: subtracting a large log-sum-exp
        // would leave ~ulp(logit) error in every weight
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut responsibilities: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = responsibilities.iter().sum();
        responsibilities.iter_mut().for_each(|r| *r /= total);
        Ok(MixtureState {
            responsibilities,
            scaled_diffs,
            spread,
            alpha_bar: ab,
        })
    }

    /// Component responsibilities of the step-`t` marginal at `x`.
    pub fn responsibilities(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        Ok(self.state(x, t, schedule)?.responsibilities)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

impl ScoreModel for GmmPrior {
    fn dim(&self) -> usize {
        self.shape.len()
    }

    fn predict_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        let st = self.state(x_t, t, schedule)?;
        let sn = (1.0 - st.alpha_bar).sqrt();
        let mut eps = vec![0.0; x_t.len()];
        for (r, a) in st.responsibilities.iter().zip(&st.scaled_diffs) {
            for (e, ai) in eps.iter_mut().zip(a) {
                *e += r * ai;
            }
        }
        eps.iter_mut().for_each(|e| *e *= sn);
        Ok(eps)
    }

    /// Applies `√(1−ᾱ)[Σ r_k v/s_k − Σ r_k a_k(a_kᵀv) + ā(āᵀv)]` with
    /// `a_k = (x − √ᾱ m_k)/s_k` and `ā = Σ r_k a_k`, without forming matrices.
    fn jvp_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule, v: &[f64]) -> Result<Vec<f64>> {
        ensure_len(v, x_t.len())?;
        let st = self.state(x_t, t, schedule)?;
        let sn = (1.0 - st.alpha_bar).sqrt();
        let n = x_t.len();
        let mut mean_a = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut diag = 0.0;
        for k in 0..st.responsibilities.len() {
            let r = st.responsibilities[k];
            let a = &st.scaled_diffs[k];
            diag += r / st.spread[k];
            let proj = r * dot(a, v);
            for i in 0..n {
                mean_a[i] += r * a[i];
                out[i] -= proj * a[i];
            }
        }
        let mean_proj = dot(&mean_a, v);
        for i in 0..n {
            out[i] = sn * (out[i] + diag * v[i] + mean_a[i] * mean_proj);
        }
        Ok(out)
    }

    fn supports_jacobian(&self) -> bool {
        true
    }

    fn intensity(&self) -> IntensityMap {
        self.map
    }
}

/// Wraps a model and counts how often it is evaluated.
#[derive(Debug, Default)]
pub struct CountingModel<M> {
    inner: M,
    predictions: AtomicU64,
    jacobian_products: AtomicU64,
}

impl<M: ScoreModel> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            predictions: AtomicU64::new(0),
            jacobian_products: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn predictions(&self) -> u64 {
        self.predictions.load(Ordering::Relaxed)
    }

    pub fn jacobian_products(&self) -> u64 {
        self.jacobian_products.load(Ordering::Relaxed)
    }

    /// Forward evaluations plus Jacobian products; each backpropagation
    /// through a network costs about one forward pass.
    pub fn evaluations(&self) -> u64 {
        self.predictions() + self.jacobian_products()
    }

    pub fn reset(&self) {
        self.predictions.store(0, Ordering::Relaxed);
        self.jacobian_products.store(0, Ordering::Relaxed);
    }
}

impl<M: ScoreModel> ScoreModel for CountingModel<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.predictions.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_eps(x_t, t, schedule)
    }

    fn jvp_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule, v: &[f64]) -> Result<Vec<f64>> {
        self.jacobian_products.fetch_add(1, Ordering::Relaxed);
        self.inner.jvp_eps(x_t, t, schedule, v)
    }

    fn vjp_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule, v: &[f64]) -> Result<Vec<f64>> {
        self.jacobian_products.fetch_add(1, Ordering::Relaxed);
        self.inner.vjp_eps(x_t, t, schedule, v)
    }

    fn supports_jacobian(&self) -> bool {
        self.inner.supports_jacobian()
    }

    fn intensity(&self) -> IntensityMap {
        self.inner.intensity()
    }
}

/// `x̂₀ = (x_t − √(1−ᾱ_t) ε) / √ᾱ_t` for a given noise estimate.
pub fn tweedie_from_eps(x_t: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x_t.iter().zip(eps).map(|(x, e)| (x - sn * e) / sa).collect()
}

/// Tweedie posterior-mean estimate of the clean image.
pub fn tweedie_x0(x_t: &[f64], t: usize, model: &dyn ScoreModel, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let eps = model.predict_eps(x_t, t, schedule)?;
    Ok(tweedie_from_eps(x_t, &eps, schedule.alpha_bar(t)))
}

/// `(∇_{x_t} x̂₀) v = (v − √(1−ᾱ)(∇ε) v) / √ᾱ`.
pub fn posterior_mean_jvp(
    x_t: &[f64],
    t: usize,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    v: &[f64],
) -> Result<Vec<f64>> {
    let jv = model.jvp_eps(x_t, t, schedule, v)?;
    Ok(tweedie_from_eps(v, &jv, schedule.alpha_bar(t)))
}

/// `(∇_{x_t} x̂₀)ᵀ v`, the guidance direction of the exact-Jacobian sampler.
pub fn posterior_mean_vjp(
    x_t: &[f64],
    t: usize,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    v: &[f64],
) -> Result<Vec<f64>> {
    let jv = model.vjp_eps(x_t, t, schedule, v)?;
    Ok(tweedie_from_eps(v, &jv, schedule.alpha_bar(t)))
}

/// Local block of the scaled noise-predictor Jacobian `√(1−ᾱ_t) ∂ε_i/∂x_j`.
#[derive(Debug, Clone)]
pub struct JacobianBlock {
    pub segment: Vec<usize>,
    /// Row-major `n × n`, `n = segment.len()`.
    pub matrix: Vec<f64>,
    /// Off-diagonal share of the squared Frobenius norm.
    pub off_diagonal_energy: f64,
    /// `max_i |J_ii − 1|`.
    pub max_diagonal_deviation: f64,
}

impl JacobianBlock {
    pub fn size(&self) -> usize {
        self.segment.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.segment.len() + j]
    }
}

pub const MAX_JACOBIAN_SEGMENT: usize = 64;

/// Evaluates the scaled Jacobian on a pixel segment column by column with
/// JVPs, to check how close it is to the identity.
pub fn jacobian_approximation_check(
    model: &dyn ScoreModel,
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    segment: &[usize],
) -> Result<JacobianBlock> {
    if segment.is_empty() || segment.len() > MAX_JACOBIAN_SEGMENT {
        return Err(Error::InvalidArgument(format!(
            "segment must hold 1..={MAX_JACOBIAN_SEGMENT} pixels, got {}",
            segment.len()
        )));
    }
    if let Some(&bad) = segment.iter().find(|&&p| p >= x_t.len()) {
        return Err(Error::InvalidArgument(format!("pixel {bad} outside image")));
    }
    let n = segment.len();
    let scale = (1.0 - schedule.alpha_bar(t)).sqrt();
    let mut matrix = vec![0.0; n * n];
    let mut unit = vec![0.0; x_t.len()];
    for (j, &pj) in segment.iter().enumerate() {
        unit[pj] = 1.0;
        let col = model.jvp_eps(x_t, t, schedule, &unit)?;
        unit[pj] = 0.0;
        for (i, &pi) in segment.iter().enumerate() {
            matrix[i * n + j] = scale * col[pi];
        }
    }
    let (mut diag_sq, mut off_sq, mut dev) = (0.0, 0.0, 0.0f64);
    for i in 0..n {
        for j in 0..n {
            let v = matrix[i * n + j];
            if i == j {
                diag_sq += v * v;
                dev = dev.max((v - 1.0).abs());
            } else {
                off_sq += v * v;
            }
        }
    }
    let total = diag_sq + off_sq;
    Ok(JacobianBlock {
        segment: segment.to_vec(),
        matrix,
        off_diagonal_energy: if total > 0.0 { off_sq / total } else { 0.0 },
        max_diagonal_deviation: dev,
    })
}

//! Diffusion posterior samplers.
//!
//! * [`run_baseline_dps`]: full `T`-step ancestral sampling from pure noise
//!   with a gradient-norm-normalized guidance step through the exact
//!   posterior-mean Jacobian.
//! * [`run_stable_dps`]: jumpstart from a coarse estimate at `T′`, identity
//!   Jacobian, and `S` Adam sub-iterations over ordered subsets per step.
//!
//! Both keep their state in model space (see [`IntensityMap`]) and return
//! images in mm⁻¹. Random draws are keyed by `(seed, step)`, so runs are
//! reproducible bit for bit.

use rayon::prelude::*;

use crate::error::{ensure_len, Error, Result};
use crate::forward::{Measurement, SubsetPartition};
use crate::image::{norm2, ImageGrid};
use crate::metrics::RunEnsemble;
use crate::rng::{self, tag};
use crate::schedule::NoiseSchedule;
use crate::score::{posterior_mean_vjp, tweedie_from_eps, IntensityMap, ScoreModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Baseline,
    Stable,
}

impl std::fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMode::Baseline => "baseline",
            SamplerMode::Stable => "stable",
        })
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(SamplerMode::Baseline),
            "stable" => Ok(SamplerMode::Stable),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampler mode {other:?} (expected baseline or stable)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    /// Jumpstart step `T′` (stable mode only).
    pub t_prime: usize,
    /// Baseline: normalized guidance step length in model space.
    /// Stable: absolute Adam step in mm⁻¹.
    pub eta: f64,
    /// Ordered subsets, which is also the number of Adam updates per step.
    pub n_subsets: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub n_runs: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Stable,
            t_prime: 40,
            eta: 1e-3,
            n_subsets: 1,
            adam: AdamConfig::default(),
            seed: 0,
            n_runs: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_prime == 0 || self.t_prime > schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "t_prime must lie in 1..={}, got {}",
                schedule.steps(),
                self.t_prime
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if self.n_subsets == 0 {
            return Err(Error::InvalidArgument("n_subsets must be at least 1".into()));
        }
        if self.n_runs == 0 {
            return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::InvalidArgument("invalid Adam moments".into()));
        }
        Ok(())
    }
}

/// First and second Adam moments with the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
        self.step = 0;
    }
}

/// One bias-corrected Adam step on `x` in place.
pub fn adam_update(state: &mut AdamState, x: &mut [f64], grad: &[f64], eta: f64, cfg: &AdamConfig) {
    assert_eq!(x.len(), grad.len());
    assert_eq!(x.len(), state.m.len());
    state.step += 1;
    let k = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(k);
    let c2 = 1.0 - cfg.beta2.powi(k);
    for i in 0..x.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        x[i] -= eta * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// `x'_{t−1} = √α_t(1−ᾱ_{t−1})/(1−ᾱ_t) x_t + √ᾱ_{t−1}β_t/(1−ᾱ_t) x̂₀ + σ_t z`.
pub fn ancestral_step(x_t: &[f64], t: usize, x0_hat: &[f64], schedule: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    ensure_len(x0_hat, x_t.len())?;
    ensure_len(z, x_t.len())?;
    if t == 1 {
        // coefficients are exactly (0, 1, 0) here; 1 − ᾱ₁ ≠ β₁ in floating point
        return Ok(x0_hat.to_vec());
    }
    let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let denom = 1.0 - ab;
    let c_x = schedule.alpha(t).sqrt() * (1.0 - ab_prev) / denom;
    let c_0 = ab_prev.sqrt() * schedule.beta(t) / denom;
    let sigma = schedule.sigma(t);
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .zip(z)
        .map(|((x, x0), z)| c_x * x + c_0 * x0 + sigma * z)
        .collect())
}

/// The per-step noise `z` of a run.
pub fn step_noise(seed: u64, t: usize, n: usize) -> Vec<f64> {
    rng::standard_normal(seed, tag::SAMPLER_STEP + t as u64, n)
}

fn initial_noise(seed: u64, n: usize) -> Vec<f64> {
    rng::standard_normal(seed, tag::SAMPLER_INIT, n)
}

fn jumpstart(init: &ImageGrid, map: IntensityMap, t_prime: usize, schedule: &NoiseSchedule, seed: u64) -> Vec<f64> {
    let u = map.to_model(init.data());
    let eps = initial_noise(seed, u.len());
    let ab = schedule.alpha_bar(t_prime);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    u.iter().zip(&eps).map(|(u, e)| a * u + b * e).collect()
}

fn check_state(x: &[f64], t: usize, history: &[f64]) -> Result<()> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: t,
            reason: format!("non-finite state at pixel {i}"),
            norm_history: history.to_vec(),
        });
    }
    Ok(())
}

/// Where an unconditional reverse trajectory starts.
#[derive(Debug, Clone, Copy)]
pub enum Start<'a> {
    /// `x_T ~ N(0, I)`.
    Noise,
    /// Forward-diffuse `init` to `t_prime` and start there.
    Jumpstart { t_prime: usize, init: &'a ImageGrid },
}

/// Plain ancestral sampling with the same random streams the posterior
/// samplers use, so `η = 0` runs can be compared bit for bit.
pub fn run_unconditional(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    shape: crate::image::GridShape,
    start: Start<'_>,
    seed: u64,
) -> Result<ImageGrid> {
    let map = model.intensity();
    let (mut x, t_start) = match start {
        Start::Noise => (initial_noise(seed, shape.len()), schedule.steps()),
        Start::Jumpstart { t_prime, init } => {
            schedule.check_step(t_prime)?;
            (jumpstart(init, map, t_prime, schedule, seed), t_prime)
        }
    };
    for t in (1..=t_start).rev() {
        let z = step_noise(seed, t, x.len());
        let eps = model.predict_eps(&x, t, schedule)?;
        let x0 = tweedie_from_eps(&x, &eps, schedule.alpha_bar(t));
        x = ancestral_step(&x, t, &x0, schedule, &z)?;
        check_state(&x, t, &[])?;
    }
    ImageGrid::new(shape, map.to_physical(&x))
}

/// Baseline DPS with the exact posterior-mean Jacobian and step
/// size `η / ‖∇_{x_t} x̂₀ᵀ ∇L‖₂`.
pub fn run_baseline_dps(
    m: &Measurement,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<ImageGrid> {
    cfg.validate(schedule)?;
    if !model.supports_jacobian() {
        return Err(Error::JacobianUnavailable);
    }
    let shape = m.model().projector().shape();
    if model.dim() != shape.len() {
        return Err(Error::ShapeMismatch { expected: shape.len(), actual: model.dim() });
    }
    let map = model.intensity();
    let mut x = initial_noise(cfg.seed, shape.len());
    let mut history = Vec::new();
    for t in (1..=schedule.steps()).rev() {
        let z = step_noise(cfg.seed, t, x.len());
        let eps = model.predict_eps(&x, t, schedule)?;
        let x0 = tweedie_from_eps(&x, &eps, schedule.alpha_bar(t));
        let mut next = ancestral_step(&x, t, &x0, schedule, &z)?;
        if cfg.eta > 0.0 {
            let phys = map.to_physical(&x0);
            let grad: Vec<f64> = match m.grad_neg_log_likelihood(&phys) {
                Ok(g) => g.into_iter().map(|g| g * map.scale).collect(),
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        step: t,
                        reason: format!("non-finite {what}"),
                        norm_history: history,
                    })
                }
                Err(e) => return Err(e),
            };
            let guidance = posterior_mean_vjp(&x, t, model, schedule, &grad)?;
            let norm = norm2(&guidance);
            history.push(norm);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    step: t,
                    reason: "non-finite guidance norm".into(),
                    norm_history: history,
                });
            }
            if norm > 0.0 {
                let step = cfg.eta / norm;
                for (n, g) in next.iter_mut().zip(&guidance) {
                    *n -= step * g;
                }
            }
        }
        check_state(&next, t, &history)?;
        x = next;
    }
    ImageGrid::new(shape, map.to_physical(&x))
}

/// Data-consistency objective before and after the Adam sub-iterations of
/// one stable-DPS time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    pub before: f64,
    pub after: f64,
}

/// Stable DPS: jumpstart, identity Jacobian, and `S` Adam
/// updates of `x̂₀` over bit-reversal-ordered subsets per step.
pub fn run_stable_dps(
    m: &Measurement,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    init: &ImageGrid,
) -> Result<ImageGrid> {
    stable_inner(m, model, schedule, cfg, init, None)
}

/// [`run_stable_dps`] that also records the per-step objective.
pub fn run_stable_dps_traced(
    m: &Measurement,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    init: &ImageGrid,
) -> Result<(ImageGrid, Vec<StepTrace>)> {
    let mut trace = Vec::new();
    let img = stable_inner(m, model, schedule, cfg, init, Some(&mut trace))?;
    Ok((img, trace))
}

fn stable_inner(
    m: &Measurement,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    init: &ImageGrid,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<ImageGrid> {
    cfg.validate(schedule)?;
    let shape = m.model().projector().shape();
    if init.shape() != shape {
        return Err(Error::InvalidArgument("initial image does not match the projector grid".into()));
    }
    let map = model.intensity();
    let part = SubsetPartition::interleaved(m.model().n_views(), cfg.n_subsets)?;
    let order = part.visit_order();
    let mut adam = AdamState::new(shape.len());
    let mut x = jumpstart(init, map, cfg.t_prime, schedule, cfg.seed);
    let mut history = Vec::new();
    for t in (1..=cfg.t_prime).rev() {
        let z = step_noise(cfg.seed, t, x.len());
        let eps = model.predict_eps(&x, t, schedule)?;
        let x0 = tweedie_from_eps(&x, &eps, schedule.alpha_bar(t));
        let mut next = ancestral_step(&x, t, &x0, schedule, &z)?;
        if cfg.eta > 0.0 {
            let start = map.to_physical(&x0);
            let mut updated = start.clone();
            adam.reset();
            for &s in &order {
                let grad = match m.grad_subset(&updated, &part, s) {
                    Ok(g) => g,
                    Err(Error::NonFinite(what)) => {
                        return Err(Error::Diverged {
                            step: t,
                            reason: format!("non-finite {what}"),
                            norm_history: history,
                        })
                    }
                    Err(e) => return Err(e),
                };
                history.push(norm2(&grad));
                adam_update(&mut adam, &mut updated, &grad, cfg.eta, &cfg.adam);
            }
            if let Some(tr) = trace.as_deref_mut() {
                let before = m.neg_log_likelihood(&start)?;
                let after = if updated.iter().all(|v| v.is_finite()) {
                    m.neg_log_likelihood(&updated)?
                } else {
                    f64::NAN
                };
                tr.push(StepTrace { t, before, after });
            }
            // x_{t−1} = x'_{t−1} − x̂₀ + x̂₀′, applied as a difference so that a
            // zero update leaves x'_{t−1} untouched
            for ((n, u), s) in next.iter_mut().zip(&updated).zip(&start) {
                *n += (u - s) / map.scale;
            }
        }
        check_state(&next, t, &history)?;
        x = next;
    }
    ImageGrid::new(shape, map.to_physical(&x))
}

/// Runs one reconstruction with the given seed in the configured mode.
pub fn run_single(
    m: &Measurement,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    init: Option<&ImageGrid>,
) -> Result<ImageGrid> {
    match cfg.mode {
        SamplerMode::Baseline => run_baseline_dps(m, model, schedule, cfg),
        SamplerMode::Stable => {
            let init = init.ok_or_else(|| {
                Error::InvalidArgument("stable DPS needs an initial reconstruction".into())
            })?;
            run_stable_dps(m, model, schedule, cfg, init)
        }
    }
}

/// Seed of run `k` in an ensemble with master seed `master`.
pub fn run_seed(master: u64, k: usize) -> u64 {
    rng::derive_seed(master, k as u64)
}

/// Result of an ensemble in which individual runs may diverge.
#[derive(Debug)]
pub struct EnsembleOutcome {
    pub runs: Vec<ImageGrid>,
    pub failures: Vec<(usize, Error)>,
}

/// `cfg.n_runs` independent reconstructions sharing one measurement, run in
/// parallel; divergent runs are reported rather than aborting the rest.
pub fn run_ensemble_tolerant(
    m: &Measurement,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    init: Option<&ImageGrid>,
) -> Result<EnsembleOutcome> {
    cfg.validate(schedule)?;
    let results: Vec<Result<ImageGrid>> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|k| {
            let run_cfg = SamplerConfig {
                seed: run_seed(cfg.seed, k),
                ..cfg.clone()
            };
            run_single(m, model, schedule, &run_cfg, init)
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(img) => runs.push(img),
            Err(e @ Error::Diverged { .. }) => failures.push((k, e)),
            Err(e) => return Err(e),
        }
    }
    Ok(EnsembleOutcome { runs, failures })
}

/// `cfg.n_runs` reconstructions; the first divergence aborts.
pub fn run_ensemble(
    m: &Measurement,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    init: Option<&ImageGrid>,
) -> Result<RunEnsemble> {
    let out = run_ensemble_tolerant(m, model, schedule, cfg, init)?;
    if let Some((_, e)) = out.failures.into_iter().next() {
        return Err(e);
    }
    RunEnsemble::new(out.runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_from_fresh_state_is_a_no_op() {
        let mut st = AdamState::new(3);
        let mut x = vec![1.0, -2.0, 3.0];
        adam_update(&mut st, &mut x, &[0.0; 3], 0.5, &AdamConfig::default());
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_moments_decay_under_zero_gradient() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(1);
        let mut x = vec![0.0];
        adam_update(&mut st, &mut x, &[2.0], 0.1, &cfg);
        let (m1, v1) = (st.m[0], st.v[0]);
        adam_update(&mut st, &mut x, &[0.0], 0.1, &cfg);
        assert!((st.m[0] - cfg.beta1 * m1).abs() < 1e-15);
        assert!((st.v[0] - cfg.beta2 * v1).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_eta() {
        // m̂ = g, v̂ = g² on the first step, so the move is η·g/(|g| + ε)
        let cfg = AdamConfig::default();
        for g in [3.0, -0.02, 1e4] {
            let mut st = AdamState::new(1);
            let mut x = vec![0.0];
            adam_update(&mut st, &mut x, &[g], 0.01, &cfg);
            let want = -0.01 * g / (g.abs() + cfg.epsilon);
            assert!((x[0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_constant_gradient_moves_eta_per_step() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(1);
        let mut x = vec![0.0];
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_update(&mut st, &mut x, &[0.7], 0.05, &cfg);
            let step = prev - x[0];
            assert!((step - 0.05).abs() < 1e-6);
            prev = x[0];
        }
    }

    #[test]
    fn ancestral_last_step_returns_x0() {
        let s = NoiseSchedule::ddpm_default();
        let out = ancestral_step(&[5.0, -1.0], 1, &[0.25, 0.5], &s, &[3.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.25, 0.5]);
    }

    #[test]
    fn ancestral_constant_input_matches_scalar_formula() {
        let s = NoiseSchedule::ddpm_default();
        let c = 0.8;
        for t in [2, 17, 500, 1000] {
            let out = ancestral_step(&[c; 4], t, &[c; 4], &s, &[0.0; 4]).unwrap();
            let (ab, abp, b) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t));
            let want = c * ((1.0 - b).sqrt() * (1.0 - abp) + abp.sqrt() * b) / (1.0 - ab);
            for v in out {
                assert!((v - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn step_noise_is_reproducible() {
        assert_eq!(step_noise(9, 30, 8), step_noise(9, 30, 8));
        assert_ne!(step_noise(9, 30, 8), step_noise(9, 31, 8));
    }

    #[test]
    fn config_validation() {
        let s = NoiseSchedule::ddpm_default();
        let ok = SamplerConfig::default();
        assert!(ok.validate(&s).is_ok());
        for bad in [
            SamplerConfig { t_prime: 0, ..ok.clone() },
            SamplerConfig { t_prime: 1001, ..ok.clone() },
            SamplerConfig { eta: -1.0, ..ok.clone() },
            SamplerConfig { n_subsets: 0, ..ok.clone() },
            SamplerConfig { n_runs: 0, ..ok.clone() },
        ] {
            assert!(bad.validate(&s).is_err());
        }
        assert_eq!("stable".parse::<SamplerMode>().unwrap(), SamplerMode::Stable);
        assert!("ddim".parse::<SamplerMode>().is_err());
    }
}

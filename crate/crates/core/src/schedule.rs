//! Discrete DDPM noise schedule, forward diffusion and the jumpstart
//! discrepancy measure.
//!
//! Time steps are 1-based: `t ∈ 1..=T`, with `ᾱ₀ ≡ 1`.

use crate::error::{ensure_len, Error, Result};
use crate::image::ImageGrid;
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `β` from `beta_first` to `beta_last` inclusive.
    pub fn linear(steps: usize, beta_first: f64, beta_last: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(0.0 < beta_first && beta_first < beta_last && beta_last < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_first < beta_last < 1, got {beta_first}, {beta_last}"
            )));
        }
        let span = (beta_last - beta_first) / (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if i == steps - 1 {
                    beta_last
                } else {
                    beta_first + span * i as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    /// The standard DDPM configuration: 1000 steps from 1e-4 to 0.02.
    pub fn ddpm_default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        // posterior standard deviation; zero at t = 1 because ᾱ₀ = 1
        let sigma = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
            })
            .collect();
        Self {
            beta,
            alpha_bar,
            sigma,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimeStepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `β_t`, for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `α_t = 1 − β_t`.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ₀ = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Ancestral-sampling noise scale `σ_t = √((1−ᾱ_{t−1})/(1−ᾱ_t)·β_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε` with `ε` supplied by the caller.
pub fn diffuse_with_noise(x0: &[f64], noise: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    ensure_len(noise, x0.len())?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// Forward diffusion of `x0` to step `t` with noise from the seeded stream.
pub fn forward_diffuse(x0: &ImageGrid, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<ImageGrid> {
    let noise = rng::standard_normal(seed, tag::DIFFUSE + t as u64, x0.data().len());
    ImageGrid::new(x0.shape(), diffuse_with_noise(x0.data(), &noise, t, schedule)?)
}

/// KL divergence between the step-`t` forward marginals started from `x0_hat`
/// and from `x0`: `ᾱ_t / (2(1−ᾱ_t)) · ‖x̂₀ − x₀‖²`.
pub fn jumpstart_kl(x0_hat: &ImageGrid, x0: &ImageGrid, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    schedule.check_step(t)?;
    if !x0_hat.congruent(x0) {
        return Err(Error::ShapeMismatch {
            expected: x0.data().len(),
            actual: x0_hat.data().len(),
        });
    }
    let sq: f64 = x0_hat
        .data()
        .iter()
        .zip(x0.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(kl_discrepancy(schedule.alpha_bar(t), sq))
}

/// `ᾱ / (2(1−ᾱ)) · ‖Δ‖²` for a given squared difference norm.
pub fn kl_discrepancy(alpha_bar: f64, sq_norm: f64) -> f64 {
    alpha_bar / (2.0 * (1.0 - alpha_bar)) * sq_norm
}

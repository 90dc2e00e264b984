//! Nonlinear measurement model `ȳ = B exp(−A x)`, its weighted least-squares
//! log-likelihood, exact gradients and ordered-subset gradients.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::geometry::{GainBlurOperator, Projector};
use crate::image::ImageGrid;
use crate::rng::{self, tag};

/// Line integrals are clamped to this value before exponentiation.
pub const DEFAULT_MAX_LINE_INTEGRAL: f64 = 40.0;

/// Plug-in variance floor in counts².
pub const DEFAULT_VARIANCE_FLOOR: f64 = 10.0;

/// System model: projector `A`, detector operator `B`, and the overflow clamp.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    projector: Arc<Projector>,
    detector: Arc<GainBlurOperator>,
    max_line_integral: f64,
}

/// Options for [`ForwardModel::simulate_noisy`].
#[derive(Debug, Clone, Copy)]
pub struct NoiseOptions {
    pub seed: u64,
    /// Skip the noise draw entirely (`y = ȳ`).
    pub noiseless: bool,
    pub variance_floor: f64,
}

impl NoiseOptions {
    pub fn seeded(seed: u64) -> Self {
        Self {
            seed,
            noiseless: false,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

impl ForwardModel {
    pub fn new(projector: Arc<Projector>, detector: Arc<GainBlurOperator>) -> Result<Self> {
        if detector.n_det() != projector.geometry().n_det() {
            return Err(Error::ShapeMismatch {
                expected: projector.geometry().n_det(),
                actual: detector.n_det(),
            });
        }
        Ok(Self {
            projector,
            detector,
            max_line_integral: DEFAULT_MAX_LINE_INTEGRAL,
        })
    }

    pub fn with_max_line_integral(mut self, max: f64) -> Self {
        self.max_line_integral = max;
        self
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn detector(&self) -> &GainBlurOperator {
        &self.detector
    }

    pub fn max_line_integral(&self) -> f64 {
        self.max_line_integral
    }

    pub fn n_views(&self) -> usize {
        self.projector.geometry().n_views()
    }

    pub fn n_det(&self) -> usize {
        self.projector.geometry().n_det()
    }

    /// Transmitted fractions `exp(−min(A x, max))` for the listed views.
    fn transmission(&self, x: &[f64], views: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let line = self.projector.project_views(x, views)?;
        let t = line
            .iter()
            .map(|&p| (-p.min(self.max_line_integral)).exp())
            .collect();
        Ok((line, t))
    }

    /// Mean counts `ȳ(x)` for every detector reading.
    pub fn mean_measurement(&self, x: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.n_views()).collect();
        let (_, t) = self.transmission(x, &all)?;
        self.detector.apply(&t)
    }

    /// Largest line integral through `x`; the clamp is inactive when this is
    /// below [`ForwardModel::max_line_integral`].
    pub fn peak_line_integral(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .projector
            .project(x)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Draws `y ~ N(ȳ, diag(ȳ))` and attaches the plug-in variance
    /// `max(y, floor)`.
    pub fn simulate_noisy(&self, x: &ImageGrid, opts: NoiseOptions) -> Result<Measurement> {
        let mean = self.mean_measurement(x.data())?;
        let counts: Vec<f64> = if opts.noiseless {
            mean
        } else {
            mean.par_iter()
                .enumerate()
                .map(|(i, &m)| {
                    let mut r = rng::stream(opts.seed, tag::MEASUREMENT + i as u64);
                    let z: f64 = r.sample(StandardNormal);
                    m + m.max(0.0).sqrt() * z
                })
                .collect()
        };
        Measurement::with_plugin_variance(self.clone(), counts, opts.variance_floor)
    }
}

/// Observed counts with their diagonal covariance.
#[derive(Debug, Clone)]
pub struct Measurement {
    model: ForwardModel,
    counts: Vec<f64>,
    variance: Vec<f64>,
}

impl Measurement {
    pub fn new(model: ForwardModel, counts: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        let n = model.projector.geometry().n_bins();
        ensure_len(&counts, n)?;
        ensure_len(&variance, n)?;
        ensure_finite(&counts, "measurement counts")?;
        if variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument("measurement variance must be positive".into()));
        }
        Ok(Self {
            model,
            counts,
            variance,
        })
    }

    /// `K_ii = max(y_i, floor)`.
    pub fn with_plugin_variance(model: ForwardModel, counts: Vec<f64>, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::InvalidArgument("variance floor must be positive".into()));
        }
        let variance = counts.iter().map(|&y| y.max(floor)).collect();
        Self::new(model, counts, variance)
    }

    pub fn model(&self) -> &ForwardModel {
        &self.model
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    fn view_slice(&self, data: &[f64], views: &[usize]) -> Vec<f64> {
        let n = self.model.n_det();
        views
            .iter()
            .flat_map(|&v| data[v * n..(v + 1) * n].iter().copied())
            .collect()
    }

    /// Objective and gradient restricted to `views`.
    fn objective_views(&self, x: &[f64], views: &[usize], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        ensure_finite(x, "image")?;
        let (line, t) = self.model.transmission(x, views)?;
        let mean = self.model.detector.apply(&t)?;
        let y = self.view_slice(&self.counts, views);
        let k = self.view_slice(&self.variance, views);
        let weighted: Vec<f64> = mean
            .iter()
            .zip(&y)
            .zip(&k)
            .map(|((m, y), k)| (m - y) / k)
            .collect();
        let value: f64 = mean
            .iter()
            .zip(&y)
            .zip(&weighted)
            .map(|((m, y), w)| (m - y) * w)
            .sum();
        if !with_grad {
            return Ok((value, None));
        }
        let back = self.model.detector.adjoint(&weighted)?;
        let max = self.model.max_line_integral;
        let chain: Vec<f64> = back
            .iter()
            .zip(&t)
            .zip(&line)
            .map(|((b, e), p)| if *p < max { -2.0 * e * b } else { 0.0 })
            .collect();
        let grad = self.model.projector.backproject_views(&chain, views)?;
        Ok((value, Some(grad)))
    }

    /// `‖B exp(−A x) − y‖²_{K⁻¹}`.
    pub fn neg_log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let all: Vec<usize> = (0..self.model.n_views()).collect();
        Ok(self.objective_views(x, &all, false)?.0)
    }

    /// Gradient of [`Measurement::neg_log_likelihood`].
    pub fn grad_neg_log_likelihood(&self, x: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.model.n_views()).collect();
        Ok(self.objective_views(x, &all, true)?.1.unwrap())
    }

    /// Objective over one subset's views.
    pub fn neg_log_likelihood_subset(&self, x: &[f64], part: &SubsetPartition, s: usize) -> Result<f64> {
        Ok(self.objective_views(x, part.subset(s)?, false)?.0)
    }

    /// `S ·` (gradient restricted to subset `s`'s views).
    pub fn grad_subset(&self, x: &[f64], part: &SubsetPartition, s: usize) -> Result<Vec<f64>> {
        if part.n_views() != self.model.n_views() {
            return Err(Error::ShapeMismatch {
                expected: self.model.n_views(),
                actual: part.n_views(),
            });
        }
        let views = part.subset(s)?;
        let scale = part.n_subsets() as f64;
        let mut g = self.objective_views(x, views, true)?.1.unwrap();
        g.iter_mut().for_each(|v| *v *= scale);
        Ok(g)
    }
}

/// Interleaved partition of view indices into `S` ordered subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPartition {
    n_views: usize,
    subsets: Vec<Vec<usize>>,
}

impl SubsetPartition {
    /// Subset `s` holds views `s, s + S, s + 2S, …`.
    pub fn interleaved(n_views: usize, n_subsets: usize) -> Result<Self> {
        if n_subsets == 0 {
            return Err(Error::InvalidArgument("subset count must be at least 1".into()));
        }
        if n_subsets > n_views {
            return Err(Error::InvalidArgument(format!(
                "{n_subsets} subsets over {n_views} views leaves a subset empty"
            )));
        }
        let subsets = (0..n_subsets)
            .map(|s| (s..n_views).step_by(n_subsets).collect())
            .collect();
        Ok(Self { n_views, subsets })
    }

    pub fn n_subsets(&self) -> usize {
        self.subsets.len()
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn subset(&self, s: usize) -> Result<&[usize]> {
        match self.subsets.get(s) {
            Some(v) if !v.is_empty() => Ok(v),
            Some(_) => Err(Error::InvalidArgument(format!("subset {s} is empty"))),
            None => Err(Error::InvalidArgument(format!(
                "subset index {s} out of range for {} subsets",
                self.subsets.len()
            ))),
        }
    }

    /// Bit-reversal visiting order over subset indices.
    pub fn visit_order(&self) -> Vec<usize> {
        bit_reversal_order(self.subsets.len())
    }
}

fn bit_reversal_order(n: usize) -> Vec<usize> {
    if n <= 1 {
        return vec![0; n];
    }
    let bits = usize::BITS - (n - 1).leading_zeros();
    (0..1usize << bits)
        .map(|i| i.reverse_bits() >> (usize::BITS - bits))
        .filter(|&r| r < n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FanBeamGeometry;
    use crate::image::GridShape;

    fn tiny_model(n_views: usize, sigma: f64) -> ForwardModel {
        let g = FanBeamGeometry::full_rotation(400.0, 200.0, 12, 2.0, n_views).unwrap();
        let shape = GridShape::new(6, 6, 2.0).unwrap();
        let p = Arc::new(Projector::new(g, shape));
        let b = Arc::new(GainBlurOperator::uniform(12, 1000.0, sigma).unwrap());
        ForwardModel::new(p, b).unwrap()
    }

    #[test]
    fn zero_image_gives_flood_field() {
        let m = tiny_model(4, 0.5);
        let y = m.mean_measurement(&vec![0.0; 36]).unwrap();
        assert!(y.iter().all(|v| (v - 1000.0).abs() < 1e-9));
    }

    #[test]
    fn single_bin_objective() {
        // one-view, one-bin model; ȳ − y = 3 with K = 9
        let g = FanBeamGeometry::new(400.0, 200.0, 1, 1.0, vec![0.0]).unwrap();
        let shape = GridShape::new(2, 2, 1.0).unwrap();
        let p = Arc::new(Projector::new(g, shape));
        let b = Arc::new(GainBlurOperator::uniform(1, 100.0, 0.0).unwrap());
        let model = ForwardModel::new(p, b).unwrap();
        let m = Measurement::new(model, vec![97.0], vec![9.0]).unwrap();
        assert!((m.neg_log_likelihood(&[0.0; 4]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn consistent_data_has_zero_objective_and_gradient() {
        let model = tiny_model(5, 0.5);
        let x: Vec<f64> = (0..36).map(|i| 0.01 + 0.001 * (i % 7) as f64).collect();
        let y = model.mean_measurement(&x).unwrap();
        let m = Measurement::with_plugin_variance(model, y, 10.0).unwrap();
        assert_eq!(m.neg_log_likelihood(&x).unwrap(), 0.0);
        assert!(m.grad_neg_log_likelihood(&x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn noiseless_simulation_is_exact_and_seeded_is_reproducible() {
        let model = tiny_model(3, 0.5);
        let x = ImageGrid::filled(model.projector().shape(), 0.01);
        let mean = model.mean_measurement(x.data()).unwrap();
        let opts = NoiseOptions {
            noiseless: true,
            ..NoiseOptions::seeded(1)
        };
        assert_eq!(model.simulate_noisy(&x, opts).unwrap().counts(), &mean[..]);
        let a = model.simulate_noisy(&x, NoiseOptions::seeded(5)).unwrap();
        let b = model.simulate_noisy(&x, NoiseOptions::seeded(5)).unwrap();
        assert_eq!(a.counts(), b.counts());
        assert_ne!(a.counts(), &mean[..]);
    }

    #[test]
    fn plugin_variance_floor() {
        let model = tiny_model(1, 0.0);
        let mut counts = vec![500.0; 12];
        counts[0] = 2.0;
        counts[1] = -4.0;
        let m = Measurement::with_plugin_variance(model, counts, 10.0).unwrap();
        assert_eq!(m.variance()[0], 10.0);
        assert_eq!(m.variance()[1], 10.0);
        assert_eq!(m.variance()[2], 500.0);
    }

    #[test]
    fn interleaved_partition() {
        let p = SubsetPartition::interleaved(24, 3).unwrap();
        assert_eq!(p.subset(0).unwrap(), &[0, 3, 6, 9, 12, 15, 18, 21]);
        assert_eq!(p.subset(1).unwrap()[..3], [1, 4, 7]);
        assert_eq!(p.subset(2).unwrap()[..3], [2, 5, 8]);
        assert!(p.subset(3).is_err());
        assert!(SubsetPartition::interleaved(4, 5).is_err());
        assert!(SubsetPartition::interleaved(4, 0).is_err());
    }

    #[test]
    fn bit_reversal_visits_every_subset_once() {
        assert_eq!(bit_reversal_order(1), vec![0]);
        assert_eq!(bit_reversal_order(4), vec![0, 2, 1, 3]);
        assert_eq!(bit_reversal_order(5), vec![0, 4, 2, 1, 3]);
        for n in 1..40 {
            let mut o = bit_reversal_order(n);
            o.sort_unstable();
            assert_eq!(o, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_subset_equals_full_gradient() {
        let model = tiny_model(6, 0.5);
        let truth = vec![0.01; 36];
        let m = model.simulate_noisy(&ImageGrid::new(model.projector().shape(), truth).unwrap(), NoiseOptions::seeded(3)).unwrap();
        let x = vec![0.012; 36];
        let part = SubsetPartition::interleaved(6, 1).unwrap();
        assert_eq!(
            m.grad_subset(&x, &part, 0).unwrap(),
            m.grad_neg_log_likelihood(&x).unwrap()
        );
    }
}

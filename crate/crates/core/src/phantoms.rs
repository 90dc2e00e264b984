//! Ellipse phantoms, randomized phantom families and priors fitted to them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GridShape, ImageGrid};
use crate::rng::{self, tag};
use crate::schedule::NoiseSchedule;
use crate::score::{GaussianPrior, GmmPrior, IntensityMap, ScoreModel};

/// Attenuation range accepted for phantom images, mm⁻¹.
pub const MAX_ATTENUATION: f64 = 0.06;
/// Floor of the per-pixel prior variance, (mm⁻¹)².
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const MIN_PRIOR_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Center `(x, y)` in mm.
    pub center: [f64; 2],
    /// Semi-axes `(a, b)` in mm before rotation.
    pub axes: [f64; 2],
    /// Counter-clockwise rotation in radians.
    #[serde(default)]
    pub rotation: f64,
    /// Additive attenuation in mm⁻¹.
    pub value: f64,
}

impl Ellipse {
    pub fn disk(center: [f64; 2], radius: f64, value: f64) -> Self {
        Self {
            center,
            axes: [radius, radius],
            rotation: 0.0,
            value,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2) <= 1.0
    }

    /// Radius of the smallest origin-centered circle containing the ellipse.
    fn reach(&self) -> f64 {
        self.center[0].hypot(self.center[1]) + self.axes[0].max(self.axes[1])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsePhantomSpec {
    #[serde(default)]
    pub background: f64,
    #[serde(default, rename = "ellipse")]
    pub ellipses: Vec<Ellipse>,
}

impl EllipsePhantomSpec {
    pub fn new(background: f64, ellipses: Vec<Ellipse>) -> Result<Self> {
        let spec = Self { background, ellipses };
        spec.check_values()?;
        Ok(spec)
    }

    fn check_values(&self) -> Result<()> {
        if !(0.0..=MAX_ATTENUATION).contains(&self.background) {
            return Err(Error::InvalidArgument(format!(
                "background {} outside [0, {MAX_ATTENUATION}]",
                self.background
            )));
        }
        for e in &self.ellipses {
            if !(e.axes[0] > 0.0 && e.axes[1] > 0.0) {
                return Err(Error::InvalidArgument("ellipse semi-axes must be positive".into()));
            }
            if !(e.value.abs() <= MAX_ATTENUATION && e.center.iter().chain(&[e.rotation]).all(|v| v.is_finite())) {
                return Err(Error::InvalidArgument(format!("invalid ellipse {e:?}")));
            }
        }
        Ok(())
    }

    /// Checks that every ellipse lies inside `shape` and that the composed
    /// image stays within `[0, MAX_ATTENUATION]`.
    pub fn validate(&self, shape: GridShape) -> Result<()> {
        self.check_values()?;
        let (hw, hh) = shape.half_extent();
        for e in &self.ellipses {
            if e.reach() > hw.min(hh) {
                return Err(Error::InvalidArgument(format!("ellipse {e:?} extends past the grid")));
            }
        }
        let img = rasterize(self, shape);
        if img.min() < 0.0 || img.max() > MAX_ATTENUATION {
            return Err(Error::InvalidArgument(format!(
                "composed attenuation [{}, {}] outside [0, {MAX_ATTENUATION}]",
                img.min(),
                img.max()
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.check_values()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("phantom spec serializes")
    }
}

/// Pixel-center inclusion with additive composition over the background.
pub fn rasterize(spec: &EllipsePhantomSpec, shape: GridShape) -> ImageGrid {
    let mut data = vec![spec.background; shape.len()];
    for row in 0..shape.height {
        for col in 0..shape.width {
            let (x, y) = shape.pixel_center(row, col);
            let px = &mut data[row * shape.width + col];
            for e in &spec.ellipses {
                if e.contains(x, y) {
                    *px += e.value;
                }
            }
        }
    }
    ImageGrid::new(shape, data).expect("finite phantom")
}

/// A distribution over phantoms. Geometry scales with the grid's smaller
/// half extent `R`.
#[derive(Debug, Clone, PartialEq)]
pub enum PhantomFamily {
    /// Water disk of radius `R/2`; deterministic.
    Disk,
    /// Body outline with lungs, spine, heart and an occasional nodule, all
    /// with randomized size, position and contrast.
    ChestLite,
    /// A featureless body-shaped ellipse; deterministic and outside the
    /// support of `ChestLite`.
    OodHomogeneous,
    /// Uniform choice among fixed specs.
    Templates(Vec<EllipsePhantomSpec>),
}

impl PhantomFamily {
    pub const NAMES: [&'static str; 3] = ["chest-lite", "disk", "ood-homogeneous"];

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "chest-lite" => Ok(Self::ChestLite),
            "disk" => Ok(Self::Disk),
            "ood-homogeneous" => Ok(Self::OodHomogeneous),
            other => Err(Error::InvalidArgument(format!(
                "unknown phantom family {other:?} (expected one of {:?})",
                Self::NAMES
            ))),
        }
    }

    pub fn sample(&self, shape: GridShape, seed: u64) -> EllipsePhantomSpec {
        let (hw, hh) = shape.half_extent();
        let r = hw.min(hh);
        let mut g = rng::stream(seed, tag::PHANTOM);
        let mut jit = |lo: f64, hi: f64| g.random_range(lo..hi);
        match self {
            Self::Disk => EllipsePhantomSpec {
                background: 0.0,
                ellipses: vec![Ellipse::disk([0.0, 0.0], 0.5 * r, 0.02)],
            },
            Self::OodHomogeneous => EllipsePhantomSpec {
                background: 0.0,
                ellipses: vec![Ellipse {
                    center: [0.0, 0.0],
                    axes: [0.8 * r, 0.6 * r],
                    rotation: 0.1,
                    value: 0.02,
                }],
            },
            Self::ChestLite => {
                let mut ellipses = vec![Ellipse {
                    center: [0.0, 0.0],
                    axes: [r * jit(0.76, 0.84), r * jit(0.58, 0.64)],
                    rotation: jit(-0.05, 0.05),
                    value: 0.02 * jit(0.95, 1.05),
                }];
                let lung = -0.016 * jit(0.9, 1.1);
                for side in [-1.0, 1.0] {
                    ellipses.push(Ellipse {
                        center: [side * r * jit(0.42, 0.48), r * jit(0.0, 0.08)],
                        axes: [r * jit(0.17, 0.21), r * jit(0.33, 0.40)],
                        rotation: side * jit(0.0, 0.15),
                        value: lung,
                    });
                }
                ellipses.push(Ellipse::disk([0.0, -r * jit(0.40, 0.46)], r * jit(0.08, 0.10), 0.012 * jit(0.9, 1.1)));
                ellipses.push(Ellipse {
                    center: [r * jit(0.0, 0.06), -r * jit(0.0, 0.1)],
                    axes: [r * jit(0.12, 0.15), r * jit(0.16, 0.2)],
                    rotation: jit(-0.3, 0.3),
                    value: 0.002 * jit(0.8, 1.2),
                });
                if jit(0.0, 1.0) < 0.5 {
                    let side = if jit(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
                    ellipses.push(Ellipse::disk(
                        [side * r * jit(0.40, 0.50), r * jit(0.0, 0.15)],
                        r * jit(0.03, 0.05),
                        0.012,
                    ));
                }
                EllipsePhantomSpec {
                    background: 0.0,
                    ellipses,
                }
            }
            Self::Templates(specs) => {
                assert!(!specs.is_empty(), "template family needs at least one spec");
                let k = g.random_range(0..specs.len());
                specs[k].clone()
            }
        }
    }

    /// `n` rasterized draws; draw `i` uses the derived seed `(seed, i)`.
    pub fn rasterized_samples(&self, shape: GridShape, n: usize, seed: u64) -> Vec<ImageGrid> {
        (0..n)
            .map(|i| rasterize(&self.sample(shape, rng::derive_seed(seed, i as u64)), shape))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    Gaussian,
    Gmm { components: usize },
}

/// A prior fitted to a phantom family.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchedPrior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

impl MatchedPrior {
    /// Log-density of a physical image under the fitted prior, in model
    /// space coordinates.
    pub fn log_density_physical(&self, x: &ImageGrid) -> f64 {
        let map = self.intensity();
        let u = map.to_model(x.data());
        match self {
            Self::Gaussian(p) => p.log_density(&u),
            Self::Gmm(p) => p.log_density(&u),
        }
    }

    fn inner(&self) -> &dyn ScoreModel {
        match self {
            Self::Gaussian(p) => p,
            Self::Gmm(p) => p,
        }
    }
}

impl ScoreModel for MatchedPrior {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn predict_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        self.inner().predict_eps(x_t, t, schedule)
    }

    fn jvp_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule, v: &[f64]) -> Result<Vec<f64>> {
        self.inner().jvp_eps(x_t, t, schedule, v)
    }

    fn vjp_eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule, v: &[f64]) -> Result<Vec<f64>> {
        self.inner().vjp_eps(x_t, t, schedule, v)
    }

    fn supports_jacobian(&self) -> bool {
        self.inner().supports_jacobian()
    }

    fn intensity(&self) -> IntensityMap {
        self.inner().intensity()
    }
}

/// Fits a prior to `n_samples` rasterized draws of `family`.
///
/// Gaussian mode uses the empirical per-pixel mean and (population)
/// variance floored at [`VARIANCE_FLOOR`]. GMM mode clusters the draws with
/// k-means and gives each cluster an isotropic variance.
pub fn build_matched_prior(
    family: &PhantomFamily,
    shape: GridShape,
    n_samples: usize,
    mode: PriorMode,
    seed: u64,
    map: IntensityMap,
) -> Result<MatchedPrior> {
    if n_samples < MIN_PRIOR_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "matched prior needs at least {MIN_PRIOR_SAMPLES} samples, got {n_samples}"
        )));
    }
    let samples = family.rasterized_samples(shape, n_samples, seed);
    let data: Vec<&[f64]> = samples.iter().map(|s| s.data()).collect();
    match mode {
        PriorMode::Gaussian => {
            let (mean, var) = pixel_moments(&data, shape.len());
            let var: Vec<f64> = var.into_iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
            let mean = ImageGrid::new(shape, mean)?;
            Ok(MatchedPrior::Gaussian(GaussianPrior::from_physical(&mean, &var, map)?))
        }
        PriorMode::Gmm { components } => {
            if components == 0 || components > n_samples {
                return Err(Error::InvalidArgument(format!(
                    "component count must lie in 1..={n_samples}, got {components}"
                )));
            }
            let clusters = kmeans(&data, components, seed);
            let s2 = map.scale * map.scale;
            let mut weights = Vec::new();
            let mut means = Vec::new();
            let mut variances = Vec::new();
            for c in clusters.into_iter().filter(|c| !c.members.is_empty()) {
                weights.push(c.members.len() as f64 / n_samples as f64);
                variances.push(c.variance.max(VARIANCE_FLOOR) / s2);
                means.push(map.to_model(&c.center));
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            Ok(MatchedPrior::Gmm(GmmPrior::new(shape, weights, means, variances)?.with_intensity(map)))
        }
    }
}

fn pixel_moments(data: &[&[f64]], len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = data.len() as f64;
    let mut mean = vec![0.0; len];
    for d in data {
        for (m, v) in mean.iter_mut().zip(d.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for d in data {
        for ((s, v), m) in var.iter_mut().zip(d.iter()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

#[derive(Debug, Clone)]
struct Cluster {
    center: Vec<f64>,
    members: Vec<usize>,
    /// Mean squared deviation per pixel.
    variance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations until assignments settle.
fn kmeans(data: &[&[f64]], k: usize, seed: u64) -> Vec<Cluster> {
    let mut g = rng::stream(seed, tag::CLUSTER);
    let mut centers: Vec<Vec<f64>> = vec![data[g.random_range(0..data.len())].to_vec()];
    while centers.len() < k {
        let d: Vec<f64> = data
            .iter()
            .map(|x| centers.iter().map(|c| sq_dist(x, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = g.random_range(0.0..total);
            let mut idx = data.len() - 1;
            for (i, v) in d.iter().enumerate() {
                if target < *v {
                    idx = i;
                    break;
                }
                target -= v;
            }
            idx
        } else {
            g.random_range(0..data.len())
        };
        centers.push(data[pick].to_vec());
    }
    let mut assign = vec![usize::MAX; data.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
                .expect("k ≥ 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64]> = data.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(x, _)| *x).collect();
            if !members.is_empty() {
                *center = pixel_moments(&members, center.len()).0;
            }
        }
        if !changed {
            break;
        }
    }
    let len = data[0].len() as f64;
    centers
        .into_iter()
        .enumerate()
        .map(|(c, center)| {
            let members: Vec<usize> = (0..data.len()).filter(|&i| assign[i] == c).collect();
            let ss: f64 = members.iter().map(|&i| sq_dist(data[i], &center)).sum();
            let variance = if members.is_empty() { 0.0 } else { ss / (members.len() as f64 * len) };
            Cluster {
                center,
                members,
                variance,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> GridShape {
        GridShape::new(32, 32, 4.0).unwrap()
    }

    #[test]
    fn empty_spec_is_uniform() {
        let img = rasterize(&EllipsePhantomSpec::new(0.01, vec![]).unwrap(), shape());
        assert!(img.data().iter().all(|&v| v == 0.01));
    }

    #[test]
    fn disk_peak_is_background_plus_value() {
        let spec = EllipsePhantomSpec::new(0.001, vec![Ellipse::disk([0.0, 0.0], 20.0, 0.02)]).unwrap();
        assert_eq!(rasterize(&spec, shape()).max(), 0.001 + 0.02);
    }

    #[test]
    fn rotation_by_quarter_turn_swaps_axes() {
        let e = Ellipse {
            center: [0.0, 0.0],
            axes: [10.0, 2.0],
            rotation: std::f64::consts::FRAC_PI_2,
            value: 0.01,
        };
        assert!(e.contains(0.0, 9.0));
        assert!(!e.contains(9.0, 0.0));
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(EllipsePhantomSpec::new(-0.01, vec![]).is_err());
        assert!(EllipsePhantomSpec::new(0.0, vec![Ellipse::disk([0.0, 0.0], 1.0, 0.1)]).is_err());
        let big = EllipsePhantomSpec::new(0.0, vec![Ellipse::disk([0.0, 0.0], 100.0, 0.02)]).unwrap();
        assert!(big.validate(shape()).is_err());
    }

    #[test]
    fn builtin_families_are_valid() {
        for name in PhantomFamily::NAMES {
            let fam = PhantomFamily::from_name(name).unwrap();
            for seed in 0..20 {
                fam.sample(shape(), seed).validate(shape()).unwrap();
            }
        }
        assert!(PhantomFamily::from_name("shepp").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let spec = PhantomFamily::ChestLite.sample(shape(), 3);
        assert_eq!(EllipsePhantomSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        assert!(EllipsePhantomSpec::from_toml("backgroundd = 0.0").is_err());
    }

    #[test]
    fn too_few_samples() {
        let r = build_matched_prior(&PhantomFamily::Disk, shape(), 15, PriorMode::Gaussian, 0, IntensityMap::IDENTITY);
        assert!(r.is_err());
    }
}

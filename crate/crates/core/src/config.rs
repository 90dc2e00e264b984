//! Scenario configuration files.
//!
//! A config is TOML with one table per module. A top-level `preset` key
//! (`low-mas` or `sparse`) selects the defaults that the remaining keys
//! override. Unknown keys are collected and reported together.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, DEFAULT_MAX_LINE_INTEGRAL, DEFAULT_VARIANCE_FLOOR};
use crate::geometry::{FanBeamGeometry, GainBlurOperator, Projector};
use crate::image::{GridShape, ImageGrid};
use crate::phantoms::{build_matched_prior, rasterize, EllipsePhantomSpec, MatchedPrior, PhantomFamily, PriorMode};
use crate::sampler::{AdamConfig, SamplerConfig, SamplerMode};
use crate::schedule::NoiseSchedule;
use crate::score::IntensityMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSection {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometrySection {
    pub sdd: f64,
    pub sad: f64,
    pub n_det: usize,
    pub det_pixel: f64,
    pub n_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSection {
    pub i0: f64,
    pub blur_sigma: f64,
    pub variance_floor: f64,
    pub max_line_integral: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSection {
    /// Builtin family name; ignored when `file` is set.
    pub family: String,
    /// Optional ellipse spec file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSection {
    pub family: String,
    /// `gaussian` or `gmm`.
    pub mode: String,
    pub components: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Model-space map `x = offset + scale·u`, mm⁻¹.
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_first: f64,
    pub beta_last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSection {
    pub mode: String,
    pub t_prime: usize,
    pub eta: f64,
    pub n_subsets: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSection {
    pub seed: u64,
    pub noiseless: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub png: bool,
    /// Display window in mm⁻¹.
    pub window: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    pub modes: Vec<String>,
    pub t_prime: Vec<usize>,
    pub eta: Vec<f64>,
    /// Baseline cells use these instead of `eta`.
    pub baseline_eta: Vec<f64>,
    pub n_subsets: Vec<usize>,
    pub n_runs: usize,
    pub max_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSection {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub preset: String,
    pub grid: GridSection,
    pub geometry: GeometrySection,
    pub detector: DetectorSection,
    pub phantom: PhantomSection,
    pub prior: PriorSection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub simulate: SimulateSection,
    pub output: OutputSection,
    pub sweep: SweepSection,
    pub oracle: OracleSection,
}

/// Names accepted by the `preset` key.
pub const PRESETS: [&str; 2] = ["low-mas", "sparse"];

impl ScenarioConfig {
    /// 128² grid, 240 views over 256 bins, I₀ = 5·10³, blur σ = 0.5 bins.
    pub fn low_mas() -> Self {
        Self {
            preset: "low-mas".into(),
            grid: GridSection {
                width: 128,
                height: 128,
                pixel_size: 2.5,
            },
            geometry: GeometrySection {
                sdd: 1000.0,
                sad: 500.0,
                n_det: 256,
                det_pixel: 4.0,
                n_views: 240,
            },
            detector: DetectorSection {
                i0: 5e3,
                blur_sigma: 0.5,
                variance_floor: DEFAULT_VARIANCE_FLOOR,
                max_line_integral: DEFAULT_MAX_LINE_INTEGRAL,
            },
            phantom: PhantomSection {
                family: "chest-lite".into(),
                file: None,
                seed: 12345,
            },
            prior: PriorSection {
                family: "chest-lite".into(),
                mode: "gaussian".into(),
                components: 4,
                n_samples: 256,
                seed: 7,
                offset: 0.01,
                scale: 0.01,
            },
            schedule: ScheduleSection {
                steps: 1000,
                beta_first: 1e-4,
                beta_last: 0.02,
            },
            sampler: SamplerSection {
                mode: "stable".into(),
                t_prime: 40,
                eta: 3e-5,
                n_subsets: 1,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                seed: 3,
                n_runs: 8,
            },
            simulate: SimulateSection {
                seed: 1,
                noiseless: false,
            },
            output: OutputSection {
                dir: "out".into(),
                png: true,
                window: [0.0, 0.03],
            },
            sweep: SweepSection {
                modes: vec!["stable".into(), "baseline".into()],
                t_prime: vec![40],
                eta: vec![1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 1e-2],
                baseline_eta: vec![0.3, 3.0, 30.0],
                n_subsets: vec![1, 2, 4],
                n_runs: 8,
                max_cells: 64,
            },
            oracle: OracleSection {
                tolerance: 1e-6,
                max_iterations: 20_000,
                learning_rate: 1e-3,
            },
        }
    }

    /// 24 views at I₀ = 10⁵, ordered subsets disabled.
    pub fn sparse() -> Self {
        let mut c = Self::low_mas();
        c.preset = "sparse".into();
        c.geometry.n_views = 24;
        c.detector.i0 = 1e5;
        c.sampler.n_subsets = 1;
        c.sweep.n_subsets = vec![1];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "low-mas" => Ok(Self::low_mas()),
            "sparse" => Ok(Self::sparse()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset {other:?} (expected one of {PRESETS:?})"
            ))),
        }
    }

    /// Parses a config, layering it over the preset it names (default
    /// `low-mas`). All unknown keys are reported in one error.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
        let preset = match user.get("preset") {
            None => "low-mas".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(other) => return Err(Error::Format(format!("preset must be a string, got {other}"))),
        };
        let mut merged = toml::Table::try_from(Self::preset(&preset)?).expect("presets serialize");
        merge(&mut merged, user);
        let mut unknown = Vec::new();
        let cfg: Self = serde_ignored::deserialize(toml::Value::Table(merged), |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Format(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::Format(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(f) = &cfg.phantom.file {
            if f.is_relative() {
                cfg.phantom.file = Some(path.parent().unwrap_or(Path::new(".")).join(f));
            }
        }
        Ok(cfg)
    }

    /// The fully resolved config, suitable for reproducing a run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let positive = [
            ("grid.pixel_size", self.grid.pixel_size),
            ("geometry.sdd", self.geometry.sdd),
            ("geometry.sad", self.geometry.sad),
            ("geometry.det_pixel", self.geometry.det_pixel),
            ("detector.i0", self.detector.i0),
            ("detector.variance_floor", self.detector.variance_floor),
            ("detector.max_line_integral", self.detector.max_line_integral),
            ("prior.scale", self.prior.scale),
            ("oracle.tolerance", self.oracle.tolerance),
            ("oracle.learning_rate", self.oracle.learning_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let counts = [
            ("grid.width", self.grid.width),
            ("grid.height", self.grid.height),
            ("geometry.n_det", self.geometry.n_det),
            ("geometry.n_views", self.geometry.n_views),
            ("sweep.n_runs", self.sweep.n_runs),
            ("sweep.max_cells", self.sweep.max_cells),
            ("oracle.max_iterations", self.oracle.max_iterations),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.detector.blur_sigma >= 0.0) {
            return bad("detector.blur_sigma must be nonnegative".into());
        }
        if !(self.output.window[1] > self.output.window[0]) {
            return bad("output.window must be increasing".into());
        }
        if self.phantom.file.is_none() {
            PhantomFamily::from_name(&self.phantom.family)?;
        }
        PhantomFamily::from_name(&self.prior.family)?;
        self.prior_mode()?;
        let schedule = self.schedule()?;
        self.sampler_config()?.validate(&schedule)?;
        for m in &self.sweep.modes {
            m.parse::<SamplerMode>()?;
        }
        if self.sweep.t_prime.is_empty() || self.sweep.eta.is_empty() || self.sweep.n_subsets.is_empty() {
            return bad("sweep axes must be nonempty".into());
        }
        if self.sweep.modes.iter().any(|m| m == "baseline") && self.sweep.baseline_eta.is_empty() {
            return bad("sweep.baseline_eta must be nonempty when sweeping baseline".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<GridShape> {
        GridShape::new(self.grid.width, self.grid.height, self.grid.pixel_size)
    }

    pub fn geometry(&self) -> Result<FanBeamGeometry> {
        let g = &self.geometry;
        FanBeamGeometry::full_rotation(g.sdd, g.sad, g.n_det, g.det_pixel, g.n_views)
    }

    /// Geometry with explicit view angles, e.g. read back from a file.
    pub fn geometry_with_angles(&self, angles: Vec<f64>) -> Result<FanBeamGeometry> {
        let g = &self.geometry;
        FanBeamGeometry::new(g.sdd, g.sad, g.n_det, g.det_pixel, angles)
    }

    pub fn forward_model(&self, geometry: FanBeamGeometry) -> Result<ForwardModel> {
        let d = &self.detector;
        let projector = Projector::new(geometry, self.shape()?);
        let detector = GainBlurOperator::uniform(self.geometry.n_det, d.i0, d.blur_sigma)?;
        Ok(ForwardModel::new(Arc::new(projector), Arc::new(detector))?.with_max_line_integral(d.max_line_integral))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.steps, s.beta_first, s.beta_last)
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let s = &self.sampler;
        Ok(SamplerConfig {
            mode: s.mode.parse()?,
            t_prime: s.t_prime,
            eta: s.eta,
            n_subsets: s.n_subsets,
            adam: AdamConfig {
                beta1: s.beta1,
                beta2: s.beta2,
                epsilon: s.epsilon,
            },
            seed: s.seed,
            n_runs: s.n_runs,
        })
    }

    pub fn intensity_map(&self) -> Result<IntensityMap> {
        IntensityMap::new(self.prior.offset, self.prior.scale)
    }

    pub fn prior_mode(&self) -> Result<PriorMode> {
        match self.prior.mode.as_str() {
            "gaussian" => Ok(PriorMode::Gaussian),
            "gmm" => Ok(PriorMode::Gmm {
                components: self.prior.components,
            }),
            other => Err(Error::InvalidArgument(format!(
                "prior.mode must be gaussian or gmm, got {other:?}"
            ))),
        }
    }

    pub fn phantom_spec(&self) -> Result<EllipsePhantomSpec> {
        let shape = self.shape()?;
        let spec = match &self.phantom.file {
            Some(f) => EllipsePhantomSpec::from_toml(&std::fs::read_to_string(f)?)?,
            None => PhantomFamily::from_name(&self.phantom.family)?.sample(shape, self.phantom.seed),
        };
        spec.validate(shape)?;
        Ok(spec)
    }

    pub fn truth(&self) -> Result<ImageGrid> {
        Ok(rasterize(&self.phantom_spec()?, self.shape()?))
    }

    pub fn prior(&self) -> Result<MatchedPrior> {
        let p = &self.prior;
        build_matched_prior(
            &PhantomFamily::from_name(&p.family)?,
            self.shape()?,
            p.n_samples,
            self.prior_mode()?,
            p.seed,
            self.intensity_map()?,
        )
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

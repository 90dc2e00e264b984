//! Scenario orchestration behind the CLI: simulation, reconstruction,
//! hyperparameter sweeps and the MAP reference solution.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::fbp::fbp_from_measurement;
use crate::forward::{Measurement, NoiseOptions};
use crate::image::{norm2, ImageGrid};
use crate::io::{self, SinogramFile};
use crate::metrics::{EnsembleSummary, RunEnsemble};
use crate::sampler::{run_ensemble_tolerant, AdamConfig, AdamState, SamplerConfig, SamplerMode, adam_update};
use crate::score::{CountingModel, GaussianPrior};

pub const TRUTH_FILE: &str = "truth.dtimg";
pub const MEASUREMENT_FILE: &str = "measurement.dtsin";
pub const FBP_FILE: &str = "fbp.dtimg";
pub const CONFIG_ECHO_FILE: &str = "effective_config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";

fn out_dir(cfg: &ScenarioConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output.dir)?;
    Ok(cfg.output.dir.clone())
}

fn save_image(cfg: &ScenarioConfig, dir: &Path, stem: &str, img: &ImageGrid) -> Result<()> {
    io::write_image(&dir.join(format!("{stem}.dtimg")), img)?;
    if cfg.output.png {
        let [lo, hi] = cfg.output.window;
        io::write_png(&dir.join(format!("{stem}.png")), img, (lo, hi))?;
    }
    Ok(())
}

fn echo_config(cfg: &ScenarioConfig, dir: &Path) -> Result<()> {
    io::write_atomic(&dir.join(CONFIG_ECHO_FILE), cfg.to_toml().as_bytes())
}

/// Rasterizes the phantom, simulates a noisy measurement and writes truth,
/// measurement and the resolved config to the output directory.
pub fn cmd_simulate(cfg: &ScenarioConfig) -> Result<Measurement> {
    let dir = out_dir(cfg)?;
    let truth = cfg.truth()?;
    let model = cfg.forward_model(cfg.geometry()?)?;
    let peak = model.peak_line_integral(truth.data())?;
    if peak >= model.max_line_integral() {
        return Err(Error::InvalidArgument(format!(
            "phantom line integrals reach the clamp ({peak:.2} ≥ {})",
            model.max_line_integral()
        )));
    }
    let m = model.simulate_noisy(
        &truth,
        NoiseOptions {
            seed: cfg.simulate.seed,
            noiseless: cfg.simulate.noiseless,
            variance_floor: cfg.detector.variance_floor,
        },
    )?;
    save_image(cfg, &dir, "truth", &truth)?;
    save_measurement(&dir.join(MEASUREMENT_FILE), &m)?;
    echo_config(cfg, &dir)?;
    Ok(m)
}

pub fn save_measurement(path: &Path, m: &Measurement) -> Result<()> {
    io::write_sinogram(
        path,
        &SinogramFile {
            angles: m.model().projector().geometry().angles().to_vec(),
            n_det: m.model().n_det(),
            data: m.counts().to_vec(),
            variance: Some(m.variance().to_vec()),
        },
    )
}

/// Reads a measurement file and attaches the config's detector and grid.
/// Files without a variance block get the plug-in variance.
pub fn load_measurement(cfg: &ScenarioConfig, path: &Path) -> Result<Measurement> {
    let file = io::read_sinogram(path)?;
    if file.n_det != cfg.geometry.n_det {
        return Err(Error::InvalidArgument(format!(
            "measurement has {} bins, config expects {}",
            file.n_det, cfg.geometry.n_det
        )));
    }
    let model = cfg.forward_model(cfg.geometry_with_angles(file.angles)?)?;
    match file.variance {
        Some(v) => Measurement::new(model, file.data, v),
        None => Measurement::with_plugin_variance(model, file.data, cfg.detector.variance_floor),
    }
}

fn default_measurement(cfg: &ScenarioConfig, path: Option<&Path>) -> PathBuf {
    path.map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join(MEASUREMENT_FILE))
}

fn optional_truth(cfg: &ScenarioConfig, path: Option<&Path>) -> Result<Option<ImageGrid>> {
    let p = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join(TRUTH_FILE));
    if p.exists() {
        Ok(Some(io::read_image(&p)?))
    } else if path.is_some() {
        Err(Error::InvalidArgument(format!("truth file {} not found", p.display())))
    } else {
        Ok(None)
    }
}

pub fn cmd_fbp(cfg: &ScenarioConfig, measurement: Option<&Path>) -> Result<ImageGrid> {
    let dir = out_dir(cfg)?;
    let m = load_measurement(cfg, &default_measurement(cfg, measurement))?;
    let img = fbp_from_measurement(&m)?;
    save_image(cfg, &dir, "fbp", &img)?;
    Ok(img)
}

/// One CSV row of ensemble metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_count: usize,
    pub std: f64,
    pub bias: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_run_mean: f64,
    pub psnr_run_spread: f64,
    pub ssim_run_mean: f64,
    pub ssim_run_spread: f64,
    pub roi: String,
}

impl MetricsRow {
    pub fn new(s: &EnsembleSummary, roi: &str) -> Self {
        Self {
            run_count: s.run_count,
            std: s.std,
            bias: s.bias,
            psnr: s.psnr,
            ssim: s.ssim,
            psnr_run_mean: s.psnr_run_mean,
            psnr_run_spread: s.psnr_run_spread,
            ssim_run_mean: s.ssim_run_mean,
            ssim_run_spread: s.ssim_run_spread,
            roi: roi.to_string(),
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    io::write_atomic(path, &bytes)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Format(e.to_string()))).collect()
}

/// Result of [`cmd_reconstruct`].
#[derive(Debug)]
pub struct Reconstruction {
    pub ensemble: RunEnsemble,
    pub summary: Option<EnsembleSummary>,
    pub score_evaluations: u64,
}

fn write_diagnostics(dir: &Path, err: &Error) -> Result<()> {
    let mut text = format!("{err}\n");
    if let Error::Diverged { step, norm_history, .. } = err {
        text.push_str(&format!("step = {step}\nnorm_history = {norm_history:?}\n"));
    }
    io::write_atomic(&dir.join(DIAGNOSTICS_FILE), text.as_bytes())
}

/// Runs the configured sampler `n_runs` times and writes every run, the
/// ensemble mean, bias/STD maps and the metrics CSV. A divergent run aborts
/// with [`Error::Diverged`] after writing a diagnostics file.
pub fn cmd_reconstruct(cfg: &ScenarioConfig, measurement: Option<&Path>, truth: Option<&Path>) -> Result<Reconstruction> {
    let dir = out_dir(cfg)?;
    let m = load_measurement(cfg, &default_measurement(cfg, measurement))?;
    let truth = optional_truth(cfg, truth)?;
    let sampler = cfg.sampler_config()?;
    let schedule = cfg.schedule()?;
    let model = CountingModel::new(cfg.prior()?);
    let init = match sampler.mode {
        SamplerMode::Stable => Some(fbp_from_measurement(&m)?),
        SamplerMode::Baseline => None,
    };
    let out = run_ensemble_tolerant(&m, &model, &schedule, &sampler, init.as_ref())?;
    if let Some((_, err)) = out.failures.into_iter().next() {
        write_diagnostics(&dir, &err)?;
        return Err(err);
    }
    let runs_dir = dir.join("runs");
    for (k, r) in out.runs.iter().enumerate() {
        save_image(cfg, &runs_dir, &format!("run_{k:03}"), r)?;
    }
    let mut ensemble = RunEnsemble::new(out.runs)?;
    save_image(cfg, &dir, "mean", &ensemble.mean_image())?;
    if ensemble.n_runs() >= 2 {
        save_image(cfg, &dir, "std", &ensemble.std_map()?)?;
    }
    let mut summary = None;
    if let Some(t) = truth {
        ensemble = ensemble.with_truth(t)?;
        save_image(cfg, &dir, "bias", &ensemble.bias_map()?)?;
        let s = ensemble.summary()?;
        write_csv(&dir.join(METRICS_FILE), &[MetricsRow::new(&s, "")])?;
        summary = Some(s);
    }
    echo_config(cfg, &dir)?;
    Ok(Reconstruction {
        ensemble,
        summary,
        score_evaluations: model.evaluations(),
    })
}

/// Metrics of saved runs against a saved truth.
pub fn cmd_metrics(runs: &[PathBuf], truth: &Path, mask: Option<Vec<bool>>, roi: &str) -> Result<MetricsRow> {
    let images = runs.iter().map(|p| io::read_image(p)).collect::<Result<Vec<_>>>()?;
    let mut ensemble = RunEnsemble::new(images)?.with_truth(io::read_image(truth)?)?;
    if let Some(m) = mask {
        ensemble = ensemble.with_mask(m)?;
    }
    Ok(MetricsRow::new(&ensemble.summary()?, roi))
}

/// One sweep cell's outcome. Statistics are NaN when fewer than two runs
/// survive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: String,
    pub t_prime: usize,
    pub eta: f64,
    pub n_subsets: usize,
    pub n_runs: usize,
    pub std: f64,
    pub bias: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub diverged: usize,
    pub score_evals_per_run: f64,
    pub seconds: f64,
}

impl SweepRow {
    pub fn key(&self) -> String {
        cell_key(&self.mode, self.t_prime, self.eta, self.n_subsets)
    }
}

fn cell_key(mode: &str, t_prime: usize, eta: f64, n_subsets: usize) -> String {
    format!("{mode}_T{t_prime}_eta{eta:e}_S{n_subsets}")
}

/// A sweep cell specification.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub mode: SamplerMode,
    pub t_prime: usize,
    pub eta: f64,
    pub n_subsets: usize,
}

/// Cartesian product of the sweep axes. Baseline cells ignore `T′` and `S`
/// and take their step sizes from `baseline_eta`.
pub fn sweep_cells(cfg: &ScenarioConfig) -> Result<Vec<SweepCell>> {
    let s = &cfg.sweep;
    let mut cells = Vec::new();
    for mode in &s.modes {
        match mode.parse::<SamplerMode>()? {
            SamplerMode::Baseline => {
                for &eta in &s.baseline_eta {
                    cells.push(SweepCell {
                        mode: SamplerMode::Baseline,
                        t_prime: cfg.schedule.steps,
                        eta,
                        n_subsets: 1,
                    });
                }
            }
            SamplerMode::Stable => {
                for &t_prime in &s.t_prime {
                    for &n_subsets in &s.n_subsets {
                        for &eta in &s.eta {
                            cells.push(SweepCell {
                                mode: SamplerMode::Stable,
                                t_prime,
                                eta,
                                n_subsets,
                            });
                        }
                    }
                }
            }
        }
    }
    if cells.len() > s.max_cells {
        return Err(Error::InvalidArgument(format!(
            "sweep has {} cells, cap is {}",
            cells.len(),
            s.max_cells
        )));
    }
    Ok(cells)
}

/// Evaluates one sweep cell on an in-memory measurement.
pub fn run_sweep_cell(
    cfg: &ScenarioConfig,
    m: &Measurement,
    truth: &ImageGrid,
    init: &ImageGrid,
    cell: &SweepCell,
) -> Result<SweepRow> {
    let sampler = SamplerConfig {
        mode: cell.mode,
        t_prime: cell.t_prime,
        eta: cell.eta,
        n_subsets: cell.n_subsets,
        n_runs: cfg.sweep.n_runs,
        ..cfg.sampler_config()?
    };
    let schedule = cfg.schedule()?;
    let model = CountingModel::new(cfg.prior()?);
    let start = Instant::now();
    let out = run_ensemble_tolerant(m, &model, &schedule, &sampler, Some(init))?;
    let seconds = start.elapsed().as_secs_f64();
    let diverged = out.failures.len();
    let (std, bias, psnr, ssim) = if out.runs.len() >= 2 {
        let s = RunEnsemble::new(out.runs)?.with_truth(truth.clone())?.summary()?;
        (s.std, s.bias, s.psnr, s.ssim)
    } else {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(SweepRow {
        mode: cell.mode.to_string(),
        t_prime: cell.t_prime,
        eta: cell.eta,
        n_subsets: cell.n_subsets,
        n_runs: sampler.n_runs,
        std,
        bias,
        psnr,
        ssim,
        diverged,
        score_evals_per_run: model.evaluations() as f64 / sampler.n_runs as f64,
        seconds,
    })
}

/// Runs every sweep cell not already present in the sweep CSV. Each finished
/// cell is appended by atomically rewriting the CSV, so an interrupted sweep
/// resumes where it stopped.
pub fn cmd_sweep(cfg: &ScenarioConfig, measurement: Option<&Path>, truth: Option<&Path>) -> Result<Vec<SweepRow>> {
    let dir = out_dir(cfg)?;
    let m = load_measurement(cfg, &default_measurement(cfg, measurement))?;
    let truth = optional_truth(cfg, truth)?
        .ok_or_else(|| Error::InvalidArgument("sweep needs a ground-truth image".into()))?;
    let init = fbp_from_measurement(&m)?;
    let csv_path = dir.join(SWEEP_FILE);
    let mut rows: Vec<SweepRow> = if csv_path.exists() { read_csv(&csv_path)? } else { Vec::new() };
    let done: HashSet<String> = rows.iter().map(SweepRow::key).collect();
    echo_config(cfg, &dir)?;
    for cell in sweep_cells(cfg)? {
        if done.contains(&cell_key(&cell.mode.to_string(), cell.t_prime, cell.eta, cell.n_subsets)) {
            continue;
        }
        rows.push(run_sweep_cell(cfg, &m, &truth, &init, &cell)?);
        write_csv(&csv_path, &rows)?;
    }
    Ok(rows)
}

/// Settings for [`map_oracle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapOracleOptions {
    /// Exit once `‖∇J‖` falls below this fraction of its starting value.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Weight of the data term; zero returns the prior mean.
    pub measurement_weight: f64,
}

impl Default for MapOracleOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 20_000,
            learning_rate: 1e-3,
            measurement_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapSolution {
    pub image: ImageGrid,
    pub iterations: usize,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
}

/// Minimizes `w·‖B e^{−Ax} − y‖²_{K⁻¹} + ‖x − μ‖²_{Σ⁻¹}` over `x` in mm⁻¹
/// with Adam, starting from the prior mean. The step size halves whenever
/// the objective increases.
pub fn map_oracle(m: &Measurement, prior: &GaussianPrior, opts: MapOracleOptions) -> Result<MapSolution> {
    let shape = m.model().projector().shape();
    if prior.shape() != shape {
        return Err(Error::InvalidArgument("prior does not match the measurement grid".into()));
    }
    let mean = prior.physical_mean();
    let precision: Vec<f64> = prior.physical_variance().iter().map(|v| 1.0 / v).collect();
    let w = opts.measurement_weight;
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut j = 0.0;
        let mut g = vec![0.0; x.len()];
        if w != 0.0 {
            j = w * m.neg_log_likelihood(x)?;
            g = m.grad_neg_log_likelihood(x)?.into_iter().map(|v| w * v).collect();
        }
        for i in 0..x.len() {
            let d = x[i] - mean[i];
            j += d * d * precision[i];
            g[i] += 2.0 * d * precision[i];
        }
        Ok((j, g))
    };
    let mut x = mean.clone();
    let (mut j, mut g) = objective(&x)?;
    let g0 = norm2(&g);
    let target = opts.tolerance * g0;
    let mut lr = opts.learning_rate;
    let mut adam = AdamState::new(x.len());
    let cfg = AdamConfig::default();
    for it in 0..opts.max_iterations {
        let gn = norm2(&g);
        if gn <= target {
            return Ok(MapSolution {
                image: ImageGrid::new(shape, x)?,
                iterations: it,
                grad_norm: gn,
                initial_grad_norm: g0,
            });
        }
        let mut trial = x.clone();
        let mut trial_state = adam.clone();
        adam_update(&mut trial_state, &mut trial, &g, lr, &cfg);
        let (tj, tg) = objective(&trial)?;
        if tj <= j {
            x = trial;
            adam = trial_state;
            j = tj;
            g = tg;
        } else {
            lr *= 0.5;
        }
    }
    let gn = norm2(&g);
    if gn <= target {
        return Ok(MapSolution {
            image: ImageGrid::new(shape, x)?,
            iterations: opts.max_iterations,
            grad_norm: gn,
            initial_grad_norm: g0,
        });
    }
    Err(Error::NotConverged {
        iterations: opts.max_iterations,
        grad_norm: gn,
    })
}

/// MAP reference for the config's measurement under a Gaussian prior.
pub fn cmd_oracle(cfg: &ScenarioConfig, measurement: Option<&Path>) -> Result<MapSolution> {
    let dir = out_dir(cfg)?;
    let m = load_measurement(cfg, &default_measurement(cfg, measurement))?;
    let prior = match cfg.prior()? {
        crate::phantoms::MatchedPrior::Gaussian(p) => p,
        crate::phantoms::MatchedPrior::Gmm(_) => {
            return Err(Error::InvalidArgument("the MAP oracle needs prior.mode = \"gaussian\"".into()))
        }
    };
    let sol = map_oracle(
        &m,
        &prior,
        MapOracleOptions {
            tolerance: cfg.oracle.tolerance,
            max_iterations: cfg.oracle.max_iterations,
            learning_rate: cfg.oracle.learning_rate,
            measurement_weight: 1.0,
        },
    )?;
    save_image(cfg, &dir, "map", &sol.image)?;
    Ok(sol)
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use dpsct::config::ScenarioConfig;
use dpsct::harness::{self, MetricsRow};
use dpsct::metrics::circular_mask;
use dpsct::Error;

/// Environment variable holding the worker thread count.
const WORKERS_ENV: &str = "DPSCT_WORKERS";

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "dpsct", version, about = "Diffusion posterior sampling for nonlinear fan-beam CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Scenario {
    /// Scenario config file (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, default_value = "low-mas")]
    preset: String,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Display window for PNG output, mm⁻¹.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    window: Option<Vec<f64>>,
    /// Skip PNG previews.
    #[arg(long)]
    no_png: bool,
}

#[derive(Args, Clone)]
struct SamplerFlags {
    /// `baseline` or `stable`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    t_prime: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    subsets: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize the phantom and simulate a noisy measurement.
    Simulate {
        #[command(flatten)]
        scenario: Scenario,
        /// Noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noiseless: bool,
    },
    /// Filtered backprojection of a measurement.
    Fbp {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        measurement: Option<PathBuf>,
    },
    /// Ensemble reconstruction with the configured sampler.
    Reconstruct {
        #[command(flatten)]
        scenario: Scenario,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        measurement: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Hyperparameter sweep; resumes an existing sweep CSV.
    Sweep {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        measurement: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Ensemble metrics of saved images.
    Metrics {
        #[arg(long, required = true)]
        truth: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Restrict summaries to a centered disk of this radius, mm.
        #[arg(long)]
        roi_radius: Option<f64>,
        #[arg(long, default_value = "")]
        roi_name: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// MAP reconstruction under the Gaussian prior.
    Oracle {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long)]
        measurement: Option<PathBuf>,
    },
}

/// Failure class used to pick the exit code.
enum Failure {
    Config(anyhow::Error),
    Diverged(anyhow::Error),
    Other(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Diverged(e.into()),
            other => Failure::Other(other.into()),
        }
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn load(s: &Scenario) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match &s.config {
        Some(p) => ScenarioConfig::load(p)
            .with_context(|| format!("reading config {}", p.display()))
            .map_err(config_error)?,
        None => ScenarioConfig::preset(&s.preset).map_err(config_error)?,
    };
    if let Some(o) = &s.out {
        cfg.output.dir = o.clone();
    }
    if let Some(w) = &s.window {
        cfg.output.window = [w[0], w[1]];
    }
    if s.no_png {
        cfg.output.png = false;
    }
    Ok(cfg)
}

fn apply_sampler(cfg: &mut ScenarioConfig, f: &SamplerFlags) {
    let s = &mut cfg.sampler;
    if let Some(v) = &f.mode {
        s.mode = v.clone();
    }
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => { $(if let Some(v) = f.$flag { s.$field = v; })* };
    }
    set!(t_prime <- t_prime, eta <- eta, n_subsets <- subsets, beta1 <- beta1, beta2 <- beta2,
         epsilon <- epsilon, seed <- seed, n_runs <- runs);
}

fn checked(cfg: ScenarioConfig) -> Result<ScenarioConfig, Failure> {
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn configure_workers() -> Result<(), Failure> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| config_error(anyhow::anyhow!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Other(e.into()))?;
    }
    Ok(())
}

fn write_metrics(row: &MetricsRow, out: Option<&PathBuf>) -> anyhow::Result<()> {
    match out {
        Some(p) => harness::write_csv(p, std::slice::from_ref(row))?,
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.serialize(row)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_workers()?;
    match cli.command {
        Command::Simulate { scenario, seed, noiseless } => {
            let mut cfg = load(&scenario)?;
            if let Some(s) = seed {
                cfg.simulate.seed = s;
            }
            cfg.simulate.noiseless |= noiseless;
            let cfg = checked(cfg)?;
            let m = harness::cmd_simulate(&cfg).map_err(|e| match e {
                Error::InvalidArgument(_) | Error::Format(_) => config_error(e),
                other => other.into(),
            })?;
            eprintln!(
                "wrote {} views × {} bins to {}",
                m.model().n_views(),
                m.model().n_det(),
                cfg.output.dir.display()
            );
        }
        Command::Fbp { scenario, measurement } => {
            let cfg = checked(load(&scenario)?)?;
            harness::cmd_fbp(&cfg, measurement.as_deref())?;
        }
        Command::Reconstruct {
            scenario,
            sampler,
            measurement,
            truth,
        } => {
            let mut cfg = load(&scenario)?;
            apply_sampler(&mut cfg, &sampler);
            let cfg = checked(cfg)?;
            let r = harness::cmd_reconstruct(&cfg, measurement.as_deref(), truth.as_deref())?;
            eprintln!(
                "{} runs, {} score evaluations",
                r.ensemble.n_runs(),
                r.score_evaluations
            );
            if let Some(s) = r.summary {
                eprintln!("STD {:.4e}  bias {:.4e}  PSNR {:.2} dB  SSIM {:.4}", s.std, s.bias, s.psnr, s.ssim);
            }
        }
        Command::Sweep {
            scenario,
            measurement,
            truth,
        } => {
            let cfg = checked(load(&scenario)?)?;
            harness::sweep_cells(&cfg).map_err(config_error)?;
            let rows = harness::cmd_sweep(&cfg, measurement.as_deref(), truth.as_deref())?;
            eprintln!("{} cells in {}", rows.len(), cfg.output.dir.join(harness::SWEEP_FILE).display());
        }
        Command::Metrics {
            truth,
            runs,
            roi_radius,
            roi_name,
            out,
        } => {
            let shape = dpsct::io::read_image(&truth).map_err(Failure::from)?.shape();
            let mask = roi_radius.map(|r| circular_mask(shape, r));
            let row = harness::cmd_metrics(&runs, &truth, mask, &roi_name)?;
            write_metrics(&row, out.as_ref()).map_err(Failure::Other)?;
        }
        Command::Oracle { scenario, measurement } => {
            let cfg = checked(load(&scenario)?)?;
            let sol = harness::cmd_oracle(&cfg, measurement.as_deref())?;
            eprintln!(
                "MAP converged in {} iterations (gradient {:.3e} of {:.3e})",
                sol.iterations, sol.grad_norm, sol.initial_grad_norm
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Diverged(e)) => {
            eprintln!("diverged: {e:#}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

//! `ccar`: experiment harness for class–confidence aware reweighting.
//!
//! Exit status is 0 on success, 1 when a property check or a run fails and 2
//! for configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccar::data;
use ccar::harness::{self, ExperimentConfig, DEFAULT_OMEGA_GRID};
use ccar::losses::BaseLoss;
use ccar::properties;
use ccar::weighting::PivotOmega;
use ccar::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "ccar",
    version,
    about = "Class–confidence aware reweighting lab"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Confidence pivot ω in (0, 1].
    #[arg(long, global = true)]
    omega: Option<f64>,
    /// Imbalance factor of the training set.
    #[arg(long = "if", global = true, value_name = "F")]
    imbalance_factor: Option<f64>,
    /// ce, focal, cb, la or bs.
    #[arg(long, global = true, value_parser = parse_base)]
    base: Option<BaseLoss>,
    #[arg(long, global = true)]
    ccar: Option<Switch>,
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate once per repeat; writes metrics.csv.
    Train,
    /// Repeat the experiment for each ω with shared seeds; writes sweep.csv.
    SweepOmega {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_OMEGA_GRID)]
        omegas: Vec<f64>,
    },
    /// Ω over a (p_t, f_c) grid; writes surface.csv.
    Surface {
        #[arg(long, default_value_t = 101)]
        p_points: usize,
        #[arg(long, default_value_t = 99)]
        f_points: usize,
    },
    /// Gradient modulation factor curves; writes gradcurves.csv.
    Gradcurves {
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.05, 0.2, 0.5, 0.8])]
        f_list: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Run the invariant suite and print its report.
    Check {
        /// Check a sign-flipped derivative instead of the real one.
        #[arg(long, hide = true)]
        sign_flip_canary: bool,
    },
    /// Export the train and test split of the first repeat.
    GenData,
}

fn parse_base(s: &str) -> Result<BaseLoss, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Domain { .. }
            | Error::DegenerateClass { .. }
            | Error::Config(_)
            | Error::Json(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn resolve(o: &Overrides) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Config(e.to_string()),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(omega) = o.omega {
        cfg.loss.omega = PivotOmega::new(omega)?;
    }
    if let Some(imbalance) = o.imbalance_factor {
        cfg.dataset.imbalance_factor = imbalance;
    }
    if let Some(base) = o.base {
        cfg.loss.base = base;
    }
    if let Some(switch) = o.ccar {
        cfg.loss.ccar_enabled = matches!(switch, Switch::On);
    }
    if let Some(repeats) = o.repeats {
        cfg.repeats = repeats;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(m: Option<harness::MeanStd>) -> String {
    m.map_or_else(
        || "-".to_string(),
        |m| format!("{:.4} ± {:.4}", m.mean, m.std),
    )
}

fn announce(path: &Path) {
    println!("wrote {}", path.display());
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let cfg = resolve(&cli.overrides)?;
    let dir = cfg.output_dir.clone();
    let jobs = cli.overrides.jobs;
    match cli.command {
        Command::Train => {
            let reports = harness::run_experiment(&cfg, jobs)?;
            let agg = harness::Aggregate::of(&reports);
            announce(&harness::write_output(&dir, "metrics.csv", |out| {
                harness::write_metrics_csv(&reports, out)
            })?);
            announce(&harness::write_resolved_config(&cfg, &dir)?);
            println!(
                "{} ({}/{} ok): overall {}  many {}  medium {}  few {}",
                cfg.loss.label(),
                agg.n_ok,
                reports.len(),
                fmt_opt(agg.overall),
                fmt_opt(agg.many),
                fmt_opt(agg.medium),
                fmt_opt(agg.few)
            );
        }
        Command::SweepOmega { omegas } => {
            let sweep = harness::sweep_omega(&cfg, &omegas, jobs)?;
            announce(&harness::write_output(&dir, "sweep.csv", |out| {
                harness::write_sweep_csv(&sweep, out)
            })?);
            announce(&harness::write_resolved_config(&cfg, &dir)?);
            for row in &sweep.rows {
                println!(
                    "omega {:<5} overall {}  few {}",
                    row.omega.get(),
                    fmt_opt(row.aggregate.overall),
                    fmt_opt(row.aggregate.few)
                );
            }
        }
        Command::Surface { p_points, f_points } => {
            let grid = harness::emit_surface_grid(cfg.loss.omega, p_points, f_points)?;
            announce(&harness::write_output(&dir, "surface.csv", |out| {
                harness::write_surface_csv(&grid, out)
            })?);
            announce(&harness::write_resolved_config(&cfg, &dir)?);
        }
        Command::Gradcurves { f_list, points } => {
            let curves = harness::emit_gradient_curves(cfg.loss.omega, &f_list, points)?;
            announce(&harness::write_output(&dir, "gradcurves.csv", |out| {
                harness::write_gradient_curves_csv(&curves, out)
            })?);
            announce(&harness::write_resolved_config(&cfg, &dir)?);
        }
        Command::Check { sign_flip_canary } => {
            let report = if sign_flip_canary {
                properties::check_properties_with(properties::sign_flipped_derivative)?
            } else {
                properties::check_properties()?
            };
            println!("{report}");
            if !report.all_passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::GenData => {
            let spec = data::DatasetSpec {
                seed: cfg.repeat_seeds()[0],
                ..cfg.dataset.clone()
            };
            let generated = data::generate(&spec)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (name, split) in [
                ("train.csv", &generated.train),
                ("test.csv", &generated.test),
            ] {
                let path = dir.join(name);
                split.save_csv(&path)?;
                announce(&path);
            }
            announce(&harness::write_resolved_config(&cfg, &dir)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

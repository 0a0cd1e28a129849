//! Experiment harness: seeded repeats, ω sweeps, figure data and CSV output.
//!
//! Every CSV written here uses LF line endings, a fixed column order and
//! floats with 17 significant digits, so reruns are byte-identical. Wall-clock
//! time is kept on [`MetricsReport`] but never written to CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, format_float, DatasetSpec, GroupThresholds};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::tinynet::{self, Mlp, SgdConfig};
use crate::weighting::{self, ClassFrequency, Confidence, Phase, PivotOmega};

/// The ω grid of the suppression-factor ablation.
pub const DEFAULT_OMEGA_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Per-repeat seeds are drawn from this one; the `seed` fields of
    /// `dataset` and `optimizer` are overwritten for each repeat.
    pub seed: u64,
    pub repeats: usize,
    pub dataset: DatasetSpec,
    pub loss: LossConfig,
    pub optimizer: SgdConfig,
    pub hidden_layers: Vec<usize>,
    pub groups: GroupThresholds,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 10,
            dataset: DatasetSpec::default(),
            loss: LossConfig::default(),
            optimizer: SgdConfig::default(),
            hidden_layers: vec![64, 64],
            groups: GroupThresholds::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("repeats must be >= 1"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::config("hidden layer sizes must be >= 1"));
        }
        self.dataset.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.groups.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Seeds of the individual repeats. Two configurations with the same
    /// `seed` share them, which pairs their runs.
    pub fn repeat_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.repeats).map(|_| rng.random()).collect()
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.dataset.input_dim];
        dims.extend(&self.hidden_layers);
        dims.push(self.dataset.num_classes);
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

/// Outcome of one seeded repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub seed: u64,
    pub status: RunStatus,
    /// Balanced accuracy; NaN for a failed run.
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub final_train_loss: f64,
    pub wall_time_ms: u128,
}

impl MetricsReport {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// Mean and sample standard deviation of a metric over successful seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let values: Vec<f64> = values.into_iter().collect();
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub n_ok: usize,
    pub overall: Option<MeanStd>,
    pub many: Option<MeanStd>,
    pub medium: Option<MeanStd>,
    pub few: Option<MeanStd>,
    pub final_train_loss: Option<MeanStd>,
}

impl Aggregate {
    pub fn of(reports: &[MetricsReport]) -> Self {
        let ok: Vec<&MetricsReport> = reports.iter().filter(|r| r.is_ok()).collect();
        Self {
            n_ok: ok.len(),
            overall: MeanStd::of(ok.iter().map(|r| r.overall)),
            many: MeanStd::of(ok.iter().filter_map(|r| r.many)),
            medium: MeanStd::of(ok.iter().filter_map(|r| r.medium)),
            few: MeanStd::of(ok.iter().filter_map(|r| r.few)),
            final_train_loss: MeanStd::of(ok.iter().map(|r| r.final_train_loss)),
        }
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} worker threads: {e}")))
}

/// Generate, train and evaluate one repeat. Configuration errors propagate;
/// training divergence becomes a failed report.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<MetricsReport> {
    let start = Instant::now();
    let spec = DatasetSpec {
        seed,
        ..cfg.dataset.clone()
    };
    let generated = data::generate(&spec)?;
    let groups = data::assign_groups(&generated.stats, &cfg.groups);
    let params = Mlp::init(&cfg.layer_dims(), seed.wrapping_add(1))?;
    let sgd = SgdConfig {
        seed: seed.wrapping_add(2),
        ..cfg.optimizer.clone()
    };
    let outcome = tinynet::train(params, &generated.train, &generated.stats, &cfg.loss, &sgd);
    let report = match outcome {
        Ok(trained) => {
            let acc = tinynet::evaluate(&trained.params, &generated.test, &groups)?;
            MetricsReport {
                seed,
                status: RunStatus::Ok,
                overall: acc.overall,
                many: acc.many,
                medium: acc.medium,
                few: acc.few,
                final_train_loss: *trained.loss_trace.last().expect("epochs >= 1"),
                wall_time_ms: 0,
            }
        }
        Err(e @ Error::Diverged { .. }) => MetricsReport {
            seed,
            status: RunStatus::Failed(e.to_string()),
            overall: f64::NAN,
            many: None,
            medium: None,
            few: None,
            final_train_loss: f64::NAN,
            wall_time_ms: 0,
        },
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        wall_time_ms: start.elapsed().as_millis(),
        ..report
    })
}

/// One report per repeat, in seed order regardless of `jobs`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let seeds = cfg.repeat_seeds();
    thread_pool(jobs)?.install(|| seeds.par_iter().map(|&s| run_single(cfg, s)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub omega: PivotOmega,
    pub reports: Vec<MetricsReport>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// The row with the highest mean balanced accuracy.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.aggregate.overall.is_some())
            .max_by(|a, b| {
                let key = |r: &SweepRow| r.aggregate.overall.map_or(f64::NEG_INFINITY, |m| m.mean);
                key(a).total_cmp(&key(b))
            })
    }
}

/// Runs the experiment once per ω with CCAR enabled. All cells share the same
/// repeat seeds.
pub fn sweep_omega(cfg: &ExperimentConfig, omegas: &[f64], jobs: usize) -> Result<SweepResult> {
    if omegas.is_empty() {
        return Err(Error::config("the ω grid is empty"));
    }
    let omegas = omegas
        .iter()
        .map(|&w| PivotOmega::new(w))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<ExperimentConfig> = omegas
        .iter()
        .map(|&omega| ExperimentConfig {
            loss: LossConfig {
                ccar_enabled: true,
                omega,
                ..cfg.loss
            },
            ..cfg.clone()
        })
        .collect();
    for cell in &cells {
        cell.validate()?;
    }
    let seeds = cfg.repeat_seeds();
    let tasks: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<MetricsReport> = thread_pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(c, s)| run_single(&cells[c], s))
            .collect::<Result<_>>()
    })?;
    let rows = omegas
        .into_iter()
        .zip(results.chunks(seeds.len()))
        .map(|(omega, reports)| SweepRow {
            omega,
            aggregate: Aggregate::of(reports),
            reports: reports.to_vec(),
        })
        .collect();
    Ok(SweepResult { rows })
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

pub const METRICS_HEADER: [&str; 12] = [
    "kind",
    "seed",
    "status",
    "overall",
    "many",
    "medium",
    "few",
    "final_train_loss",
    "overall_std",
    "many_std",
    "medium_std",
    "few_std",
];

/// One `run` row per seed followed by an `aggregate` row holding means in the
/// metric columns and sample standard deviations in the `_std` columns.
pub fn write_metrics_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in reports {
        let (status, ok) = match &r.status {
            RunStatus::Ok => ("ok".to_string(), true),
            RunStatus::Failed(msg) => (format!("failed: {msg}"), false),
        };
        let metric = |v: Option<f64>| if ok { opt_float(v) } else { String::new() };
        w.write_record([
            "run".to_string(),
            r.seed.to_string(),
            status,
            metric(Some(r.overall)),
            metric(r.many),
            metric(r.medium),
            metric(r.few),
            metric(Some(r.final_train_loss)),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ])?;
    }
    let agg = Aggregate::of(reports);
    let mean = |m: Option<MeanStd>| opt_float(m.map(|m| m.mean));
    let std = |m: Option<MeanStd>| opt_float(m.map(|m| m.std));
    w.write_record([
        "aggregate".to_string(),
        String::new(),
        format!("n_ok={}", agg.n_ok),
        mean(agg.overall),
        mean(agg.many),
        mean(agg.medium),
        mean(agg.few),
        mean(agg.final_train_loss),
        std(agg.overall),
        std(agg.many),
        std(agg.medium),
        std(agg.few),
    ])?;
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 11] = [
    "omega",
    "n_ok",
    "overall_mean",
    "overall_std",
    "many_mean",
    "medium_mean",
    "few_mean",
    "many_std",
    "medium_std",
    "few_std",
    "seeds",
];

pub fn write_sweep_csv<W: Write>(sweep: &SweepResult, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(SWEEP_HEADER)?;
    for row in &sweep.rows {
        let a = &row.aggregate;
        let mean = |m: Option<MeanStd>| opt_float(m.map(|m| m.mean));
        let std = |m: Option<MeanStd>| opt_float(m.map(|m| m.std));
        let seeds: Vec<String> = row.reports.iter().map(|r| r.seed.to_string()).collect();
        w.write_record([
            format_float(row.omega.get()),
            a.n_ok.to_string(),
            mean(a.overall),
            std(a.overall),
            mean(a.many),
            mean(a.medium),
            mean(a.few),
            std(a.many),
            std(a.medium),
            std(a.few),
            seeds.join(" "),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<sweep>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub p_t: f64,
    pub f_c: f64,
    pub weight: f64,
}

/// Ω on a `p_points × f_points` grid over `p_t ∈ [0, 1]`, `f_c ∈ [0.01, 0.99]`,
/// with `p_t` varying fastest.
pub fn emit_surface_grid(
    omega: PivotOmega,
    p_points: usize,
    f_points: usize,
) -> Result<Vec<SurfacePoint>> {
    if p_points < 2 || f_points < 2 {
        return Err(Error::config(format!(
            "surface resolution must be at least 2 per axis, got {p_points}×{f_points}"
        )));
    }
    let mut rows = Vec::with_capacity(p_points * f_points);
    for j in 0..f_points {
        let f_c = 0.01 + 0.98 * j as f64 / (f_points - 1) as f64;
        let f = ClassFrequency::new(f_c)?;
        for i in 0..p_points {
            let p_t = i as f64 / (p_points - 1) as f64;
            let weight = weighting::omega_weight(Confidence::new(p_t)?, f, omega).get();
            rows.push(SurfacePoint { p_t, f_c, weight });
        }
    }
    Ok(rows)
}

pub fn write_surface_csv<W: Write>(points: &[SurfacePoint], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["p_t", "f_c", "omega_weight"])?;
    for p in points {
        w.write_record([
            format_float(p.p_t),
            format_float(p.f_c),
            format_float(p.weight),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<surface>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub f_c: f64,
    pub p_t: f64,
    pub psi: f64,
    /// Side of the pivot.
    pub phase: Phase,
}

impl CurvePoint {
    /// Ψ above the plain cross-entropy reference of 1.
    pub fn amplified(&self) -> bool {
        self.psi > 1.0
    }
}

/// Ψ at `p_t = i / points` for `i = 1..=points`, once per frequency.
pub fn emit_gradient_curves(
    omega: PivotOmega,
    f_list: &[f64],
    points: usize,
) -> Result<Vec<CurvePoint>> {
    if points == 0 {
        return Err(Error::config("gradient curves need at least one point"));
    }
    let mut rows = Vec::with_capacity(points * f_list.len());
    for &f_c in f_list {
        let f = ClassFrequency::new(f_c)?;
        for i in 1..=points {
            let p_t = i as f64 / points as f64;
            let p = Confidence::new(p_t)?;
            rows.push(CurvePoint {
                f_c,
                p_t,
                psi: weighting::modulation_factor(p, f, omega).get(),
                phase: Phase::of(p, omega),
            });
        }
    }
    Ok(rows)
}

pub fn write_gradient_curves_csv<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["f_c", "p_t", "psi", "psi_ce_baseline", "phase", "amplified"])?;
    for p in points {
        w.write_record([
            format_float(p.f_c),
            format_float(p.p_t),
            format_float(p.psi),
            format_float(1.0),
            p.phase.as_str().to_string(),
            p.amplified().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<gradcurves>", e))?;
    Ok(())
}

/// Creates `dir` and writes `name` inside it through `write`.
pub fn write_output(
    dir: &Path,
    name: &str,
    write: impl FnOnce(&mut std::io::BufWriter<fs::File>) -> Result<()>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write(&mut out)?;
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Echo of the fully resolved configuration.
pub fn write_resolved_config(cfg: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    let text = cfg.to_json()?;
    write_output(dir, "resolved_config.json", |out| {
        out.write_all(text.as_bytes())
            .map_err(|e| Error::io("resolved_config.json", e))
    })
}

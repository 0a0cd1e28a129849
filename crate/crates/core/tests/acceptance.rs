//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::f64::consts::E;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ccar::data::{self, DatasetSpec};
use ccar::harness::{self, ExperimentConfig, DEFAULT_OMEGA_GRID};
use ccar::losses::{self, BaseLoss, ClassStats, LogitVector, LossConfig};
use ccar::tinynet::SgdConfig;
use ccar::weighting::{self, ClassFrequency, Confidence, PivotOmega};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn w(p: f64, f: f64, omega: f64) -> f64 {
    weighting::omega_weight(
        Confidence::new(p).unwrap(),
        ClassFrequency::new(f).unwrap(),
        PivotOmega::new(omega).unwrap(),
    )
    .get()
}

fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            return v;
        }
    }
}

fn draw_case(rng: &mut ChaCha8Rng) -> (LogitVector, usize, ClassStats) {
    let k = rng.random_range(2..=10);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let z: Vec<f64> = (0..k).map(|_| normal.sample(rng)).collect();
    let counts: Vec<u64> = (0..k).map(|_| rng.random_range(1..=1000)).collect();
    let target = rng.random_range(0..k);
    (
        LogitVector::new(z).unwrap(),
        target,
        ClassStats::from_counts(counts).unwrap(),
    )
}

fn pivot_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let worst = (0..1000)
        .map(|_| {
            let (f, omega) = (unit_open(&mut rng), unit_open(&mut rng));
            (w(omega, f, omega) - 1.0).abs()
        })
        .fold(0.0, f64::max);
    verdict(
        worst < 1e-12,
        format!("max |Ω(ω, f) − 1| = {worst:.3e} over 1000 pairs"),
    )
}

fn jump_bound() -> Verdict {
    let sup = (1..=1000)
        .map(|i| {
            let f = i as f64 / 1001.0;
            ((E - f) / (E - 1.0 + f)).ln().abs()
        })
        .fold(0.0, f64::max);
    let bound = (E / (E - 1.0)).ln();
    verdict(
        sup <= bound + 1e-12 && (0.45..=0.46).contains(&sup),
        format!("sup = {sup:.6}, bound = {bound:.6}"),
    )
}

fn psi_bound() -> Verdict {
    let omega = PivotOmega::new(0.75).unwrap();
    let bound = 0.75_f64.exp() * (1.0 + 1.0 / E);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..100 {
        let p = Confidence::new(i as f64 / 99.0).unwrap();
        for j in 1..=100 {
            let f = ClassFrequency::new(j as f64 / 101.0).unwrap();
            let psi = weighting::modulation_factor(p, f, omega).get();
            lo = lo.min(psi);
            hi = hi.max(psi);
        }
    }
    verdict(
        lo > 0.0 && hi <= bound,
        format!("Ψ ∈ [{lo:.4}, {hi:.4}] on 10⁴ nodes, bound {bound:.4}"),
    )
}

fn closed_form_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (z, t, stats) = draw_case(&mut rng);
        let omega = PivotOmega::new(unit_open(&mut rng)).unwrap();
        let cfg = LossConfig::new(BaseLoss::Ce, true).with_omega(omega);
        let product_rule = losses::total_loss_and_grad(&z, t, &stats, &cfg)
            .unwrap()
            .grad_logits;
        let closed = losses::modulated_ce_grad(&z, t, &stats, omega).unwrap();
        for (a, b) in product_rule.iter().zip(&closed) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        worst < 1e-10,
        format!("max abs difference {worst:.3e} over 1000 points"),
    )
}

fn numeric_gradient(z: &LogitVector, t: usize, stats: &ClassStats, cfg: &LossConfig) -> Vec<f64> {
    let h = 1e-6;
    let base = z.as_slice().to_vec();
    let loss = |v: Vec<f64>| {
        losses::total_loss_and_grad(&LogitVector::new(v).unwrap(), t, stats, cfg)
            .unwrap()
            .loss
    };
    (0..base.len())
        .map(|i| {
            let (mut up, mut down) = (base.clone(), base.clone());
            up[i] += h;
            down[i] -= h;
            (loss(up) - loss(down)) / (2.0 * h)
        })
        .collect()
}

fn l2_relative(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(f64::MIN_POSITIVE)
}

fn gradient_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut lines = Vec::new();
    let mut passed = true;
    for base in BaseLoss::ALL {
        for ccar in [false, true] {
            let cfg = LossConfig::new(base, ccar);
            let (mut n, mut worst) = (0, 0.0_f64);
            while n < 100 {
                let (z, t, stats) = draw_case(&mut rng);
                let out = losses::total_loss_and_grad(&z, t, &stats, &cfg).unwrap();
                if ccar && (out.p_target.get() - cfg.omega.get()).abs() < 1e-3 {
                    continue;
                }
                worst = worst.max(l2_relative(
                    &out.grad_logits,
                    &numeric_gradient(&z, t, &stats, &cfg),
                ));
                n += 1;
            }
            passed &= worst < 1e-5;
            lines.push(format!("{}={worst:.1e}", cfg.label()));
        }
    }
    verdict(
        passed,
        format!("max rel err per config: {}", lines.join(" ")),
    )
}

fn monotonicity_and_ordering() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut violations = 0;
    for _ in 0..10_000 {
        let (f, omega) = (unit_open(&mut rng), unit_open(&mut rng));
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        if a != b && w(a.min(b), f, omega) <= w(a.max(b), f, omega) {
            violations += 1;
        }
    }
    for _ in 0..10_000 {
        let (f1, f2, omega) = (
            unit_open(&mut rng),
            unit_open(&mut rng),
            unit_open(&mut rng),
        );
        let p: f64 = rng.random();
        if f1 != f2 && p != omega && w(p, f1.min(f2), omega) <= w(p, f1.max(f2), omega) {
            violations += 1;
        }
    }
    verdict(
        violations == 0,
        format!("{violations} violations over 2 × 10⁴ pairs"),
    )
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn experiment(ccar: bool) -> ExperimentConfig {
    ExperimentConfig {
        loss: LossConfig::new(BaseLoss::Ce, ccar),
        ..ExperimentConfig::default()
    }
}

fn few_group_gain() -> Verdict {
    let ce = harness::run_experiment(&experiment(false), jobs()).unwrap();
    let ccar = harness::run_experiment(&experiment(true), jobs()).unwrap();
    let (a, b) = (harness::Aggregate::of(&ce), harness::Aggregate::of(&ccar));
    let (ce_few, ccar_few) = (a.few.unwrap(), b.few.unwrap());
    let (ce_all, ccar_all) = (a.overall.unwrap(), b.overall.unwrap());
    let passed = a.n_ok == 10
        && b.n_ok == 10
        && ccar_few.mean > ce_few.mean
        && ccar_all.mean >= ce_all.mean - ce_all.std;
    verdict(
        passed,
        format!(
            "few {:.4} vs {:.4}, overall {:.4}±{:.4} vs {:.4}±{:.4} (ccar+ce vs ce)",
            ccar_few.mean, ce_few.mean, ccar_all.mean, ccar_all.std, ce_all.mean, ce_all.std
        ),
    )
}

fn omega_ablation() -> Verdict {
    let sweep = harness::sweep_omega(&experiment(true), &DEFAULT_OMEGA_GRID, jobs()).unwrap();
    let mut csv = Vec::new();
    harness::write_sweep_csv(&sweep, &mut csv).unwrap();
    let rows = String::from_utf8(csv).unwrap().lines().count() - 1;
    let seed_lists: Vec<Vec<u64>> = sweep
        .rows
        .iter()
        .map(|r| r.reports.iter().map(|m| m.seed).collect())
        .collect();
    let paired = seed_lists.windows(2).all(|s| s[0] == s[1]);
    let means: Vec<f64> = sweep
        .rows
        .iter()
        .map(|r| r.aggregate.overall.map_or(f64::NAN, |m| m.mean))
        .collect();
    let best_other = means[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let passed = rows == 4 && paired && means[0] <= best_other;
    let cells: Vec<String> = DEFAULT_OMEGA_GRID
        .iter()
        .zip(&means)
        .map(|(o, m)| format!("ω={o}:{m:.4}"))
        .collect();
    verdict(
        passed,
        format!("{rows} rows, paired={paired}, overall {}", cells.join(" ")),
    )
}

fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        repeats: 3,
        dataset: DatasetSpec {
            num_classes: 6,
            max_count: 60,
            imbalance_factor: 10.0,
            input_dim: 4,
            test_per_class: 10,
            ..DatasetSpec::default()
        },
        optimizer: SgdConfig {
            epochs: 3,
            batch_size: 16,
            ..SgdConfig::default()
        },
        hidden_layers: vec![8],
        ..ExperimentConfig::default()
    }
}

fn all_outputs(jobs: usize) -> Vec<(&'static str, Vec<u8>)> {
    let cfg = tiny_experiment();
    let omega = cfg.loss.omega;
    let mut metrics = Vec::new();
    harness::write_metrics_csv(&harness::run_experiment(&cfg, jobs).unwrap(), &mut metrics)
        .unwrap();
    let mut sweep = Vec::new();
    harness::write_sweep_csv(
        &harness::sweep_omega(&cfg, &DEFAULT_OMEGA_GRID, jobs).unwrap(),
        &mut sweep,
    )
    .unwrap();
    let mut surface = Vec::new();
    harness::write_surface_csv(
        &harness::emit_surface_grid(omega, 101, 99).unwrap(),
        &mut surface,
    )
    .unwrap();
    let mut curves = Vec::new();
    harness::write_gradient_curves_csv(
        &harness::emit_gradient_curves(omega, &[0.01, 0.05, 0.2, 0.5, 0.8], 200).unwrap(),
        &mut curves,
    )
    .unwrap();
    let generated = data::generate(&DatasetSpec {
        seed: 5,
        ..cfg.dataset.clone()
    })
    .unwrap();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    generated.train.write_csv(&mut train).unwrap();
    generated.test.write_csv(&mut test).unwrap();
    vec![
        ("metrics", metrics),
        ("sweep", sweep),
        ("surface", surface),
        ("gradcurves", curves),
        ("train", train),
        ("test", test),
        ("config", cfg.to_json().unwrap().into_bytes()),
    ]
}

fn determinism() -> Verdict {
    let first = all_outputs(1);
    let second = all_outputs(1);
    let parallel = all_outputs(3);
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .zip(&parallel)
        .filter(|(((_, a), (_, b)), (_, c))| a != b || a != c)
        .map(|(((name, _), _), _)| *name)
        .collect();
    verdict(
        differing.is_empty(),
        format!(
            "{} outputs compared across 3 reruns (jobs 1, 1, 3); differing: {differing:?}",
            first.len()
        ),
    )
}

fn ccar_off_reduction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut mismatches = 0;
    for i in 0..1000 {
        let (z, t, stats) = draw_case(&mut rng);
        let cfg = LossConfig::new(BaseLoss::ALL[i % 5], false);
        let out = losses::total_loss_and_grad(&z, t, &stats, &cfg).unwrap();
        let (loss, grad) = losses::base_loss_and_grad(&z, t, &stats, &cfg).unwrap();
        let same = out.loss.to_bits() == loss.to_bits()
            && out.grad_logits.len() == grad.len()
            && out
                .grad_logits
                .iter()
                .zip(&grad)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} mismatches over 1000 points"),
    )
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Verdict, Duration);
    let criteria: [Criterion; 10] = [
        ("1  pivot identity", pivot_identity, Duration::from_secs(1)),
        (
            "2  derivative jump bound",
            jump_bound,
            Duration::from_secs(1),
        ),
        (
            "3  modulation factor bound",
            psi_bound,
            Duration::from_secs(1),
        ),
        (
            "4  closed-form CE gradient",
            closed_form_equivalence,
            Duration::from_secs(1),
        ),
        (
            "5  gradient oracle",
            gradient_oracle,
            Duration::from_secs(10),
        ),
        (
            "6  monotonicity and ordering",
            monotonicity_and_ordering,
            Duration::from_secs(1),
        ),
        (
            "7  few-group gain at IF=100",
            few_group_gain,
            Duration::from_secs(300),
        ),
        (
            "8  omega ablation sweep",
            omega_ablation,
            Duration::from_secs(1200),
        ),
        (
            "9  byte-identical reruns",
            determinism,
            Duration::from_secs(120),
        ),
        (
            "10 reweighting-off reduction",
            ccar_off_reduction,
            Duration::from_secs(1),
        ),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= budget;
        let passed = v.passed && in_budget;
        if !passed {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} [{:.2}s, budget {}s{}]",
            if passed { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_budget { "" } else { ", over budget" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

//! The invariant suite run by `ccar check`.
//!
//! Each check samples its domain with a fixed seed and reports the worst
//! error it saw next to the tolerance it was held to. Ordering checks report
//! the worst margin (for example `Ω(p₂) − Ω(p₁)` for `p₁ < p₂`), which must
//! stay below zero.

use std::f64::consts::E;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{self, DatasetSpec};
use crate::error::Result;
use crate::losses::{
    self, central_difference, relative_error, BaseLoss, ClassStats, LogitVector, LossConfig,
    Objective,
};
use crate::tinynet::{self, Mlp, SgdConfig};
use crate::weighting::{
    self, jump_bound, modulation_bound, ClassFrequency, Confidence, PivotOmega,
};

/// `∂Ω/∂p_t` as a plain function, so a check can be pointed at a deliberately
/// broken implementation.
pub type DerivativeFn = fn(Confidence, ClassFrequency, PivotOmega) -> f64;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: String,
    pub samples: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl PropertyCheck {
    fn below(name: impl Into<String>, samples: usize, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            samples,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }

    fn strictly_negative(name: impl Into<String>, samples: usize, worst_margin: f64) -> Self {
        Self {
            name: name.into(),
            samples,
            max_error: worst_margin,
            tolerance: 0.0,
            passed: worst_margin < 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PropertyReport {
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for PropertyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(8)
            .max(8);
        writeln!(
            f,
            "{:<width$}  {:>8}  {:>12}  {:>12}  verdict",
            "property", "samples", "max_error", "tolerance"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<width$}  {:>8}  {:>12.4e}  {:>12.4e}  {}",
                c.name,
                c.samples,
                c.max_error,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn conf(v: f64) -> Confidence {
    Confidence::new(v).expect("sampled inside [0, 1]")
}

fn freq(v: f64) -> ClassFrequency {
    ClassFrequency::new(v).expect("sampled inside (0, 1)")
}

fn pivot(v: f64) -> PivotOmega {
    PivotOmega::new(v).expect("sampled inside (0, 1]")
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let v: f64 = rng.random();
        if v > 0.0 {
            return v;
        }
    }
}

fn weight(p: f64, f: f64, w: f64) -> f64 {
    weighting::omega_weight(conf(p), freq(f), pivot(w)).get()
}

/// `|Ω(ω) − 1|` over random `(f, ω)`.
pub fn pivot_identity(samples: usize) -> PropertyCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let worst = (0..samples)
        .map(|_| {
            let (f, w) = (open_unit(&mut rng), open_unit(&mut rng));
            (weight(w, f, w) - 1.0).abs()
        })
        .fold(0.0, f64::max);
    PropertyCheck::below("pivot identity", samples, worst, 1e-12)
}

/// `|Ω(ω ± 1e-9) − 1|` on a frequency × pivot grid.
pub fn pivot_continuity() -> PropertyCheck {
    let eps = 1e-9;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for i in 1..100 {
        let f = i as f64 / 100.0;
        for j in 1..=20 {
            let w = j as f64 / 20.0;
            worst = worst.max((weight(w - eps, f, w) - 1.0).abs());
            n += 1;
            if w + eps <= 1.0 {
                worst = worst.max((weight(w + eps, f, w) - 1.0).abs());
                n += 1;
            }
        }
    }
    PropertyCheck::below("pivot continuity", n, worst, 1e-8)
}

/// Ω strictly decreasing in `p_t` over random pairs, including pairs that
/// straddle the pivot.
pub fn monotone_in_confidence(samples: usize) -> PropertyCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::NEG_INFINITY;
    let mut n = 0;
    while n < samples {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        if a == b {
            continue;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        let (f, w) = (open_unit(&mut rng), open_unit(&mut rng));
        worst = worst.max(weight(hi, f, w) - weight(lo, f, w));
        n += 1;
    }
    PropertyCheck::strictly_negative("monotone in confidence", n, worst)
}

/// Rarer classes get a larger weight at any fixed `p_t ≠ ω`.
pub fn rare_class_emphasis(samples: usize) -> PropertyCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::NEG_INFINITY;
    let mut n = 0;
    while n < samples {
        let (a, b) = (open_unit(&mut rng), open_unit(&mut rng));
        let (p, w): (f64, f64) = (rng.random(), open_unit(&mut rng));
        if a == b || p == w {
            continue;
        }
        let (rare, common) = (a.min(b), a.max(b));
        let margin = weight(p, common, w) - weight(p, rare, w);
        worst = worst.max(margin);
        n += 1;
    }
    PropertyCheck::strictly_negative("rare-class emphasis", n, worst)
}

/// Largest derivative jump over `points` frequencies `i / (points + 1)`.
pub fn jump_supremum(points: usize) -> f64 {
    (1..=points)
        .map(|i| weighting::derivative_jump(freq(i as f64 / (points + 1) as f64)))
        .fold(0.0, f64::max)
}

pub fn jump_bound_check(points: usize) -> PropertyCheck {
    let sup = jump_supremum(points);
    PropertyCheck::below(
        format!("jump bound (sup {sup:.6})"),
        points,
        sup - jump_bound(),
        1e-12,
    )
}

/// `0 < Ψ ≤ e^ω (1 + 1/e)` on a `side × side` grid over `p ∈ [0, 1]`,
/// `f ∈ (0, 1)`. The reported error is `max(Ψ − bound)`; a non-positive Ψ
/// fails the check outright.
pub fn modulation_boundedness(omega: PivotOmega, side: usize) -> PropertyCheck {
    let bound = modulation_bound(omega);
    let mut worst = f64::NEG_INFINITY;
    let mut positive = true;
    for i in 0..side {
        let p = i as f64 / (side - 1) as f64;
        for j in 1..=side {
            let f = j as f64 / (side + 1) as f64;
            let psi = weighting::modulation_factor(conf(p), freq(f), omega).get();
            positive &= psi > 0.0;
            worst = worst.max(psi - bound);
        }
    }
    let mut check = PropertyCheck::below(
        format!("psi bound (omega={})", omega.get()),
        side * side,
        worst,
        0.0,
    );
    check.passed &= positive;
    check
}

/// Analytic `∂Ω/∂p_t` against a central difference (step 1e-6) at points at
/// least 1e-3 away from the pivot.
pub fn derivative_consistency(derivative: DerivativeFn, samples: usize) -> PropertyCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < samples {
        let (p, f, w): (f64, f64, f64) = (rng.random(), open_unit(&mut rng), open_unit(&mut rng));
        if (p - w).abs() < 1e-3 || p - step < 0.0 || p + step > 1.0 {
            continue;
        }
        let numeric = (weight(p + step, f, w) - weight(p - step, f, w)) / (2.0 * step);
        let analytic = derivative(conf(p), freq(f), pivot(w));
        worst = worst.max((analytic - numeric).abs() / numeric.abs());
        n += 1;
    }
    PropertyCheck::below("derivative consistency", n, worst, 1e-5)
}

/// At `f = 0.5` both phases share the same base, so the second difference
/// across ω matches `β² Ω` with `β = ln(e − 0.5)`.
pub fn smooth_at_half_frequency() -> PropertyCheck {
    let h = 1e-4;
    let beta = (E - 0.5_f64).ln();
    let mut worst: f64 = 0.0;
    let omegas = [0.25, 0.5, 0.75, 0.9];
    for &w in &omegas {
        let second =
            (weight(w + h, 0.5, w) - 2.0 * weight(w, 0.5, w) + weight(w - h, 0.5, w)) / (h * h);
        worst = worst.max((second - beta * beta).abs());
    }
    PropertyCheck::below("smooth at f = 0.5", omegas.len(), worst, 1e-5)
}

/// A random `(logits, target, stats)` draw: 2–10 classes, counts in
/// `1..=500`, logits with standard deviation 2.
pub fn random_case(rng: &mut ChaCha8Rng) -> (LogitVector, usize, ClassStats) {
    let k = rng.random_range(2..=10);
    let counts: Vec<u64> = (0..k).map(|_| rng.random_range(1..=500)).collect();
    let z: Vec<f64> = (0..k)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            2.0 * v
        })
        .collect();
    let target = rng.random_range(0..k);
    (
        LogitVector::new(z).expect("finite"),
        target,
        ClassStats::from_counts(counts).expect("nonempty classes"),
    )
}

/// Every base loss with CCAR on and off.
pub fn all_loss_configs() -> Vec<LossConfig> {
    BaseLoss::ALL
        .iter()
        .flat_map(|&b| [LossConfig::new(b, false), LossConfig::new(b, true)])
        .collect()
}

/// Analytic gradient against central differences (step 1e-6), skipping draws
/// whose weighted confidence lies within 1e-3 of ω.
pub fn gradient_oracle(cfg: &LossConfig, samples: usize, seed: u64) -> Result<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    while n < samples {
        let (z, t, stats) = random_case(&mut rng);
        let out = losses::total_loss_and_grad(&z, t, &stats, cfg)?;
        if cfg.ccar_enabled && (out.p_target.get() - cfg.omega.get()).abs() < 1e-3 {
            continue;
        }
        let numeric = losses::finite_difference_grad(&z, t, &stats, cfg, 1e-6)?;
        worst = worst.max(relative_error(&out.grad_logits, &numeric));
        n += 1;
    }
    Ok(PropertyCheck::below(
        format!("gradient oracle [{}]", cfg.label()),
        n,
        worst,
        1e-5,
    ))
}

/// Product-rule CCAR + CE gradient against `Ψ (p − e_t)`.
pub fn lemma_equivalence(samples: usize) -> Result<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (z, t, stats) = random_case(&mut rng);
        let omega = pivot(open_unit(&mut rng));
        let cfg = LossConfig::new(BaseLoss::Ce, true).with_omega(omega);
        let out = losses::total_loss_and_grad(&z, t, &stats, &cfg)?;
        let closed = losses::modulated_ce_grad(&z, t, &stats, omega)?;
        for (a, b) in out.grad_logits.iter().zip(&closed) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(PropertyCheck::below(
        "closed-form CE gradient",
        samples,
        worst,
        1e-10,
    ))
}

/// With CCAR off, loss and gradient equal the plain base bit for bit. The
/// error is the number of mismatching samples.
pub fn ccar_off_reduction(samples: usize) -> Result<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0usize;
    for i in 0..samples {
        let (z, t, stats) = random_case(&mut rng);
        let cfg = LossConfig::new(BaseLoss::ALL[i % BaseLoss::ALL.len()], false);
        let out = losses::total_loss_and_grad(&z, t, &stats, &cfg)?;
        let (loss, grad) = losses::base_loss_and_grad(&z, t, &stats, &cfg)?;
        let same = out.loss.to_bits() == loss.to_bits()
            && out.weight_applied == 1.0
            && out
                .grad_logits
                .iter()
                .zip(&grad)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    Ok(PropertyCheck::below(
        "ccar-off reduction",
        samples,
        mismatches as f64,
        0.0,
    ))
}

/// Adding a constant to every logit changes neither loss nor gradient.
pub fn shift_invariance(samples: usize) -> Result<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let configs = all_loss_configs();
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let (z, t, stats) = random_case(&mut rng);
        let c: f64 = rng.random_range(-10.0..10.0);
        let shifted = LogitVector::new(z.as_slice().iter().map(|v| v + c).collect())?;
        let cfg = &configs[i % configs.len()];
        let a = losses::total_loss_and_grad(&z, t, &stats, cfg)?;
        let b = losses::total_loss_and_grad(&shifted, t, &stats, cfg)?;
        worst = worst.max((a.loss - b.loss).abs());
        for (x, y) in a.grad_logits.iter().zip(&b.grad_logits) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(PropertyCheck::below(
        "softmax shift invariance",
        samples,
        worst,
        1e-12,
    ))
}

/// For CE + CCAR: the target coordinate of the gradient is negative, every
/// other one positive. Reports the largest offending signed value.
pub fn sign_structure(samples: usize) -> Result<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = LossConfig::new(BaseLoss::Ce, true);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let (z, t, stats) = random_case(&mut rng);
        let out = losses::total_loss_and_grad(&z, t, &stats, &cfg)?;
        for (j, &g) in out.grad_logits.iter().enumerate() {
            worst = worst.max(if j == t { g } else { -g });
        }
    }
    Ok(PropertyCheck::strictly_negative(
        "gradient sign structure",
        samples,
        worst,
    ))
}

/// `‖∇z‖∞ ≤ e^ω (1 + 1/e)` for CE + CCAR.
pub fn gradient_boundedness(samples: usize) -> Result<PropertyCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let (z, t, stats) = random_case(&mut rng);
        let omega = pivot(open_unit(&mut rng));
        let cfg = LossConfig::new(BaseLoss::Ce, true).with_omega(omega);
        let out = losses::total_loss_and_grad(&z, t, &stats, &cfg)?;
        let sup = out.grad_logits.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        worst = worst.max(sup - modulation_bound(omega));
    }
    Ok(PropertyCheck::below(
        "gradient boundedness",
        samples,
        worst,
        0.0,
    ))
}

fn flatten(m: &Mlp) -> Vec<f64> {
    m.layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

fn unflatten(template: &Mlp, flat: &[f64]) -> Mlp {
    let mut m = template.clone();
    let mut values = flat.iter().copied();
    for layer in &mut m.layers {
        for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *v = values.next().expect("same parameter count");
        }
    }
    m
}

/// Whole-network parameter gradients against central differences on a
/// `[4, 8, 5]` network and a 3-sample batch.
pub fn network_gradient_check(cfg: &LossConfig, seed: u64) -> Result<PropertyCheck> {
    let stats = ClassStats::from_counts(vec![200, 60, 20, 6, 2])?;
    let objective = Objective::new(&stats, *cfg)?;
    let targets = [0, 2, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Redraw until no weighted confidence sits within 1e-3 of the pivot.
    let (net, x) = loop {
        let net = Mlp::init(&[4, 8, 5], rng.random())?;
        let x = Array2::from_shape_simple_fn((3, 4), || -> f64 { StandardNormal.sample(&mut rng) });
        let logits = net.logits(x.view())?;
        let near_pivot = cfg.ccar_enabled
            && logits.rows().into_iter().zip(&targets).any(|(row, &t)| {
                let p = objective
                    .evaluate(row.as_slice().expect("row-major"), t)
                    .map(|o| o.p_target.get())
                    .unwrap_or(f64::NAN);
                (p - cfg.omega.get()).abs() < 1e-3
            });
        if !near_pivot {
            break (net, x);
        }
    };
    let (_, grads) = tinynet::batch_gradients(&net, &objective, x.view(), &targets)?;
    let numeric = central_difference(
        |flat| {
            tinynet::batch_gradients(&unflatten(&net, flat), &objective, x.view(), &targets)
                .map(|(loss, _)| loss)
                .unwrap_or(f64::NAN)
        },
        &flatten(&net),
        1e-6,
    );
    let err = relative_error(&flatten(&grads), &numeric);
    Ok(PropertyCheck::below(
        format!("network gradient [{}]", cfg.label()),
        net.num_params(),
        err,
        1e-4,
    ))
}

fn blob_spec(seed: u64, imbalance: f64) -> DatasetSpec {
    DatasetSpec {
        num_classes: 5,
        max_count: 60,
        imbalance_factor: imbalance,
        input_dim: 4,
        class_separation: 6.0,
        noise_sigma: 0.5,
        test_per_class: 10,
        seed,
    }
}

fn small_sgd(seed: u64) -> SgdConfig {
    SgdConfig {
        epochs: 5,
        batch_size: 16,
        seed,
        ..SgdConfig::default()
    }
}

/// Two identical training runs produce identical parameters and traces.
pub fn training_determinism() -> Result<PropertyCheck> {
    let g = data::generate(&blob_spec(11, 5.0))?;
    let run = || -> Result<(Vec<u64>, Vec<u64>)> {
        let net = Mlp::init(&[4, 16, 5], 3)?;
        let out = tinynet::train(
            net,
            &g.train,
            &g.stats,
            &LossConfig::default(),
            &small_sgd(4),
        )?;
        Ok((
            flatten(&out.params).iter().map(|v| v.to_bits()).collect(),
            out.loss_trace.iter().map(|v| v.to_bits()).collect(),
        ))
    };
    let same = run()? == run()?;
    Ok(PropertyCheck::below(
        "training determinism",
        2,
        if same { 0.0 } else { 1.0 },
        0.0,
    ))
}

/// On well-separated balanced blobs, plain CE ends with a lower training
/// loss than it started with, for every seed.
pub fn loss_decreases(seeds: u64) -> Result<PropertyCheck> {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..seeds {
        let g = data::generate(&blob_spec(seed, 1.0))?;
        let net = Mlp::init(&[4, 16, 5], seed + 100)?;
        let cfg = LossConfig::new(BaseLoss::Ce, false);
        let trace =
            tinynet::train(net, &g.train, &g.stats, &cfg, &small_sgd(seed + 200))?.loss_trace;
        worst = worst.max(trace[trace.len() - 1] - trace[0]);
    }
    Ok(PropertyCheck::strictly_negative(
        "training loss decreases",
        seeds as usize,
        worst,
    ))
}

/// Count profiles: nonincreasing, with max/min within 20% of the imbalance
/// factor. The error is the worst relative deviation of the ratio.
pub fn count_profile_fidelity() -> Result<PropertyCheck> {
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    let mut n = 0;
    for &k in &[10usize, 50, 100] {
        for &imbalance in &[10.0, 50.0, 100.0, 200.0] {
            let spec = DatasetSpec {
                num_classes: k,
                max_count: 500,
                imbalance_factor: imbalance,
                ..DatasetSpec::default()
            };
            let counts = data::exponential_class_counts(&spec)?;
            monotone &= counts.windows(2).all(|w| w[0] >= w[1]);
            let ratio = counts[0] as f64 / *counts.last().expect("K >= 3") as f64;
            worst = worst.max((ratio / imbalance - 1.0).abs());
            n += 1;
        }
    }
    let mut check = PropertyCheck::below("count profile fidelity", n, worst, 0.2);
    check.passed &= monotone;
    Ok(check)
}

/// Balanced test split, bit-identical regeneration, distinct data for
/// distinct seeds.
pub fn dataset_seeding() -> Result<PropertyCheck> {
    let spec = blob_spec(21, 10.0);
    let a = data::generate(&spec)?;
    let b = data::generate(&spec)?;
    let c = data::generate(&DatasetSpec {
        seed: 22,
        ..spec.clone()
    })?;
    let balanced = a.test.counts().iter().all(|&n| n == spec.test_per_class);
    let ok =
        balanced && a.train == b.train && a.test == b.test && a.train.features != c.train.features;
    Ok(PropertyCheck::below(
        "dataset seeding and test balance",
        3,
        if ok { 0.0 } else { 1.0 },
        0.0,
    ))
}

fn true_derivative(p: Confidence, f: ClassFrequency, w: PivotOmega) -> f64 {
    weighting::omega_derivative(p, f, w).value
}

/// `∂Ω/∂p_t` with its sign flipped, for exercising the failure path.
pub fn sign_flipped_derivative(p: Confidence, f: ClassFrequency, w: PivotOmega) -> f64 {
    -true_derivative(p, f, w)
}

/// Runs every check.
pub fn check_properties() -> Result<PropertyReport> {
    check_properties_with(true_derivative)
}

/// Runs every check, taking `∂Ω/∂p_t` from `derivative`.
pub fn check_properties_with(derivative: DerivativeFn) -> Result<PropertyReport> {
    let mut checks = vec![
        pivot_identity(1000),
        pivot_continuity(),
        monotone_in_confidence(10_000),
        rare_class_emphasis(10_000),
        jump_bound_check(1000),
        derivative_consistency(derivative, 1000),
        smooth_at_half_frequency(),
    ];
    for &w in &[0.25, 0.5, 0.75, 1.0] {
        checks.push(modulation_boundedness(pivot(w), 100));
    }
    for (i, cfg) in all_loss_configs().iter().enumerate() {
        checks.push(gradient_oracle(cfg, 100, 100 + i as u64)?);
    }
    checks.push(lemma_equivalence(1000)?);
    checks.push(ccar_off_reduction(1000)?);
    checks.push(shift_invariance(1000)?);
    checks.push(sign_structure(1000)?);
    checks.push(gradient_boundedness(1000)?);
    for (i, cfg) in all_loss_configs().iter().enumerate() {
        checks.push(network_gradient_check(cfg, 200 + i as u64)?);
    }
    checks.push(training_determinism()?);
    checks.push(loss_decreases(3)?);
    checks.push(count_profile_fidelity()?);
    checks.push(dataset_seeding()?);

    Ok(PropertyReport { checks })
}

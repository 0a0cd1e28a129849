//! Base losses, their CCAR-weighted composition and analytic gradients with
//! respect to the logits.
//!
//! Every loss here is per sample. [`Objective`] prepares the class-dependent
//! quantities once (class-balanced weights, logit shifts) so the trainer can
//! evaluate millions of samples without reallocating them; the free functions
//! are thin wrappers over it.
//!
//! The composed objective is `Ω(s, f_t) · B(z)` where `B` is the base loss and
//! `s` the confidence seen by the weight. Its gradient follows the product
//! rule with the dual-phase frequency held locally constant:
//!
//! ```text
//! ∇z = Ω ∇z B + B · (∂Ω/∂s) · s · (e_t - P)
//! ```
//!
//! with `P` the probability vector `s` was read from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weighting::{self, ClassFrequency, Confidence, PivotOmega};

/// Raw model scores `z`, at least two classes, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Shape(format!(
                "a logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "logits" });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Max-subtracted softmax written into `out`. Returns `ln Σ exp(z - max)`
/// so callers can form log-probabilities without taking `ln` of an
/// underflowed probability.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    max + sum.ln()
}

pub fn softmax(z: &LogitVector) -> ProbVector {
    let mut out = vec![0.0; z.len()];
    softmax_into(z.as_slice(), &mut out);
    ProbVector(out)
}

/// Per-class training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    counts: Vec<u64>,
    total: u64,
    frequencies: Vec<f64>,
    log_priors: Vec<f64>,
}

impl ClassStats {
    /// Rejects fewer than two classes and any empty class.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Shape(format!(
                "class statistics need at least 2 classes, got {}",
                counts.len()
            )));
        }
        if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &n)| n == 0) {
            return Err(Error::DegenerateClass { class, count });
        }
        let total: u64 = counts.iter().sum();
        let frequencies: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
        let log_priors = frequencies.iter().map(|f| f.ln()).collect();
        Ok(Self {
            counts,
            total,
            frequencies,
            log_priors,
        })
    }

    /// Counts labels in `0..num_classes`.
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        for &y in labels {
            let slot = counts.get_mut(y).ok_or_else(|| {
                Error::Shape(format!("label {y} out of range for {num_classes} classes"))
            })?;
            *slot += 1;
        }
        Self::from_counts(counts)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn log_priors(&self) -> &[f64] {
        &self.log_priors
    }

    pub fn frequency(&self, class: usize) -> ClassFrequency {
        // Every count is in [1, total), so the frequency is strictly inside (0, 1).
        ClassFrequency::new(self.frequencies[class]).expect("validated at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLoss {
    /// Softmax cross-entropy.
    Ce,
    /// `-(1 - p_t)^γ ln p_t`.
    Focal,
    /// Cross-entropy scaled by the effective-number class weight.
    Cb,
    /// Cross-entropy on logits shifted by `τ ln f_c`.
    La,
    /// Cross-entropy on logits shifted by `ln N_c`.
    Bs,
}

impl BaseLoss {
    pub const ALL: [BaseLoss; 5] = [
        BaseLoss::Ce,
        BaseLoss::Focal,
        BaseLoss::Cb,
        BaseLoss::La,
        BaseLoss::Bs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaseLoss::Ce => "ce",
            BaseLoss::Focal => "focal",
            BaseLoss::Cb => "cb",
            BaseLoss::La => "la",
            BaseLoss::Bs => "bs",
        }
    }

    fn is_adjusted(self) -> bool {
        matches!(self, BaseLoss::La | BaseLoss::Bs)
    }
}

impl fmt::Display for BaseLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaseLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(BaseLoss::Ce),
            "focal" => Ok(BaseLoss::Focal),
            "cb" => Ok(BaseLoss::Cb),
            "la" => Ok(BaseLoss::La),
            "bs" => Ok(BaseLoss::Bs),
            other => Err(Error::config(format!(
                "unknown base loss `{other}` (expected ce, focal, cb, la or bs)"
            ))),
        }
    }
}

/// Training-time logit shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitShift {
    /// `τ ln f_c`
    La,
    /// `ln N_c`
    Bs,
}

/// Which probability vector feeds the CCAR weight when logits are shifted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbSource {
    /// The same shifted-logit probabilities the base loss penalizes.
    #[default]
    Adjusted,
    /// Softmax of the unshifted logits.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub base: BaseLoss,
    pub ccar_enabled: bool,
    pub omega: PivotOmega,
    pub focal_gamma: f64,
    pub cb_beta: f64,
    pub la_tau: f64,
    pub ccar_prob_source: ProbSource,
    /// Shift applied under the focal base (`focal + la`, `focal + bs`).
    /// Ignored for other bases.
    pub focal_shift: Option<LogitShift>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            base: BaseLoss::Ce,
            ccar_enabled: true,
            omega: PivotOmega::DEFAULT,
            focal_gamma: 2.0,
            cb_beta: 0.9999,
            la_tau: 1.0,
            ccar_prob_source: ProbSource::Adjusted,
            focal_shift: None,
        }
    }
}

impl LossConfig {
    pub fn new(base: BaseLoss, ccar_enabled: bool) -> Self {
        Self {
            base,
            ccar_enabled,
            ..Self::default()
        }
    }

    pub fn with_omega(mut self, omega: PivotOmega) -> Self {
        self.omega = omega;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::config(format!(
                "focal_gamma must be finite and >= 0, got {}",
                self.focal_gamma
            )));
        }
        if !(0.0..1.0).contains(&self.cb_beta) {
            return Err(Error::config(format!(
                "cb_beta must lie in [0, 1), got {}",
                self.cb_beta
            )));
        }
        if !(self.la_tau.is_finite() && self.la_tau > 0.0) {
            return Err(Error::config(format!(
                "la_tau must be finite and > 0, got {}",
                self.la_tau
            )));
        }
        Ok(())
    }

    /// The logit shift in effect for this configuration, if any.
    pub fn shift(&self) -> Option<LogitShift> {
        match self.base {
            BaseLoss::La => Some(LogitShift::La),
            BaseLoss::Bs => Some(LogitShift::Bs),
            BaseLoss::Focal => self.focal_shift,
            BaseLoss::Ce | BaseLoss::Cb => None,
        }
    }

    /// Short label such as `ccar+bs` or `focal`.
    pub fn label(&self) -> String {
        let mut base = self.base.to_string();
        if let (BaseLoss::Focal, Some(shift)) = (self.base, self.focal_shift) {
            base.push_str(match shift {
                LogitShift::La => "+la",
                LogitShift::Bs => "+bs",
            });
        }
        if self.ccar_enabled {
            format!("ccar+{base}")
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
    /// Ω applied to the base loss; exactly 1 when CCAR is off.
    pub weight_applied: f64,
    /// Confidence fed to Ω (or the base-loss confidence when CCAR is off).
    pub p_target: Confidence,
}

/// Scalars produced alongside an in-place gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLoss {
    pub loss: f64,
    pub weight_applied: f64,
    pub p_target: Confidence,
}

/// Effective-number class weights `(1 - β) / (1 - β^{N_c})`, rescaled so
/// their mean over classes is one.
pub fn class_balanced_weights(stats: &ClassStats, beta: f64) -> Vec<f64> {
    let raw: Vec<f64> = stats
        .counts()
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powf(n as f64)))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// A loss configuration bound to class statistics.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    stats: &'a ClassStats,
    cfg: LossConfig,
    cb_weights: Option<Vec<f64>>,
    shift: Option<Vec<f64>>,
}

impl<'a> Objective<'a> {
    pub fn new(stats: &'a ClassStats, cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        let cb_weights =
            (cfg.base == BaseLoss::Cb).then(|| class_balanced_weights(stats, cfg.cb_beta));
        let shift = cfg.shift().map(|s| logit_shift(stats, s, cfg.la_tau));
        Ok(Self {
            stats,
            cfg,
            cb_weights,
            shift,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.stats.num_classes()
    }

    fn check_shape(&self, z: &[f64], target: usize) -> Result<()> {
        let k = self.stats.num_classes();
        if z.len() != k {
            return Err(Error::Shape(format!(
                "{} logits for {} classes",
                z.len(),
                k
            )));
        }
        if target >= k {
            return Err(Error::Shape(format!(
                "target {target} out of range for {k} classes"
            )));
        }
        Ok(())
    }

    /// Base loss value and its gradient with respect to raw logits, written
    /// into `grad`. `probs` receives the probabilities the base loss saw.
    fn base_into(&self, z: &[f64], target: usize, probs: &mut [f64], grad: &mut [f64]) -> f64 {
        let log_q = match &self.shift {
            Some(shift) => {
                for ((g, &v), &s) in grad.iter_mut().zip(z).zip(shift) {
                    *g = v + s;
                }
                let log_norm = softmax_into(grad, probs);
                let log_q = grad[target] - log_norm;
                grad.copy_from_slice(probs);
                log_q
            }
            None => {
                let log_norm = softmax_into(z, probs);
                grad.copy_from_slice(probs);
                z[target] - log_norm
            }
        };
        let q = probs[target];
        // grad currently holds q; turn it into q - e_t.
        grad[target] -= 1.0;

        match self.cfg.base {
            BaseLoss::Ce | BaseLoss::La | BaseLoss::Bs => -log_q,
            BaseLoss::Cb => {
                let w = self.cb_weights.as_ref().expect("cb weights")[target];
                grad.iter_mut().for_each(|g| *g *= w);
                -w * log_q
            }
            BaseLoss::Focal => {
                let gamma = self.cfg.focal_gamma;
                let one_minus = 1.0 - q;
                let modulator = one_minus.powf(gamma);
                // dB/dq · q = γ (1-q)^{γ-1} q ln q - (1-q)^γ, and ∇z B = (dB/dq · q)(e_t - q).
                let slope = if one_minus == 0.0 || gamma == 0.0 {
                    -modulator
                } else {
                    gamma * one_minus.powf(gamma - 1.0) * q * log_q - modulator
                };
                grad.iter_mut().for_each(|g| *g *= -slope);
                -modulator * log_q
            }
        }
    }

    /// Plain base loss and gradient, ignoring `ccar_enabled`.
    pub fn base_loss_and_grad(&self, z: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
        self.check_shape(z, target)?;
        let k = z.len();
        let mut probs = vec![0.0; k];
        let mut grad = vec![0.0; k];
        let loss = self.base_into(z, target, &mut probs, &mut grad);
        finite(loss, "base loss")?;
        Ok((loss, grad))
    }

    /// Evaluates the configured loss, writing `∂L/∂z` into `grad`.
    pub fn evaluate_into(&self, z: &[f64], target: usize, grad: &mut [f64]) -> Result<SampleLoss> {
        self.check_shape(z, target)?;
        if grad.len() != z.len() {
            return Err(Error::Shape(format!(
                "gradient buffer of length {} for {} logits",
                grad.len(),
                z.len()
            )));
        }
        let k = z.len();
        let mut probs = vec![0.0; k];
        let base = self.base_into(z, target, &mut probs, grad);
        finite(base, "base loss")?;

        if !self.cfg.ccar_enabled {
            return Ok(SampleLoss {
                loss: base,
                weight_applied: 1.0,
                p_target: Confidence::saturating(probs[target])?,
            });
        }

        if self.shift.is_some() && self.cfg.ccar_prob_source == ProbSource::Raw {
            softmax_into(z, &mut probs);
        }
        let s = Confidence::saturating(probs[target])?;
        let f = self.stats.frequency(target);
        let omega = self.cfg.omega;
        let weight = weighting::omega_weight(s, f, omega).get();
        let d_weight = weighting::omega_derivative(s, f, omega).value;
        finite(weight, "ccar weight")?;

        // Ω ∇B + B Ω'(s) s (e_t - P)
        let coeff = base * d_weight * s.get();
        for (j, (g, &p)) in grad.iter_mut().zip(&probs).enumerate() {
            let indicator = if j == target { 1.0 } else { 0.0 };
            *g = weight * *g + coeff * (indicator - p);
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { term: "gradient" });
        }
        let loss = weight * base;
        finite(loss, "weighted loss")?;
        Ok(SampleLoss {
            loss,
            weight_applied: weight,
            p_target: s,
        })
    }

    pub fn evaluate(&self, z: &[f64], target: usize) -> Result<LossOutput> {
        let mut grad = vec![0.0; z.len()];
        let s = self.evaluate_into(z, target, &mut grad)?;
        Ok(LossOutput {
            loss: s.loss,
            grad_logits: grad,
            weight_applied: s.weight_applied,
            p_target: s.p_target,
        })
    }

    /// Loss value only.
    pub fn loss(&self, z: &[f64], target: usize) -> Result<f64> {
        self.evaluate(z, target).map(|o| o.loss)
    }

    /// Mean loss over a batch of logit rows; per-row gradients are scaled by
    /// `1 / batch` and written into `grads` (row-major, `batch × K`).
    pub fn batch_into(&self, logits: &[f64], targets: &[usize], grads: &mut [f64]) -> Result<f64> {
        let k = self.num_classes();
        if logits.len() != targets.len() * k || grads.len() != logits.len() {
            return Err(Error::Shape(format!(
                "batch of {} targets with {} logits and {} gradient slots for {} classes",
                targets.len(),
                logits.len(),
                grads.len(),
                k
            )));
        }
        if targets.is_empty() {
            return Ok(0.0);
        }
        let scale = 1.0 / targets.len() as f64;
        let mut total = 0.0;
        for ((z, g), &t) in logits
            .chunks_exact(k)
            .zip(grads.chunks_exact_mut(k))
            .zip(targets)
        {
            total += self.evaluate_into(z, t, g)?.loss;
            g.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(total * scale)
    }
}

fn finite(value: f64, term: &'static str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { term })
    }
}

fn logit_shift(stats: &ClassStats, shift: LogitShift, tau: f64) -> Vec<f64> {
    match shift {
        LogitShift::La => stats.log_priors().iter().map(|l| tau * l).collect(),
        LogitShift::Bs => stats.counts().iter().map(|&n| (n as f64).ln()).collect(),
    }
}

/// Base loss from a probability vector, for the bases that are not realized
/// through shifted logits.
pub fn base_loss(
    p: &ProbVector,
    target: usize,
    stats: &ClassStats,
    cfg: &LossConfig,
) -> Result<f64> {
    if cfg.base.is_adjusted() {
        return Err(Error::config(format!(
            "base `{}` is computed from adjusted logits, not from probabilities",
            cfg.base
        )));
    }
    if target >= p.len() || p.len() != stats.num_classes() {
        return Err(Error::Shape(format!(
            "target {target} with {} probabilities for {} classes",
            p.len(),
            stats.num_classes()
        )));
    }
    let q = p.get(target);
    let loss = match cfg.base {
        BaseLoss::Ce => -q.ln(),
        BaseLoss::Focal => -(1.0 - q).powf(cfg.focal_gamma) * q.ln(),
        BaseLoss::Cb => -class_balanced_weights(stats, cfg.cb_beta)[target] * q.ln(),
        BaseLoss::La | BaseLoss::Bs => unreachable!(),
    };
    // -ln 1 is -0.0
    Ok(loss + 0.0)
}

/// Training-time shifted logits for LA and BS.
pub fn adjusted_logits(
    z: &LogitVector,
    stats: &ClassStats,
    cfg: &LossConfig,
) -> Result<LogitVector> {
    if !cfg.base.is_adjusted() {
        return Err(Error::config(format!(
            "base `{}` does not shift logits",
            cfg.base
        )));
    }
    if z.len() != stats.num_classes() {
        return Err(Error::Shape(format!(
            "{} logits for {} classes",
            z.len(),
            stats.num_classes()
        )));
    }
    let shift = logit_shift(stats, cfg.shift().expect("adjusted base"), cfg.la_tau);
    LogitVector::new(
        z.as_slice()
            .iter()
            .zip(&shift)
            .map(|(a, b)| a + b)
            .collect(),
    )
}

pub fn total_loss_and_grad(
    z: &LogitVector,
    target: usize,
    stats: &ClassStats,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    Objective::new(stats, *cfg)?.evaluate(z.as_slice(), target)
}

/// Plain (never weighted) base loss and gradient for the same configuration.
pub fn base_loss_and_grad(
    z: &LogitVector,
    target: usize,
    stats: &ClassStats,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    Objective::new(stats, *cfg)?.base_loss_and_grad(z.as_slice(), target)
}

/// Closed-form CCAR + cross-entropy gradient `Ψ(p_t, γ) (p - e_t)`.
pub fn modulated_ce_grad(
    z: &LogitVector,
    target: usize,
    stats: &ClassStats,
    omega: PivotOmega,
) -> Result<Vec<f64>> {
    if target >= z.len() || z.len() != stats.num_classes() {
        return Err(Error::Shape(format!(
            "target {target} with {} logits for {} classes",
            z.len(),
            stats.num_classes()
        )));
    }
    let p = softmax(z);
    let pt = Confidence::saturating(p.get(target))?;
    let psi = weighting::modulation_factor(pt, stats.frequency(target), omega).get();
    Ok(p.as_slice()
        .iter()
        .enumerate()
        .map(|(j, &pj)| psi * (pj - if j == target { 1.0 } else { 0.0 }))
        .collect())
}

/// Central differences of a scalar function.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central-difference gradient of the configured scalar loss.
pub fn finite_difference_grad(
    z: &LogitVector,
    target: usize,
    stats: &ClassStats,
    cfg: &LossConfig,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let objective = Objective::new(stats, *cfg)?;
    objective.check_shape(z.as_slice(), target)?;
    Ok(central_difference(
        |x| objective.loss(x, target).unwrap_or(f64::NAN),
        z.as_slice(),
        step,
    ))
}

/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vectors are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

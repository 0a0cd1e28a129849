//! Class-confidence aware reweighting (CCAR) scalar mathematics.
//!
//! The per-sample weight is
//!
//! ```text
//! Ω(p_t, f_c) = γ^(ω - p_t),   γ = e - f'_c(p_t)
//! f'_c(p_t)   = f_c        if p_t <  ω   (amplification phase)
//!             = 1 - f_c    if p_t >= ω   (suppression phase)
//! ```
//!
//! where `p_t` is the softmax probability of the ground-truth class, `f_c` the
//! empirical frequency of that class and `ω` the confidence pivot. The log of
//! the base, `β = ln γ`, is the adaptive capacity; it always lies in
//! `(ln(e - 1), 1)`, so every logarithm below is well conditioned.
//!
//! Everything here is a pure function of its arguments.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the jump of `∂Ω/∂p_t` across the pivot: `ln(e / (e - 1))`.
pub fn jump_bound() -> f64 {
    (E / (E - 1.0)).ln()
}

/// Upper bound on the modulation factor Ψ for a given pivot: `e^ω (1 + 1/e)`.
pub fn modulation_bound(omega: PivotOmega) -> f64 {
    omega.get().exp() * (1.0 + 1.0 / E)
}

/// Probability assigned to the ground-truth class, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Confidence(f64);

impl Confidence {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::Domain {
                what: "confidence",
                value,
                range: "[0, 1]",
            })
        }
    }

    /// Clamps a softmax output into `[0, 1]`. NaN is rejected.
    pub fn saturating(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(Error::NonFinite { term: "confidence" });
        }
        Ok(Self(value.clamp(0.0, 1.0)))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Empirical class frequency `N_c / N`, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ClassFrequency(f64);

impl ClassFrequency {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::Domain {
                what: "class frequency",
                value,
                range: "(0, 1)",
            })
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Confidence pivot ω in `(0, 1]`. Below it gradients are amplified, at or
/// above it they are suppressed.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PivotOmega(f64);

impl PivotOmega {
    pub const DEFAULT: PivotOmega = PivotOmega(0.75);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::Domain {
                what: "pivot omega",
                value,
                range: "(0, 1]",
            })
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for PivotOmega {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for PivotOmega {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<PivotOmega> for f64 {
    fn from(omega: PivotOmega) -> f64 {
        omega.0
    }
}

/// Which side of the pivot a confidence falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// `p_t < ω`: standard frequency, weight above one.
    Amplify,
    /// `p_t >= ω`: inverted frequency, weight at or below one.
    Suppress,
}

impl Phase {
    pub fn of(p: Confidence, omega: PivotOmega) -> Self {
        if p.get() < omega.get() {
            Phase::Amplify
        } else {
            Phase::Suppress
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Amplify => "amplify",
            Phase::Suppress => "suppress",
        }
    }
}

/// The base `γ = e - f'_c` of the exponential weight, in `(e - 1, e)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct EffectiveBase(f64);

impl EffectiveBase {
    pub fn get(self) -> f64 {
        self.0
    }

    /// `ln γ`, strictly positive.
    pub fn ln(self) -> f64 {
        self.0.ln()
    }
}

/// Ω(p_t, f_c), always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct WeightValue(f64);

impl WeightValue {
    pub fn get(self) -> f64 {
        self.0
    }
}

/// Ψ(p_t, γ), the scalar multiplying `(p - e_t)` in the CCAR + CE gradient.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ModulationFactor(f64);

impl ModulationFactor {
    pub fn get(self) -> f64 {
        self.0
    }
}

/// `∂Ω/∂p_t`. At the pivot itself the right-hand limit is returned and
/// `one_sided` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivative {
    pub value: f64,
    pub one_sided: bool,
}

/// `f'_c(p_t)`: `f` below the pivot, `1 - f` at or above it.
pub fn dual_phase_frequency(p: Confidence, f: ClassFrequency, omega: PivotOmega) -> f64 {
    match Phase::of(p, omega) {
        Phase::Amplify => f.get(),
        Phase::Suppress => 1.0 - f.get(),
    }
}

pub fn effective_base(p: Confidence, f: ClassFrequency, omega: PivotOmega) -> EffectiveBase {
    EffectiveBase(E - dual_phase_frequency(p, f, omega))
}

/// β_c(p_t) = ln(e - f'_c(p_t)).
pub fn adaptive_capacity(p: Confidence, f: ClassFrequency, omega: PivotOmega) -> f64 {
    effective_base(p, f, omega).ln()
}

/// Ω(p_t, f_c) = exp((ω - p_t) · β_c(p_t)).
pub fn omega_weight(p: Confidence, f: ClassFrequency, omega: PivotOmega) -> WeightValue {
    let beta = adaptive_capacity(p, f, omega);
    WeightValue(((omega.get() - p.get()) * beta).exp())
}

/// `∂Ω/∂p_t = -β_c(p_t) · Ω`, with the dual-phase frequency held locally
/// constant.
pub fn omega_derivative(p: Confidence, f: ClassFrequency, omega: PivotOmega) -> Derivative {
    let beta = adaptive_capacity(p, f, omega);
    let weight = ((omega.get() - p.get()) * beta).exp();
    Derivative {
        value: -beta * weight,
        one_sided: p.get() == omega.get(),
    }
}

/// `|ln((e - f) / (e - 1 + f))|`: size of the jump in `∂Ω/∂p_t` at the pivot.
pub fn derivative_jump(f: ClassFrequency) -> f64 {
    let f = f.get();
    ((E - f) / (E - 1.0 + f)).ln().abs()
}

/// Ψ(p_t, γ) = γ^(ω - p_t) · (1 - p_t ln γ ln p_t).
///
/// At `p_t = 0` the limit `γ^ω` is returned (`p ln p → 0`).
pub fn modulation_factor(p: Confidence, f: ClassFrequency, omega: PivotOmega) -> ModulationFactor {
    let beta = adaptive_capacity(p, f, omega);
    let weight = ((omega.get() - p.get()) * beta).exp();
    let x = p.get();
    let entropy_term = if x == 0.0 { 0.0 } else { x * x.ln() };
    ModulationFactor(weight * (1.0 - beta * entropy_term))
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    fn c(v: f64) -> Confidence {
        Confidence::new(v).unwrap()
    }
    fn fr(v: f64) -> ClassFrequency {
        ClassFrequency::new(v).unwrap()
    }
    fn om(v: f64) -> PivotOmega {
        PivotOmega::new(v).unwrap()
    }

    // Reference values below were evaluated at 40 significant digits.
    const LN_E_MINUS_HALF: f64 = 0.796_732_945_084_804_7;
    const E_MINUS_HALF_POW_075: f64 = 1.817_659_544_222_475_1;
    const E_MINUS_HALF_POW_NEG_025: f64 = 0.819_399_735_823_979_1;
    const DERIV_AT_05_F03: f64 = -1.101_198_504_924_822;
    const JUMP_AT_01: f64 = 0.364_626_307_088_424_9;
    const PSI_AT_05_F02: f64 = 1.662_948_313_939_963_5;
    const E_MINUS_02_POW_075: f64 = 1.999_071_136_961_807_9;
    const JUMP_SUP: f64 = 0.458_675_145_387_081_9;

    #[test]
    fn domain_constructors_reject_out_of_range() {
        assert!(Confidence::new(-1e-12).is_err());
        assert!(Confidence::new(1.0 + 1e-12).is_err());
        assert!(Confidence::new(f64::NAN).is_err());
        assert!(Confidence::new(0.0).is_ok());
        assert!(Confidence::new(1.0).is_ok());
        assert!(ClassFrequency::new(0.0).is_err());
        assert!(ClassFrequency::new(1.0).is_err());
        assert!(PivotOmega::new(0.0).is_err());
        assert!(PivotOmega::new(1.0).is_ok());
        assert!(PivotOmega::new(1.5).is_err());
    }

    #[test]
    fn dual_phase_branches() {
        assert_eq!(dual_phase_frequency(c(0.5), fr(0.1), om(0.75)), 0.1);
        assert!((dual_phase_frequency(c(0.9), fr(0.1), om(0.75)) - 0.9).abs() < 1e-15);
        // p == ω takes the inverted branch.
        assert!((dual_phase_frequency(c(0.75), fr(0.3), om(0.75)) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn adaptive_capacity_values() {
        let tiny = adaptive_capacity(c(0.5), fr(1e-15), om(0.75));
        assert!((tiny - 1.0).abs() < 1e-14);
        let half = adaptive_capacity(c(0.5), fr(0.5), om(0.75));
        assert!((half - LN_E_MINUS_HALF).abs() < 1e-15);
        let inverted = adaptive_capacity(c(0.9), fr(0.5), om(0.75));
        assert_eq!(half, inverted);
    }

    #[test]
    fn weight_values() {
        for &(w, f) in &[(0.75, 0.01), (0.3, 0.9), (1.0, 0.5)] {
            assert_eq!(omega_weight(c(w), fr(f), om(w)).get(), 1.0);
        }
        let low = omega_weight(c(0.0), fr(0.5), om(0.75)).get();
        assert!((low - E_MINUS_HALF_POW_075).abs() < 1e-14);
        let high = omega_weight(c(1.0), fr(0.5), om(0.75)).get();
        assert!((high - E_MINUS_HALF_POW_NEG_025).abs() < 1e-14);
    }

    #[test]
    fn derivative_values_and_one_sided_limits() {
        let d = omega_derivative(c(0.5), fr(0.3), om(0.75));
        assert!(!d.one_sided);
        assert!((d.value - DERIV_AT_05_F03).abs() < 1e-14);

        let f = 0.2;
        let left = omega_derivative(c(0.75 - 1e-12), fr(f), om(0.75)).value;
        assert!((left + (E - f).ln()).abs() < 1e-10);
        let at = omega_derivative(c(0.75), fr(f), om(0.75));
        assert!(at.one_sided);
        assert!((at.value + (E - (1.0 - f)).ln()).abs() < 1e-15);
    }

    #[test]
    fn jump_values() {
        assert_eq!(derivative_jump(fr(0.5)), 0.0);
        assert!((derivative_jump(fr(1e-12)) - JUMP_SUP).abs() < 1e-11);
        assert!((jump_bound() - JUMP_SUP).abs() < 1e-15);
        let j = derivative_jump(fr(0.1));
        assert!((j - JUMP_AT_01).abs() < 1e-15);
        assert!(j < jump_bound());
    }

    #[test]
    fn modulation_values() {
        let at_one = modulation_factor(c(1.0), fr(0.5), om(0.75)).get();
        assert!((at_one - E_MINUS_HALF_POW_NEG_025).abs() < 1e-14);
        let at_zero = modulation_factor(c(0.0), fr(0.2), om(0.75)).get();
        assert!((at_zero - E_MINUS_02_POW_075).abs() < 1e-14);
        let mid = modulation_factor(c(0.5), fr(0.2), om(0.75)).get();
        assert!((mid - PSI_AT_05_F02).abs() < 1e-14);
        // continuous at p -> 0+
        let near_zero = modulation_factor(c(1e-300), fr(0.2), om(0.75)).get();
        assert!((near_zero - at_zero).abs() < 1e-12);
    }

    #[test]
    fn pow_and_exp_forms_agree() {
        // The weight is computed through exp(β(ω - p)); the textbook pow form
        // must agree to rounding.
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            for &f in &[0.01, 0.3, 0.77] {
                let base = effective_base(c(p), fr(f), om(0.6)).get();
                let pow_form = base.powf(0.6 - p);
                let w = omega_weight(c(p), fr(f), om(0.6)).get();
                assert!((w - pow_form).abs() < 1e-14 * pow_form.max(1.0));
            }
        }
    }

    #[test]
    fn smooth_across_pivot_at_half_frequency() {
        // At f = 0.5 both phases share γ, so a second difference straddling ω
        // matches one taken away from it.
        let w = om(0.75);
        let f = fr(0.5);
        let h = 1e-4;
        let second = |x: f64| {
            (omega_weight(c(x + h), f, w).get() - 2.0 * omega_weight(c(x), f, w).get()
                + omega_weight(c(x - h), f, w).get())
                / (h * h)
        };
        let beta = (E - 0.5_f64).ln();
        let exact = beta * beta; // Ω'' at the pivot, where Ω = 1
        assert!((second(0.75) - exact).abs() < 1e-5);
        assert!((second(0.75 + h / 2.0) - exact).abs() < 1e-3);
    }
}

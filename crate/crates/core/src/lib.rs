//! Class-confidence aware reweighting (CCAR) for long-tailed classification.
//!
//! - [`weighting`]: the scalar weight Ω(p_t, f_c), its derivative and the
//!   gradient modulation factor Ψ.
//! - [`losses`]: base losses (CE, focal, class-balanced, logit adjustment,
//!   balanced softmax), CCAR composition and gradients with respect to logits.
//! - [`tinynet`]: a small deterministic MLP trained with SGD + momentum.
//! - [`data`]: synthetic long-tailed Gaussian blobs and Many/Medium/Few groups.
//! - [`harness`]: experiments, ω sweeps, figure data and CSV reports.
//! - [`properties`]: the invariant suite behind `ccar check`.

pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod properties;
pub mod tinynet;
pub mod weighting;

pub use error::{Error, Result};

//! Tied prototype models for few-shot segmentation.
//!
//! Features live on the unit sphere. Foreground and background share a
//! prototype and differ only in spread, which turns the foreground
//! posterior into a sigmoid of the squared distance to the prototype.

// `!(x > 0.0)` style checks are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod episode;
pub mod error;
pub mod format;
pub mod grid;
pub mod metrics;
pub mod posterior;
pub mod prototype;
pub mod report;
pub mod synth;
pub mod threshold;

pub use error::{Error, Result};
pub use grid::{ClassPriors, FeatureGrid, GridMask, PrototypeSet, ScalarMap, TpmParams};

/// `ln(sum(exp(x)))`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

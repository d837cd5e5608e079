//! Segmentation metrics.

use crate::error::{Error, Result};
use crate::grid::{GridMask, ScalarMap};

/// Probability clamp used inside the log of [`cross_entropy`].
pub const CE_CLAMP: f64 = 1e-12;

/// Dice overlap `2|P n T| / (|P| + |T|)` for one class; 1 when both are empty.
pub fn dice(pred: &GridMask, truth: &GridMask, class_id: u32) -> Result<f64> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let (mut both, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Mean binary cross-entropy; any non-zero label counts as foreground.
pub fn cross_entropy(prob: &ScalarMap, truth: &GridMask) -> Result<f64> {
    if !prob.same_shape(truth.height(), truth.width()) {
        return Err(Error::DimensionMismatch(format!(
            "probabilities {}x{} vs truth {}x{}",
            prob.height(),
            prob.width(),
            truth.height(),
            truth.width()
        )));
    }
    let total: f64 = prob
        .values()
        .iter()
        .zip(truth.labels())
        .map(|(&p, &y)| {
            let p = p.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
            if y > 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / prob.len() as f64)
}

//! Ideal thresholds and class-prior estimation.
//!
//! The ideal distance threshold (IDT) is the midpoint between the `|F|`-th
//! and `(|F|+1)`-th smallest distances, so that strict thresholding predicts
//! exactly `|F|` foreground pixels. The ideal class prior (ICP) is the
//! foreground prior that moves the tied model's 0.5 boundary onto that
//! distance. Training-set ICPs feed the `AvgEst` and `LinEst` estimators.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ClassPriors, GridMask, ScalarMap, TpmParams};
use crate::metrics::{cross_entropy, dice};
use crate::posterior::{predict_mask, sigmoid, sp_posterior_at};

/// An IDT together with whether it achieves exact count matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdealThreshold {
    pub value: f64,
    /// Set when tied distances keep strict thresholding from predicting
    /// exactly the requested count.
    pub tie: bool,
}

fn sorted_values(distances: &ScalarMap) -> Vec<f64> {
    let mut sorted = distances.values().to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted
}

/// Midpoint threshold that separates the `fg_count` smallest distances.
///
/// `fg_count = 0` gives half the smallest distance. `fg_count = N` gives the
/// largest distance plus half the gap to the next distinct value below it,
/// or the largest distance times 1.0001 when every value is equal.
pub fn ideal_distance_threshold(distances: &ScalarMap, fg_count: usize) -> Result<IdealThreshold> {
    let sorted = sorted_values(distances);
    let n = sorted.len();
    if fg_count > n {
        return Err(Error::CountOutOfRange {
            count: fg_count,
            pixels: n,
        });
    }
    let value = if fg_count == 0 {
        sorted[0] / 2.0
    } else if fg_count == n {
        let top = sorted[n - 1];
        match sorted.iter().rev().find(|&&v| v < top) {
            Some(&below) => top + (top - below) / 2.0,
            None => top * 1.0001,
        }
    } else {
        (sorted[fg_count - 1] + sorted[fg_count]) / 2.0
    };
    let predicted = sorted.partition_point(|&d| d < value);
    Ok(IdealThreshold {
        value,
        tie: predicted != fg_count,
    })
}

/// Prior log-odds `ln(p_F*/(1 - p_F*))` whose boundary sits at chord distance `t_d`.
pub fn icp_log_odds(t_d: f64, params: &TpmParams) -> f64 {
    0.5 * t_d * t_d * params.delta() + params.dim * params.log_sigma_ratio()
}

/// Ideal class prior `p_F* = 1 - sig(-T^2 delta - 2 d ln(sigma_F/sigma_B))`,
/// where `sig` has steepness 0.5.
pub fn icp_from_idt(t_d: f64, params: &TpmParams) -> f64 {
    sigmoid(icp_log_odds(t_d, params))
}

/// Chord distance at which the single-prototype posterior equals 0.5.
pub fn boundary_distance(params: &TpmParams, priors: &ClassPriors) -> Result<f64> {
    let (pf, pb) = priors.binary_pair()?;
    boundary_from_log_odds((pf / pb).ln(), params)
}

/// Rounding slack before a negative squared boundary counts as missing.
const BOUNDARY_TOL: f64 = 1e-12;

fn boundary_from_log_odds(log_odds: f64, params: &TpmParams) -> Result<f64> {
    let d2 = 2.0 * (log_odds - params.dim * params.log_sigma_ratio()) / params.delta();
    if d2 < -BOUNDARY_TOL {
        return Err(Error::NoBoundary(d2));
    }
    Ok(d2.max(0.0).sqrt())
}

/// One training query's ICP and the covariates used to predict it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub support_fg_count: usize,
    pub slice_loc: f64,
    pub icp: f64,
}

impl EpisodeRecord {
    pub fn new(support_fg_count: usize, slice_loc: f64, icp: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&slice_loc) || !(icp > 0.0 && icp < 1.0) {
            return Err(Error::Invalid(format!(
                "record out of range: slice_loc={slice_loc} icp={icp}"
            )));
        }
        Ok(Self {
            support_fg_count,
            slice_loc,
            icp,
        })
    }
}

/// Mean ICP over the training records.
pub fn avg_est(records: &[EpisodeRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    Ok(records.iter().map(|r| r.icp).sum::<f64>() / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinEstModel {
    pub intercept: f64,
    pub coef_fg_count: f64,
    pub coef_slice_loc: f64,
    pub clamp_eps: f64,
}

impl LinEstModel {
    pub const DEFAULT_CLAMP_EPS: f64 = 1e-4;
}

const RIDGE: f64 = 1e-9;

/// Least-squares fit of `icp ~ 1 + support_fg_count + slice_loc`.
///
/// With fewer than three records the model is intercept-only at the mean ICP.
pub fn lin_est_fit(records: &[EpisodeRecord]) -> Result<LinEstModel> {
    let mean = avg_est(records)?;
    let fallback = LinEstModel {
        intercept: mean,
        coef_fg_count: 0.0,
        coef_slice_loc: 0.0,
        clamp_eps: LinEstModel::DEFAULT_CLAMP_EPS,
    };
    if records.len() < 3 {
        return Ok(fallback);
    }
    let mut xtx = Matrix3::<f64>::zeros();
    let mut xty = Vector3::<f64>::zeros();
    for r in records {
        let x = Vector3::new(1.0, r.support_fg_count as f64, r.slice_loc);
        xtx += x * x.transpose();
        xty += x * r.icp;
    }
    xtx += Matrix3::identity() * RIDGE;
    let beta = xtx.lu().solve(&xty).unwrap_or(Vector3::new(mean, 0.0, 0.0));
    if beta.iter().any(|b| !b.is_finite()) {
        return Ok(fallback);
    }
    Ok(LinEstModel {
        intercept: beta[0],
        coef_fg_count: beta[1],
        coef_slice_loc: beta[2],
        clamp_eps: LinEstModel::DEFAULT_CLAMP_EPS,
    })
}

/// Linear prediction clamped into `[eps, 1 - eps]`.
pub fn lin_est_predict(model: &LinEstModel, support_fg_count: usize, slice_loc: f64) -> f64 {
    let raw = model.intercept
        + model.coef_fg_count * support_fg_count as f64
        + model.coef_slice_loc * slice_loc;
    raw.clamp(model.clamp_eps, 1.0 - model.clamp_eps)
}

/// Oracle ICP: the ideal prior computed from the query's own labels.
pub fn ocp_prior(distances: &ScalarMap, true_mask: &GridMask, params: &TpmParams) -> Result<f64> {
    check_shape(distances, true_mask)?;
    let t = ideal_distance_threshold(distances, true_mask.foreground_count())?;
    Ok(icp_from_idt(t.value, params))
}

/// Margin, in log-odds, past the extreme ratio when every pixel or no
/// pixel is foreground.
const LOG_RATIO_MARGIN: f64 = 1.0;

/// Ideal prior for a posterior `sigmoid(L + ln(p_F/p_B))`: the prior that
/// makes the `fg_count` largest log-likelihood ratios `L` foreground.
pub fn ideal_prior_from_log_ratio(log_ratio: &ScalarMap, fg_count: usize) -> Result<f64> {
    let mut sorted = log_ratio.values().to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    if fg_count > n {
        return Err(Error::CountOutOfRange {
            count: fg_count,
            pixels: n,
        });
    }
    let cut = if fg_count == 0 {
        sorted[0] + LOG_RATIO_MARGIN
    } else if fg_count == n {
        sorted[n - 1] - LOG_RATIO_MARGIN
    } else {
        (sorted[fg_count - 1] + sorted[fg_count]) / 2.0
    };
    Ok(sigmoid(-cut))
}

fn check_shape(map: &ScalarMap, mask: &GridMask) -> Result<()> {
    if !map.same_shape(mask.height(), mask.width()) {
        return Err(Error::DimensionMismatch(format!(
            "map {}x{} vs mask {}x{}",
            map.height(),
            map.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// The swept quantity: a distance threshold or a foreground prior.
    pub x: f64,
    pub ce: f64,
    pub dice: f64,
}

/// CE and Dice curves over a grid of thresholds or priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Grid value with the lowest CE, standing in for a CE-trained threshold.
    pub argmin_ce: f64,
    pub argmax_dice: f64,
    /// Grid-independent ideal value (IDT or ICP) from the true count.
    pub ideal: f64,
    /// Dice of the mask induced by `ideal`.
    pub ideal_dice: f64,
    pub ideal_ce: f64,
}

/// Posterior map and induced mask for a given prior log-odds.
fn evaluate(
    distances: &ScalarMap,
    truth: &GridMask,
    params: &TpmParams,
    log_odds: f64,
) -> Result<(f64, f64)> {
    let post = distances.map(|d| sp_posterior_at(d * d, params, log_odds));
    let ce = cross_entropy(&post, truth)?;
    let mask = predict_mask(std::slice::from_ref(&post))?;
    Ok((ce, dice(&mask, truth, 1)?))
}

fn sweep(
    distances: &ScalarMap,
    truth: &GridMask,
    params: &TpmParams,
    grid: &[f64],
    ideal: f64,
    ideal_odds: f64,
    log_odds: impl Fn(f64) -> f64 + Sync,
) -> Result<SweepResult> {
    check_shape(distances, truth)?;
    if grid.is_empty() {
        return Err(Error::Invalid("empty sweep grid".into()));
    }
    let truth = truth.any_foreground();
    let points = grid
        .par_iter()
        .map(|&x| {
            evaluate(distances, &truth, params, log_odds(x)).map(|(ce, dice)| SweepPoint { x, ce, dice })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best_ce = 0;
    let mut best_dice = 0;
    for (i, p) in points.iter().enumerate() {
        if p.ce < points[best_ce].ce {
            best_ce = i;
        }
        if p.dice > points[best_dice].dice {
            best_dice = i;
        }
    }
    let (ideal_ce, ideal_dice) = evaluate(distances, &truth, params, ideal_odds)?;
    Ok(SweepResult {
        argmin_ce: points[best_ce].x,
        argmax_dice: points[best_dice].x,
        points,
        ideal,
        ideal_dice,
        ideal_ce,
    })
}

/// CE and Dice as the distance threshold varies; each threshold is turned
/// into a prior through [`icp_from_idt`].
pub fn threshold_sweep(
    distances: &ScalarMap,
    true_mask: &GridMask,
    params: &TpmParams,
    grid: &[f64],
) -> Result<SweepResult> {
    check_shape(distances, true_mask)?;
    let ideal = ideal_distance_threshold(distances, true_mask.foreground_count())?.value;
    sweep(
        distances,
        true_mask,
        params,
        grid,
        ideal,
        icp_log_odds(ideal, params),
        |t| icp_log_odds(t, params),
    )
}

/// CE and Dice as the foreground prior varies over `grid` (values in (0,1)).
pub fn prior_sweep(
    distances: &ScalarMap,
    true_mask: &GridMask,
    params: &TpmParams,
    grid: &[f64],
) -> Result<SweepResult> {
    if let Some(p) = grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::DegeneratePriors(format!("p_F={p}")));
    }
    let ideal = ocp_prior(distances, true_mask, params)?;
    let odds = |p: f64| (p / (1.0 - p)).ln();
    sweep(
        distances,
        true_mask,
        params,
        grid,
        ideal,
        odds(ideal),
        odds,
    )
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

//! Prototype extraction.
//!
//! A single prototype is the masked average of the support features,
//! renormalized onto the sphere. Multiple prototypes come from EM on an
//! isotropic Gaussian mixture with a fixed, shared standard deviation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    downsample_mask, normalize_vector, sq_dist, FeatureGrid, GridMask, PrototypeSet, TpmParams,
};
use crate::logsumexp;

/// Resolution at which masked average pooling is carried out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolResolution {
    /// Downsample the mask to the feature grid.
    #[default]
    Feature,
    /// Upsample the features to the mask grid.
    Mask,
}

/// Masked average pooling over pixels whose label is non-zero.
///
/// The mask must already match the feature grid.
pub fn map_pool(features: &FeatureGrid, fg_mask: &GridMask) -> Result<Vec<f64>> {
    if fg_mask.height() != features.height() || fg_mask.width() != features.width() {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs features {}x{}",
            fg_mask.height(),
            fg_mask.width(),
            features.height(),
            features.width()
        )));
    }
    let mut sum = vec![0.0; features.dims()];
    let mut count = 0usize;
    for (f, &l) in features.vectors().zip(fg_mask.labels()) {
        if l > 0 {
            count += 1;
            for (s, x) in sum.iter_mut().zip(f) {
                *s += x;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    normalize_vector(&mean)
}

/// Pool the prototype of `class_id`, resampling whichever side needs it.
pub fn pool_class(
    features: &FeatureGrid,
    mask: &GridMask,
    class_id: u32,
    resolution: PoolResolution,
) -> Result<Vec<f64>> {
    let selected = mask.select(class_id);
    let same = mask.height() == features.height() && mask.width() == features.width();
    if same {
        return map_pool(features, &selected);
    }
    match resolution {
        PoolResolution::Feature => {
            let small = downsample_mask(&selected, features.height(), features.width())?;
            map_pool(features, &small)
        }
        PoolResolution::Mask => {
            let big = features.upsample(mask.height(), mask.width())?;
            map_pool(&big, &selected)
        }
    }
}

/// Feature vectors at pixels labelled `class_id`; shapes must already agree.
pub fn masked_points(features: &FeatureGrid, mask: &GridMask, class_id: u32) -> Result<Vec<Vec<f64>>> {
    if mask.height() != features.height() || mask.width() != features.width() {
        return Err(Error::DimensionMismatch(
            "mask and features differ in shape".into(),
        ));
    }
    Ok(features
        .vectors()
        .zip(mask.labels())
        .filter(|(_, &l)| l == class_id)
        .map(|(f, _)| f.to_vec())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Relative log-likelihood change that ends the iteration.
    pub tol: f64,
    pub seed: u64,
    pub sigma_f: f64,
    /// Reproject means onto the sphere after each M-step.
    pub project_to_sphere: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_iters: 10,
            tol: 1e-6,
            seed: 0,
            sigma_f: TpmParams::default().sigma_f,
            project_to_sphere: true,
        }
    }
}

/// Everything an EM run produced, including its likelihood history.
#[derive(Debug, Clone)]
pub struct EmTrace {
    pub prototypes: PrototypeSet,
    /// Means as fitted; off the sphere when projection is disabled.
    pub means: Vec<Vec<f64>>,
    /// Log-likelihood at initialization followed by one entry per iteration.
    pub log_likelihoods: Vec<f64>,
    /// Number of components reseeded because they lost all responsibility.
    pub restarts: usize,
}

fn log_component(x: &[f64], mean: &[f64], log_w: f64, inv_two_var: f64) -> f64 {
    log_w - sq_dist(x, mean) * inv_two_var
}

fn responsibilities_raw(
    points: &[Vec<f64>],
    means: &[Vec<f64>],
    weights: &[f64],
    sigma: f64,
) -> Vec<Vec<f64>> {
    let inv_two_var = 0.5 / (sigma * sigma);
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    points
        .iter()
        .map(|x| {
            let logs: Vec<f64> = means
                .iter()
                .zip(&log_w)
                .map(|(m, &lw)| log_component(x, m, lw, inv_two_var))
                .collect();
            let total = logsumexp(&logs);
            logs.iter().map(|l| (l - total).exp()).collect()
        })
        .collect()
}

/// Mixture log-likelihood without the constant density normalizer.
fn log_likelihood(points: &[Vec<f64>], means: &[Vec<f64>], weights: &[f64], sigma: f64) -> f64 {
    let inv_two_var = 0.5 / (sigma * sigma);
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    points
        .iter()
        .map(|x| {
            let logs: Vec<f64> = means
                .iter()
                .zip(&log_w)
                .map(|(m, &lw)| log_component(x, m, lw, inv_two_var))
                .collect();
            logsumexp(&logs)
        })
        .sum()
}

fn check_points(points: &[Vec<f64>], dims: Option<usize>) -> Result<usize> {
    let first = points.first().ok_or(Error::TooFewPoints { needed: 1, got: 0 })?;
    let dims = dims.unwrap_or(first.len());
    if points.iter().any(|p| p.len() != dims) {
        return Err(Error::DimensionMismatch(format!(
            "points must all have {dims} dims"
        )));
    }
    Ok(dims)
}

/// Posterior component memberships, one row per point; rows sum to one.
pub fn em_responsibilities(
    points: &[Vec<f64>],
    protos: &PrototypeSet,
    sigma_f: f64,
) -> Result<Vec<Vec<f64>>> {
    check_points(points, Some(protos.dims()))?;
    Ok(responsibilities_raw(
        points,
        protos.vectors(),
        protos.weights(),
        sigma_f,
    ))
}

/// Farthest-point seeding. The first center is the point most aligned with a
/// random direction drawn from `rng`, so the result depends on point values
/// and not on their order.
fn farthest_point_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dims = points[0].len();
    let dir: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(rng)).collect();
    let score = |x: &[f64]| x.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
    let mut first = 0;
    for (i, p) in points.iter().enumerate() {
        if score(p) > score(&points[first]) {
            first = i;
        }
    }
    let mut centers = vec![points[first].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centers.len() < k {
        let mut pick = 0;
        for i in 1..points.len() {
            if nearest[i] > nearest[pick] {
                pick = i;
            }
        }
        let c = points[pick].clone();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Fit `cfg.k` prototypes and mixture weights to unit vectors.
pub fn em_fit(points: &[Vec<f64>], cfg: &EmConfig) -> Result<PrototypeSet> {
    em_fit_trace(points, cfg).map(|t| t.prototypes)
}

/// [`em_fit`] with the full likelihood history.
///
/// A component whose total responsibility falls below `1e-12` is reseeded at
/// the point with the lowest maximum responsibility, with weight `1/N` before
/// the weights are renormalized.
pub fn em_fit_trace(points: &[Vec<f64>], cfg: &EmConfig) -> Result<EmTrace> {
    if cfg.k == 0 {
        return Err(Error::ConfigInvalid("k must be at least 1".into()));
    }
    if !(cfg.sigma_f > 0.0 && cfg.sigma_f.is_finite()) || !(cfg.tol > 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "sigma_f and tol must be positive: {} {}",
            cfg.sigma_f, cfg.tol
        )));
    }
    if points.len() < cfg.k {
        return Err(Error::TooFewPoints {
            needed: cfg.k,
            got: points.len(),
        });
    }
    check_points(points, None)?;

    let n = points.len() as f64;
    let sigma = cfg.sigma_f;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means = farthest_point_init(points, cfg.k, &mut rng);
    let mut weights = vec![1.0 / cfg.k as f64; cfg.k];
    let mut history = vec![log_likelihood(points, &means, &weights, sigma)];
    let mut restarts = 0;

    for _ in 0..cfg.max_iters {
        let gamma = responsibilities_raw(points, &means, &weights, sigma);
        let mut new_means = Vec::with_capacity(cfg.k);
        let mut new_weights = Vec::with_capacity(cfg.k);
        for m in 0..cfg.k {
            let mass: f64 = gamma.iter().map(|row| row[m]).sum();
            let mut mean = vec![0.0; points[0].len()];
            if mass >= 1e-12 {
                for (row, x) in gamma.iter().zip(points) {
                    for (acc, xi) in mean.iter_mut().zip(x) {
                        *acc += row[m] * xi;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= mass);
            }
            let projected = if mass >= 1e-12 && cfg.project_to_sphere {
                normalize_vector(&mean).ok()
            } else if mass >= 1e-12 {
                Some(mean)
            } else {
                None
            };
            match projected {
                Some(mean) => {
                    new_means.push(mean);
                    new_weights.push(mass / n);
                }
                None => {
                    restarts += 1;
                    let worst = gamma
                        .iter()
                        .map(|row| row.iter().cloned().fold(0.0, f64::max))
                        .enumerate()
                        .fold((0, f64::INFINITY), |best, (i, v)| {
                            if v < best.1 {
                                (i, v)
                            } else {
                                best
                            }
                        })
                        .0;
                    new_means.push(points[worst].clone());
                    new_weights.push(1.0 / n);
                }
            }
        }
        let total: f64 = new_weights.iter().sum();
        new_weights.iter_mut().for_each(|w| *w /= total);
        means = new_means;
        weights = new_weights;

        let ll = log_likelihood(points, &means, &weights, sigma);
        let prev = *history.last().expect("history starts non-empty");
        history.push(ll);
        if (ll - prev).abs() <= cfg.tol * prev.abs() {
            break;
        }
    }

    let unit: Vec<Vec<f64>> = means
        .iter()
        .map(|m| normalize_vector(m))
        .collect::<Result<_>>()?;
    Ok(EmTrace {
        prototypes: PrototypeSet::new(unit, weights)?,
        means,
        log_likelihoods: history,
        restarts,
    })
}

//! Synthetic spherical-Gaussian scenes.
//!
//! Foreground pixels of class `i` are drawn from `N(p, sigma_fg^2 I)` around
//! one of the class's true prototypes and projected onto the sphere.
//! Background pixels are drawn around the same prototypes with the broader
//! `sigma_bg` (tied centers), or uniformly on the sphere.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{normalize_vector, sq_dist, FeatureGrid, GridMask};

const MIN_PROTO_CHORD: f64 = 0.5;
const MAX_PROTO_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Broad Gaussians around the foreground prototypes.
    #[default]
    Tied,
    /// Uniform on the sphere.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dims: usize,
    pub k_fg: usize,
    pub clusters_per_class: usize,
    pub sigma_fg: f64,
    pub sigma_bg: f64,
    /// Fraction of pixels given to each foreground class.
    pub fg_fraction: f64,
    pub seed: u64,
    /// Relative slice position carried along for the LinEst covariate.
    pub slice_loc: f64,
    pub background: BackgroundMode,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid_h: 64,
            grid_w: 64,
            dims: 3,
            k_fg: 1,
            clusters_per_class: 1,
            sigma_fg: 0.2,
            sigma_bg: 1.0,
            fg_fraction: 0.2,
            seed: 0,
            slice_loc: 0.5,
            background: BackgroundMode::Tied,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.grid_h == 0 || self.grid_w == 0 || self.k_fg == 0 || self.clusters_per_class == 0 {
            return bad("grid sizes, k_fg and clusters_per_class must be positive".into());
        }
        if self.dims < 2 {
            return bad(format!("dims must be at least 2, got {}", self.dims));
        }
        if !(self.sigma_fg > 0.0 && self.sigma_fg < self.sigma_bg && self.sigma_bg.is_finite()) {
            return bad(format!(
                "need 0 < sigma_fg < sigma_bg, got {} and {}",
                self.sigma_fg, self.sigma_bg
            ));
        }
        if !(self.fg_fraction > 0.0 && self.fg_fraction < 1.0)
            || self.k_fg as f64 * self.fg_fraction >= 1.0
        {
            return bad(format!(
                "fg_fraction {} with {} classes leaves no background",
                self.fg_fraction, self.k_fg
            ));
        }
        if !(0.0..=1.0).contains(&self.slice_loc) {
            return bad(format!("slice_loc {} outside [0,1]", self.slice_loc));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Exact per-class foreground count, `round(fg_fraction * pixels)`.
    pub fn class_count(&self) -> usize {
        (self.fg_fraction * self.pixels() as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub features: FeatureGrid,
    pub truth: GridMask,
    /// Class-major: class `i` (1-based) owns entries
    /// `(i-1)*clusters_per_class .. i*clusters_per_class`.
    pub prototypes_true: Vec<Vec<f64>>,
    pub meta: SceneConfig,
}

impl Scene {
    pub fn class_prototypes(&self, class_id: u32) -> &[Vec<f64>] {
        let c = self.meta.clusters_per_class;
        let i = class_id as usize - 1;
        &self.prototypes_true[i * c..(i + 1) * c]
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, center: Option<&[f64]>, sigma: f64, dims: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims)
            .map(|j| {
                let z: f64 = StandardNormal.sample(rng);
                center.map_or(0.0, |c| c[j]) + sigma * z
            })
            .collect();
        if let Ok(u) = normalize_vector(&v) {
            return u;
        }
    }
}

/// Unit prototypes with pairwise chord at least 0.5, by rejection.
pub fn sample_prototypes(count: usize, dims: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > MAX_PROTO_ATTEMPTS {
            return Err(Error::ConfigInvalid(format!(
                "cannot place {count} prototypes with chord >= {MIN_PROTO_CHORD} in {dims} dims"
            )));
        }
        let p = gaussian_unit(rng, None, 1.0, dims);
        if out
            .iter()
            .all(|q| sq_dist(q, &p) >= MIN_PROTO_CHORD * MIN_PROTO_CHORD)
        {
            out.push(p);
        }
    }
    Ok(out)
}

/// Generate a scene; deterministic in the configuration (seed included).
pub fn gen_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = sample_prototypes(cfg.k_fg * cfg.clusters_per_class, cfg.dims, &mut rng)?;
    fill_scene(cfg, protos, &mut rng)
}

/// Generate a scene around prototypes chosen by the caller.
pub fn gen_scene_with_prototypes(cfg: &SceneConfig, prototypes: Vec<Vec<f64>>) -> Result<Scene> {
    cfg.validate()?;
    if prototypes.len() != cfg.k_fg * cfg.clusters_per_class
        || prototypes.iter().any(|p| p.len() != cfg.dims)
    {
        return Err(Error::ConfigInvalid(format!(
            "expected {} prototypes of {} dims",
            cfg.k_fg * cfg.clusters_per_class,
            cfg.dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    fill_scene(cfg, prototypes, &mut rng)
}

fn fill_scene(cfg: &SceneConfig, protos: Vec<Vec<f64>>, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let n = cfg.pixels();
    let per_class = cfg.class_count();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut labels = vec![0u32; n];
    for (slot, &pix) in order.iter().take(per_class * cfg.k_fg).enumerate() {
        labels[pix] = (slot / per_class) as u32 + 1;
    }

    let mut data = Vec::with_capacity(n * cfg.dims);
    for &label in &labels {
        let v = if label > 0 {
            let c = rng.random_range(0..cfg.clusters_per_class);
            let center = &protos[(label as usize - 1) * cfg.clusters_per_class + c];
            gaussian_unit(rng, Some(center), cfg.sigma_fg, cfg.dims)
        } else {
            match cfg.background {
                BackgroundMode::Tied => {
                    let center = &protos[rng.random_range(0..protos.len())];
                    gaussian_unit(rng, Some(center), cfg.sigma_bg, cfg.dims)
                }
                BackgroundMode::Uniform => gaussian_unit(rng, None, 1.0, cfg.dims),
            }
        };
        data.extend(v);
    }
    Ok(Scene {
        features: FeatureGrid::new(cfg.grid_h, cfg.grid_w, cfg.dims, data)?,
        truth: GridMask::new(cfg.grid_h, cfg.grid_w, cfg.k_fg as u32, labels)?,
        prototypes_true: protos,
        meta: *cfg,
    })
}

/// Support/query pairs that mimic slices of one organ.
///
/// Each pair draws a slice location `s` and an organ-size factor `g`; the
/// query foreground fraction is `g * (base + slope * s)` and the support uses
/// the same rule at a jittered slice location. Both scenes share their true
/// prototypes, so the ideal prior varies systematically with the support
/// foreground size and the slice location. The foreground spread also moves
/// with the slice, from `spread_range.0` to `spread_range.1` times
/// `base.sigma_fg`, scaled per pair by a factor drawn from
/// `1 +- spread_jitter` that no covariate reveals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGenerator {
    pub base: SceneConfig,
    pub frac_base: f64,
    pub frac_slope: f64,
    pub size_range: (f64, f64),
    pub slice_range: (f64, f64),
    pub support_jitter: f64,
    pub spread_range: (f64, f64),
    pub spread_jitter: f64,
}

impl PairGenerator {
    pub fn new(base: SceneConfig) -> Self {
        Self {
            base,
            frac_base: 0.04,
            frac_slope: 0.22,
            size_range: (0.6, 1.4),
            slice_range: (0.05, 0.95),
            support_jitter: 0.05,
            spread_range: (0.5, 1.5),
            spread_jitter: 0.2,
        }
    }

    fn fraction(&self, size: f64, slice: f64) -> f64 {
        let max = 0.95 / self.base.k_fg as f64;
        (size * (self.frac_base + self.frac_slope * slice)).clamp(0.01, max)
    }

    fn spread(&self, slice: f64, factor: f64) -> f64 {
        let (lo, hi) = self.spread_range;
        self.base.sigma_fg * factor * (lo + (hi - lo) * slice)
    }

    /// The `index`-th pair; deterministic in `(base.seed, index)`.
    pub fn pair(&self, index: u64) -> Result<(Scene, Scene)> {
        let seed = self
            .base
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos = sample_prototypes(
            self.base.k_fg * self.base.clusters_per_class,
            self.base.dims,
            &mut rng,
        )?;
        let size = rng.random_range(self.size_range.0..=self.size_range.1);
        let slice = rng.random_range(self.slice_range.0..=self.slice_range.1);
        let jitter = rng.random_range(-self.support_jitter..=self.support_jitter);
        let support_slice = (slice + jitter).clamp(0.0, 1.0);
        let factor = 1.0 + rng.random_range(-self.spread_jitter..=self.spread_jitter);

        let support_cfg = SceneConfig {
            fg_fraction: self.fraction(size, support_slice),
            sigma_fg: self.spread(support_slice, factor),
            slice_loc: support_slice,
            seed: rng.random(),
            ..self.base
        };
        let query_cfg = SceneConfig {
            fg_fraction: self.fraction(size, slice),
            sigma_fg: self.spread(slice, factor),
            slice_loc: slice,
            seed: rng.random(),
            ..self.base
        };
        Ok((
            gen_scene_with_prototypes(&support_cfg, protos.clone())?,
            gen_scene_with_prototypes(&query_cfg, protos)?,
        ))
    }
}

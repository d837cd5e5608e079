//! Domain types and grid geometry.
//!
//! Feature grids hold unit vectors on a row-major `height x width` lattice.
//! Scalar maps carry distances, anomaly scores and posteriors at the same
//! lattice, and masks carry integer class labels (0 is background).
//!
//! Resampling uses half-pixel centers: target index `i` looks at source
//! coordinate `(i + 0.5) * src / dst - 0.5`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on vector norms for anything that claims to live on the sphere.
pub const UNIT_TOL: f64 = 1e-6;

const ZERO_NORM: f64 = 1e-12;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale a vector to unit length.
pub fn normalize_vector(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector { index: 0 });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_unit(v: &[f64], index: usize) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(Error::NotUnit { index, norm: n });
    }
    Ok(())
}

/// `H' x W'` grid of unit feature vectors, vector-contiguous and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dims: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    /// Wrap data that is already on the unit sphere.
    pub fn new(height: usize, width: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(height, width, dims, data.len())?;
        for (i, v) in data.chunks_exact(dims).enumerate() {
            check_unit(v, i)?;
        }
        Ok(Self {
            height,
            width,
            dims,
            data,
        })
    }

    /// Build from a list of per-pixel vectors.
    pub fn from_vectors(height: usize, width: usize, vectors: &[Vec<f64>]) -> Result<Self> {
        let dims = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.iter().any(|v| v.len() != dims) {
            return Err(Error::DimensionMismatch("ragged vector list".into()));
        }
        Self::new(height, width, dims, vectors.concat())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Feature vector at flat pixel index `r`.
    pub fn vector(&self, r: usize) -> &[f64] {
        &self.data[r * self.dims..(r + 1) * self.dims]
    }

    pub fn vectors(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dims)
    }

    /// Bilinearly upsample every channel, then put each vector back on the sphere.
    pub fn upsample(&self, target_h: usize, target_w: usize) -> Result<FeatureGrid> {
        check_upsample(self.height, self.width, target_h, target_w)?;
        let plan = BilinearPlan::new(self.height, self.width, target_h, target_w);
        let mut raw = vec![0.0; target_h * target_w * self.dims];
        for (t, out) in raw.chunks_exact_mut(self.dims).enumerate() {
            for &(src, wgt) in &plan.taps[t] {
                for (o, x) in out.iter_mut().zip(self.vector(src)) {
                    *o += wgt * x;
                }
            }
        }
        normalize_to_sphere(target_h, target_w, self.dims, &raw)
    }
}

fn check_shape(height: usize, width: usize, dims: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 || dims == 0 {
        return Err(Error::Invalid(format!(
            "grid dimensions must be positive, got {height}x{width}x{dims}"
        )));
    }
    if len != height * width * dims {
        return Err(Error::DimensionMismatch(format!(
            "data length {len} != {height}*{width}*{dims}"
        )));
    }
    Ok(())
}

/// Project every vector of a raw grid onto the unit sphere.
pub fn normalize_to_sphere(
    height: usize,
    width: usize,
    dims: usize,
    raw: &[f64],
) -> Result<FeatureGrid> {
    check_shape(height, width, dims, raw.len())?;
    let mut data = Vec::with_capacity(raw.len());
    for (index, v) in raw.chunks_exact(dims).enumerate() {
        let n = norm(v);
        if !(n >= ZERO_NORM) {
            return Err(Error::ZeroVector { index });
        }
        data.extend(v.iter().map(|x| x / n));
    }
    Ok(FeatureGrid {
        height,
        width,
        dims,
        data,
    })
}

/// Integer label grid. Label 0 is background, `1..=classes` are foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    height: usize,
    width: usize,
    classes: u32,
    labels: Vec<u32>,
}

impl GridMask {
    pub fn new(height: usize, width: usize, classes: u32, labels: Vec<u32>) -> Result<Self> {
        check_shape(height, width, 1, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l > classes) {
            return Err(Error::Invalid(format!(
                "label {bad} exceeds class count {classes}"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    /// Binary mask from a predicate over flat indices.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize) -> bool) -> Result<Self> {
        let labels = (0..height * width).map(|r| f(r) as u32).collect();
        Self::new(height, width, 1, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> u32 {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of pixels carrying `class_id`.
    pub fn count(&self, class_id: u32) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }

    /// Number of pixels with any foreground label.
    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// One-class view: 1 where the label equals `class_id`, else 0.
    pub fn select(&self, class_id: u32) -> GridMask {
        GridMask {
            height: self.height,
            width: self.width,
            classes: 1,
            labels: self.labels.iter().map(|&l| (l == class_id) as u32).collect(),
        }
    }

    /// One-class view of all foreground labels merged.
    pub fn any_foreground(&self) -> GridMask {
        GridMask {
            height: self.height,
            width: self.width,
            classes: 1,
            labels: self.labels.iter().map(|&l| (l > 0) as u32).collect(),
        }
    }
}

/// Row-major map of finite scalars (distances, scores or probabilities).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_shape(height, width, 1, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, h: usize, w: usize) -> bool {
        self.height == h && self.width == w
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> ScalarMap {
        ScalarMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn from_parts(height: usize, width: usize, values: Vec<f64>) -> ScalarMap {
        debug_assert_eq!(values.len(), height * width);
        ScalarMap {
            height,
            width,
            values,
        }
    }
}

/// Dispersion parameters of the tied model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpmParams {
    pub sigma_f: f64,
    pub sigma_b: f64,
    /// Effective dimension used in the density normalizer, not the feature length.
    pub dim: f64,
    pub kappa: f64,
}

impl TpmParams {
    pub const DEFAULT_SIGMA_B: f64 = 10.0;
    pub const DEFAULT_DIM: f64 = 1.0;
    pub const DEFAULT_KAPPA: f64 = 0.5;

    pub fn new(sigma_f: f64, sigma_b: f64, dim: f64, kappa: f64) -> Result<Self> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !(positive(sigma_f) && positive(sigma_b) && positive(dim) && positive(kappa)) {
            return Err(Error::Invalid(format!(
                "tpm parameters must be positive and finite: sigma_f={sigma_f} sigma_b={sigma_b} dim={dim} kappa={kappa}"
            )));
        }
        if sigma_f >= sigma_b {
            return Err(Error::Invalid(format!(
                "sigma_f ({sigma_f}) must be smaller than sigma_b ({sigma_b})"
            )));
        }
        Ok(Self {
            sigma_f,
            sigma_b,
            dim,
            kappa,
        })
    }

    /// Parameters with the given `1/sigma_f^2 - 1/sigma_b^2` and `sigma_b`.
    ///
    /// `sigma_f` is nudged by a few ulps when that makes [`Self::delta`]
    /// reproduce `delta` exactly.
    pub fn from_delta(delta: f64, sigma_b: f64, dim: f64, kappa: f64) -> Result<Self> {
        let inv_f = delta + sigma_b.powi(-2);
        let params = Self::new(inv_f.sqrt().recip(), sigma_b, dim, kappa)?;
        let exact = (1..=64i64)
            .flat_map(|k| [k, -k])
            .map(|k| Self {
                sigma_f: f64::from_bits((params.sigma_f.to_bits() as i64 + k) as u64),
                ..params
            })
            .find(|p| p.delta() == delta);
        match exact {
            Some(p) if params.delta() != delta => Ok(p),
            _ => Ok(params),
        }
    }

    /// `1/sigma_f^2 - 1/sigma_b^2`, always positive.
    pub fn delta(&self) -> f64 {
        self.sigma_f.powi(-2) - self.sigma_b.powi(-2)
    }

    /// ADNet scaling factor equivalent to these dispersions.
    pub fn alpha(&self) -> f64 {
        2.0 * self.delta()
    }

    /// `ln(sigma_f / sigma_b)`, always negative.
    pub fn log_sigma_ratio(&self) -> f64 {
        (self.sigma_f / self.sigma_b).ln()
    }
}

impl Default for TpmParams {
    /// `sigma_b = 10` and `sigma_f` chosen so that the ADNet scale comes out at 20.
    fn default() -> Self {
        Self::from_delta(
            10.0,
            Self::DEFAULT_SIGMA_B,
            Self::DEFAULT_DIM,
            Self::DEFAULT_KAPPA,
        )
        .expect("default parameters are valid")
    }
}

/// Class priors `(p_F1..p_Fk, p_B)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    foreground: Vec<f64>,
    background: f64,
}

impl ClassPriors {
    pub fn new(foreground: Vec<f64>, background: f64) -> Result<Self> {
        if foreground.is_empty() {
            return Err(Error::Invalid("at least one foreground prior needed".into()));
        }
        let in_unit = |p: f64| (0.0..=1.0).contains(&p);
        if !foreground.iter().all(|&p| in_unit(p)) || !in_unit(background) {
            return Err(Error::Invalid(format!(
                "priors must lie in [0,1]: {foreground:?}, {background}"
            )));
        }
        let total: f64 = foreground.iter().sum::<f64>() + background;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("priors sum to {total}, expected 1")));
        }
        Ok(Self {
            foreground,
            background,
        })
    }

    /// Single foreground class with prior `p_f` and background `1 - p_f`.
    pub fn binary(p_f: f64) -> Result<Self> {
        Self::new(vec![p_f], 1.0 - p_f)
    }

    pub fn foreground(&self) -> &[f64] {
        &self.foreground
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    pub fn classes(&self) -> usize {
        self.foreground.len()
    }

    /// `(p_F, p_B)` for a binary prior set, rejecting priors at 0 or 1.
    pub(crate) fn binary_pair(&self) -> Result<(f64, f64)> {
        if self.foreground.len() != 1 {
            return Err(Error::DimensionMismatch(format!(
                "binary model needs one foreground prior, got {}",
                self.foreground.len()
            )));
        }
        let (pf, pb) = (self.foreground[0], self.background);
        if !(pf > 0.0 && pf < 1.0 && pb > 0.0 && pb < 1.0) {
            return Err(Error::DegeneratePriors(format!("p_F={pf}, p_B={pb}")));
        }
        Ok((pf, pb))
    }
}

/// Unit-vector prototypes with mixture weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    vectors: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl PrototypeSet {
    pub fn new(vectors: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::Invalid("prototype set is empty".into()));
        }
        if vectors.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} prototypes but {} weights",
                vectors.len(),
                weights.len()
            )));
        }
        let dims = vectors[0].len();
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dims {
                return Err(Error::DimensionMismatch("ragged prototype set".into()));
            }
            check_unit(v, i)?;
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Invalid(format!("weights must be positive: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { vectors, weights })
    }

    pub fn single(vector: Vec<f64>) -> Result<Self> {
        Self::new(vec![vector], vec![1.0])
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.vectors[0].len()
    }
}

pub(crate) fn check_dims(features: &FeatureGrid, proto: &[f64]) -> Result<()> {
    if features.dims() != proto.len() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} dims, prototype has {}",
            features.dims(),
            proto.len()
        )));
    }
    Ok(())
}

/// Chord distance from every feature to its nearest prototype.
pub fn distance_map(features: &FeatureGrid, protos: &PrototypeSet) -> Result<ScalarMap> {
    distance_map_to(features, protos.vectors())
}

/// Minimum chord distance over an arbitrary list of unit vectors.
pub fn distance_map_to(features: &FeatureGrid, protos: &[Vec<f64>]) -> Result<ScalarMap> {
    if protos.is_empty() {
        return Err(Error::Invalid("no prototypes given".into()));
    }
    for p in protos {
        check_dims(features, p)?;
    }
    let values = features
        .vectors()
        .map(|f| {
            protos
                .iter()
                .map(|p| sq_dist(f, p))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    Ok(ScalarMap::from_parts(features.height(), features.width(), values))
}

/// Cosine similarity of every feature with a unit prototype.
pub fn cosine_map(features: &FeatureGrid, proto: &[f64]) -> Result<ScalarMap> {
    check_dims(features, proto)?;
    let values = features.vectors().map(|f| dot(f, proto)).collect();
    Ok(ScalarMap::from_parts(features.height(), features.width(), values))
}

fn check_upsample(src_h: usize, src_w: usize, target_h: usize, target_w: usize) -> Result<()> {
    if target_h < src_h || target_w < src_w {
        return Err(Error::InvalidTarget {
            src_h,
            src_w,
            target_h,
            target_w,
        });
    }
    Ok(())
}

/// Source coordinate of target index `i` under the half-pixel convention,
/// clamped into `[0, src - 1]`.
fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    let scale = src as f64 / dst as f64;
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64)
}

/// Two-tap interpolation along one axis: `(lo, hi, weight_of_hi)`.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let x = source_coord(i, src, dst);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, x - lo as f64)
        })
        .collect()
}

struct BilinearPlan {
    taps: Vec<[(usize, f64); 4]>,
}

impl BilinearPlan {
    fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Self {
        let rows = axis_taps(src_h, dst_h);
        let cols = axis_taps(src_w, dst_w);
        let mut taps = Vec::with_capacity(dst_h * dst_w);
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                taps.push([
                    (r0 * src_w + c0, (1.0 - fy) * (1.0 - fx)),
                    (r0 * src_w + c1, (1.0 - fy) * fx),
                    (r1 * src_w + c0, fy * (1.0 - fx)),
                    (r1 * src_w + c1, fy * fx),
                ]);
            }
        }
        Self { taps }
    }
}

/// Bilinear upsampling with half-pixel centers.
pub fn bilinear_upsample(map: &ScalarMap, target_h: usize, target_w: usize) -> Result<ScalarMap> {
    check_upsample(map.height(), map.width(), target_h, target_w)?;
    if target_h == map.height() && target_w == map.width() {
        return Ok(map.clone());
    }
    let plan = BilinearPlan::new(map.height(), map.width(), target_h, target_w);
    let src = map.values();
    let values = plan
        .taps
        .iter()
        .map(|taps| {
            // A constant neighbourhood stays exactly constant.
            let first = src[taps[0].0];
            if taps.iter().all(|&(i, _)| src[i] == first) {
                first
            } else {
                taps.iter().map(|&(i, w)| w * src[i]).sum()
            }
        })
        .collect();
    Ok(ScalarMap::from_parts(target_h, target_w, values))
}

/// Nearest-neighbour label sampling with half-pixel centers.
///
/// Target pixel `i` takes the source pixel whose cell contains the point
/// `(i + 0.5) * src / dst`.
pub fn downsample_mask(mask: &GridMask, target_h: usize, target_w: usize) -> Result<GridMask> {
    if target_h == 0 || target_w == 0 || target_h > mask.height() || target_w > mask.width() {
        return Err(Error::InvalidTarget {
            src_h: mask.height(),
            src_w: mask.width(),
            target_h,
            target_w,
        });
    }
    let pick = |i: usize, src: usize, dst: usize| {
        let x = (i as f64 + 0.5) * src as f64 / dst as f64;
        (x.floor() as usize).min(src - 1)
    };
    let mut labels = Vec::with_capacity(target_h * target_w);
    for r in 0..target_h {
        let sr = pick(r, mask.height(), target_h);
        for c in 0..target_w {
            let sc = pick(c, mask.width(), target_w);
            labels.push(mask.labels()[sr * mask.width() + sc]);
        }
    }
    GridMask::new(target_h, target_w, mask.classes(), labels)
}

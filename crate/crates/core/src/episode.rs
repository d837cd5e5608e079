//! One support/query episode: prototypes, priors, posterior, mask, metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    distance_map_to, downsample_mask, ClassPriors, FeatureGrid, GridMask, PrototypeSet, ScalarMap,
    TpmParams,
};
use crate::metrics::{cross_entropy, dice};
use crate::posterior::{
    adnet_posterior, anomaly_score_map, mp_log_ratio_map, predict_mask, tied_to_adnet, tpm_mc_posterior,
    tpm_mp_posterior, tpm_sp_posterior,
};
use crate::prototype::{em_fit, map_pool, masked_points, EmConfig};
use crate::synth::Scene;
use crate::threshold::{
    boundary_distance, ideal_prior_from_log_ratio, lin_est_predict, ocp_prior, EpisodeRecord, LinEstModel,
};

/// Where the foreground prior comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// ADNet with equal priors, evaluated through the anomaly score.
    AdnetFixed,
    AvgEst,
    LinEst,
    /// Ideal prior from the query's own labels.
    Ocp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtoMode {
    Sp,
    /// EM with this many prototypes.
    Mp(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub prior: PriorSource,
    pub protos: ProtoMode,
}

impl Method {
    pub fn new(prior: PriorSource, protos: ProtoMode) -> Self {
        Self { prior, protos }
    }

    pub fn label(&self) -> String {
        let p = match self.prior {
            PriorSource::AdnetFixed => "adnet_fixed",
            PriorSource::AvgEst => "tpm_avgest",
            PriorSource::LinEst => "tpm_linest",
            PriorSource::Ocp => "tpm_ocp",
        };
        match self.protos {
            ProtoMode::Sp => format!("{p}/sp"),
            ProtoMode::Mp(k) => format!("{p}/mp{k}"),
        }
    }
}

/// Inputs the trained estimators need.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimators {
    pub avg: Option<f64>,
    pub linest: Option<LinEstModel>,
}

/// What is known about the query beyond its features.
#[derive(Debug, Clone, Copy)]
pub struct QueryInfo<'a> {
    pub slice_loc: f64,
    pub truth: Option<&'a GridMask>,
}

/// Everything a segmentation run produced.
#[derive(Debug, Clone)]
pub struct Segmentation {
    /// `[background, F1, ..]` for multi-class runs, `[foreground]` otherwise.
    pub prob_maps: Vec<ScalarMap>,
    /// Probability of any foreground class.
    pub fg_prob: ScalarMap,
    pub mask: GridMask,
    /// Minimum distance to any prototype.
    pub distances: ScalarMap,
    pub prototypes: PrototypeSet,
    /// Total foreground prior used.
    pub prior_fg: f64,
    /// Single-prototype decision boundary for `prior_fg`, if one exists.
    pub boundary: Option<f64>,
}

const PRIOR_EPS: f64 = 1e-12;

fn support_mask_at_features(features: &FeatureGrid, mask: &GridMask) -> Result<GridMask> {
    if mask.height() == features.height() && mask.width() == features.width() {
        Ok(mask.clone())
    } else {
        downsample_mask(mask, features.height(), features.width())
    }
}

/// Extract support prototypes for `mode`; multi-class masks pool one
/// prototype per class and weight them by support class size.
pub fn support_prototypes(
    features: &FeatureGrid,
    mask: &GridMask,
    mode: ProtoMode,
    params: &TpmParams,
    seed: u64,
) -> Result<PrototypeSet> {
    let mask = support_mask_at_features(features, mask)?;
    let k = mask.classes();
    if k > 1 {
        if let ProtoMode::Mp(_) = mode {
            return Err(Error::ConfigInvalid(
                "multiple prototypes per class are not supported for multi-class masks".into(),
            ));
        }
        let mut vectors = Vec::with_capacity(k as usize);
        let mut weights = Vec::with_capacity(k as usize);
        for c in 1..=k {
            vectors.push(map_pool(features, &mask.select(c))?);
            weights.push(mask.count(c) as f64);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        return PrototypeSet::new(vectors, weights);
    }
    match mode {
        ProtoMode::Sp => PrototypeSet::single(map_pool(features, &mask.select(1))?),
        ProtoMode::Mp(m) => {
            let points = masked_points(features, &mask, 1)?;
            if points.is_empty() {
                return Err(Error::EmptyMask);
            }
            let cfg = EmConfig {
                k: m,
                sigma_f: params.sigma_f,
                seed,
                ..EmConfig::default()
            };
            em_fit(&points, &cfg)
        }
    }
}

/// Per-class priors whose odds against the k-term background match the
/// binary odds `prior_fg / (1 - prior_fg)`, so each class keeps the binary
/// decision boundary on its own prototype.
pub fn multiclass_priors(prior_fg: f64, classes: usize) -> Result<ClassPriors> {
    let k = classes as f64;
    let odds = prior_fg / (1.0 - prior_fg);
    let bg = 1.0 / (1.0 + k * k * odds);
    let each = (1.0 - bg) / k;
    ClassPriors::new(vec![each; classes], 1.0 - each * k)
}

/// Oracle prior for the posterior `mode` will use. Single prototypes use the
/// IDT of the min-distance map; a binary mixture matches counts on its own
/// log-likelihood ratio, which is where its weights enter.
pub fn ideal_prior(
    query: &FeatureGrid,
    protos: &PrototypeSet,
    mode: ProtoMode,
    distances: &ScalarMap,
    truth: &GridMask,
    params: &TpmParams,
) -> Result<f64> {
    match mode {
        ProtoMode::Mp(_) if truth.classes() == 1 => {
            if query.height() != truth.height() || query.width() != truth.width() {
                return Err(Error::DimensionMismatch(
                    "query labels do not match the query grid".into(),
                ));
            }
            ideal_prior_from_log_ratio(&mp_log_ratio_map(query, protos, params)?, truth.foreground_count())
        }
        _ => ocp_prior(distances, truth, params),
    }
}

/// Segment a query from a support image.
pub fn segment(
    support_features: &FeatureGrid,
    support_mask: &GridMask,
    query: &FeatureGrid,
    info: QueryInfo<'_>,
    method: Method,
    params: &TpmParams,
    estimators: &Estimators,
    seed: u64,
) -> Result<Segmentation> {
    let protos = support_prototypes(support_features, support_mask, method.protos, params, seed)?;
    let distances = distance_map_to(query, protos.vectors())?;
    let classes = support_mask.classes() as usize;

    let prior_fg = match method.prior {
        PriorSource::AdnetFixed => 0.5,
        PriorSource::AvgEst => estimators
            .avg
            .ok_or_else(|| Error::ConfigInvalid("avgest needs an average ICP".into()))?,
        PriorSource::LinEst => {
            let model = estimators
                .linest
                .ok_or_else(|| Error::ConfigInvalid("linest needs a fitted model".into()))?;
            lin_est_predict(&model, support_mask.foreground_count(), info.slice_loc)
        }
        PriorSource::Ocp => {
            let truth = info
                .truth
                .ok_or_else(|| Error::ConfigInvalid("ocp needs the query labels".into()))?;
            ideal_prior(query, &protos, method.protos, &distances, truth, params)?
        }
    }
    .clamp(PRIOR_EPS, 1.0 - PRIOR_EPS);
    let binary = ClassPriors::binary(prior_fg)?;

    let (prob_maps, fg_prob) = if classes > 1 {
        let priors = multiclass_priors(prior_fg, classes)?;
        let maps = tpm_mc_posterior(query, protos.vectors(), params, &priors)?;
        let fg_prob = maps[0].map(|b| 1.0 - b);
        (maps, fg_prob)
    } else {
        let post = match (method.protos, method.prior) {
            (ProtoMode::Sp, PriorSource::AdnetFixed) => {
                let adnet = tied_to_adnet(params, &binary)?;
                let score = anomaly_score_map(query, &protos.vectors()[0], adnet.alpha)?;
                adnet_posterior(&score, &adnet)
            }
            (ProtoMode::Sp, _) => tpm_sp_posterior(query, &protos.vectors()[0], params, &binary)?,
            (ProtoMode::Mp(_), _) => tpm_mp_posterior(query, &protos, params, &binary)?,
        };
        (vec![post.clone()], post)
    };
    let mask = predict_mask(&prob_maps)?;
    Ok(Segmentation {
        prob_maps,
        fg_prob,
        mask,
        distances,
        prototypes: protos,
        prior_fg,
        boundary: boundary_distance(params, &binary).ok(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub method: String,
    /// Dice per foreground class, class 1 first.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    /// Binary CE of the any-foreground posterior.
    pub ce: f64,
    pub prior_fg: f64,
    pub boundary: Option<f64>,
    pub predicted_fg: usize,
    pub true_fg: usize,
}

/// Score a segmentation against query labels.
pub fn score(seg: &Segmentation, truth: &GridMask, method: &str) -> Result<EpisodeReport> {
    let classes = truth.classes().max(seg.mask.classes());
    let dice = (1..=classes)
        .map(|c| dice(&seg.mask, truth, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeReport {
        method: method.to_string(),
        mean_dice: dice.iter().sum::<f64>() / dice.len() as f64,
        dice,
        ce: cross_entropy(&seg.fg_prob, truth)?,
        prior_fg: seg.prior_fg,
        boundary: seg.boundary,
        predicted_fg: seg.mask.foreground_count(),
        true_fg: truth.foreground_count(),
    })
}

/// Run and score one episode on synthetic scenes.
pub fn run_episode(
    support: &Scene,
    query: &Scene,
    method: Method,
    params: &TpmParams,
    estimators: &Estimators,
) -> Result<EpisodeReport> {
    let seg = segment(
        &support.features,
        &support.truth,
        &query.features,
        QueryInfo {
            slice_loc: query.meta.slice_loc,
            truth: Some(&query.truth),
        },
        method,
        params,
        estimators,
        support.meta.seed,
    )?;
    score(&seg, &query.truth, &method.label())
}

const ICP_EPS: f64 = 1e-9;

/// Training record for one pair: the query ICP on the min-distance map of
/// the support prototypes, with the support size and query slice location.
pub fn episode_record(
    support_features: &FeatureGrid,
    support_mask: &GridMask,
    query: &FeatureGrid,
    query_mask: &GridMask,
    slice_loc: f64,
    mode: ProtoMode,
    params: &TpmParams,
    seed: u64,
) -> Result<EpisodeRecord> {
    let protos = support_prototypes(support_features, support_mask, mode, params, seed)?;
    let distances = distance_map_to(query, protos.vectors())?;
    let icp = ideal_prior(query, &protos, mode, &distances, query_mask, params)?
        .clamp(ICP_EPS, 1.0 - ICP_EPS);
    EpisodeRecord::new(support_mask.foreground_count(), slice_loc, icp)
}

pub fn scene_record(
    support: &Scene,
    query: &Scene,
    mode: ProtoMode,
    params: &TpmParams,
) -> Result<EpisodeRecord> {
    episode_record(
        &support.features,
        &support.truth,
        &query.features,
        &query.truth,
        query.meta.slice_loc,
        mode,
        params,
        support.meta.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene_with_prototypes, SceneConfig};

    fn separable_pair() -> (Scene, Scene) {
        let cfg = SceneConfig {
            grid_h: 20,
            grid_w: 20,
            sigma_fg: 0.02,
            sigma_bg: 0.05,
            background: crate::synth::BackgroundMode::Tied,
            ..SceneConfig::default()
        };
        let fg = vec![1.0, 0.0, 0.0];
        let mk = |seed| {
            let mut s = gen_scene_with_prototypes(&SceneConfig { seed, k_fg: 1, clusters_per_class: 1, ..cfg }, vec![fg.clone()])
                .unwrap();
            // Mirror the background to the far side of the sphere.
            let raw: Vec<f64> = s
                .features
                .vectors()
                .zip(s.truth.labels())
                .flat_map(|(v, &l)| if l == 0 { vec![-v[0], v[1], v[2]] } else { v.to_vec() })
                .collect();
            s.features = FeatureGrid::new(20, 20, 3, raw).unwrap();
            s
        };
        (mk(1), mk(2))
    }

    #[test]
    fn ocp_separable_is_perfect() {
        let (s, q) = separable_pair();
        let params = TpmParams::default();
        for protos in [ProtoMode::Sp, ProtoMode::Mp(3)] {
            let r = run_episode(&s, &q, Method::new(PriorSource::Ocp, protos), &params, &Estimators::default())
                .unwrap();
            assert_eq!(r.dice, vec![1.0], "{protos:?}");
            assert_eq!(r.predicted_fg, r.true_fg);
        }
    }

    #[test]
    fn missing_estimators_are_reported() {
        let (s, q) = separable_pair();
        let params = TpmParams::default();
        for prior in [PriorSource::AvgEst, PriorSource::LinEst] {
            let r = run_episode(&s, &q, Method::new(prior, ProtoMode::Sp), &params, &Estimators::default());
            assert!(matches!(r, Err(Error::ConfigInvalid(_))));
        }
    }

    #[test]
    fn adnet_fixed_matches_equal_prior_tpm() {
        let (s, q) = separable_pair();
        let params = TpmParams::default();
        let info = QueryInfo { slice_loc: 0.5, truth: None };
        let est = Estimators { avg: Some(0.5), linest: None };
        let a = segment(&s.features, &s.truth, &q.features, info, Method::new(PriorSource::AdnetFixed, ProtoMode::Sp), &params, &est, 0).unwrap();
        let b = segment(&s.features, &s.truth, &q.features, info, Method::new(PriorSource::AvgEst, ProtoMode::Sp), &params, &est, 0).unwrap();
        for (x, y) in a.fg_prob.values().iter().zip(b.fg_prob.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn multiclass_priors_keep_binary_odds() {
        for &(q, k) in &[(0.2, 1usize), (0.03, 3), (0.6, 2)] {
            let p = multiclass_priors(q, k).unwrap();
            let odds = p.foreground()[0] / (k as f64 * p.background());
            assert!((odds - q / (1.0 - q)).abs() < 1e-12);
            let total: f64 = p.foreground().iter().sum::<f64>() + p.background();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multiclass_episode() {
        let cfg = SceneConfig {
            grid_h: 24,
            grid_w: 24,
            k_fg: 3,
            fg_fraction: 0.15,
            sigma_fg: 0.05,
            seed: 4,
            ..SceneConfig::default()
        };
        let s = crate::synth::gen_scene(&cfg).unwrap();
        let q = gen_scene_with_prototypes(&SceneConfig { seed: 9, ..cfg }, s.prototypes_true.clone()).unwrap();
        let r = run_episode(&s, &q, Method::new(PriorSource::Ocp, ProtoMode::Sp), &TpmParams::default(), &Estimators::default())
            .unwrap();
        assert_eq!(r.dice.len(), 3);
        assert!(r.mean_dice > 0.5, "{r:?}");
        let mp = run_episode(&s, &q, Method::new(PriorSource::Ocp, ProtoMode::Mp(2)), &TpmParams::default(), &Estimators::default());
        assert!(matches!(mp, Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn record_matches_ocp() {
        let (s, q) = separable_pair();
        let params = TpmParams::default();
        let rec = scene_record(&s, &q, ProtoMode::Sp, &params).unwrap();
        assert_eq!(rec.support_fg_count, s.truth.foreground_count());
        let seg = segment(&s.features, &s.truth, &q.features, QueryInfo { slice_loc: 0.5, truth: Some(&q.truth) }, Method::new(PriorSource::Ocp, ProtoMode::Sp), &params, &Estimators::default(), 0).unwrap();
        assert!((seg.prior_fg - rec.icp).abs() < 1e-12);
    }
}

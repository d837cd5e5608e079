//! Class posteriors of ADNet and of the tied prototype model.
//!
//! Densities are isotropic normals evaluated in log space. The
//! `(2 pi)^(-d/2)` factor cancels in every ratio and is left out, so the log
//! density of `N(p, s^2 I)` at `x` is `-d ln s - |x - p|^2 / (2 s^2)`, with
//! `d` the effective dimension from [`TpmParams`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    check_dims, cosine_map, sq_dist, ClassPriors, FeatureGrid, GridMask, PrototypeSet, ScalarMap,
    TpmParams,
};
use crate::logsumexp;

/// Logistic function with unit steepness.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ADNet's inference parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdnetParams {
    pub alpha: f64,
    pub t_s: f64,
    pub kappa: f64,
}

impl AdnetParams {
    pub const DEFAULT_ALPHA: f64 = 20.0;
    pub const DEFAULT_KAPPA: f64 = 0.5;

    pub fn new(alpha: f64, t_s: f64, kappa: f64) -> Result<Self> {
        if !(alpha > 0.0 && kappa > 0.0 && t_s.is_finite() && alpha.is_finite()) {
            return Err(Error::Invalid(format!(
                "adnet parameters out of range: alpha={alpha} t_s={t_s} kappa={kappa}"
            )));
        }
        Ok(Self { alpha, t_s, kappa })
    }
}

/// `S(r) = -alpha * cos(F(r), p)`.
pub fn anomaly_score_map(features: &FeatureGrid, proto: &[f64], alpha: f64) -> Result<ScalarMap> {
    Ok(cosine_map(features, proto)?.map(|c| -alpha * c))
}

/// `1 - sig(S(r) - T_S)` with `sig(x) = 1 / (1 + exp(-kappa x))`.
pub fn adnet_posterior(score: &ScalarMap, params: &AdnetParams) -> ScalarMap {
    score.map(|s| sigmoid(-params.kappa * (s - params.t_s)))
}

/// ADNet parameters that reproduce the tied single-prototype posterior.
///
/// At the default steepness 0.5 this is `alpha = 2 delta` and
/// `T_S = 2 ln(p_F/p_B) - 2 d ln(sigma_F/sigma_B) - alpha`; other steepness
/// values scale both by `0.5 / kappa`.
pub fn tied_to_adnet(params: &TpmParams, priors: &ClassPriors) -> Result<AdnetParams> {
    let (pf, pb) = priors.binary_pair()?;
    let kappa = params.kappa;
    let alpha = params.delta() / kappa;
    let t_s = ((pf / pb).ln() - params.dim * params.log_sigma_ratio()) / kappa - alpha;
    AdnetParams::new(alpha, t_s, kappa)
}

/// Tied single-prototype posterior at squared chord distance `d2` given the
/// prior log-odds `ln(p_F / p_B)`.
pub fn sp_posterior_at(d2: f64, params: &TpmParams, log_prior_odds: f64) -> f64 {
    let exponent = 0.5 * d2 * params.delta() + params.dim * params.log_sigma_ratio() - log_prior_odds;
    sigmoid(-exponent)
}

/// Foreground posterior of the tied model with one prototype.
pub fn tpm_sp_posterior(
    features: &FeatureGrid,
    proto: &[f64],
    params: &TpmParams,
    priors: &ClassPriors,
) -> Result<ScalarMap> {
    check_dims(features, proto)?;
    let (pf, pb) = priors.binary_pair()?;
    let odds = (pf / pb).ln();
    let values = features
        .vectors()
        .map(|f| sp_posterior_at(sq_dist(f, proto), params, odds))
        .collect();
    Ok(ScalarMap::from_parts(features.height(), features.width(), values))
}

fn log_phi(d2: f64, sigma: f64, dim: f64) -> f64 {
    -dim * sigma.ln() - 0.5 * d2 / (sigma * sigma)
}

/// Log-likelihood ratio `ln(sum w phi(sigma_F) / sum w phi(sigma_B))` of
/// the tied mixtures at every pixel.
pub fn mp_log_ratio_map(
    features: &FeatureGrid,
    protos: &PrototypeSet,
    params: &TpmParams,
) -> Result<ScalarMap> {
    for p in protos.vectors() {
        check_dims(features, p)?;
    }
    let log_w: Vec<f64> = protos.weights().iter().map(|w| w.ln()).collect();
    let mut fg = vec![0.0; protos.len()];
    let mut bg = vec![0.0; protos.len()];
    let values = features
        .vectors()
        .map(|f| {
            for (m, p) in protos.vectors().iter().enumerate() {
                let d2 = sq_dist(f, p);
                fg[m] = log_w[m] + log_phi(d2, params.sigma_f, params.dim);
                bg[m] = log_w[m] + log_phi(d2, params.sigma_b, params.dim);
            }
            logsumexp(&fg) - logsumexp(&bg)
        })
        .collect();
    Ok(ScalarMap::from_parts(features.height(), features.width(), values))
}

/// Foreground posterior with tied Gaussian mixtures over several prototypes.
pub fn tpm_mp_posterior(
    features: &FeatureGrid,
    protos: &PrototypeSet,
    params: &TpmParams,
    priors: &ClassPriors,
) -> Result<ScalarMap> {
    let (pf, pb) = priors.binary_pair()?;
    let odds = (pf / pb).ln();
    Ok(mp_log_ratio_map(features, protos, params)?.map(|l| sigmoid(l + odds)))
}

/// Multi-class posteriors, one map per class with background at index 0.
///
/// Foreground class `i` gets `p_Fi phi(p_i, sigma_F)` over the sum of all
/// foreground terms and all background terms `p_B phi(p_i', sigma_B)`. The
/// background map holds what is left, evaluated as its own share of that sum
/// so that it stays accurate when it is tiny.
pub fn tpm_mc_posterior(
    features: &FeatureGrid,
    protos: &[Vec<f64>],
    params: &TpmParams,
    priors: &ClassPriors,
) -> Result<Vec<ScalarMap>> {
    if protos.is_empty() || protos.len() != priors.classes() {
        return Err(Error::DimensionMismatch(format!(
            "{} prototypes for {} foreground priors",
            protos.len(),
            priors.classes()
        )));
    }
    for p in protos {
        check_dims(features, p)?;
    }
    if priors.foreground().iter().all(|&p| p == 0.0) {
        return Err(Error::DegeneratePriors(
            "all foreground priors are zero".into(),
        ));
    }
    let k = protos.len();
    let log_pf: Vec<f64> = priors.foreground().iter().map(|p| p.ln()).collect();
    let log_pb = priors.background().ln();
    let n = features.len();
    let mut maps = vec![Vec::with_capacity(n); k + 1];
    let mut terms = vec![0.0; 2 * k];
    for f in features.vectors() {
        for (i, p) in protos.iter().enumerate() {
            let d2 = sq_dist(f, p);
            terms[i] = log_pf[i] + log_phi(d2, params.sigma_f, params.dim);
            terms[k + i] = log_pb + log_phi(d2, params.sigma_b, params.dim);
        }
        let denom = logsumexp(&terms);
        let background = if log_pb == f64::NEG_INFINITY {
            0.0
        } else {
            (logsumexp(&terms[k..]) - denom).exp()
        };
        maps[0].push(background);
        for i in 0..k {
            maps[i + 1].push((terms[i] - denom).exp());
        }
    }
    Ok(maps
        .into_iter()
        .map(|v| ScalarMap::from_parts(features.height(), features.width(), v))
        .collect())
}

/// Turn posterior maps into labels.
///
/// One map is a binary foreground posterior, thresholded at 0.5 inclusive.
/// Several maps are `[background, F1, .., Fk]` and each pixel takes the
/// argmax, ties going to the lowest index.
pub fn predict_mask(prob_maps: &[ScalarMap]) -> Result<GridMask> {
    let first = prob_maps
        .first()
        .ok_or_else(|| Error::Invalid("no probability maps".into()))?;
    let (h, w) = (first.height(), first.width());
    if prob_maps.iter().any(|m| !m.same_shape(h, w)) {
        return Err(Error::DimensionMismatch(
            "probability maps differ in shape".into(),
        ));
    }
    if prob_maps.len() == 1 {
        let labels = first.values().iter().map(|&p| (p >= 0.5) as u32).collect();
        return GridMask::new(h, w, 1, labels);
    }
    let labels = (0..h * w)
        .map(|r| {
            let mut best = 0;
            for (c, m) in prob_maps.iter().enumerate().skip(1) {
                if m.values()[r] > prob_maps[best].values()[r] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    GridMask::new(h, w, (prob_maps.len() - 1) as u32, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{distance_map, normalize_vector};
    use proptest::prelude::*;

    fn params(ratio: f64, delta: f64, dim: f64) -> TpmParams {
        // sigma_b = sigma_f / ratio and 1/sf^2 - 1/sb^2 = delta.
        let sf = ((1.0 - ratio * ratio) / delta).sqrt();
        TpmParams::new(sf, sf / ratio, dim, 0.5).unwrap()
    }

    fn grid(vs: &[Vec<f64>]) -> FeatureGrid {
        FeatureGrid::from_vectors(1, vs.len(), vs).unwrap()
    }

    #[test]
    fn anomaly_score_examples() {
        let p = vec![0.0, 1.0];
        let g = grid(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.6, 0.8]]);
        let s = anomaly_score_map(&g, &p, 20.0).unwrap();
        assert_eq!(s.values()[0], -20.0);
        assert_eq!(s.values()[1], 0.0);
        let d = distance_map(&g, &PrototypeSet::single(p).unwrap()).unwrap();
        for (sv, dv) in s.values().iter().zip(d.values()) {
            assert!((sv + 20.0 * (1.0 - dv * dv / 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn adnet_posterior_examples() {
        let prm = AdnetParams::new(20.0, 0.0, 0.5).unwrap();
        let s = ScalarMap::new(1, 3, vec![0.0, -20.0, 20.0]).unwrap();
        let p = adnet_posterior(&s, &prm);
        assert_eq!(p.values()[0], 0.5);
        let expected = 1.0 - 1.0 / (1.0 + 10f64.exp());
        assert!((p.values()[1] - expected).abs() < 1e-15);
        assert!((p.values()[1] - 0.9999546).abs() < 1e-7);
        assert!((p.values()[2] - 4.5398e-5).abs() < 1e-9);
        let shifted = AdnetParams::new(20.0, 3.0, 0.5).unwrap();
        let at = ScalarMap::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(adnet_posterior(&at, &shifted).values()[0], 0.5);
    }

    #[test]
    fn tied_to_adnet_default_scale_and_limit() {
        let p = TpmParams::from_delta(10.0, 10.0, 1.0, 0.5).unwrap();
        let a = tied_to_adnet(&p, &ClassPriors::binary(0.5).unwrap()).unwrap();
        assert!((a.alpha - 20.0).abs() < 1e-12);
        assert_eq!(a.kappa, 0.5);

        // Equal priors and sigma ratio -> 1 leave T_S = -alpha.
        for eps in [1e-3, 1e-6, 1e-9] {
            let sb = 1.0;
            let p = TpmParams::new(sb * (1.0 - eps), sb, 1.0, 0.5).unwrap();
            let a = tied_to_adnet(&p, &ClassPriors::binary(0.5).unwrap()).unwrap();
            assert!((a.t_s + a.alpha).abs() < 3.0 * eps);
        }

        let bad = ClassPriors::binary(1.0).unwrap();
        assert!(matches!(tied_to_adnet(&p, &bad), Err(Error::DegeneratePriors(_))));
    }

    #[test]
    fn sp_posterior_at_prototype() {
        let prm = params(0.5, 10.0, 1.0);
        let g = grid(&[vec![1.0, 0.0]]);
        let post = tpm_sp_posterior(&g, &[1.0, 0.0], &prm, &ClassPriors::binary(0.5).unwrap())
            .unwrap();
        // 1 / (1 + exp(ln 0.5))
        assert!((post.values()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mp_collapse_to_sp() {
        let prm = params(0.3, 12.0, 1.0);
        let pri = ClassPriors::binary(0.2).unwrap();
        let p = normalize_vector(&[0.3, -0.2, 0.9]).unwrap();
        let fs: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 * 0.31;
                normalize_vector(&[t.cos(), t.sin(), 0.4 - 0.05 * i as f64]).unwrap()
            })
            .collect();
        let g = grid(&fs);
        let sp = tpm_sp_posterior(&g, &p, &prm, &pri).unwrap();
        let one = tpm_mp_posterior(&g, &PrototypeSet::single(p.clone()).unwrap(), &prm, &pri)
            .unwrap();
        let dup = PrototypeSet::new(vec![p.clone(), p.clone()], vec![0.4, 0.6]).unwrap();
        let dup = tpm_mp_posterior(&g, &dup, &prm, &pri).unwrap();
        for r in 0..20 {
            assert!((sp.values()[r] - one.values()[r]).abs() < 1e-12);
            assert!((sp.values()[r] - dup.values()[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn mp_matches_direct_density_sums() {
        let prm = TpmParams::new(0.5, 1.5, 2.0, 0.5).unwrap();
        let pri = ClassPriors::binary(0.35).unwrap();
        let protos = PrototypeSet::new(
            vec![
                normalize_vector(&[1.0, 0.2, 0.0]).unwrap(),
                normalize_vector(&[-0.3, 1.0, 0.5]).unwrap(),
            ],
            vec![0.45, 0.55],
        )
        .unwrap();
        let fs: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64 * 0.55;
                normalize_vector(&[t.sin(), t.cos(), 0.3]).unwrap()
            })
            .collect();
        let g = grid(&fs);
        let got = tpm_mp_posterior(&g, &protos, &prm, &pri).unwrap();
        let phi = |x: &[f64], p: &[f64], s: f64| {
            let d2: f64 = x.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
            (2.0 * std::f64::consts::PI * s * s).powf(-prm.dim / 2.0) * (-d2 / (2.0 * s * s)).exp()
        };
        for (x, &v) in fs.iter().zip(got.values()) {
            let mix = |s: f64| -> f64 {
                protos
                    .vectors()
                    .iter()
                    .zip(protos.weights())
                    .map(|(p, w)| w * phi(x, p, s))
                    .sum()
            };
            let f = 0.35 * mix(prm.sigma_f);
            let b = 0.65 * mix(prm.sigma_b);
            assert!((v - f / (f + b)).abs() < 1e-10);
        }
    }

    #[test]
    fn mc_single_class_and_symmetry() {
        let prm = params(0.4, 8.0, 1.0);
        let p1 = vec![1.0, 0.0];
        let fs: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let t = i as f64 * 0.8;
                vec![t.cos(), t.sin()]
            })
            .collect();
        let g = grid(&fs);
        let pri = ClassPriors::binary(0.3).unwrap();
        let maps = tpm_mc_posterior(&g, std::slice::from_ref(&p1), &prm, &pri).unwrap();
        // With one class the background term is p_B phi(p_1, sigma_B) and the
        // map coincides with the single-prototype posterior.
        let sp = tpm_sp_posterior(&g, &p1, &prm, &pri).unwrap();
        for r in 0..8 {
            assert!((maps[1].values()[r] - sp.values()[r]).abs() < 1e-12);
            assert!((maps[0].values()[r] + maps[1].values()[r] - 1.0).abs() < 1e-12);
        }

        let s = 0.5f64.sqrt();
        let protos = vec![vec![s, s], vec![s, -s]];
        let eq = grid(&[vec![1.0, 0.0]]);
        let pri = ClassPriors::new(vec![0.25, 0.25], 0.5).unwrap();
        let maps = tpm_mc_posterior(&eq, &protos, &prm, &pri).unwrap();
        assert!((maps[1].values()[0] - maps[2].values()[0]).abs() < 1e-15);
    }

    #[test]
    fn mc_errors() {
        let prm = params(0.4, 8.0, 1.0);
        let g = grid(&[vec![1.0, 0.0]]);
        let pri = ClassPriors::new(vec![0.25, 0.25], 0.5).unwrap();
        assert!(matches!(
            tpm_mc_posterior(&g, &[vec![1.0, 0.0]], &prm, &pri),
            Err(Error::DimensionMismatch(_))
        ));
        let pri = ClassPriors::new(vec![0.0], 1.0).unwrap();
        assert!(matches!(
            tpm_mc_posterior(&g, &[vec![1.0, 0.0]], &prm, &pri),
            Err(Error::DegeneratePriors(_))
        ));
    }

    #[test]
    fn predict_mask_examples() {
        let m = ScalarMap::filled(2, 3, 0.7).unwrap();
        assert!(predict_mask(&[m]).unwrap().labels().iter().all(|&l| l == 1));
        let half = ScalarMap::filled(2, 2, 0.5).unwrap();
        let mask = predict_mask(&[half.clone(), half]).unwrap();
        assert!(mask.labels().iter().all(|&l| l == 0));
        let a = ScalarMap::filled(2, 2, 0.5).unwrap();
        let b = ScalarMap::filled(1, 2, 0.5).unwrap();
        assert!(predict_mask(&[a, b]).is_err());
        assert!(predict_mask(&[]).is_err());
    }

    fn unit3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 3)
            .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
            .prop_map(|v| normalize_vector(&v).unwrap())
    }

    proptest! {
        #[test]
        fn sp_decreases_with_distance(a in 0.0f64..3.9, b in 0.0f64..3.9,
                                      ratio in 0.05f64..0.95, delta in 0.5f64..50.0,
                                      pf in 0.01f64..0.99) {
            prop_assume!((a - b).abs() > 1e-6);
            let prm = params(ratio, delta, 1.0);
            let odds = (pf / (1.0 - pf)).ln();
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(sp_posterior_at(near, &prm, odds) >= sp_posterior_at(far, &prm, odds));
        }

        #[test]
        fn prior_monotonicity(f in unit3(), p in unit3(), lo in 0.01f64..0.98, step in 0.0f64..0.5) {
            let hi = (lo + step).min(0.99);
            let prm = params(0.3, 10.0, 1.0);
            let g = FeatureGrid::from_vectors(1, 1, &[f]).unwrap();
            let a = tpm_sp_posterior(&g, &p, &prm, &ClassPriors::binary(lo).unwrap()).unwrap();
            let b = tpm_sp_posterior(&g, &p, &prm, &ClassPriors::binary(hi).unwrap()).unwrap();
            prop_assert!(b.values()[0] >= a.values()[0]);
            let m = PrototypeSet::single(p.clone()).unwrap();
            let c = tpm_mp_posterior(&g, &m, &prm, &ClassPriors::binary(lo).unwrap()).unwrap();
            let d = tpm_mp_posterior(&g, &m, &prm, &ClassPriors::binary(hi).unwrap()).unwrap();
            prop_assert!(d.values()[0] >= c.values()[0]);
        }

        #[test]
        fn mc_maps_are_probabilities(fs in prop::collection::vec(unit3(), 4),
                                     ps in prop::collection::vec(unit3(), 3),
                                     a in 0.05f64..0.3, b in 0.05f64..0.3) {
            let prm = params(0.4, 6.0, 1.0);
            let pri = ClassPriors::new(vec![a, b, 0.1], 0.9 - a - b).unwrap();
            let g = FeatureGrid::from_vectors(2, 2, &fs).unwrap();
            let maps = tpm_mc_posterior(&g, &ps, &prm, &pri).unwrap();
            for r in 0..4 {
                let total: f64 = maps.iter().map(|m| m.values()[r]).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                for m in &maps {
                    prop_assert!(m.values()[r] > 0.0 && m.values()[r] < 1.0);
                }
            }
        }
    }
}

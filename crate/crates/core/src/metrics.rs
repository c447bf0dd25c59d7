//! AUC, AUPR-In and FPR@95 from score arrays, and the clean / guaranteed /
//! adversarial score sets they are computed from.
//!
//! Higher scores mean "more in-distribution". The set-level functions score
//! point `i` on the ID side with `stream.derive(0).derive(i)` and on the OOD
//! side with `stream.derive(1).derive(i)`; every score variant uses the same
//! streams so clean and attacked scores share their noise draws.

use rayon::prelude::*;

use crate::attack::{pgd_maximize, AttackConfig};
use crate::error::{Error, Result};
use crate::joint::{certified_l2_score, guaranteed_linf_msp_upper, joint_confidence, joint_msp_and_gradient, JointDetector};
use crate::numerics::{RngStream, Vector};
use crate::smoothing::{CertifiedScore, SmoothingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreVariant {
    Clean,
    GuaranteedL2,
    GuaranteedLinf,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub variant: ScoreVariant,
}

impl ScoreSet {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>, variant: ScoreVariant) -> Result<Self> {
        let s = Self {
            id_scores,
            ood_scores,
            variant,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id_scores.is_empty() || self.ood_scores.is_empty() {
            return Err(Error::domain("score set needs ID and OOD scores"));
        }
        if self.id_scores.iter().chain(&self.ood_scores).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        Ok(())
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `P(h(x) > h(z)) + ½ P(h(x) = h(z))` over all ID/OOD pairs.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let ood = sorted(&s.ood_scores);
    let mut twice: u128 = 0;
    for v in &s.id_scores {
        let less = ood.partition_point(|o| o < v);
        let leq = ood.partition_point(|o| o <= v);
        twice += 2 * less as u128 + (leq - less) as u128;
    }
    let pairs = 2 * s.id_scores.len() as u128 * s.ood_scores.len() as u128;
    Ok(twice as f64 / pairs as f64)
}

/// Area under precision-recall with ID as the positive class. Thresholds
/// run over the distinct scores in descending order; tied scores enter
/// together; `Σ (R_k − R_{k−1}) P_k`.
pub fn aupr(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let mut all: Vec<(f64, bool)> = s
        .id_scores
        .iter()
        .map(|v| (*v, true))
        .chain(s.ood_scores.iter().map(|v| (*v, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = s.id_scores.len() as f64;
    let (mut tp, mut fp, mut prev_tp) = (0usize, 0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += ((tp - prev_tp) as f64 / n) * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    Ok(area)
}

/// Fraction of OOD scores `≥ τ`, where `τ` is the largest threshold keeping
/// at least 95% of ID scores at or above it. Needs at least 20 ID scores.
pub fn fpr_at_95_tpr(s: &ScoreSet) -> Result<f64> {
    s.validate()?;
    let n = s.id_scores.len();
    if n < 20 {
        return Err(Error::domain(format!("FPR@95 needs at least 20 ID scores, got {n}")));
    }
    let need = (95 * n).div_ceil(100);
    let mut id = s.id_scores.clone();
    id.sort_by(|a, b| b.total_cmp(a));
    let tau = id[need - 1];
    let hits = s.ood_scores.iter().filter(|v| **v >= tau).count();
    Ok(hits as f64 / s.ood_scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub auc: f64,
    pub aupr: f64,
    pub fpr: f64,
}

pub fn all_metrics(s: &ScoreSet) -> Result<Metrics> {
    Ok(Metrics {
        auc: auc(s)?,
        aupr: aupr(s)?,
        fpr: fpr_at_95_tpr(s)?,
    })
}

/// Score every point in parallel; point `i` gets `stream.derive(i)`.
pub fn score_points<T, F>(points: &[Vector], stream: &RngStream, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Vector, &RngStream) -> Result<T> + Sync,
{
    points
        .par_iter()
        .enumerate()
        .map(|(i, x)| f(x, &stream.derive(i as u64)))
        .collect()
}

fn side(stream: &RngStream, ood: bool) -> RngStream {
    stream.derive(ood as u64)
}

/// Clean joint maximum probabilities.
pub fn clean_side(det: &JointDetector, points: &[Vector], stream: &RngStream) -> Result<Vec<f64>> {
    score_points(points, stream, |x, s| joint_confidence(det, x, s).map(|r| r.1))
}

/// Smoothing certificates of the joint maximum probability.
pub fn certified_side(det: &JointDetector, points: &[Vector], cfg: &SmoothingConfig, stream: &RngStream) -> Result<Vec<CertifiedScore>> {
    score_points(points, stream, |x, s| certified_l2_score(det, x, cfg, s))
}

/// IBP-certified upper bounds of the joint maximum probability.
pub fn linf_side(det: &JointDetector, points: &[Vector], epsilon: f64, box_half: f64) -> Result<Vec<f64>> {
    score_points(points, &RngStream::new(0), |x, _| guaranteed_linf_msp_upper(det, x, epsilon, box_half))
}

/// Attacked joint maximum probabilities. Uses the same per-point streams
/// as [`clean_side`], so each result is at least the clean score.
pub fn adversarial_side(
    det: &JointDetector,
    points: &[Vector],
    cfg: &AttackConfig,
    box_half: f64,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let score = |x: &[f64], s: &RngStream| joint_msp_and_gradient(det, x, s);
    score_points(points, stream, |z, s| pgd_maximize(&score, z, cfg, box_half, s).map(|r| r.score))
}

/// Joint maximum probability on both sides.
pub fn clean_scores(det: &JointDetector, id: &[Vector], ood: &[Vector], stream: &RngStream) -> Result<ScoreSet> {
    ScoreSet::new(
        clean_side(det, id, &side(stream, false))?,
        clean_side(det, ood, &side(stream, true))?,
        ScoreVariant::Clean,
    )
}

/// How the ID side of a guaranteed ℓ2 score set is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2IdScoring {
    /// Certified upper bound (0 on abstention), as on the OOD side.
    Certified,
    /// Clean joint maximum probability.
    Clean,
}

/// Smoothing-certified scores: the certified upper bound, or 0 when the
/// point cannot be certified.
pub fn guaranteed_scores_l2(
    det: &JointDetector,
    id: &[Vector],
    ood: &[Vector],
    cfg: &SmoothingConfig,
    id_scoring: L2IdScoring,
    stream: &RngStream,
) -> Result<ScoreSet> {
    let score = |c: Vec<CertifiedScore>| c.iter().map(CertifiedScore::score).collect::<Vec<_>>();
    let id_scores = match id_scoring {
        L2IdScoring::Certified => score(certified_side(det, id, cfg, &side(stream, false))?),
        L2IdScoring::Clean => clean_side(det, id, &side(stream, false))?,
    };
    ScoreSet::new(
        id_scores,
        score(certified_side(det, ood, cfg, &side(stream, true))?),
        ScoreVariant::GuaranteedL2,
    )
}

/// Clean scores on ID, IBP-certified upper bounds on OOD.
pub fn guaranteed_scores_linf(
    det: &JointDetector,
    id: &[Vector],
    ood: &[Vector],
    epsilon: f64,
    box_half: f64,
    stream: &RngStream,
) -> Result<ScoreSet> {
    if det.discriminator.is_none() {
        return Err(Error::domain(format!(
            "pipeline `{}` has no discriminator for ℓ∞ guarantees",
            det.kind.name()
        )));
    }
    ScoreSet::new(
        clean_side(det, id, &side(stream, false))?,
        linf_side(det, ood, epsilon, box_half)?,
        ScoreVariant::GuaranteedLinf,
    )
}

/// Clean scores on ID, attacked scores on OOD.
pub fn adversarial_scores(
    det: &JointDetector,
    id: &[Vector],
    ood: &[Vector],
    cfg: &AttackConfig,
    box_half: f64,
    stream: &RngStream,
) -> Result<ScoreSet> {
    ScoreSet::new(
        clean_side(det, id, &side(stream, false))?,
        adversarial_side(det, ood, cfg, box_half, &side(stream, true))?,
        ScoreVariant::Adversarial,
    )
}

/// Score-wise ordering: identical ID sides, and OOD scores
/// `clean ≤ adversarial ≤ guaranteed ℓ∞` pointwise.
pub fn check_ordering_chain(clean: &ScoreSet, adversarial: &ScoreSet, guaranteed: Option<&ScoreSet>) -> Result<()> {
    let mut sets = vec![clean, adversarial];
    sets.extend(guaranteed);
    for w in sets.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if lo.id_scores != hi.id_scores {
            return Err(Error::Invariant(format!(
                "{:?} and {:?} score sets disagree on ID scores",
                lo.variant, hi.variant
            )));
        }
        if lo.ood_scores.len() != hi.ood_scores.len() {
            return Err(Error::Invariant("score sets differ in OOD size".into()));
        }
        if let Some(i) = lo.ood_scores.iter().zip(&hi.ood_scores).position(|(a, b)| a > b) {
            return Err(Error::Invariant(format!(
                "OOD point {i}: {:?} score {} exceeds {:?} score {}",
                lo.variant, lo.ood_scores[i], hi.variant, hi.ood_scores[i]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(id: &[f64], ood: &[f64]) -> ScoreSet {
        ScoreSet::new(id.to_vec(), ood.to_vec(), ScoreVariant::Clean).unwrap()
    }

    fn auc_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut twice = 0u64;
        for a in id {
            for b in ood {
                twice += if a > b { 2 } else if a == b { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * id.len() * ood.len()) as f64
    }

    fn aupr_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut prev_tp = 0;
        let mut area = 0.0;
        for t in thresholds {
            let tp = id.iter().filter(|v| **v >= t).count();
            let fp = ood.iter().filter(|v| **v >= t).count();
            area += ((tp - prev_tp) as f64 / id.len() as f64) * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
        area
    }

    fn fpr_oracle(id: &[f64], ood: &[f64]) -> f64 {
        // scan every candidate threshold, keep the largest with TPR ≥ 0.95
        let mut best = f64::NEG_INFINITY;
        for t in id {
            let tp = id.iter().filter(|v| *v >= t).count();
            if 100 * tp >= 95 * id.len() && *t > best {
                best = *t;
            }
        }
        ood.iter().filter(|v| **v >= best).count() as f64 / ood.len() as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(auc(&set(&[0.3; 5], &[0.3; 4])).unwrap(), 0.5);
        assert_eq!(auc(&set(&[0.9, 0.4], &[0.5, 0.1])).unwrap(), 0.75);
        assert!(ScoreSet::new(vec![], vec![1.0], ScoreVariant::Clean).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        let mut rng = RngStream::new(3).rng();
        use rand::Rng;
        let id: Vec<f64> = (0..9000).map(|_| rng.random()).collect();
        let ood: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        assert!((aupr(&set(&id, &ood)).unwrap() - 0.9).abs() < 0.05);
    }

    #[test]
    fn fpr_examples() {
        let ones = vec![1.0; 20];
        assert_eq!(fpr_at_95_tpr(&set(&ones, &[0.0; 20])).unwrap(), 0.0);
        assert_eq!(fpr_at_95_tpr(&set(&[0.4; 30], &[0.4; 30])).unwrap(), 1.0);
        let id: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(fpr_at_95_tpr(&set(&id, &[0.5; 50])).unwrap(), 1.0);
        // τ is the 6th-smallest ID score; OOD just below it is rejected
        assert_eq!(fpr_at_95_tpr(&set(&id, &[0.059])).unwrap(), 0.0);
        assert_eq!(fpr_at_95_tpr(&set(&id, &[0.06])).unwrap(), 1.0);
        assert!(fpr_at_95_tpr(&set(&[1.0; 19], &[0.0])).is_err());
    }

    fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
        // small integer grid produces plenty of ties
        prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 4.0), 1..max)
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(id in scores(100), ood in scores(100)) {
            let s = set(&id, &ood);
            prop_assert_eq!(auc(&s).unwrap(), auc_oracle(&id, &ood));
            let flipped = set(&ood, &id);
            prop_assert!((auc(&s).unwrap() + auc(&flipped).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn aupr_matches_threshold_scan(id in scores(30), ood in scores(30)) {
            prop_assert_eq!(aupr(&set(&id, &ood)).unwrap(), aupr_oracle(&id, &ood));
        }

        #[test]
        fn fpr_matches_threshold_scan(id in prop::collection::vec((0u8..12).prop_map(|v| v as f64), 20..60), ood in scores(40)) {
            prop_assert_eq!(fpr_at_95_tpr(&set(&id, &ood)).unwrap(), fpr_oracle(&id, &ood));
        }

        #[test]
        fn invariant_under_monotone_maps(id in prop::collection::vec(-3.0f64..3.0, 20..50), ood in scores(40)) {
            let a = all_metrics(&set(&id, &ood)).unwrap();
            let f = |v: &f64| (2.0 * v).exp() + 1.0;
            let id2: Vec<f64> = id.iter().map(f).collect();
            let ood2: Vec<f64> = ood.iter().map(f).collect();
            prop_assert_eq!(a, all_metrics(&set(&id2, &ood2)).unwrap());
        }
    }

    #[test]
    fn ordering_chain_detects_violations() {
        let clean = set(&[0.9, 0.8], &[0.1, 0.2]);
        let mut adv = clean.clone();
        adv.variant = ScoreVariant::Adversarial;
        adv.ood_scores = vec![0.3, 0.2];
        let mut g = adv.clone();
        g.variant = ScoreVariant::GuaranteedLinf;
        g.ood_scores = vec![0.5, 0.9];
        assert!(check_ordering_chain(&clean, &adv, Some(&g)).is_ok());
        g.ood_scores[0] = 0.25;
        assert!(matches!(check_ordering_chain(&clean, &adv, Some(&g)), Err(Error::Invariant(_))));
    }
}

//! Inference-time domain classification of auxiliary agents.
//!
//! An auxiliary agent transmits its own detections `B_A` alongside its feature
//! map. The ego decodes the features with its frozen head into `B_pred`, matches
//! the two sets one-to-one, scores every prediction with a quality in `[0, 1]`
//! and integrates a soft precision/recall curve. Agents scoring at least `tau`
//! are routed to feature-level fusion, the rest to box-level fusion.

use serde::{Deserialize, Serialize};

use crate::assignment::match_by_iou;
use crate::error::{HydraError, Result};
use crate::geometry::{DetectionSet, FrameTag, IouMode};

pub type AgentId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Temperature of the confidence-consistency term.
    pub sigma_temp: f64,
    pub tau: f64,
    pub match_min_iou: f64,
    pub iou_mode: IouMode,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { sigma_temp: 0.5, tau: 0.2, match_min_iou: 0.01, iou_mode: IouMode::BevTimesHeight }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_temp > 0.0 && self.sigma_temp.is_finite()) {
            return Err(HydraError::invalid("classifier.sigma_temp", "must be a positive finite number"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(HydraError::invalid("classifier.tau", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.match_min_iou) {
            return Err(HydraError::invalid("classifier.match_min_iou", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Intermediate,
    Late,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainVerdict {
    pub agent_id: AgentId,
    pub s_domain: f64,
    pub branch: Branch,
}

impl DomainVerdict {
    pub fn new(agent_id: AgentId, s_domain: f64, tau: f64) -> Self {
        let branch = if s_domain >= tau { Branch::Intermediate } else { Branch::Late };
        Self { agent_id, s_domain, branch }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScoredPrediction {
    pub pred_index: usize,
    pub confidence: f64,
    /// Zero exactly when the prediction found no partner.
    pub quality: f64,
}

/// Geometric mean of confidence consistency `exp(-|c_gt - c_pred| / sigma)` and IoU.
pub fn quality_score(c_gt: f64, c_pred: f64, iou: f64, sigma_temp: f64) -> f64 {
    let s_conf = (-(c_gt - c_pred).abs() / sigma_temp).exp();
    (s_conf * iou.clamp(0.0, 1.0)).sqrt().clamp(0.0, 1.0)
}

/// Area under the soft precision/recall curve.
///
/// Predictions are ranked by confidence (ties by index). At rank `m`,
/// precision is the mean quality of the top `m` and recall is their summed
/// quality over `n_gt`; the area is accumulated by the rectangle rule.
pub fn soft_ap(scored: &[QualityScoredPrediction], n_gt: usize) -> f64 {
    if n_gt == 0 || scored.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<&QualityScoredPrediction> = scored.iter().collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.pred_index.cmp(&b.pred_index)));

    let n_gt = n_gt as f64;
    let mut cum = 0.0;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for (m, p) in ranked.iter().enumerate() {
        cum += p.quality;
        let precision = cum / (m + 1) as f64;
        let recall = cum / n_gt;
        assert!(recall >= prev_recall, "soft recall must be non-decreasing");
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area.clamp(0.0, 1.0)
}

/// Scores each prediction of `b_pred` against the pseudo-ground-truth `b_a`.
pub fn score_predictions(b_a: &DetectionSet, b_pred: &DetectionSet, cfg: &ClassifierConfig) -> Vec<QualityScoredPrediction> {
    let matches = match_by_iou(b_a, b_pred, cfg.match_min_iou, cfg.iou_mode);
    let mut scored: Vec<QualityScoredPrediction> =
        b_pred.iter().enumerate().map(|(k, d)| QualityScoredPrediction { pred_index: k, confidence: d.confidence, quality: 0.0 }).collect();
    for pair in &matches.pairs {
        let c_gt = b_a.detections[pair.gt].confidence;
        let s = &mut scored[pair.pred];
        s.quality = quality_score(c_gt, s.confidence, pair.iou, cfg.sigma_temp);
    }
    scored
}

/// Domain-similarity score and routing decision for one auxiliary agent.
///
/// Both sets must be in the agent's local frame, so the result never depends
/// on the agent's reported global pose.
pub fn classify_agent(agent_id: AgentId, b_a: &DetectionSet, b_pred: &DetectionSet, cfg: &ClassifierConfig) -> DomainVerdict {
    assert_eq!(b_a.frame, FrameTag::AgentLocal, "classifier input must be agent-local");
    assert_eq!(b_pred.frame, FrameTag::AgentLocal, "classifier input must be agent-local");
    let scored = score_predictions(b_a, b_pred, cfg);
    DomainVerdict::new(agent_id, soft_ap(&scored, b_a.len()), cfg.tau)
}

/// Splits verdicts into `(intermediate, late)` id lists, preserving input order.
pub fn partition(verdicts: &[DomainVerdict]) -> (Vec<AgentId>, Vec<AgentId>) {
    let mut intermediate = Vec::new();
    let mut late = Vec::new();
    for v in verdicts {
        match v.branch {
            Branch::Intermediate => intermediate.push(v.agent_id),
            Branch::Late => late.push(v.agent_id),
        }
    }
    (intermediate, late)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Detection, ObjectClass};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Direct transcription of the curve definition with explicit prefix sums.
    fn soft_ap_reference(items: &[(f64, usize, f64)], n_gt: usize) -> f64 {
        if n_gt == 0 || items.is_empty() {
            return 0.0;
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&a, &b| items[b].0.partial_cmp(&items[a].0).unwrap().then(items[a].1.cmp(&items[b].1)));
        let q: Vec<f64> = order.iter().map(|&i| items[i].2).collect();
        let prefix: Vec<f64> = (0..=q.len()).map(|m| q[..m].iter().sum()).collect();
        let mut total = 0.0;
        for m in 1..=q.len() {
            let p_m = prefix[m] / m as f64;
            let r_m = prefix[m] / n_gt as f64;
            let r_prev = prefix[m - 1] / n_gt as f64;
            total += (r_m - r_prev) * p_m;
        }
        total.clamp(0.0, 1.0)
    }

    fn sp(k: usize, c: f64, q: f64) -> QualityScoredPrediction {
        QualityScoredPrediction { pred_index: k, confidence: c, quality: q }
    }

    fn vbox(x: f64, y: f64, conf: f64) -> Detection {
        Detection::new([x, y, 0.8], [4.5, 1.9, 1.6], 0.1, ObjectClass::Vehicle, conf)
    }

    #[test]
    fn quality_examples() {
        assert_abs_diff_eq!(quality_score(0.8, 0.8, 1.0, 0.5), 1.0, epsilon = 1e-15);
        assert_eq!(quality_score(0.8, 0.3, 0.0, 0.5), 0.0);
        let expected = ((-0.4f64).exp() * 0.5).sqrt();
        assert_abs_diff_eq!(quality_score(0.7, 0.5, 0.5, 0.5), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.5789, epsilon = 1e-4);
    }

    #[test]
    fn soft_ap_examples() {
        let perfect: Vec<_> = (0..4).map(|k| sp(k, 0.9 - 0.1 * k as f64, 1.0)).collect();
        assert_abs_diff_eq!(soft_ap(&perfect, 4), 1.0, epsilon = 1e-15);
        assert_eq!(soft_ap(&[], 3), 0.0);
        assert_eq!(soft_ap(&perfect, 0), 0.0);

        let pair = [sp(0, 0.9, 0.8944), sp(1, 0.5, 0.5789)];
        let reference = soft_ap_reference(&[(0.9, 0, 0.8944), (0.5, 1, 0.5789)], 2);
        assert_abs_diff_eq!(soft_ap(&pair, 2), reference, epsilon = 1e-15);
        assert_abs_diff_eq!(soft_ap(&pair, 2), 0.6132, epsilon = 1e-3);
        // Order of the input must not matter.
        assert_abs_diff_eq!(soft_ap(&[pair[1], pair[0]], 2), reference, epsilon = 1e-15);
    }

    #[test]
    fn confidence_ties_break_by_index() {
        let a = [sp(0, 0.5, 1.0), sp(1, 0.5, 0.0)];
        let b = [sp(1, 0.5, 1.0), sp(0, 0.5, 0.0)];
        // Index 0 leads in both cases.
        assert_abs_diff_eq!(soft_ap(&a, 2), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(soft_ap(&b, 2), 0.5 * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn classify_examples() {
        let cfg = ClassifierConfig::default();
        let b_a = DetectionSet::new(FrameTag::AgentLocal, vec![vbox(0.0, 0.0, 0.9), vbox(12.0, 3.0, 0.7), vbox(-9.0, 5.0, 0.6)]);
        let v = classify_agent(3, &b_a, &b_a, &cfg);
        assert_abs_diff_eq!(v.s_domain, 1.0, epsilon = 1e-12);
        assert_eq!(v.branch, Branch::Intermediate);
        let v = classify_agent(4, &b_a, &DetectionSet::empty(FrameTag::AgentLocal), &cfg);
        assert_eq!((v.s_domain, v.branch), (0.0, Branch::Late));
        // Agent sent nothing: routed late.
        let v = classify_agent(5, &DetectionSet::empty(FrameTag::AgentLocal), &b_a, &cfg);
        assert_eq!((v.s_domain, v.branch), (0.0, Branch::Late));
    }

    #[test]
    fn partition_examples() {
        let v = |id, s| DomainVerdict::new(id, s, 0.2);
        assert_eq!(partition(&[v(1, 0.5), v(2, 0.3)]), (vec![1, 2], vec![]));
        assert_eq!(partition(&[v(1, 0.05), v(2, 0.1)]), (vec![], vec![1, 2]));
        assert_eq!(partition(&[v(7, 0.51), v(9, 0.007)]), (vec![7], vec![9]));
        // Exactly at the threshold goes intermediate.
        assert_eq!(v(1, 0.2).branch, Branch::Intermediate);
    }

    #[test]
    fn config_validation() {
        assert!(ClassifierConfig::default().validate().is_ok());
        let bad = ClassifierConfig { sigma_temp: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ClassifierConfig { tau: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn arb_scored() -> impl Strategy<Value = (Vec<(f64, usize, f64)>, usize)> {
        (proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64), 0..20), 0usize..25)
            .prop_map(|(v, n)| (v.into_iter().enumerate().map(|(k, (c, q))| (c, k, q)).collect(), n))
    }

    proptest! {
        #[test]
        fn soft_ap_matches_reference((items, n_gt) in arb_scored()) {
            let scored: Vec<_> = items.iter().map(|&(c, k, q)| sp(k, c, q)).collect();
            let got = soft_ap(&scored, n_gt);
            prop_assert!((0.0..=1.0).contains(&got));
            prop_assert!((got - soft_ap_reference(&items, n_gt)).abs() <= 1e-12);
        }

        #[test]
        fn shrinking_iou_never_raises_score(offsets in proptest::collection::vec(0.0..1.5f64, 1..6), extra in 0.01..1.0f64, which in 0usize..6) {
            let cfg = ClassifierConfig::default();
            let b_a = DetectionSet::new(FrameTag::AgentLocal, (0..offsets.len()).map(|i| vbox(15.0 * i as f64, 0.0, 0.8)).collect());
            let pred: Vec<Detection> = offsets.iter().enumerate().map(|(i, o)| vbox(15.0 * i as f64 + o, 0.0, 0.7)).collect();
            let base = classify_agent(0, &b_a, &DetectionSet::new(FrameTag::AgentLocal, pred.clone()), &cfg).s_domain;
            let mut worse = pred;
            let i = which % worse.len();
            worse[i].center[0] += extra;
            let s = classify_agent(0, &b_a, &DetectionSet::new(FrameTag::AgentLocal, worse), &cfg).s_domain;
            prop_assert!(s <= base + 1e-15);
        }
    }
}

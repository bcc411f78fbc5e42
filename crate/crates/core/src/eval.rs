//! Detection metrics: per-class average precision at several 3D IoU
//! thresholds, accumulated over a dataset, and pose-error summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::AgentId;
use crate::geometry::{iou_3d, wrap_angle, Detection, DetectionSet, FrameTag, ObjectClass, Pose2};

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Clone, Copy, PartialEq)]
struct Record {
    confidence: f64,
    frame: usize,
    index: usize,
    tp: [bool; 3],
}

/// Running TP/FP lists per class. Merging is order-independent because the
/// final ranking breaks confidence ties by `(frame, index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApAccumulator {
    records: BTreeMap<ObjectClass, Vec<Record>>,
    n_gt: BTreeMap<ObjectClass, usize>,
}

/// Greedy matching of confidence-ranked predictions to the highest-IoU unused
/// ground truth of the same class. Returns a TP flag per prediction.
pub fn greedy_tp(preds: &[Detection], truth: &[Detection], thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let mut used = vec![false; truth.len()];
    let mut tp = vec![false; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, t) in truth.iter().enumerate() {
            if used[g] || t.class != preds[i].class {
                continue;
            }
            let v = iou_3d(&preds[i], t);
            if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp[i] = true;
        }
    }
    tp
}

/// All-point AP from TP flags already in rank order: `sum ΔR · P`.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (m, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
            ap += (1.0 / n_gt as f64) * (hits as f64 / (m + 1) as f64);
        }
    }
    ap
}

/// Single-frame, single-threshold AP over one class's boxes.
pub fn average_precision(preds: &[Detection], truth: &[Detection], thresh: f64) -> f64 {
    let tp = greedy_tp(preds, truth, thresh);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    let ranked: Vec<bool> = order.iter().map(|&i| tp[i]).collect();
    ap_from_ranked(&ranked, truth.len())
}

impl ApAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_frame(&mut self, frame: usize, preds: &DetectionSet, truth: &[Detection]) {
        assert_eq!(preds.frame, FrameTag::EgoGlobal, "evaluation runs in the ego frame");
        for class in ObjectClass::ALL {
            let p: Vec<(usize, Detection)> = preds.iter().enumerate().filter(|(_, d)| d.class == class).map(|(i, d)| (i, *d)).collect();
            let t: Vec<Detection> = truth.iter().filter(|d| d.class == class).copied().collect();
            *self.n_gt.entry(class).or_default() += t.len();
            let boxes: Vec<Detection> = p.iter().map(|(_, d)| *d).collect();
            let flags: Vec<Vec<bool>> = IOU_THRESHOLDS.iter().map(|&th| greedy_tp(&boxes, &t, th)).collect();
            let recs = self.records.entry(class).or_default();
            for (j, (index, d)) in p.iter().enumerate() {
                recs.push(Record { confidence: d.confidence, frame, index: *index, tp: [flags[0][j], flags[1][j], flags[2][j]] });
            }
        }
    }

    pub fn merge(&mut self, other: &ApAccumulator) {
        for (c, r) in &other.records {
            self.records.entry(*c).or_default().extend_from_slice(r);
        }
        for (c, n) in &other.n_gt {
            *self.n_gt.entry(*c).or_default() += n;
        }
    }

    pub fn report(&self) -> ApReport {
        let mut per_class = BTreeMap::new();
        for class in ObjectClass::ALL {
            let mut recs = self.records.get(&class).cloned().unwrap_or_default();
            recs.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.frame.cmp(&b.frame)).then(a.index.cmp(&b.index)));
            let n_gt = self.n_gt.get(&class).copied().unwrap_or(0);
            let mut entry = ClassAp { n_gt, n_pred: recs.len(), ..ClassAp::default() };
            for t in 0..IOU_THRESHOLDS.len() {
                let ranked: Vec<bool> = recs.iter().map(|r| r.tp[t]).collect();
                entry.ap[t] = ap_from_ranked(&ranked, n_gt);
                entry.tp[t] = ranked.iter().filter(|&&x| x).count();
                entry.fp[t] = recs.len() - entry.tp[t];
                entry.fn_[t] = n_gt - entry.tp[t];
            }
            per_class.insert(class, entry);
        }
        let mut total = [0.0; 3];
        for (t, slot) in total.iter_mut().enumerate() {
            *slot = per_class.values().map(|c| c.ap[t]).sum::<f64>() / per_class.len() as f64;
        }
        ApReport { per_class, total }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassAp {
    /// AP at 0.3, 0.5 and 0.7.
    pub ap: [f64; 3],
    pub n_gt: usize,
    pub n_pred: usize,
    pub tp: [usize; 3],
    pub fp: [usize; 3],
    #[serde(rename = "fn")]
    pub fn_: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<ObjectClass, ClassAp>,
    /// Unweighted class mean at each threshold.
    pub total: [f64; 3],
}

impl ApReport {
    pub fn at(&self, thresh: f64) -> f64 {
        let t = IOU_THRESHOLDS.iter().position(|&x| (x - thresh).abs() < 1e-9).expect("threshold must be one of 0.3, 0.5, 0.7");
        self.total[t]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseErrorStats {
    pub count: usize,
    pub mean_translation: f64,
    pub max_translation: f64,
    /// Radians.
    pub mean_yaw: f64,
    pub max_yaw: f64,
}

/// Translation and heading errors of estimated poses against ground truth,
/// over agents present in both maps.
pub fn pose_error_stats(estimates: &BTreeMap<AgentId, Pose2>, truth: &BTreeMap<AgentId, Pose2>) -> PoseErrorStats {
    let errs: Vec<(f64, f64)> =
        estimates.iter().filter_map(|(id, e)| truth.get(id).map(|t| (pose_translation_error(e, t), wrap_angle(e.yaw - t.yaw).abs()))).collect();
    summarize(&errs)
}

pub fn pose_translation_error(a: &Pose2, b: &Pose2) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

pub(crate) fn summarize(errs: &[(f64, f64)]) -> PoseErrorStats {
    if errs.is_empty() {
        return PoseErrorStats::default();
    }
    let n = errs.len() as f64;
    PoseErrorStats {
        count: errs.len(),
        mean_translation: errs.iter().map(|e| e.0).sum::<f64>() / n,
        max_translation: errs.iter().map(|e| e.0).fold(0.0, f64::max),
        mean_yaw: errs.iter().map(|e| e.1).sum::<f64>() / n,
        max_yaw: errs.iter().map(|e| e.1).fold(0.0, f64::max),
    }
}

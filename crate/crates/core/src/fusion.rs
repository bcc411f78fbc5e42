//! Two-stage hybrid fusion.
//!
//! Compatible agents contribute through feature-level fusion (stage 1, an
//! external operator behind [`Stage1Fusion`]). Everyone else ships boxes,
//! which are pose-corrected against the stage-1 boxes, pooled in the ego
//! frame and reduced with per-class greedy NMS.

use serde::{Deserialize, Serialize};

use crate::domain::{classify_agent, partition, AgentId, Branch, ClassifierConfig, DomainVerdict};
use crate::error::{HydraError, Result};
use crate::geometry::{iou_3d, DetectionSet, FrameTag, Pose2};
use crate::pgo::{run_agpgo, run_all_variable, LateAgent, PgoConfig, PgoResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub nms_iou: f64,
    pub score_floor: f64,
    /// Suppress only within a class.
    pub per_class: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { nms_iou: 0.3, score_floor: 0.1, per_class: true }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(HydraError::invalid("fusion.nms_iou", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.score_floor) {
            return Err(HydraError::invalid("fusion.score_floor", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One auxiliary agent's payload for a single timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrame {
    pub agent_id: AgentId,
    /// The agent's own detections `B_A`, agent-local.
    pub detections: DetectionSet,
    /// Reported global pose (possibly noisy).
    pub pose: Pose2,
    /// The ego decoder's reading of this agent's features, agent-local.
    pub decoded: DetectionSet,
}

/// Where a pooled box came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Stage1,
    Agent(AgentId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledSet {
    pub set: DetectionSet,
    pub sources: Vec<Source>,
}

/// Union of the stage-1 boxes and every late agent's boxes lifted into the ego frame.
pub fn pool_to_global(stage1: &DetectionSet, late_agents: &[(AgentId, Pose2, &DetectionSet)]) -> PooledSet {
    assert_eq!(stage1.frame, FrameTag::EgoGlobal, "stage-1 boxes must be ego-global");
    let mut set = stage1.clone();
    let mut sources = vec![Source::Stage1; stage1.len()];
    for &(id, pose, dets) in late_agents {
        assert_eq!(dets.frame, FrameTag::AgentLocal, "late-agent boxes must be agent-local");
        set.detections.extend(dets.transformed(&pose, FrameTag::EgoGlobal).detections);
        sources.extend(std::iter::repeat_n(Source::Agent(id), dets.len()));
    }
    PooledSet { set, sources }
}

/// Indices of the boxes kept by greedy confidence-ranked suppression, in rank order.
pub fn nms_indices(pool: &DetectionSet, cfg: &FusionConfig) -> Vec<usize> {
    assert_eq!(pool.frame, FrameTag::EgoGlobal, "NMS input must be ego-global");
    let mut order: Vec<usize> = (0..pool.len()).filter(|&i| pool.detections[i].confidence >= cfg.score_floor).collect();
    // Stable sort keeps input order among equal confidences.
    order.sort_by(|&a, &b| pool.detections[b].confidence.total_cmp(&pool.detections[a].confidence));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &pool.detections[i];
        let suppressed = kept.iter().any(|&k| {
            let kd = &pool.detections[k];
            (!cfg.per_class || kd.class == d.class) && iou_3d(kd, d) >= cfg.nms_iou
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(pool: &DetectionSet, cfg: &FusionConfig) -> DetectionSet {
    let kept = nms_indices(pool, cfg);
    DetectionSet::new(FrameTag::EgoGlobal, kept.into_iter().map(|i| pool.detections[i]).collect())
}

/// The feature-level fusion operator: fuses the ego with the given agents and
/// decodes ego-global boxes.
pub trait Stage1Fusion {
    fn fuse(&self, intermediate_ids: &[AgentId]) -> DetectionSet;
}

/// How auxiliary agents are assigned to the two fusion paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Ego alone; auxiliary agents ignored.
    EgoOnly,
    /// Every auxiliary agent joins feature fusion.
    AllIntermediate,
    /// Every auxiliary agent is fused at the box level.
    AllLate,
    /// Route by domain score.
    Classified,
    /// No classifier: every agent joins feature fusion and its boxes are
    /// also late-fused, since nothing tells the two groups apart.
    Blind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseCorrection {
    Off,
    /// Late agents only, against fixed stage-1 anchors.
    Anchored,
    /// Late agents and stage-1 objects optimized jointly.
    AllVariable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub classifier: ClassifierConfig,
    pub pgo: PgoConfig,
    pub fusion: FusionConfig,
    pub routing: Routing,
    pub correction: PoseCorrection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub final_set: DetectionSet,
    pub sources: Vec<Source>,
    pub verdicts: Vec<DomainVerdict>,
    pub intermediate_ids: Vec<AgentId>,
    pub late_ids: Vec<AgentId>,
    pub stage1: DetectionSet,
    /// Present whenever pose correction ran on a non-empty late set.
    pub pgo: Option<PgoResult>,
}

/// classify → stage 1 → pose correction → pool → NMS.
pub fn hydra_pipeline(aux_frames: &[AgentFrame], stage1_op: &dyn Stage1Fusion, opts: &PipelineOptions) -> PipelineOutput {
    let all_ids: Vec<AgentId> = aux_frames.iter().map(|f| f.agent_id).collect();
    let mut verdicts = Vec::new();
    let (intermediate_ids, late_ids) = match opts.routing {
        Routing::EgoOnly => (Vec::new(), Vec::new()),
        Routing::AllIntermediate => (all_ids.clone(), Vec::new()),
        Routing::AllLate => (Vec::new(), all_ids.clone()),
        Routing::Blind => (all_ids.clone(), all_ids.clone()),
        Routing::Classified => {
            verdicts = aux_frames.iter().map(|f| classify_agent(f.agent_id, &f.detections, &f.decoded, &opts.classifier)).collect();
            partition(&verdicts)
        }
    };

    let mut stage1 = stage1_op.fuse(&intermediate_ids);
    assert_eq!(stage1.frame, FrameTag::EgoGlobal, "stage-1 output must be ego-global");

    let late_frames: Vec<&AgentFrame> = aux_frames.iter().filter(|f| late_ids.contains(&f.agent_id)).collect();
    let late_agents: Vec<LateAgent> =
        late_frames.iter().map(|f| LateAgent { agent_id: f.agent_id, pose_estimate: f.pose, detections: f.detections.clone() }).collect();

    let pgo = match opts.correction {
        _ if late_agents.is_empty() => None,
        PoseCorrection::Off => None,
        PoseCorrection::Anchored => Some(run_agpgo(&stage1, &late_agents, &opts.pgo)),
        PoseCorrection::AllVariable => {
            let joint = run_all_variable(&stage1, &late_agents, &opts.pgo);
            for (d, p) in stage1.detections.iter_mut().zip(&joint.objects) {
                *d = d.with_bev_pose(p);
            }
            Some(joint.pgo)
        }
    };

    let poses: Vec<(AgentId, Pose2, &DetectionSet)> = late_frames
        .iter()
        .map(|f| {
            let pose = pgo.as_ref().and_then(|r| r.corrected.get(&f.agent_id).copied()).unwrap_or(f.pose);
            (f.agent_id, pose, &f.detections)
        })
        .collect();
    let pooled = pool_to_global(&stage1, &poses);
    let kept = nms_indices(&pooled.set, &opts.fusion);
    PipelineOutput {
        final_set: DetectionSet::new(FrameTag::EgoGlobal, kept.iter().map(|&i| pooled.set.detections[i]).collect()),
        sources: kept.iter().map(|&i| pooled.sources[i]).collect(),
        verdicts,
        intermediate_ids,
        late_ids,
        stage1,
        pgo,
    }
}

/// Convenience for reporting: the branch an agent ended up on, if classified.
pub fn branch_of(verdicts: &[DomainVerdict], id: AgentId) -> Option<Branch> {
    verdicts.iter().find(|v| v.agent_id == id).map(|v| v.branch)
}

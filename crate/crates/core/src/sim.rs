//! Deterministic scenario generator.
//!
//! Stands in for sensors, per-agent detectors, the ego decoder reading other
//! agents' features, and the feature-level fusion network. Every random draw
//! comes from a ChaCha stream keyed by `(seed, frame, purpose, ids...)`, so a
//! frame is a pure function of its config and index, and methods that share a
//! frame see exactly the same draws.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::AgentId;
use crate::error::{HydraError, Result};
use crate::fusion::{AgentFrame, Stage1Fusion};
use crate::geometry::{bev_intersection_area, transform_detection, Detection, DetectionSet, FrameTag, ObjectClass, Pose2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ego,
    Homogeneous,
    HetLatent,
    HetArch,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Ego, AgentKind::Homogeneous, AgentKind::HetLatent, AgentKind::HetArch];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Ego => "ego",
            AgentKind::Homogeneous => "homogeneous",
            AgentKind::HetLatent => "het_latent",
            AgentKind::HetArch => "het_arch",
        }
    }
}

/// Single-agent detector surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectModel {
    pub recall_prob: f64,
    pub pos_sigma: f64,
    /// Radians.
    pub yaw_sigma: f64,
    pub conf_mean: f64,
    pub conf_spread: f64,
    /// Expected false positives per frame.
    pub fp_rate: f64,
    pub fp_conf_mean: f64,
    pub fov_range: f64,
}

impl Default for DetectModel {
    fn default() -> Self {
        Self {
            recall_prob: 0.85,
            pos_sigma: 0.2,
            yaw_sigma: 0.03,
            conf_mean: 0.85,
            conf_spread: 0.1,
            fp_rate: 1.0,
            fp_conf_mean: 0.35,
            fov_range: 60.0,
        }
    }
}

/// How the ego decoder reads an agent's features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecodeModel {
    Faithful { jitter_sigma: f64, conf_jitter: f64 },
    Degraded { drop_prob: f64, offset_sigma: f64, conf_noise: f64, hallucination_rate: f64 },
}

impl DecodeModel {
    pub fn faithful() -> Self {
        DecodeModel::Faithful { jitter_sigma: 0.15, conf_jitter: 0.05 }
    }

    pub fn moderate() -> Self {
        DecodeModel::Degraded { drop_prob: 0.5, offset_sigma: 3.0, conf_noise: 0.3, hallucination_rate: 2.0 }
    }

    pub fn extreme() -> Self {
        DecodeModel::Degraded { drop_prob: 0.8, offset_sigma: 5.0, conf_noise: 0.4, hallucination_rate: 3.0 }
    }

    pub fn is_faithful(&self) -> bool {
        matches!(self, DecodeModel::Faithful { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    Fixed {
        x: f64,
        y: f64,
        yaw: f64,
    },
    /// Uniform position in the box, uniform heading.
    Random {
        x_range: [f64; 2],
        y_range: [f64; 2],
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: AgentId,
    pub kind: AgentKind,
    pub placement: Placement,
    pub detect: DetectModel,
    pub decode: DecodeModel,
}

impl AgentSpec {
    /// Built-in defaults for an agent of the given kind.
    pub fn for_kind(id: AgentId, kind: AgentKind) -> Self {
        let near = Placement::Random { x_range: [-60.0, 60.0], y_range: [-30.0, 30.0] };
        let (placement, detect, decode) = match kind {
            AgentKind::Ego => {
                (Placement::Fixed { x: 0.0, y: 0.0, yaw: 0.0 }, DetectModel::default(), DecodeModel::Faithful { jitter_sigma: 0.0, conf_jitter: 0.0 })
            }
            AgentKind::Homogeneous => (near, DetectModel::default(), DecodeModel::faithful()),
            AgentKind::HetLatent => (near, DetectModel::default(), DecodeModel::moderate()),
            AgentKind::HetArch => {
                (near, DetectModel { recall_prob: 0.8, pos_sigma: 0.3, yaw_sigma: 0.04, ..DetectModel::default() }, DecodeModel::extreme())
            }
        };
        Self { id, kind, placement, detect, decode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapExtent {
    /// Half-width along x (m).
    pub x: f64,
    pub y: f64,
}

impl Default for MapExtent {
    fn default() -> Self {
        Self { x: 140.8, y: 40.0 }
    }
}

impl MapExtent {
    fn contains(&self, p: [f64; 2]) -> bool {
        p[0].abs() <= self.x && p[1].abs() <= self.y
    }

    fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0].clamp(-self.x, self.x), p[1].clamp(-self.y, self.y)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectCounts {
    pub vehicle: usize,
    pub pedestrian: usize,
    pub truck: usize,
}

impl Default for ObjectCounts {
    fn default() -> Self {
        Self { vehicle: 40, pedestrian: 16, truck: 8 }
    }
}

impl ObjectCounts {
    pub fn get(&self, class: ObjectClass) -> usize {
        match class {
            ObjectClass::Vehicle => self.vehicle,
            ObjectClass::Pedestrian => self.pedestrian,
            ObjectClass::Truck => self.truck,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub map_extent: MapExtent,
    pub object_counts: ObjectCounts,
    /// Meters, on x and y of every transmitted pose.
    pub pose_noise_sigma: f64,
    /// Degrees.
    pub heading_noise_sigma: f64,
    /// Attention weight of a non-faithful feature map in stage-1 fusion,
    /// relative to 1 for the ego and faithful participants.
    pub foreign_feature_weight: f64,
    /// When set, the auxiliary specs are cycled (with fresh ids) until the
    /// scenario holds this many agents including the ego.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent_count: Option<usize>,
    pub agents: Vec<AgentSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 50,
            map_extent: MapExtent::default(),
            object_counts: ObjectCounts::default(),
            pose_noise_sigma: 0.0,
            heading_noise_sigma: 0.4,
            foreign_feature_weight: 0.1,
            agent_count: None,
            agents: vec![
                AgentSpec::for_kind(0, AgentKind::Ego),
                AgentSpec::for_kind(1, AgentKind::Homogeneous),
                AgentSpec::for_kind(2, AgentKind::HetLatent),
                AgentSpec::for_kind(3, AgentKind::HetLatent),
            ],
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.map_extent.x > 0.0 && self.map_extent.y > 0.0) {
            return Err(HydraError::invalid("scenario.map_extent", "extents must be positive"));
        }
        if !(self.pose_noise_sigma >= 0.0 && self.pose_noise_sigma.is_finite()) {
            return Err(HydraError::invalid("scenario.pose_noise_sigma", "must be a non-negative finite number"));
        }
        if !(self.heading_noise_sigma >= 0.0 && self.heading_noise_sigma.is_finite()) {
            return Err(HydraError::invalid("scenario.heading_noise_sigma", "must be a non-negative finite number"));
        }
        if !(self.foreign_feature_weight > 0.0 && self.foreign_feature_weight <= 1.0) {
            return Err(HydraError::invalid("scenario.foreign_feature_weight", "must lie in (0, 1]"));
        }
        if let Some(n) = self.agent_count {
            if n == 0 {
                return Err(HydraError::invalid("scenario.agent_count", "must include the ego"));
            }
        }
        let egos = self.agents.iter().filter(|a| a.kind == AgentKind::Ego).count();
        if egos != 1 {
            return Err(HydraError::invalid("scenario.agents", format!("expected exactly one ego agent, found {egos}")));
        }
        let mut ids: Vec<AgentId> = self.agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(HydraError::invalid("scenario.agents", "agent ids must be unique"));
        }
        for a in &self.agents {
            validate_agent(a)?;
        }
        Ok(())
    }

    /// Expands `agent_count` into an explicit agent list.
    pub fn resolved(&self) -> ScenarioConfig {
        let mut out = self.clone();
        let Some(n) = out.agent_count.take() else {
            return out;
        };
        let ego: Vec<AgentSpec> = self.agents.iter().filter(|a| a.kind == AgentKind::Ego).copied().collect();
        let aux: Vec<AgentSpec> = self.agents.iter().filter(|a| a.kind != AgentKind::Ego).copied().collect();
        let mut agents = ego;
        let mut next_id = self.agents.iter().map(|a| a.id).max().map_or(0, |m| m + 1);
        for i in 0..n.saturating_sub(1) {
            if aux.is_empty() {
                break;
            }
            let mut spec = aux[i % aux.len()];
            if i >= aux.len() {
                spec.id = next_id;
                next_id += 1;
            }
            agents.push(spec);
        }
        out.agents = agents;
        out
    }

    pub fn ego(&self) -> &AgentSpec {
        self.agents.iter().find(|a| a.kind == AgentKind::Ego).expect("validated scenario has an ego")
    }

    pub fn aux(&self) -> impl Iterator<Item = &AgentSpec> {
        self.agents.iter().filter(|a| a.kind != AgentKind::Ego)
    }

    pub fn agent(&self, id: AgentId) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.id == id)
    }
}

fn validate_agent(a: &AgentSpec) -> Result<()> {
    let key = |field: &str| format!("scenario.agents[id={}].{field}", a.id);
    let d = &a.detect;
    for (f, v) in [("detect.recall_prob", d.recall_prob), ("detect.conf_mean", d.conf_mean), ("detect.fp_conf_mean", d.fp_conf_mean)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(HydraError::invalid(key(f), "must lie in [0, 1]"));
        }
    }
    for (f, v) in
        [("detect.pos_sigma", d.pos_sigma), ("detect.yaw_sigma", d.yaw_sigma), ("detect.conf_spread", d.conf_spread), ("detect.fp_rate", d.fp_rate)]
    {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(HydraError::invalid(key(f), "must be a non-negative finite number"));
        }
    }
    if !(d.fov_range > 0.0 && d.fov_range.is_finite()) {
        return Err(HydraError::invalid(key("detect.fov_range"), "must be positive"));
    }
    match a.decode {
        DecodeModel::Faithful { jitter_sigma, conf_jitter } => {
            if !(jitter_sigma >= 0.0 && conf_jitter >= 0.0) {
                return Err(HydraError::invalid(key("decode"), "jitter must be non-negative"));
            }
        }
        DecodeModel::Degraded { drop_prob, offset_sigma, conf_noise, hallucination_rate } => {
            if !(0.0..=1.0).contains(&drop_prob) {
                return Err(HydraError::invalid(key("decode.drop_prob"), "must lie in [0, 1]"));
            }
            if !(offset_sigma >= 0.0 && conf_noise >= 0.0 && hallucination_rate >= 0.0) {
                return Err(HydraError::invalid(key("decode"), "noise parameters must be non-negative"));
            }
        }
    }
    if let Placement::Random { x_range, y_range } = a.placement {
        if x_range[0] > x_range[1] || y_range[0] > y_range[1] {
            return Err(HydraError::invalid(key("placement"), "ranges must be ordered [low, high]"));
        }
    }
    Ok(())
}

/// Stream tags for sub-generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Scene = 1,
    Placement = 2,
    Sense = 3,
    Decode = 4,
    PoseNoise = 5,
    Stage1 = 6,
    Stage1Mix = 7,
    Stage1Fp = 8,
    Hallucinate = 9,
    Stage1Conf = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of integers.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Sub-generator factory for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameKey {
    pub seed: u64,
    pub frame: u64,
}

impl FrameKey {
    pub fn new(seed: u64, frame: usize) -> Self {
        Self { seed, frame: frame as u64 }
    }

    pub fn rng(&self, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, self.frame, purpose as u64, a, b]))
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn poisson(rng: &mut impl Rng, rate: f64) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as usize
}

fn random_class(rng: &mut impl Rng) -> ObjectClass {
    let u: f64 = rng.gen();
    if u < 0.6 {
        ObjectClass::Vehicle
    } else if u < 0.9 {
        ObjectClass::Pedestrian
    } else {
        ObjectClass::Truck
    }
}

fn uniform_in_disk(rng: &mut impl Rng, center: [f64; 2], radius: f64) -> [f64; 2] {
    let r = radius * rng.gen::<f64>().sqrt();
    let t = 2.0 * PI * rng.gen::<f64>();
    [center[0] + r * t.cos(), center[1] + r * t.sin()]
}

/// A random box inside the disk (and the extent, when possible).
fn spurious_box(rng: &mut impl Rng, center: [f64; 2], radius: f64, extent: &MapExtent, conf: f64) -> Detection {
    let mut p = uniform_in_disk(rng, center, radius);
    for _ in 0..32 {
        if extent.contains(p) {
            break;
        }
        p = uniform_in_disk(rng, center, radius);
    }
    let p = extent.clamp(p);
    let class = random_class(rng);
    let size = class.nominal_size();
    let yaw = rng.gen_range(-PI..PI);
    Detection::new([p[0], p[1], size[2] / 2.0], size, yaw, class, conf)
}

/// Ground truth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frame: usize,
    /// Ego-global boxes with confidence 1.
    pub objects: Vec<Detection>,
    pub true_poses: BTreeMap<AgentId, Pose2>,
}

pub fn generate_scene(cfg: &ScenarioConfig, frame: usize) -> Scene {
    let key = FrameKey::new(cfg.seed, frame);
    let mut rng = key.rng(Purpose::Scene, 0, 0);
    let ext = cfg.map_extent;
    let mut objects: Vec<Detection> = Vec::new();
    for class in ObjectClass::ALL {
        for _ in 0..cfg.object_counts.get(class) {
            for _attempt in 0..1000 {
                let nominal = class.nominal_size();
                let scale = rng.gen_range(0.9..1.1);
                let size = [nominal[0] * scale, nominal[1] * scale, nominal[2] * scale];
                let margin = 0.5 * size[0].hypot(size[1]);
                let x = rng.gen_range(-(ext.x - margin).max(0.0)..=(ext.x - margin).max(0.0));
                let y = rng.gen_range(-(ext.y - margin).max(0.0)..=(ext.y - margin).max(0.0));
                let yaw = rng.gen_range(-PI..PI);
                let d = Detection::new([x, y, size[2] / 2.0], size, yaw, class, 1.0);
                if objects.iter().all(|o| bev_intersection_area(o, &d) == 0.0) {
                    objects.push(d);
                    break;
                }
            }
        }
    }
    let true_poses = cfg
        .agents
        .iter()
        .map(|a| {
            let mut rng = key.rng(Purpose::Placement, a.id as u64, 0);
            let pose = match a.placement {
                Placement::Fixed { x, y, yaw } => Pose2::new(x, y, yaw),
                Placement::Random { x_range, y_range } => {
                    let x = rng.gen_range(x_range[0]..=x_range[1]).clamp(-ext.x, ext.x);
                    let y = rng.gen_range(y_range[0]..=y_range[1]).clamp(-ext.y, ext.y);
                    Pose2::new(x, y, rng.gen_range(-PI..PI))
                }
            };
            (a.id, pose)
        })
        .collect();
    Scene { frame, objects, true_poses }
}

fn in_fov(pose: &Pose2, d: &Detection, range: f64) -> bool {
    (d.center[0] - pose.x).hypot(d.center[1] - pose.y) <= range
}

/// The agent's own detector, output in its local frame from its true pose.
pub fn sense(model: &DetectModel, objects: &[Detection], true_pose: &Pose2, extent: &MapExtent, rng: &mut impl Rng) -> DetectionSet {
    let to_local = true_pose.inverse();
    let mut out = Vec::new();
    for obj in objects {
        // Fixed draw count per object keeps streams aligned across configs.
        let u: f64 = rng.gen();
        let n = [normal(rng), normal(rng), normal(rng), normal(rng)];
        if !in_fov(true_pose, obj, model.fov_range) || u >= model.recall_prob {
            continue;
        }
        let c = extent.clamp([obj.center[0] + model.pos_sigma * n[0], obj.center[1] + model.pos_sigma * n[1]]);
        let conf = (model.conf_mean + model.conf_spread * n[3]).clamp(0.0, 1.0);
        let noisy = Detection::new([c[0], c[1], obj.center[2]], obj.size, obj.yaw + model.yaw_sigma * n[2], obj.class, conf);
        out.push(transform_detection(&to_local, &noisy));
    }
    for _ in 0..poisson(rng, model.fp_rate) {
        let conf = (model.fp_conf_mean + model.conf_spread * normal(rng)).clamp(0.0, 1.0);
        let fp = spurious_box(rng, [true_pose.x, true_pose.y], model.fov_range, extent, conf);
        out.push(transform_detection(&to_local, &fp));
    }
    DetectionSet::new(FrameTag::AgentLocal, out)
}

/// The ego decoder's reading of an agent's features, given what the agent itself detected.
pub fn decode_surrogate(model: &DecodeModel, fov_range: f64, b_a: &DetectionSet, rng: &mut impl Rng) -> DetectionSet {
    assert_eq!(b_a.frame, FrameTag::AgentLocal);
    let mut out = Vec::new();
    match *model {
        DecodeModel::Faithful { jitter_sigma, conf_jitter } => {
            for d in b_a.iter() {
                let n = [normal(rng), normal(rng), normal(rng), normal(rng)];
                out.push(Detection::new(
                    [d.center[0] + jitter_sigma * n[0], d.center[1] + jitter_sigma * n[1], d.center[2]],
                    d.size,
                    d.yaw + jitter_sigma * n[2],
                    d.class,
                    (d.confidence + conf_jitter * n[3]).clamp(0.0, 1.0),
                ));
            }
        }
        DecodeModel::Degraded { drop_prob, offset_sigma, conf_noise, hallucination_rate } => {
            for d in b_a.iter() {
                let u: f64 = rng.gen();
                let n = [normal(rng), normal(rng), normal(rng), normal(rng)];
                if u < drop_prob {
                    continue;
                }
                out.push(Detection::new(
                    [d.center[0] + offset_sigma * n[0], d.center[1] + offset_sigma * n[1], d.center[2]],
                    d.size,
                    d.yaw + n[2],
                    d.class,
                    (d.confidence + conf_noise * n[3]).clamp(0.0, 1.0),
                ));
            }
            let unbounded = MapExtent { x: f64::INFINITY, y: f64::INFINITY };
            for _ in 0..poisson(rng, hallucination_rate) {
                let conf = (0.5 + conf_noise * normal(rng)).clamp(0.0, 1.0);
                out.push(spurious_box(rng, [0.0, 0.0], fov_range, &unbounded, conf));
            }
        }
    }
    DetectionSet::new(FrameTag::AgentLocal, out)
}

/// Transmitted pose: Gaussian position noise (m) and heading noise (degrees).
pub fn inject_pose_noise(true_pose: &Pose2, sigma_pos: f64, sigma_head_deg: f64, rng: &mut impl Rng) -> Pose2 {
    let n = [normal(rng), normal(rng), normal(rng)];
    Pose2::new(true_pose.x + sigma_pos * n[0], true_pose.y + sigma_pos * n[1], true_pose.yaw + sigma_head_deg.to_radians() * n[2])
}

/// Feature-fusion surrogate over the ego and the given agents, in the ego-global frame.
///
/// Agents with faithful decodes widen coverage (an object is missed only if
/// every covering detector misses it) and shrink position noise by
/// `1/sqrt(1 + n)`; fused confidence is the noisy-OR of the covering
/// detectors' confidences. Agents with degraded decodes contaminate the fused
/// features of every object they cover: each may suppress the object, and
/// their share of the fused feature (weighted by `foreign_feature_weight`)
/// displaces the box and perturbs its confidence. They also add hallucinated
/// boxes.
pub fn stage1_oracle(cfg: &ScenarioConfig, intermediate_ids: &[AgentId], scene: &Scene) -> DetectionSet {
    let key = FrameKey::new(cfg.seed, scene.frame);
    let ego = cfg.ego();
    let participants: Vec<&AgentSpec> = intermediate_ids
        .iter()
        .map(|id| cfg.agent(*id).expect("intermediate agent exists in the scenario"))
        .filter(|a| a.kind != AgentKind::Ego)
        .collect();
    let clean: Vec<&AgentSpec> = std::iter::once(ego).chain(participants.iter().copied().filter(|a| a.decode.is_faithful())).collect();
    let dirty: Vec<&AgentSpec> = participants.iter().copied().filter(|a| !a.decode.is_faithful()).collect();
    let sigma_scale = 1.0 / (clean.len() as f64).sqrt();
    let em = &ego.detect;
    let pose = |a: &AgentSpec| scene.true_poses[&a.id];

    let mut out = Vec::new();
    for (k, obj) in scene.objects.iter().enumerate() {
        let mut rng = key.rng(Purpose::Stage1, k as u64, 0);
        let u: f64 = rng.gen();
        let n = [normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        let miss: f64 = clean.iter().filter(|a| in_fov(&pose(a), obj, a.detect.fov_range)).map(|a| 1.0 - a.detect.recall_prob).product();
        let clean_cover = clean.iter().filter(|a| in_fov(&pose(a), obj, a.detect.fov_range)).count();
        let covering: Vec<&AgentSpec> = dirty.iter().copied().filter(|a| in_fov(&pose(a), obj, a.detect.fov_range)).collect();
        if clean_cover == 0 && covering.is_empty() {
            continue;
        }
        let w = cfg.foreign_feature_weight;
        let share = w / (clean_cover as f64 + w * covering.len() as f64);

        let (mut detected, mut c, mut yaw, mut conf) = if clean_cover > 0 {
            (
                u >= miss,
                [obj.center[0] + em.pos_sigma * sigma_scale * n[0], obj.center[1] + em.pos_sigma * sigma_scale * n[1]],
                obj.yaw + em.yaw_sigma * sigma_scale * n[2],
                fused_confidence(&key, k, &clean, |a| in_fov(&pose(a), obj, a.detect.fov_range), n[3]),
            )
        } else {
            let recall = covering.iter().map(|a| a.detect.recall_prob).fold(0.0, f64::max);
            (u < recall, obj.center[..2].try_into().unwrap(), obj.yaw, em.conf_mean + em.conf_spread * n[3])
        };
        for a in &covering {
            let mut mix = key.rng(Purpose::Stage1Mix, k as u64, a.id as u64);
            let v: f64 = mix.gen();
            let m = [normal(&mut mix), normal(&mut mix), normal(&mut mix), normal(&mut mix)];
            if let DecodeModel::Degraded { drop_prob, offset_sigma, conf_noise, .. } = a.decode {
                if v < drop_prob * share {
                    detected = false;
                }
                c[0] += share * offset_sigma * m[0];
                c[1] += share * offset_sigma * m[1];
                yaw += share * m[2];
                conf += share * conf_noise * m[3];
            }
        }
        if detected {
            let c = cfg.map_extent.clamp(c);
            out.push(Detection::new([c[0], c[1], obj.center[2]], obj.size, yaw, obj.class, conf.clamp(0.0, 1.0)));
        }
    }

    let mut rng = key.rng(Purpose::Stage1Fp, 0, 0);
    let ego_pose = pose(ego);
    for _ in 0..poisson(&mut rng, em.fp_rate) {
        let conf = (em.fp_conf_mean + em.conf_spread * normal(&mut rng)).clamp(0.0, 1.0);
        out.push(spurious_box(&mut rng, [ego_pose.x, ego_pose.y], em.fov_range, &cfg.map_extent, conf));
    }
    for a in &dirty {
        if let DecodeModel::Degraded { conf_noise, hallucination_rate, .. } = a.decode {
            let mut rng = key.rng(Purpose::Hallucinate, a.id as u64, 0);
            let p = pose(a);
            for _ in 0..poisson(&mut rng, hallucination_rate) {
                let conf = (0.5 + conf_noise * normal(&mut rng)).clamp(0.0, 1.0);
                out.push(spurious_box(&mut rng, [p.x, p.y], a.detect.fov_range, &cfg.map_extent, conf));
            }
        }
    }
    DetectionSet::new(FrameTag::EgoGlobal, out)
}

/// Noisy-OR of the covering clean agents' confidence draws. With the ego
/// alone this is exactly the ego's own confidence distribution.
fn fused_confidence(key: &FrameKey, k: usize, clean: &[&AgentSpec], covers: impl Fn(&AgentSpec) -> bool, ego_draw: f64) -> f64 {
    let mut none = 1.0;
    for (i, a) in clean.iter().enumerate() {
        if !covers(a) {
            continue;
        }
        let z = if i == 0 { ego_draw } else { normal(&mut key.rng(Purpose::Stage1Conf, k as u64, a.id as u64)) };
        none *= 1.0 - (a.detect.conf_mean + a.detect.conf_spread * z).clamp(0.0, 1.0);
    }
    1.0 - none
}

/// [`Stage1Fusion`] backed by [`stage1_oracle`] for one simulated frame.
pub struct SimStage1<'a> {
    pub cfg: &'a ScenarioConfig,
    pub scene: &'a Scene,
}

impl Stage1Fusion for SimStage1<'_> {
    fn fuse(&self, intermediate_ids: &[AgentId]) -> DetectionSet {
        stage1_oracle(self.cfg, intermediate_ids, self.scene)
    }
}

/// Everything the pipeline needs for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub scene: Scene,
    pub aux: Vec<AgentFrame>,
}

pub fn simulate_frame(cfg: &ScenarioConfig, frame: usize) -> FrameData {
    let key = FrameKey::new(cfg.seed, frame);
    let scene = generate_scene(cfg, frame);
    let aux = cfg
        .aux()
        .map(|a| {
            let id = a.id as u64;
            let true_pose = scene.true_poses[&a.id];
            let detections = sense(&a.detect, &scene.objects, &true_pose, &cfg.map_extent, &mut key.rng(Purpose::Sense, id, 0));
            let decoded = decode_surrogate(&a.decode, a.detect.fov_range, &detections, &mut key.rng(Purpose::Decode, id, 0));
            let pose = inject_pose_noise(&true_pose, cfg.pose_noise_sigma, cfg.heading_noise_sigma, &mut key.rng(Purpose::PoseNoise, id, 0));
            AgentFrame { agent_id: a.id, detections, pose, decoded }
        })
        .collect();
    FrameData { scene, aux }
}

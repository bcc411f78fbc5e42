//! Executes methods over simulated frames and assembles reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::domain::{classify_agent, AgentId, Branch};
use crate::error::{HydraError, Result};
use crate::eval::{summarize, ApAccumulator, ApReport, PoseErrorStats, IOU_THRESHOLDS};
use crate::fusion::{hydra_pipeline, PipelineOptions, PoseCorrection, Routing};
use crate::geometry::wrap_angle;
use crate::pgo::SolveStatus;
use crate::sim::{simulate_frame, AgentKind, ScenarioConfig, SimStage1};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoFusion,
    LateOnly,
    IntermediateOnly,
    Hydra,
    HydraNoClassifier,
    HydraNoPgo,
    HydraAllVariablePgo,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::NoFusion,
        Method::LateOnly,
        Method::IntermediateOnly,
        Method::Hydra,
        Method::HydraNoClassifier,
        Method::HydraNoPgo,
        Method::HydraAllVariablePgo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoFusion => "no_fusion",
            Method::LateOnly => "late_only",
            Method::IntermediateOnly => "intermediate_only",
            Method::Hydra => "hydra",
            Method::HydraNoClassifier => "hydra_no_classifier",
            Method::HydraNoPgo => "hydra_no_pgo",
            Method::HydraAllVariablePgo => "hydra_all_variable_pgo",
        }
    }

    pub fn variant(self) -> Variant {
        let (routing, correction) = match self {
            Method::NoFusion => (Routing::EgoOnly, PoseCorrection::Off),
            Method::LateOnly => (Routing::AllLate, PoseCorrection::Off),
            Method::IntermediateOnly => (Routing::AllIntermediate, PoseCorrection::Off),
            Method::Hydra => (Routing::Classified, PoseCorrection::Anchored),
            Method::HydraNoClassifier => (Routing::Blind, PoseCorrection::Anchored),
            Method::HydraNoPgo => (Routing::Classified, PoseCorrection::Off),
            Method::HydraAllVariablePgo => (Routing::Classified, PoseCorrection::AllVariable),
        };
        Variant { routing, correction }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HydraError;

    /// Accepts snake_case, kebab-case and CamelCase spellings.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
        Method::ALL.into_iter().find(|m| m.name().replace('_', "") == norm).ok_or_else(|| HydraError::UnknownMethod(s.to_string()))
    }
}

/// Routing and pose-correction switches; every [`Method`] is one point of this grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub routing: Routing,
    pub correction: PoseCorrection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PgoSummary {
    pub enabled: bool,
    /// Late-branch agent instances over all frames.
    pub agent_frames: usize,
    /// Pose error of the transmitted poses of late-branch agents.
    pub before: PoseErrorStats,
    /// The same agents after correction.
    pub after: PoseErrorStats,
    pub mean_edges: f64,
    pub max_iterations: usize,
    pub status_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentRouting {
    pub kind: Option<AgentKind>,
    pub intermediate_frames: usize,
    pub late_frames: usize,
    /// Present when the classifier ran.
    pub mean_s_domain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub variant: Variant,
    pub seed: u64,
    pub n_frames: usize,
    pub pose_noise_sigma: f64,
    pub heading_noise_sigma: f64,
    pub n_agents: usize,
    pub ap: ApReport,
    pub pgo: PgoSummary,
    pub routing: BTreeMap<AgentId, AgentRouting>,
}

#[derive(Debug, Default)]
struct FrameOutcome {
    ap: ApAccumulator,
    before: Vec<(f64, f64)>,
    after: Vec<(f64, f64)>,
    edges: usize,
    max_iterations: usize,
    status: Vec<SolveStatus>,
    routing: Vec<(AgentId, Branch, Option<f64>)>,
}

fn run_frame(scenario: &ScenarioConfig, opts: &PipelineOptions, frame: usize) -> FrameOutcome {
    let data = simulate_frame(scenario, frame);
    let stage1 = SimStage1 { cfg: scenario, scene: &data.scene };
    let out = hydra_pipeline(&data.aux, &stage1, opts);
    let mut o = FrameOutcome::default();
    o.ap.add_frame(frame, &out.final_set, &data.scene.objects);

    let err = |p: &crate::geometry::Pose2, id: AgentId| {
        let t = data.scene.true_poses[&id];
        ((p.x - t.x).hypot(p.y - t.y), wrap_angle(p.yaw - t.yaw).abs())
    };
    for f in data.aux.iter().filter(|f| out.late_ids.contains(&f.agent_id)) {
        o.before.push(err(&f.pose, f.agent_id));
        let corrected = out.pgo.as_ref().and_then(|r| r.corrected.get(&f.agent_id)).unwrap_or(&f.pose);
        o.after.push(err(corrected, f.agent_id));
    }
    if let Some(r) = &out.pgo {
        o.edges = r.edges_per_agent.values().sum();
        o.max_iterations = r.iterations_used;
        o.status = r.status.values().copied().collect();
    }
    for f in &data.aux {
        let score = out.verdicts.iter().find(|v| v.agent_id == f.agent_id).map(|v| v.s_domain);
        if out.intermediate_ids.contains(&f.agent_id) {
            o.routing.push((f.agent_id, Branch::Intermediate, score));
        }
        if out.late_ids.contains(&f.agent_id) {
            o.routing.push((f.agent_id, Branch::Late, score));
        }
    }
    o
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| HydraError::Report(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Runs one variant over every frame. Frames run in parallel and are folded in index order.
pub fn run_variant(cfg: &ExperimentConfig, method: Method, variant: Variant, jobs: Option<usize>) -> Result<RunReport> {
    cfg.validate()?;
    let scenario = cfg.scenario.resolved();
    let opts =
        PipelineOptions { classifier: cfg.classifier, pgo: cfg.pgo, fusion: cfg.fusion, routing: variant.routing, correction: variant.correction };
    let outcomes: Vec<FrameOutcome> = with_pool(jobs, || (0..scenario.n_frames).into_par_iter().map(|f| run_frame(&scenario, &opts, f)).collect())?;

    let mut ap = ApAccumulator::new();
    let (mut before, mut after) = (Vec::new(), Vec::new());
    let mut pgo = PgoSummary { enabled: variant.correction != PoseCorrection::Off && !cfg.pgo.is_disabled(), ..PgoSummary::default() };
    let mut edges = 0usize;
    let mut routing: BTreeMap<AgentId, AgentRouting> =
        scenario.aux().map(|a| (a.id, AgentRouting { kind: Some(a.kind), ..AgentRouting::default() })).collect();
    let mut score_sums: BTreeMap<AgentId, (f64, usize)> = BTreeMap::new();
    for o in &outcomes {
        ap.merge(&o.ap);
        before.extend_from_slice(&o.before);
        after.extend_from_slice(&o.after);
        edges += o.edges;
        pgo.max_iterations = pgo.max_iterations.max(o.max_iterations);
        for s in &o.status {
            let name = serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            *pgo.status_counts.entry(name).or_default() += 1;
        }
        for (id, branch, score) in &o.routing {
            let r = routing.entry(*id).or_default();
            match branch {
                Branch::Intermediate => r.intermediate_frames += 1,
                Branch::Late => r.late_frames += 1,
            }
            if let Some(s) = score {
                let e = score_sums.entry(*id).or_default();
                e.0 += s;
                e.1 += 1;
            }
        }
    }
    for (id, (sum, n)) in score_sums {
        if n > 0 {
            routing.entry(id).or_default().mean_s_domain = Some(sum / n as f64);
        }
    }
    pgo.agent_frames = before.len();
    pgo.before = summarize(&before);
    pgo.after = summarize(&after);
    pgo.mean_edges = if pgo.agent_frames > 0 { edges as f64 / pgo.agent_frames as f64 } else { 0.0 };

    Ok(RunReport {
        method,
        variant,
        seed: scenario.seed,
        n_frames: scenario.n_frames,
        pose_noise_sigma: scenario.pose_noise_sigma,
        heading_noise_sigma: scenario.heading_noise_sigma,
        n_agents: scenario.agents.len(),
        ap: ap.report(),
        pgo,
        routing,
    })
}

pub fn run_method(cfg: &ExperimentConfig, method: Method, jobs: Option<usize>) -> Result<RunReport> {
    run_variant(cfg, method, method.variant(), jobs)
}

/// One row of the classifier × pose-correction grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub classifier: bool,
    pub pgo: bool,
    pub ap: [f64; 3],
}

/// The four-row grid at the given pose noise. Without the classifier every
/// agent feeds feature fusion and its boxes are also late-fused.
pub fn ablation(cfg: &ExperimentConfig, sigma: f64, jobs: Option<usize>) -> Result<(Vec<AblationRow>, Vec<RunReport>)> {
    let mut cfg = cfg.clone();
    cfg.scenario.pose_noise_sigma = sigma;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for classifier in [false, true] {
        for pgo in [false, true] {
            let variant = Variant {
                routing: if classifier { Routing::Classified } else { Routing::Blind },
                correction: if pgo { PoseCorrection::Anchored } else { PoseCorrection::Off },
            };
            let method = match (classifier, pgo) {
                (true, true) => Method::Hydra,
                (true, false) => Method::HydraNoPgo,
                (false, true) => Method::HydraNoClassifier,
                (false, false) => Method::HydraNoClassifier,
            };
            let r = run_variant(&cfg, method, variant, jobs)?;
            rows.push(AblationRow { classifier, pgo, ap: r.ap.total });
            reports.push(r);
        }
    }
    Ok((rows, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

impl ScoreStats {
    fn from_samples(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Domain-score distribution per agent kind, with and without pose noise.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreTable {
    pub noise_sigma: f64,
    pub noise_heading_deg: f64,
    pub without_noise: BTreeMap<AgentKind, ScoreStats>,
    pub with_noise: BTreeMap<AgentKind, ScoreStats>,
    /// Raw scores per agent and frame, noise-free run.
    pub samples: BTreeMap<AgentId, Vec<f64>>,
}

fn score_samples(scenario: &ScenarioConfig, cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<BTreeMap<AgentId, Vec<f64>>> {
    let per_frame: Vec<Vec<(AgentId, f64)>> = with_pool(jobs, || {
        (0..scenario.n_frames)
            .into_par_iter()
            .map(|f| {
                simulate_frame(scenario, f)
                    .aux
                    .iter()
                    .map(|a| (a.agent_id, classify_agent(a.agent_id, &a.detections, &a.decoded, &cfg.classifier).s_domain))
                    .collect()
            })
            .collect()
    })?;
    let mut out: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    for frame in per_frame {
        for (id, s) in frame {
            out.entry(id).or_default().push(s);
        }
    }
    Ok(out)
}

pub fn domain_scores(cfg: &ExperimentConfig, noise_sigma: f64, noise_heading_deg: f64, jobs: Option<usize>) -> Result<ScoreTable> {
    cfg.validate()?;
    let base = cfg.scenario.resolved();
    let quiet = ScenarioConfig { pose_noise_sigma: 0.0, heading_noise_sigma: 0.0, ..base.clone() };
    let noisy = ScenarioConfig { pose_noise_sigma: noise_sigma, heading_noise_sigma: noise_heading_deg, ..base.clone() };
    let by_kind = |samples: &BTreeMap<AgentId, Vec<f64>>| {
        let mut grouped: BTreeMap<AgentKind, Vec<f64>> = BTreeMap::new();
        for (id, v) in samples {
            if let Some(a) = base.agent(*id) {
                grouped.entry(a.kind).or_default().extend_from_slice(v);
            }
        }
        grouped.into_iter().map(|(k, v)| (k, ScoreStats::from_samples(&v))).collect()
    };
    let q = score_samples(&quiet, cfg, jobs)?;
    let n = score_samples(&noisy, cfg, jobs)?;
    Ok(ScoreTable { noise_sigma, noise_heading_deg, without_noise: by_kind(&q), with_noise: by_kind(&n), samples: q })
}

/// Flat `method,sigma,class,threshold,...` rows for a report.
pub fn report_csv_rows(r: &RunReport, value: Option<&str>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (class, c) in &r.ap.per_class {
        for (t, th) in IOU_THRESHOLDS.iter().enumerate() {
            let mut row = vec![r.method.name().to_string()];
            if let Some(v) = value {
                row.push(v.to_string());
            }
            row.extend([
                r.pose_noise_sigma.to_string(),
                class.name().to_string(),
                th.to_string(),
                c.ap[t].to_string(),
                c.tp[t].to_string(),
                c.fp[t].to_string(),
                c.fn_[t].to_string(),
            ]);
            rows.push(row);
        }
    }
    for (t, th) in IOU_THRESHOLDS.iter().enumerate() {
        let mut row = vec![r.method.name().to_string()];
        if let Some(v) = value {
            row.push(v.to_string());
        }
        row.extend([
            r.pose_noise_sigma.to_string(),
            "total".to_string(),
            th.to_string(),
            r.ap.total[t].to_string(),
            String::new(),
            String::new(),
            String::new(),
        ]);
        rows.push(row);
    }
    rows
}

pub const REPORT_CSV_HEADER: [&str; 8] = ["method", "sigma", "class", "threshold", "ap", "tp", "fp", "fn"];

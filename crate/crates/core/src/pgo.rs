//! Anchor-guided pose correction for agents fused at the box level.
//!
//! Stage-1 boxes act as fixed object anchors `o_k`. Each late-branch agent
//! `i` contributes edges to anchors it matches, with the agent-local box pose
//! as observation `z_ik`. The corrected pose minimizes
//!
//! ```text
//!   sum_k  w_ik * || z_ik ⊖ (x_i^-1 ⊕ o_k) ||^2,   w_ik = c_aux^gamma * c_anchor^beta
//! ```
//!
//! Anchors are fixed, so the problem splits into one 3-DoF subproblem per
//! agent. The same Levenberg-Marquardt core also solves the joint variant in
//! which object poses are free variables (see [`run_all_variable`]).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::domain::AgentId;
use crate::error::{HydraError, Result};
use crate::geometry::{pose_minus, wrap_angle, DetectionSet, FrameTag, ObjectClass, Pose2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgoConfig {
    /// Max center distance (m) for an agent box to associate with an anchor.
    pub gate_dist: f64,
    /// Max absolute yaw difference (rad) for association.
    pub gate_yaw: f64,
    /// Exponent on the agent's box confidence.
    pub gamma: f64,
    /// Exponent on the anchor confidence.
    pub beta: f64,
    /// Inner-iteration budget per agent, shared by all outer rounds.
    pub max_iters: usize,
    pub grad_tol: f64,
    pub damping_init: f64,
    /// Re-association rounds.
    pub outer_rounds: usize,
}

impl Default for PgoConfig {
    fn default() -> Self {
        Self {
            gate_dist: 3.0,
            gate_yaw: std::f64::consts::FRAC_PI_6,
            gamma: 1.0,
            beta: 1.0,
            max_iters: 50,
            grad_tol: 1e-8,
            damping_init: 1e-4,
            outer_rounds: 3,
        }
    }
}

impl PgoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pgo.gate_dist", self.gate_dist),
            ("pgo.gate_yaw", self.gate_yaw),
            ("pgo.grad_tol", self.grad_tol),
            ("pgo.damping_init", self.damping_init),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HydraError::invalid(key, "must be a positive finite number"));
            }
        }
        for (key, v) in [("pgo.gamma", self.gamma), ("pgo.beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HydraError::invalid(key, "must be a non-negative finite number"));
            }
        }
        if self.outer_rounds == 0 {
            return Err(HydraError::invalid("pgo.outer_rounds", "must be at least 1"));
        }
        Ok(())
    }

    /// `max_iters = 0` turns correction off entirely.
    pub fn is_disabled(&self) -> bool {
        self.max_iters == 0
    }

    pub fn edge_weight(&self, c_aux: f64, c_anchor: f64) -> f64 {
        c_aux.powf(self.gamma) * c_anchor.powf(self.beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorNode {
    pub pose: Pose2,
    pub confidence: f64,
    pub class: ObjectClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEdge {
    pub agent_id: AgentId,
    pub anchor_index: usize,
    /// The agent's own estimate of the object pose, in its local frame.
    pub observation: Pose2,
    pub c_aux: f64,
    pub weight: f64,
}

/// A late-branch agent as seen by the pose graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LateAgent {
    pub agent_id: AgentId,
    pub pose_estimate: Pose2,
    pub detections: DetectionSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    BudgetExhausted,
    /// Normal equations were singular; the initial pose was kept.
    Singular,
    NoEdges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgoResult {
    pub corrected: BTreeMap<AgentId, Pose2>,
    /// Largest per-agent inner-iteration count, summed over outer rounds.
    pub iterations_used: usize,
    /// Cost of the final round's graph at that round's starting estimate.
    pub initial_cost: f64,
    pub final_cost: f64,
    pub edges_per_agent: BTreeMap<AgentId, usize>,
    pub status: BTreeMap<AgentId, SolveStatus>,
}

impl PgoResult {
    fn passthrough(initial: &BTreeMap<AgentId, Pose2>) -> Self {
        PgoResult {
            corrected: initial.clone(),
            iterations_used: 0,
            initial_cost: 0.0,
            final_cost: 0.0,
            edges_per_agent: initial.keys().map(|&id| (id, 0)).collect(),
            status: initial.keys().map(|&id| (id, SolveStatus::NoEdges)).collect(),
        }
    }
}

/// `h(x_i, o_k)`: anchor `o_k` expressed in the frame of agent pose `x_i`.
pub fn predict_observation(x_i: &Pose2, o_k: &Pose2) -> Pose2 {
    x_i.inverse().compose(o_k)
}

/// Stage-1 boxes become anchors; every late agent's boxes are projected with
/// its current pose estimate and associated to anchors by gated Hungarian
/// matching on center distance.
pub fn build_graph(stage1: &DetectionSet, late_agents: &[LateAgent], cfg: &PgoConfig) -> (Vec<AnchorNode>, Vec<PoseEdge>) {
    assert_eq!(stage1.frame, FrameTag::EgoGlobal, "anchors must be ego-global");
    let anchors: Vec<AnchorNode> = stage1.iter().map(|d| AnchorNode { pose: d.bev_pose(), confidence: d.confidence, class: d.class }).collect();
    let mut edges = Vec::new();
    for agent in late_agents {
        edges.extend(associate(&anchors, agent, cfg));
    }
    (anchors, edges)
}

fn associate(anchors: &[AnchorNode], agent: &LateAgent, cfg: &PgoConfig) -> Vec<PoseEdge> {
    assert_eq!(agent.detections.frame, FrameTag::AgentLocal, "late-agent boxes must be agent-local");
    let (rows, cols) = (agent.detections.len(), anchors.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Exceeds any sum of feasible costs, so cardinality wins over distance.
    let infeasible = 2.0 * cfg.gate_dist * (rows.min(cols) + 1) as f64;
    let projected: Vec<Pose2> = agent.detections.iter().map(|d| agent.pose_estimate.compose(&d.bev_pose())).collect();
    let mut cost = vec![infeasible; rows * cols];
    for (r, (p, d)) in projected.iter().zip(agent.detections.iter()).enumerate() {
        for (c, a) in anchors.iter().enumerate() {
            if d.class != a.class {
                continue;
            }
            let dist = (p.x - a.pose.x).hypot(p.y - a.pose.y);
            if dist <= cfg.gate_dist && wrap_angle(p.yaw - a.pose.yaw).abs() <= cfg.gate_yaw {
                cost[r * cols + c] = dist;
            }
        }
    }
    hungarian(&cost, rows, cols, false)
        .into_iter()
        .filter(|&(r, c)| cost[r * cols + c] < infeasible)
        .map(|(r, c)| {
            let d = &agent.detections.detections[r];
            PoseEdge {
                agent_id: agent.agent_id,
                anchor_index: c,
                observation: d.bev_pose(),
                c_aux: d.confidence,
                weight: cfg.edge_weight(d.confidence, anchors[c].confidence),
            }
        })
        .collect()
}

/// What the far end of an observation factor is attached to.
#[derive(Debug, Clone, Copy)]
enum Target {
    Fixed(Pose2),
    Var(usize),
}

#[derive(Debug, Clone, Copy)]
enum Factor {
    /// `z ⊖ h(vars[agent], target)`.
    Observe { agent: usize, target: Target, z: Pose2, w: f64 },
    /// `z ⊖ vars[var]`, a direct measurement in the fixed reference frame.
    Prior { var: usize, z: Pose2, w: f64 },
}

struct LmOutcome {
    vars: Vec<Pose2>,
    iterations: usize,
    initial_cost: f64,
    cost: f64,
    status: SolveStatus,
}

fn residual(f: &Factor, vars: &[Pose2]) -> [f64; 3] {
    match *f {
        Factor::Observe { agent, target, z, .. } => {
            let o = match target {
                Target::Fixed(p) => p,
                Target::Var(j) => vars[j],
            };
            pose_minus(&z, &predict_observation(&vars[agent], &o))
        }
        Factor::Prior { var, z, .. } => pose_minus(&z, &vars[var]),
    }
}

fn total_cost(factors: &[Factor], vars: &[Pose2]) -> f64 {
    factors
        .iter()
        .map(|f| {
            let w = match *f {
                Factor::Observe { w, .. } | Factor::Prior { w, .. } => w,
            };
            let r = residual(f, vars);
            w * (r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
        })
        .sum()
}

/// Accumulates `H = sum w J^T J` and `g = sum w J^T r` for residual Jacobians `J = dr/dvars`.
fn normal_equations(factors: &[Factor], vars: &[Pose2]) -> (DMatrix<f64>, DVector<f64>) {
    let n = 3 * vars.len();
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let mut add_block = |blocks: &[(usize, [[f64; 3]; 3])], r: [f64; 3], w: f64| {
        for &(vi, ji) in blocks {
            for a in 0..3 {
                g[3 * vi + a] += w * (0..3).map(|k| ji[k][a] * r[k]).sum::<f64>();
                for &(vj, jj) in blocks {
                    for b in 0..3 {
                        h[(3 * vi + a, 3 * vj + b)] += w * (0..3).map(|k| ji[k][a] * jj[k][b]).sum::<f64>();
                    }
                }
            }
        }
    };
    for f in factors {
        let r = residual(f, vars);
        match *f {
            Factor::Observe { agent, target, w, .. } => {
                let x = vars[agent];
                let o = match target {
                    Target::Fixed(p) => p,
                    Target::Var(j) => vars[j],
                };
                let (s, c) = x.yaw.sin_cos();
                let (dx, dy) = (o.x - x.x, o.y - x.y);
                // h_t = R(x)^T (o_t - x_t), h_yaw = o_yaw - x_yaw; r = z - h.
                let j_agent = [[c, s, s * dx - c * dy], [-s, c, c * dx + s * dy], [0.0, 0.0, 1.0]];
                match target {
                    Target::Fixed(_) => add_block(&[(agent, j_agent)], r, w),
                    Target::Var(j) => {
                        let j_obj = [[-c, -s, 0.0], [s, -c, 0.0], [0.0, 0.0, -1.0]];
                        add_block(&[(agent, j_agent), (j, j_obj)], r, w);
                    }
                }
            }
            Factor::Prior { var, w, .. } => {
                let neg_i = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
                add_block(&[(var, neg_i)], r, w);
            }
        }
    }
    (h, g)
}

fn is_singular(h: &DMatrix<f64>) -> bool {
    let trace: f64 = h.diagonal().iter().map(|v| v.abs()).sum();
    if trace <= 0.0 || !trace.is_finite() {
        return true;
    }
    let eig = h.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    min <= 1e-12 * trace
}

/// Levenberg-Marquardt with additive damping `(H + lambda I) dx = -g`.
/// Damping shrinks by 10 on an accepted step and grows by 10 on a rejected one.
fn levenberg_marquardt(mut vars: Vec<Pose2>, factors: &[Factor], cfg: &PgoConfig, budget: usize) -> LmOutcome {
    let initial_cost = total_cost(factors, &vars);
    let mut cost = initial_cost;
    let mut lambda = cfg.damping_init;
    let mut iterations = 0;
    let (h0, _) = normal_equations(factors, &vars);
    if is_singular(&h0) {
        return LmOutcome { vars, iterations: 0, initial_cost, cost, status: SolveStatus::Singular };
    }
    let status = loop {
        let (h, g) = normal_equations(factors, &vars);
        if g.norm() < cfg.grad_tol {
            break SolveStatus::Converged;
        }
        if iterations >= budget {
            break SolveStatus::BudgetExhausted;
        }
        if lambda > 1e12 {
            // No representable descent left.
            break SolveStatus::Converged;
        }
        iterations += 1;
        let mut damped = h;
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda;
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let step = chol.solve(&(-g));
        let trial: Vec<Pose2> =
            vars.iter().enumerate().map(|(i, p)| Pose2::new(p.x + step[3 * i], p.y + step[3 * i + 1], p.yaw + step[3 * i + 2])).collect();
        let trial_cost = total_cost(factors, &trial);
        if trial_cost < cost {
            vars = trial;
            cost = trial_cost;
            lambda = (lambda / 10.0).max(1e-15);
        } else {
            lambda *= 10.0;
        }
    };
    LmOutcome { vars, iterations, initial_cost, cost, status }
}

fn agent_factors(anchors: &[AnchorNode], edges: &[&PoseEdge], agent_var: usize) -> Vec<Factor> {
    edges
        .iter()
        .map(|e| Factor::Observe { agent: agent_var, target: Target::Fixed(anchors[e.anchor_index].pose), z: e.observation, w: e.weight })
        .collect()
}

fn group_edges(edges: &[PoseEdge]) -> BTreeMap<AgentId, Vec<&PoseEdge>> {
    let mut by_agent: BTreeMap<AgentId, Vec<&PoseEdge>> = BTreeMap::new();
    for e in edges {
        by_agent.entry(e.agent_id).or_default().push(e);
    }
    by_agent
}

/// Per-agent solve with an individual iteration budget.
fn optimize_budgeted(
    anchors: &[AnchorNode],
    edges: &[PoseEdge],
    initial: &BTreeMap<AgentId, Pose2>,
    cfg: &PgoConfig,
    budget: &BTreeMap<AgentId, usize>,
) -> (PgoResult, BTreeMap<AgentId, usize>) {
    let by_agent = group_edges(edges);
    let mut out = PgoResult::passthrough(initial);
    let mut per_agent = BTreeMap::new();
    for (&id, &x0) in initial {
        let Some(agent_edges) = by_agent.get(&id) else { continue };
        out.edges_per_agent.insert(id, agent_edges.len());
        let factors = agent_factors(anchors, agent_edges, 0);
        let lm = levenberg_marquardt(vec![x0], &factors, cfg, budget.get(&id).copied().unwrap_or(cfg.max_iters));
        out.initial_cost += lm.initial_cost;
        out.final_cost += lm.cost;
        out.iterations_used = out.iterations_used.max(lm.iterations);
        out.status.insert(id, lm.status);
        out.corrected.insert(id, lm.vars[0]);
        per_agent.insert(id, lm.iterations);
    }
    (out, per_agent)
}

/// Minimizes the weighted anchor residuals independently for every agent in `initial`.
///
/// Agents without edges pass through unchanged (`NoEdges`); agents whose normal
/// equations are singular keep their initial pose (`Singular`).
pub fn optimize(anchors: &[AnchorNode], edges: &[PoseEdge], initial: &BTreeMap<AgentId, Pose2>, cfg: &PgoConfig) -> PgoResult {
    let budget = initial.keys().map(|&id| (id, cfg.max_iters)).collect();
    optimize_budgeted(anchors, edges, initial, cfg, &budget).0
}

/// Same objective as [`optimize`], assembled as one stacked system over all agents.
pub fn optimize_joint(anchors: &[AnchorNode], edges: &[PoseEdge], initial: &BTreeMap<AgentId, Pose2>, cfg: &PgoConfig) -> PgoResult {
    let by_agent = group_edges(edges);
    let mut out = PgoResult::passthrough(initial);
    let ids: Vec<AgentId> = initial.keys().copied().filter(|id| by_agent.contains_key(id)).collect();
    if ids.is_empty() {
        return out;
    }
    let mut factors = Vec::new();
    for (var, id) in ids.iter().enumerate() {
        factors.extend(agent_factors(anchors, &by_agent[id], var));
        out.edges_per_agent.insert(*id, by_agent[id].len());
    }
    let lm = levenberg_marquardt(ids.iter().map(|id| initial[id]).collect(), &factors, cfg, cfg.max_iters);
    out.initial_cost = lm.initial_cost;
    out.final_cost = lm.cost;
    out.iterations_used = lm.iterations;
    for (var, id) in ids.iter().enumerate() {
        out.corrected.insert(*id, lm.vars[var]);
        out.status.insert(*id, lm.status);
    }
    out
}

/// Full anchored correction: re-associate against the anchors with the
/// current estimates, optimize, and repeat for `outer_rounds` rounds.
pub fn run_agpgo(stage1: &DetectionSet, late_agents: &[LateAgent], cfg: &PgoConfig) -> PgoResult {
    let mut estimates: BTreeMap<AgentId, Pose2> = late_agents.iter().map(|a| (a.agent_id, a.pose_estimate)).collect();
    let mut result = PgoResult::passthrough(&estimates);
    if cfg.is_disabled() || late_agents.is_empty() {
        return result;
    }
    let mut used: BTreeMap<AgentId, usize> = estimates.keys().map(|&id| (id, 0)).collect();
    let mut previous_edges: Option<Vec<(AgentId, usize, u64)>> = None;
    for _ in 0..cfg.outer_rounds {
        let current: Vec<LateAgent> = late_agents.iter().map(|a| LateAgent { pose_estimate: estimates[&a.agent_id], ..a.clone() }).collect();
        let (anchors, edges) = build_graph(stage1, &current, cfg);
        let signature: Vec<_> = edges.iter().map(|e| (e.agent_id, e.anchor_index, e.observation.x.to_bits())).collect();
        if previous_edges.as_ref() == Some(&signature) {
            break;
        }
        let budget: BTreeMap<AgentId, usize> = used.iter().map(|(&id, &u)| (id, cfg.max_iters.saturating_sub(u))).collect();
        let (round, iterations) = optimize_budgeted(&anchors, &edges, &estimates, cfg, &budget);
        for (id, n) in iterations {
            *used.entry(id).or_default() += n;
        }
        estimates = round.corrected.clone();
        result = PgoResult { iterations_used: used.values().copied().max().unwrap_or(0), ..round };
        previous_edges = Some(signature);
    }
    result
}

/// Result of the joint variant, where anchors are free variables too.
#[derive(Debug, Clone, PartialEq)]
pub struct AllVariableResult {
    pub pgo: PgoResult,
    /// Refined stage-1 object poses, index-aligned with the stage-1 set.
    pub objects: Vec<Pose2>,
}

/// Joint agent-object optimization without fixed anchors.
///
/// Every stage-1 box that received an edge becomes a free object node tied to
/// its stage-1 measurement by a prior factor (weight `c_anchor^beta`); agents
/// and objects are solved together within the same iteration budget.
pub fn run_all_variable(stage1: &DetectionSet, late_agents: &[LateAgent], cfg: &PgoConfig) -> AllVariableResult {
    let mut estimates: BTreeMap<AgentId, Pose2> = late_agents.iter().map(|a| (a.agent_id, a.pose_estimate)).collect();
    let mut objects: Vec<Pose2> = stage1.iter().map(|d| d.bev_pose()).collect();
    let mut result = PgoResult::passthrough(&estimates);
    if cfg.is_disabled() || late_agents.is_empty() {
        return AllVariableResult { pgo: result, objects };
    }
    let mut used = 0usize;
    for _ in 0..cfg.outer_rounds {
        let moved = DetectionSet::new(FrameTag::EgoGlobal, stage1.iter().zip(&objects).map(|(d, p)| d.with_bev_pose(p)).collect());
        let current: Vec<LateAgent> = late_agents.iter().map(|a| LateAgent { pose_estimate: estimates[&a.agent_id], ..a.clone() }).collect();
        let (anchors, edges) = build_graph(&moved, &current, cfg);
        let by_agent = group_edges(&edges);
        let agent_ids: Vec<AgentId> = estimates.keys().copied().filter(|id| by_agent.contains_key(id)).collect();
        if agent_ids.is_empty() || used >= cfg.max_iters {
            break;
        }
        let mut object_var: BTreeMap<usize, usize> = BTreeMap::new();
        for e in &edges {
            let next = agent_ids.len() + object_var.len();
            object_var.entry(e.anchor_index).or_insert(next);
        }
        let mut vars: Vec<Pose2> = agent_ids.iter().map(|id| estimates[id]).collect();
        vars.extend(object_var.keys().map(|&k| objects[k]));
        let mut factors: Vec<Factor> = object_var
            .iter()
            .map(|(&k, &var)| Factor::Prior { var, z: stage1.detections[k].bev_pose(), w: anchors[k].confidence.powf(cfg.beta) })
            .collect();
        for (ai, id) in agent_ids.iter().enumerate() {
            for e in &by_agent[id] {
                factors.push(Factor::Observe { agent: ai, target: Target::Var(object_var[&e.anchor_index]), z: e.observation, w: e.weight });
            }
        }
        let lm = levenberg_marquardt(vars, &factors, cfg, cfg.max_iters - used);
        used += lm.iterations;
        let mut round = PgoResult::passthrough(&estimates);
        for (ai, id) in agent_ids.iter().enumerate() {
            estimates.insert(*id, lm.vars[ai]);
            round.edges_per_agent.insert(*id, by_agent[id].len());
            round.status.insert(*id, lm.status);
        }
        for (&k, &var) in &object_var {
            objects[k] = lm.vars[var];
        }
        round.corrected = estimates.clone();
        round.initial_cost = lm.initial_cost;
        round.final_cost = lm.cost;
        round.iterations_used = used;
        result = round;
    }
    AllVariableResult { pgo: result, objects }
}

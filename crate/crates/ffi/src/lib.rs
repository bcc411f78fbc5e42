//! C interface to `hydra-core`.
//!
//! Every fallible function returns a [`HydraStatus`]. On failure a message is
//! kept per thread and can be read with [`hydra_last_error`] until the next
//! call on that thread. Handles are opaque; release each with its `_free`
//! function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hydra_core::assignment::hungarian;
use hydra_core::config::ConfigTree;
use hydra_core::domain::{classify_agent, AgentId, Branch, ClassifierConfig};
use hydra_core::geometry::{iou_3d, Detection, DetectionSet, FrameTag, ObjectClass, Pose2};
use hydra_core::pgo::{run_agpgo, LateAgent, PgoConfig, PgoResult};
use hydra_core::runner::{run_method, Method, RunReport};
use hydra_core::HydraError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HydraStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Configuration failed to parse or validate.
    Config = 3,
    /// The computation itself failed (I/O, report serialization).
    Runtime = 4,
    /// The output buffer is too small; the required length was written.
    BufferTooSmall = 5,
    /// An internal panic was caught.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HydraBranch {
    Intermediate = 0,
    Late = 1,
}

/// Oriented 3D box. `class_id` is 0 vehicle, 1 pedestrian, 2 truck.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HydraBox {
    pub center: [f64; 3],
    /// Length, width, height; all strictly positive.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: u8,
    pub confidence: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HydraPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Anchor boxes and late agents collected for one anchored pose correction.
pub struct HydraPoseGraph {
    cfg: PgoConfig,
    anchors: Vec<Detection>,
    agents: Vec<LateAgent>,
    result: Option<PgoResult>,
}

/// A scenario configuration plus the report of its latest run.
pub struct HydraExperiment {
    tree: ConfigTree,
    report: Option<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(HydraStatus, String);

impl From<HydraError> for Failure {
    fn from(e: HydraError) -> Self {
        let status = if e.is_config_error() { HydraStatus::Config } else { HydraStatus::Runtime };
        Failure(status, e.to_string())
    }
}

fn fail(status: HydraStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HydraStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HydraStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg =
                p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            HydraStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(HydraStatus::NullPointer, format!("`{what}` is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(HydraStatus::NullPointer, format!("`{what}` is null")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HydraStatus::NullPointer, format!("`{what}` is null but has {n} elements")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    let s = deref(p, what)?;
    CStr::from_ptr(s).to_str().map_err(|_| fail(HydraStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

fn to_detection(b: &HydraBox) -> Result<Detection, Failure> {
    let class = ObjectClass::from_id(b.class_id).ok_or_else(|| fail(HydraStatus::InvalidArgument, format!("unknown class id {}", b.class_id)))?;
    let finite = b.center.iter().chain(&b.size).chain([&b.yaw, &b.confidence]).all(|v| v.is_finite());
    if !finite || b.size.iter().any(|s| *s <= 0.0) {
        return Err(fail(HydraStatus::InvalidArgument, "box values must be finite with positive sizes"));
    }
    Ok(Detection::new(b.center, b.size, b.yaw, class, b.confidence))
}

fn to_set(boxes: &[HydraBox], frame: FrameTag) -> Result<DetectionSet, Failure> {
    Ok(DetectionSet::new(frame, boxes.iter().map(to_detection).collect::<Result<_, _>>()?))
}

fn to_pose(p: &HydraPose) -> Result<Pose2, Failure> {
    if ![p.x, p.y, p.yaw].iter().all(|v| v.is_finite()) {
        return Err(fail(HydraStatus::InvalidArgument, "pose values must be finite"));
    }
    Ok(Pose2::new(p.x, p.y, p.yaw))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hydra_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// 3D IoU of two boxes.
///
/// # Safety
/// `a`, `b` and `out` must be valid pointers or null.
#[no_mangle]
pub unsafe extern "C" fn hydra_iou_3d(a: *const HydraBox, b: *const HydraBox, out: *mut f64) -> HydraStatus {
    guard(|| {
        let a = to_detection(deref(a, "a")?)?;
        let b = to_detection(deref(b, "b")?)?;
        *deref_mut(out, "out")? = iou_3d(&a, &b);
        Ok(())
    })
}

/// Optimal assignment on a row-major `rows x cols` cost matrix.
///
/// Writes `min(rows, cols)` pairs to `out_rows`/`out_cols` and their count to
/// `out_len`. When `capacity` is too small nothing but `out_len` is written.
///
/// # Safety
/// `cost` must point to `rows * cols` doubles; the output arrays must hold
/// `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn hydra_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    maximize: bool,
    out_rows: *mut usize,
    out_cols: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> HydraStatus {
    guard(|| {
        let len = deref_mut(out_len, "out_len")?;
        let n = rows.checked_mul(cols).ok_or_else(|| fail(HydraStatus::InvalidArgument, "matrix size overflows"))?;
        let cost = slice(cost, n, "cost")?;
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(fail(HydraStatus::InvalidArgument, "cost entries must be finite"));
        }
        let need = rows.min(cols);
        *len = need;
        if capacity < need {
            return Err(fail(HydraStatus::BufferTooSmall, format!("need room for {need} pairs, got {capacity}")));
        }
        if need == 0 {
            return Ok(());
        }
        let (r_out, c_out) = (deref_mut(out_rows, "out_rows")? as *mut usize, deref_mut(out_cols, "out_cols")? as *mut usize);
        for (i, (r, c)) in hungarian(cost, rows, cols, maximize).into_iter().enumerate() {
            *r_out.add(i) = r;
            *c_out.add(i) = c;
        }
        Ok(())
    })
}

/// Domain score of one agent from its own boxes and the ego's decode of its
/// features, both in the agent's local frame. `tau` is the routing threshold.
///
/// # Safety
/// `b_a` and `b_pred` must point to `n_a` and `n_pred` boxes; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn hydra_classify_agent(
    b_a: *const HydraBox,
    n_a: usize,
    b_pred: *const HydraBox,
    n_pred: usize,
    tau: f64,
    out_score: *mut f64,
    out_branch: *mut HydraBranch,
) -> HydraStatus {
    guard(|| {
        let cfg = ClassifierConfig { tau, ..Default::default() };
        cfg.validate()?;
        let a = to_set(slice(b_a, n_a, "b_a")?, FrameTag::AgentLocal)?;
        let p = to_set(slice(b_pred, n_pred, "b_pred")?, FrameTag::AgentLocal)?;
        let (score, branch) = (deref_mut(out_score, "out_score")?, deref_mut(out_branch, "out_branch")?);
        let v = classify_agent(0, &a, &p, &cfg);
        *score = v.s_domain;
        *branch = match v.branch {
            Branch::Intermediate => HydraBranch::Intermediate,
            Branch::Late => HydraBranch::Late,
        };
        Ok(())
    })
}

/// New empty pose graph with default settings.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hydra_pose_graph_new(out: *mut *mut HydraPoseGraph) -> HydraStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = Box::into_raw(Box::new(HydraPoseGraph { cfg: PgoConfig::default(), anchors: Vec::new(), agents: Vec::new(), result: None }));
        Ok(())
    })
}

/// Overrides the association gates, the per-agent iteration budget and the
/// number of re-association rounds. A budget of 0 disables correction.
///
/// # Safety
/// `graph` must come from [`hydra_pose_graph_new`].
#[no_mangle]
pub unsafe extern "C" fn hydra_pose_graph_configure(
    graph: *mut HydraPoseGraph,
    gate_dist: f64,
    gate_yaw: f64,
    max_iters: usize,
    outer_rounds: usize,
) -> HydraStatus {
    guard(|| {
        let g = deref_mut(graph, "graph")?;
        let cfg = PgoConfig { gate_dist, gate_yaw, max_iters, outer_rounds, ..g.cfg };
        cfg.validate()?;
        g.cfg = cfg;
        g.result = None;
        Ok(())
    })
}

/// Adds a fused box in the ego-global frame as a fixed anchor.
///
/// # Safety
/// `graph` must come from [`hydra_pose_graph_new`]; `anchor` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hydra_pose_graph_add_anchor(graph: *mut HydraPoseGraph, anchor: *const HydraBox) -> HydraStatus {
    guard(|| {
        let g = deref_mut(graph, "graph")?;
        g.anchors.push(to_detection(deref(anchor, "anchor")?)?);
        g.result = None;
        Ok(())
    })
}

/// Adds a late agent with its reported pose and its boxes in its local frame.
///
/// # Safety
/// `graph` must come from [`hydra_pose_graph_new`]; `boxes` must point to `n` boxes.
#[no_mangle]
pub unsafe extern "C" fn hydra_pose_graph_add_agent(
    graph: *mut HydraPoseGraph,
    agent_id: u32,
    pose: HydraPose,
    boxes: *const HydraBox,
    n: usize,
) -> HydraStatus {
    guard(|| {
        let g = deref_mut(graph, "graph")?;
        if g.agents.iter().any(|a| a.agent_id == agent_id) {
            return Err(fail(HydraStatus::InvalidArgument, format!("agent {agent_id} already added")));
        }
        g.agents.push(LateAgent { agent_id, pose_estimate: to_pose(&pose)?, detections: to_set(slice(boxes, n, "boxes")?, FrameTag::AgentLocal)? });
        g.result = None;
        Ok(())
    })
}

/// Corrects every agent's pose against the anchors.
///
/// # Safety
/// `graph` must come from [`hydra_pose_graph_new`].
#[no_mangle]
pub unsafe extern "C" fn hydra_pose_graph_optimize(graph: *mut HydraPoseGraph) -> HydraStatus {
    guard(|| {
        let g = deref_mut(graph, "graph")?;
        let stage1 = DetectionSet::new(FrameTag::EgoGlobal, g.anchors.clone());
        g.result = Some(run_agpgo(&stage1, &g.agents, &g.cfg));
        Ok(())
    })
}

/// Corrected pose of one agent and the number of anchor edges it used.
///
/// # Safety
/// `graph` must come from [`hydra_pose_graph_new`]; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn hydra_pose_graph_corrected_pose(
    graph: *const HydraPoseGraph,
    agent_id: u32,
    out_pose: *mut HydraPose,
    out_edges: *mut usize,
) -> HydraStatus {
    guard(|| {
        let g = deref(graph, "graph")?;
        let res = g.result.as_ref().ok_or_else(|| fail(HydraStatus::InvalidArgument, "graph has not been optimized"))?;
        let id: AgentId = agent_id;
        let p = res.corrected.get(&id).ok_or_else(|| fail(HydraStatus::InvalidArgument, format!("unknown agent {agent_id}")))?;
        let (pose, edges) = (deref_mut(out_pose, "out_pose")?, deref_mut(out_edges, "out_edges")?);
        *pose = HydraPose { x: p.x, y: p.y, yaw: p.yaw };
        *edges = res.edges_per_agent.get(&id).copied().unwrap_or(0);
        Ok(())
    })
}

/// # Safety
/// `graph` must come from [`hydra_pose_graph_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hydra_pose_graph_free(graph: *mut HydraPoseGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Loads a scenario file, or the built-in defaults when `scenario_path` is null.
///
/// # Safety
/// `scenario_path` must be null or a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hydra_experiment_new(scenario_path: *const c_char, out: *mut *mut HydraExperiment) -> HydraStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        let tree =
            if scenario_path.is_null() { ConfigTree::default() } else { ConfigTree::from_path(Path::new(string(scenario_path, "scenario_path")?))? };
        tree.build()?;
        *out = Box::into_raw(Box::new(HydraExperiment { tree, report: None }));
        Ok(())
    })
}

/// Applies one `dotted.key=value` override. The configuration is left
/// unchanged when the result does not validate.
///
/// # Safety
/// `exp` must come from [`hydra_experiment_new`]; `assignment` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hydra_experiment_set(exp: *mut HydraExperiment, assignment: *const c_char) -> HydraStatus {
    guard(|| {
        let e = deref_mut(exp, "exp")?;
        let mut tree = e.tree.clone();
        tree.set(string(assignment, "assignment")?)?;
        tree.build()?;
        e.tree = tree;
        Ok(())
    })
}

/// Runs a method (null selects the configured one) and writes total AP at
/// IoU 0.3, 0.5 and 0.7 to `out_ap`. `jobs` of 0 uses the global thread pool.
///
/// # Safety
/// `exp` must come from [`hydra_experiment_new`]; `method` must be null or a
/// NUL-terminated string; `out_ap` must hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn hydra_experiment_run(exp: *mut HydraExperiment, method: *const c_char, jobs: usize, out_ap: *mut f64) -> HydraStatus {
    guard(|| {
        let e = deref_mut(exp, "exp")?;
        let out_ap = deref_mut(out_ap, "out_ap")? as *mut f64;
        let cfg = e.tree.build()?;
        let method: Method = if method.is_null() { cfg.run.method } else { string(method, "method")?.parse()? };
        let report: RunReport = run_method(&cfg, method, (jobs > 0).then_some(jobs))?;
        let json = serde_json::to_string_pretty(&report).map_err(|err| fail(HydraStatus::Runtime, err.to_string()))?;
        for (i, v) in report.ap.total.iter().enumerate() {
            *out_ap.add(i) = *v;
        }
        e.report = Some(CString::new(json).expect("JSON has no NUL bytes"));
        Ok(())
    })
}

/// Copies the latest report as NUL-terminated JSON. `out_len` receives the
/// length without the terminator, also when the buffer is too small.
///
/// # Safety
/// `exp` must come from [`hydra_experiment_new`]; `buf` must hold `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn hydra_experiment_report_json(
    exp: *const HydraExperiment,
    buf: *mut c_char,
    capacity: usize,
    out_len: *mut usize,
) -> HydraStatus {
    guard(|| {
        let e = deref(exp, "exp")?;
        let len = deref_mut(out_len, "out_len")?;
        let report = e.report.as_ref().ok_or_else(|| fail(HydraStatus::InvalidArgument, "no run has completed"))?;
        let bytes = report.as_bytes_with_nul();
        *len = bytes.len() - 1;
        if capacity < bytes.len() {
            return Err(fail(HydraStatus::BufferTooSmall, format!("need {} bytes, got {capacity}", bytes.len())));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, deref_mut(buf, "buf")?, bytes.len());
        Ok(())
    })
}

/// # Safety
/// `exp` must come from [`hydra_experiment_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hydra_experiment_free(exp: *mut HydraExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

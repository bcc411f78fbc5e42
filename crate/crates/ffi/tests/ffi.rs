use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use hydra_ffi::*;

fn vehicle(x: f64, y: f64, yaw: f64, confidence: f64) -> HydraBox {
    HydraBox { center: [x, y, 0.8], size: [4.5, 1.9, 1.6], yaw, class_id: 0, confidence }
}

fn last_error() -> String {
    let p = hydra_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn iou_of_identical_and_disjoint_boxes() {
    let a = vehicle(0.0, 0.0, 0.3, 0.9);
    let mut out = -1.0;
    assert_eq!(unsafe { hydra_iou_3d(&a, &a, &mut out) }, HydraStatus::Ok);
    assert!((out - 1.0).abs() < 1e-12);
    let far = vehicle(50.0, 0.0, 0.0, 0.9);
    assert_eq!(unsafe { hydra_iou_3d(&a, &far, &mut out) }, HydraStatus::Ok);
    assert_eq!(out, 0.0);
    // Half-length shift along the box axis: overlap 2.25 of 4.5, IoU = 2.25 / 6.75.
    let shifted = vehicle(2.25, 0.0, 0.0, 0.9);
    let base = vehicle(0.0, 0.0, 0.0, 0.9);
    assert_eq!(unsafe { hydra_iou_3d(&base, &shifted, &mut out) }, HydraStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn errors_set_status_and_message() {
    let a = vehicle(0.0, 0.0, 0.0, 0.9);
    let mut out = 0.0;
    assert_eq!(unsafe { hydra_iou_3d(ptr::null(), &a, &mut out) }, HydraStatus::NullPointer);
    assert!(last_error().contains("`a`"));
    let bad = HydraBox { class_id: 9, ..a };
    assert_eq!(unsafe { hydra_iou_3d(&bad, &a, &mut out) }, HydraStatus::InvalidArgument);
    assert!(last_error().contains("class"));
    let flat = HydraBox { size: [1.0, 0.0, 1.0], ..a };
    assert_eq!(unsafe { hydra_iou_3d(&flat, &a, &mut out) }, HydraStatus::InvalidArgument);
    // A successful call clears the message.
    assert_eq!(unsafe { hydra_iou_3d(&a, &a, &mut out) }, HydraStatus::Ok);
    assert!(hydra_last_error().is_null());
}

#[test]
fn hungarian_assigns_and_reports_capacity() {
    // Brute force over the 6 permutations gives the anti-diagonal at cost 3.
    let cost = [9.0, 5.0, 1.0, 4.0, 1.0, 7.0, 1.0, 6.0, 8.0];
    let (mut rows, mut cols, mut len) = ([0usize; 3], [0usize; 3], 0usize);
    let st = unsafe { hydra_hungarian(cost.as_ptr(), 3, 3, false, rows.as_mut_ptr(), cols.as_mut_ptr(), 3, &mut len) };
    assert_eq!(st, HydraStatus::Ok);
    assert_eq!(len, 3);
    assert_eq!(rows, [0, 1, 2]);
    assert_eq!(cols, [2, 1, 0]);

    let st = unsafe { hydra_hungarian(cost.as_ptr(), 3, 3, false, rows.as_mut_ptr(), cols.as_mut_ptr(), 2, &mut len) };
    assert_eq!(st, HydraStatus::BufferTooSmall);
    assert_eq!(len, 3);

    let st = unsafe { hydra_hungarian(ptr::null(), 0, 4, true, ptr::null_mut(), ptr::null_mut(), 0, &mut len) };
    assert_eq!(st, HydraStatus::Ok);
    assert_eq!(len, 0);

    let nan = [f64::NAN];
    let st = unsafe { hydra_hungarian(nan.as_ptr(), 1, 1, false, rows.as_mut_ptr(), cols.as_mut_ptr(), 3, &mut len) };
    assert_eq!(st, HydraStatus::InvalidArgument);
}

#[test]
fn classify_perfect_and_empty_decodes() {
    let own = [vehicle(10.0, 0.0, 0.0, 0.9), vehicle(-5.0, 8.0, 1.0, 0.7)];
    let (mut score, mut branch) = (0.0, HydraBranch::Late);
    let st = unsafe { hydra_classify_agent(own.as_ptr(), 2, own.as_ptr(), 2, 0.2, &mut score, &mut branch) };
    assert_eq!(st, HydraStatus::Ok);
    assert!((score - 1.0).abs() < 1e-12);
    assert_eq!(branch, HydraBranch::Intermediate);

    let st = unsafe { hydra_classify_agent(own.as_ptr(), 2, ptr::null(), 0, 0.2, &mut score, &mut branch) };
    assert_eq!(st, HydraStatus::Ok);
    assert_eq!(score, 0.0);
    assert_eq!(branch, HydraBranch::Late);

    let st = unsafe { hydra_classify_agent(own.as_ptr(), 2, own.as_ptr(), 2, 1.5, &mut score, &mut branch) };
    assert_eq!(st, HydraStatus::Config);
    assert!(last_error().contains("tau"));
}

fn local_view(truth: (f64, f64, f64), anchors: &[HydraBox]) -> Vec<HydraBox> {
    let (x, y, yaw) = truth;
    let (s, c) = yaw.sin_cos();
    anchors
        .iter()
        .map(|a| {
            let (dx, dy) = (a.center[0] - x, a.center[1] - y);
            HydraBox { center: [c * dx + s * dy, -s * dx + c * dy, a.center[2]], yaw: a.yaw - yaw, ..*a }
        })
        .collect()
}

#[test]
fn pose_graph_recovers_perturbed_agent() {
    let anchors = [vehicle(12.0, 3.0, 0.2, 0.9), vehicle(-4.0, 9.0, 1.1, 0.8), vehicle(7.0, -8.0, -2.0, 0.95)];
    let truth = (2.0, 1.0, 0.2);
    let local = local_view(truth, &anchors);
    let mut g = ptr::null_mut();
    unsafe {
        assert_eq!(hydra_pose_graph_new(&mut g), HydraStatus::Ok);
        for a in &anchors {
            assert_eq!(hydra_pose_graph_add_anchor(g, a), HydraStatus::Ok);
        }
        let noisy = HydraPose { x: 2.3, y: 0.8, yaw: 0.21 };
        assert_eq!(hydra_pose_graph_add_agent(g, 4, noisy, local.as_ptr(), local.len()), HydraStatus::Ok);
        assert_eq!(hydra_pose_graph_add_agent(g, 4, noisy, local.as_ptr(), local.len()), HydraStatus::InvalidArgument);

        let (mut pose, mut edges) = (HydraPose { x: 0.0, y: 0.0, yaw: 0.0 }, 0usize);
        assert_eq!(hydra_pose_graph_corrected_pose(g, 4, &mut pose, &mut edges), HydraStatus::InvalidArgument);
        assert_eq!(hydra_pose_graph_optimize(g), HydraStatus::Ok);
        assert_eq!(hydra_pose_graph_corrected_pose(g, 4, &mut pose, &mut edges), HydraStatus::Ok);
        assert_eq!(edges, 3);
        assert!((pose.x - truth.0).abs() < 1e-6 && (pose.y - truth.1).abs() < 1e-6 && (pose.yaw - truth.2).abs() < 1e-6);
        assert_eq!(hydra_pose_graph_corrected_pose(g, 5, &mut pose, &mut edges), HydraStatus::InvalidArgument);

        // A zero budget passes the reported pose through.
        assert_eq!(hydra_pose_graph_configure(g, 3.0, 0.5, 0, 3), HydraStatus::Ok);
        assert_eq!(hydra_pose_graph_optimize(g), HydraStatus::Ok);
        assert_eq!(hydra_pose_graph_corrected_pose(g, 4, &mut pose, &mut edges), HydraStatus::Ok);
        assert_eq!((pose.x, pose.y, pose.yaw), (2.3, 0.8, 0.21));
        assert_eq!(hydra_pose_graph_configure(g, -1.0, 0.5, 10, 3), HydraStatus::Config);
        hydra_pose_graph_free(g);
        hydra_pose_graph_free(ptr::null_mut());
    }
}

fn scenario(name: &str) -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name);
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn experiment_runs_and_reports() {
    let mut e = ptr::null_mut();
    let mut ap = [0.0; 3];
    unsafe {
        assert_eq!(hydra_experiment_new(scenario("latent.toml").as_ptr(), &mut e), HydraStatus::Ok);
        assert_eq!(hydra_experiment_set(e, c"n_frames=4".as_ptr()), HydraStatus::Ok);
        assert_eq!(hydra_experiment_set(e, c"n_frames=-4".as_ptr()), HydraStatus::Config);
        let mut len = 0usize;
        assert_eq!(hydra_experiment_report_json(e, ptr::null_mut(), 0, &mut len), HydraStatus::InvalidArgument);

        assert_eq!(hydra_experiment_run(e, c"late_only".as_ptr(), 1, ap.as_mut_ptr()), HydraStatus::Ok);
        assert!(ap.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(ap[0] >= ap[2]);
        assert_eq!(hydra_experiment_report_json(e, ptr::null_mut(), 0, &mut len), HydraStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; len + 1];
        assert_eq!(hydra_experiment_report_json(e, buf.as_mut_ptr(), buf.len(), &mut len), HydraStatus::Ok);
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(buf.as_ptr()).to_str().unwrap()).unwrap();
        assert_eq!(json["method"], "late_only");
        assert_eq!(json["n_frames"], 4);
        assert_eq!(json["ap"]["total"][0].as_f64(), Some(ap[0]));

        assert_eq!(hydra_experiment_run(e, c"psychic".as_ptr(), 0, ap.as_mut_ptr()), HydraStatus::Config);
        hydra_experiment_free(e);

        let mut missing = ptr::null_mut();
        assert_eq!(hydra_experiment_new(c"/nonexistent/x.toml".as_ptr(), &mut missing), HydraStatus::Runtime);
        assert!(missing.is_null());
        assert_eq!(hydra_experiment_new(ptr::null(), &mut missing), HydraStatus::Ok);
        hydra_experiment_free(missing);
    }
}

fn target_dir() -> PathBuf {
    // .../target/<profile>/deps/<test binary>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(header_dir.join("hydra.h")).expect("header generated by the build script");
    for f in ["hydra_iou_3d", "hydra_hungarian", "hydra_classify_agent", "hydra_pose_graph_new", "hydra_experiment_run", "hydra_last_error"] {
        assert!(header.contains(f), "header lacks {f}");
    }
    let lib = target_dir().join("libhydra_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping C link check: no C compiler or static library");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "hydra.h"
#include <stdio.h>
int main(void) {
    HydraBox a = {{0, 0, 0.8}, {4.5, 1.9, 1.6}, 0.0, 0, 0.9};
    double iou = 0;
    if (hydra_iou_3d(&a, &a, &iou) != HYDRA_STATUS_OK || iou < 0.999999) return 1;
    if (hydra_iou_3d(NULL, &a, &iou) != HYDRA_STATUS_NULL_POINTER || hydra_last_error() == NULL) return 2;
    HydraPoseGraph *g = NULL;
    if (hydra_pose_graph_new(&g) != HYDRA_STATUS_OK) return 3;
    hydra_pose_graph_free(g);
    printf("ok\n");
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("smoke");
    let status =
        Command::new("cc").arg(&src).arg("-I").arg(&header_dir).arg(&lib).args(["-lpthread", "-ldl", "-lm", "-o"]).arg(&exe).status().unwrap();
    assert!(status.success(), "C smoke program failed to build");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C smoke program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const LATENT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/latent.toml");
const ARCH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/arch.toml");

fn hydra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydra")).args(args).env_remove("HYDRA_OUT_DIR").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_reports_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let o = hydra(&["run", "--scenario", LATENT, "--set", "n_frames=5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "report.csv", "manifest.echo", "timing.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let r = report(&out);
    assert_eq!(r["method"], "hydra");
    assert_eq!(r["n_frames"], 5);
    assert_eq!(r["ap"]["total"].as_array().unwrap().len(), 3);
}

#[test]
fn manifest_echo_replays_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    let second = tmp.path().join("b");
    let args = ["run", "--scenario", ARCH, "--set", "n_frames=8", "--seed", "9", "--method", "late_only"];
    assert_eq!(code(&hydra(&[&args[..], &["--out", s(&first)]].concat())), 0);
    let echo = first.join("manifest.echo");
    assert_eq!(code(&hydra(&["run", "--scenario", s(&echo), "--out", s(&second)])), 0);
    for f in ["report.json", "report.csv", "manifest.echo"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn override_layers_apply_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    // The file sets seed 1 and 100 frames; it does not set the classifier threshold.
    let o = hydra(&["run", "--scenario", LATENT, "--set", "n_frames=3", "--set", "seed=5", "--seed", "7", "--method", "no-fusion", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["seed"], 7);
    assert_eq!(r["n_frames"], 3);
    assert_eq!(r["method"], "no_fusion");
    let echo: toml::Value = std::fs::read_to_string(out.join("manifest.echo")).unwrap().parse().unwrap();
    assert_eq!(echo["classifier"]["tau"].as_float(), Some(hydra_core::domain::ClassifierConfig::default().tau));
    assert_eq!(echo["scenario"]["seed"].as_integer(), Some(7));
}

#[test]
fn single_value_sweep_equals_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let sweep = tmp.path().join("sweep");
    let base = ["--scenario", ARCH, "--set", "n_frames=6"];
    let o = hydra(&[&["run"][..], &base, &["--set", "pose_noise_sigma=0.2", "--out", s(&run)]].concat());
    assert_eq!(code(&o), 0);
    let o = hydra(&[&["sweep"][..], &base, &["--key", "pose_noise_sigma", "--values", "0.2", "--methods", "hydra", "--out", s(&sweep)]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let point = sweep.join("points").join("000-hydra");
    assert_eq!(std::fs::read(run.join("report.json")).unwrap(), std::fs::read(point.join("report.json")).unwrap());
    let curves = std::fs::read_to_string(sweep.join("curves.csv")).unwrap();
    let run_rows = std::fs::read_to_string(run.join("report.csv")).unwrap().lines().count();
    assert_eq!(curves.lines().count(), run_rows);
}

#[test]
fn sweep_covers_every_value_and_method() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let o = hydra(&[
        "sweep",
        "--scenario",
        ARCH,
        "--set",
        "n_frames=4",
        "--key",
        "pose_noise_sigma",
        "--values",
        "0,0.2,0.4,0.6",
        "--methods",
        "hydra,late_only",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let points: Vec<_> = std::fs::read_dir(out.join("points")).unwrap().collect();
    assert_eq!(points.len(), 8);
    let echo: toml::Value = std::fs::read_to_string(out.join("manifest.echo")).unwrap().parse().unwrap();
    assert_eq!(echo["sweep"]["values"].as_array().unwrap().len(), 4);
    assert_eq!(std::fs::read_to_string(out.join("timing.csv")).unwrap().lines().count(), 9);
}

#[test]
fn ablate_and_scores_emit_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let abl = tmp.path().join("abl");
    let sc = tmp.path().join("sc");
    assert_eq!(code(&hydra(&["ablate", "--set", "n_frames=3", "--out", s(&abl)])), 0);
    assert_eq!(std::fs::read_to_string(abl.join("ablation.csv")).unwrap().lines().count(), 5);
    assert_eq!(code(&hydra(&["scores", "--set", "n_frames=3", "--out", s(&sc)])), 0);
    let table: Value = serde_json::from_slice(&std::fs::read(sc.join("scores.json")).unwrap()).unwrap();
    assert_eq!(table["without_noise"], table["with_noise"]);
}

#[test]
fn invalid_config_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    for args in [
        vec!["run", "--set", "pose_noise_sigma=-1"],
        vec!["run", "--set", "classifier.tau=2"],
        vec!["run", "--method", "telepathy"],
        vec!["run", "--set", "nonsense"],
        vec!["sweep", "--key", "pose_noise_sigma", "--values", "0,-3"],
        vec!["run", "--bogus-flag"],
        vec!["validate", "--set", "scenario.agents=[]"],
    ] {
        let o = hydra(&[&args[..], &["--out", s(&out)]].concat());
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists(), "{args:?} left output behind");
    }
}

#[test]
fn syntax_error_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("broken.toml");
    std::fs::write(&path, "[scenario]\nseed = 1\nn_frames = = 3\n").unwrap();
    let o = hydra(&["validate", "--scenario", s(&path)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::write(&path, "[scenario]\nseed = 1\n\n[pgo]\ngate_dist = -4.0\n").unwrap();
    let o = hydra(&["validate", "--scenario", s(&path)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 5") && err.contains("gate_dist"), "{err}");
}

#[test]
fn unwritable_output_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    let out = file.join("sub");
    let o = hydra(&["run", "--set", "n_frames=2", "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let leftovers: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers, vec![std::ffi::OsString::from("plain")]);
}

#[test]
fn missing_scenario_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hydra(&["run", "--scenario", s(&tmp.path().join("nope.toml")), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 3);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hydra")).args(["run", "--set", "n_frames=2"]).env("HYDRA_OUT_DIR", tmp.path()).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(tmp.path().join("run").join("report.json").is_file());
}

#[test]
fn jobs_do_not_change_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let base = ["run", "--scenario", LATENT, "--set", "n_frames=12"];
    assert_eq!(code(&hydra(&[&base[..], &["--jobs", "1", "--out", s(&a)]].concat())), 0);
    assert_eq!(code(&hydra(&[&base[..], &["--jobs", "3", "--out", s(&b)]].concat())), 0);
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(b.join("report.json")).unwrap());
}

#[test]
fn validate_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let o = hydra(&["validate", "--scenario", ARCH, "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok:"));
    assert!(!out.exists());
}

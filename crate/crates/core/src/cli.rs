//! Command-line front end.
//!
//! Every command computes all of its outputs in memory first and then writes
//! them through a staging directory, so a failed run leaves nothing behind.
//! Report files never contain wall-clock data; timings go to `timing.csv`.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::{canonical_key, parse_literal, ConfigTree, ExperimentConfig, SweepSection};
use crate::error::{HydraError, Result};
use crate::eval::IOU_THRESHOLDS;
use crate::runner::{ablation, domain_scores, report_csv_rows, run_method, Method, RunReport, REPORT_CSV_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "hydra", version, about = "Domain-aware hybrid fusion experiments on simulated scenarios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one method over every frame of a scenario.
    Run(CommonArgs),
    /// Run methods over a list of values for one config key.
    Sweep(SweepArgs),
    /// Classifier × pose-correction ablation grid under pose noise.
    Ablate(AblateArgs),
    /// Domain-score statistics per agent kind, with and without pose noise.
    Scores(ScoresArgs),
    /// Check a configuration without running anything.
    Validate(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Scenario TOML file. Built-in defaults are used when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Method name, overriding `run.method`.
    #[arg(long)]
    pub method: Option<String>,
    /// Output directory. Defaults to `$HYDRA_OUT_DIR/<command>` or `hydra-out/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed, overriding `scenario.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `dotted.key=value` override; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads for frame-level parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Config key to sweep, e.g. `pose_noise_sigma` or `pgo.gamma`.
    #[arg(long)]
    pub key: Option<String>,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Comma-separated methods; defaults to the run method.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pose noise (m) applied to every row.
    #[arg(long, default_value_t = 0.4)]
    pub sigma: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ScoresArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pose noise (m) of the noisy setting.
    #[arg(long, default_value_t = 0.4)]
    pub sigma: f64,
    /// Heading noise (degrees) of the noisy setting.
    #[arg(long, default_value_t = 0.4)]
    pub heading: f64,
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Scores(a) => cmd_scores(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

/// Config tree with file, `--set`, `--seed` and `--method` applied in that order.
fn load_tree(a: &CommonArgs) -> Result<ConfigTree> {
    let mut tree = match &a.scenario {
        Some(p) => ConfigTree::from_path(p)?,
        None => ConfigTree::default(),
    };
    for o in &a.overrides {
        tree.set(o)?;
    }
    if let Some(seed) = a.seed {
        let seed = i64::try_from(seed).map_err(|_| HydraError::invalid("seed", "must fit in a signed 64-bit integer"))?;
        tree.set_value("scenario.seed", toml::Value::Integer(seed))?;
    }
    if let Some(m) = &a.method {
        let m: Method = m.parse()?;
        tree.set_value("run.method", toml::Value::String(m.name().to_string()))?;
    }
    Ok(tree)
}

fn out_dir(a: &CommonArgs, command: &str) -> PathBuf {
    if let Some(o) = &a.out {
        return o.clone();
    }
    let root = std::env::var_os("HYDRA_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("hydra-out"));
    root.join(command)
}

/// Files to emit, by path relative to the output directory.
#[derive(Debug, Default)]
struct Outputs(Vec<(PathBuf, Vec<u8>)>);

impl Outputs {
    fn add(&mut self, name: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.0.push((name.into(), bytes.into()));
    }

    fn add_json<T: serde::Serialize>(&mut self, name: impl Into<PathBuf>, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| HydraError::Report(e.to_string()))?;
        s.push('\n');
        self.add(name, s);
        Ok(())
    }

    fn add_csv(&mut self, name: impl Into<PathBuf>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| HydraError::Report(e.to_string()))?;
        for r in rows {
            w.write_record(r).map_err(|e| HydraError::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| HydraError::Report(e.to_string()))?;
        self.add(name, bytes);
        Ok(())
    }

    /// Writes everything under a sibling staging directory, then moves files into place.
    fn commit(self, out: &Path) -> Result<()> {
        let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| HydraError::io(parent, e))?;
        let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
        let result = (|| {
            if staging.exists() {
                std::fs::remove_dir_all(&staging).map_err(|e| HydraError::io(&staging, e))?;
            }
            for (rel, bytes) in &self.0 {
                let p = staging.join(rel);
                if let Some(d) = p.parent() {
                    std::fs::create_dir_all(d).map_err(|e| HydraError::io(d, e))?;
                }
                let mut f = std::fs::File::create(&p).map_err(|e| HydraError::io(&p, e))?;
                f.write_all(bytes).map_err(|e| HydraError::io(&p, e))?;
            }
            if !out.exists() {
                return std::fs::rename(&staging, out).map_err(|e| HydraError::io(out, e));
            }
            for (rel, _) in &self.0 {
                let dst = out.join(rel);
                if let Some(d) = dst.parent() {
                    std::fs::create_dir_all(d).map_err(|e| HydraError::io(d, e))?;
                }
                std::fs::rename(staging.join(rel), &dst).map_err(|e| HydraError::io(&dst, e))?;
            }
            std::fs::remove_dir_all(&staging).map_err(|e| HydraError::io(&staging, e))
        })();
        if result.is_err() && staging.exists() {
            let _ = std::fs::remove_dir_all(&staging);
        }
        result
    }
}

fn echo(cfg: &ExperimentConfig) -> Result<String> {
    cfg.to_toml()
}

fn add_report(outputs: &mut Outputs, dir: &Path, report: &RunReport) -> Result<()> {
    outputs.add_json(dir.join("report.json"), report)?;
    outputs.add_csv(dir.join("report.csv"), &REPORT_CSV_HEADER, &report_csv_rows(report, None))
}

fn print_ap(report: &RunReport) {
    println!("method {}  sigma {}  frames {}", report.method, report.pose_noise_sigma, report.n_frames);
    println!("{:<12} {:>8} {:>8} {:>8}", "class", "AP@0.3", "AP@0.5", "AP@0.7");
    for (c, v) in &report.ap.per_class {
        println!("{:<12} {:>8.4} {:>8.4} {:>8.4}", c.name(), v.ap[0], v.ap[1], v.ap[2]);
    }
    let t = report.ap.total;
    println!("{:<12} {:>8.4} {:>8.4} {:>8.4}", "total", t[0], t[1], t[2]);
}

fn timing_rows(rows: &[(String, String, usize, f64)]) -> Vec<Vec<String>> {
    rows.iter().map(|(m, v, n, ms)| vec![m.clone(), v.clone(), n.to_string(), format!("{ms:.3}")]).collect()
}

pub fn cmd_run(a: &CommonArgs) -> Result<()> {
    let cfg = load_tree(a)?.build()?;
    let method = cfg.run.method;
    let start = Instant::now();
    let report = run_method(&cfg, method, a.jobs)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let mut outputs = Outputs::default();
    add_report(&mut outputs, Path::new(""), &report)?;
    outputs.add("manifest.echo", echo(&cfg)?);
    outputs.add_csv(
        "timing.csv",
        &["method", "value", "n_agents", "wall_ms"],
        &timing_rows(&[(method.name().into(), String::new(), report.n_agents, ms)]),
    )?;
    let out = out_dir(a, "run");
    outputs.commit(&out)?;
    print_ap(&report);
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let tree = load_tree(&a.common)?;
    let base = tree.build()?;
    let from_file = base.sweep.clone();
    let key =
        a.key.clone().or_else(|| from_file.as_ref().map(|s| s.key.clone())).ok_or_else(|| HydraError::invalid("sweep.key", "no sweep key given"))?;
    let values = if a.values.is_empty() {
        from_file.as_ref().map(|s| s.values.clone()).unwrap_or_default()
    } else {
        a.values.iter().map(|v| v.trim().to_string()).collect()
    };
    if values.is_empty() {
        return Err(HydraError::invalid("sweep.values", "needs at least one value"));
    }
    let methods: Vec<Method> = if !a.methods.is_empty() {
        a.methods.iter().map(|m| m.trim().parse()).collect::<Result<_>>()?
    } else if let Some(s) = from_file.as_ref().filter(|s| !s.methods.is_empty()) {
        s.methods.clone()
    } else {
        vec![base.run.method]
    };
    let key = canonical_key(&key);

    // Configs for every point are built before anything runs.
    let mut points = Vec::new();
    for v in &values {
        let mut t = tree.clone();
        t.set_value(&key, parse_literal(v))?;
        points.push((v.clone(), t.build()?));
    }

    let mut outputs = Outputs::default();
    let mut curve_rows = Vec::new();
    let mut timings = Vec::new();
    for (i, (v, cfg)) in points.iter().enumerate() {
        for &m in &methods {
            let start = Instant::now();
            let report = run_method(cfg, m, a.common.jobs)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            add_report(&mut outputs, &Path::new("points").join(format!("{i:03}-{}", m.name())), &report)?;
            curve_rows.extend(report_csv_rows(&report, Some(v)));
            timings.push((m.name().to_string(), v.clone(), report.n_agents, ms));
            println!("{key}={v}  {m}  AP@0.5 {:.4}", report.ap.total[1]);
        }
    }
    let mut header = vec!["method", "value"];
    header.extend_from_slice(&REPORT_CSV_HEADER[1..]);
    outputs.add_csv("curves.csv", &header, &curve_rows)?;
    outputs.add_csv("timing.csv", &["method", "value", "n_agents", "wall_ms"], &timing_rows(&timings))?;
    let mut manifest = base.clone();
    manifest.sweep = Some(SweepSection { key, values, methods });
    outputs.add("manifest.echo", echo(&manifest)?);
    let out = out_dir(&a.common, "sweep");
    outputs.commit(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return Err(HydraError::invalid("sigma", "must be a non-negative finite number"));
    }
    let cfg = load_tree(&a.common)?.build()?;
    let (rows, reports) = ablation(&cfg, a.sigma, a.common.jobs)?;
    let mut outputs = Outputs::default();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.classifier.to_string(), r.pgo.to_string(), a.sigma.to_string()];
            row.extend(r.ap.iter().map(|v| v.to_string()));
            row
        })
        .collect();
    outputs.add_csv("ablation.csv", &["classifier", "pgo", "sigma", "ap30", "ap50", "ap70"], &csv_rows)?;
    outputs.add_json("ablation.json", &serde_json::json!({ "sigma": a.sigma, "rows": rows, "reports": reports }))?;
    outputs.add("manifest.echo", echo(&cfg)?);
    let out = out_dir(&a.common, "ablate");
    outputs.commit(&out)?;
    println!("{:<11} {:<5} {:>8} {:>8} {:>8}", "classifier", "pgo", "AP@0.3", "AP@0.5", "AP@0.7");
    for r in &rows {
        println!("{:<11} {:<5} {:>8.4} {:>8.4} {:>8.4}", r.classifier, r.pgo, r.ap[0], r.ap[1], r.ap[2]);
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_scores(a: &ScoresArgs) -> Result<()> {
    if !(a.sigma >= 0.0 && a.heading >= 0.0 && a.sigma.is_finite() && a.heading.is_finite()) {
        return Err(HydraError::invalid("sigma", "noise levels must be non-negative finite numbers"));
    }
    let cfg = load_tree(&a.common)?.build()?;
    let table = domain_scores(&cfg, a.sigma, a.heading, a.common.jobs)?;
    let mut rows = Vec::new();
    for (setting, stats) in [("without_noise", &table.without_noise), ("with_noise", &table.with_noise)] {
        for (kind, s) in stats {
            rows.push(vec![
                setting.to_string(),
                kind.name().to_string(),
                s.count.to_string(),
                s.mean.to_string(),
                s.max.to_string(),
                s.min.to_string(),
            ]);
        }
    }
    let mut outputs = Outputs::default();
    outputs.add_csv("scores.csv", &["setting", "kind", "count", "mean", "max", "min"], &rows)?;
    outputs.add_json("scores.json", &table)?;
    outputs.add("manifest.echo", echo(&cfg)?);
    let out = out_dir(&a.common, "scores");
    outputs.commit(&out)?;
    println!("{:<14} {:<12} {:>8} {:>8} {:>8}", "setting", "kind", "mean", "max", "min");
    for r in &rows {
        let f = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        println!("{:<14} {:<12} {:>8.4} {:>8.4} {:>8.4}", r[0], r[1], f(&r[3]), f(&r[4]), f(&r[5]));
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_validate(a: &CommonArgs) -> Result<()> {
    let cfg = load_tree(a)?.build()?;
    let s = cfg.scenario.resolved();
    println!("ok: {} agents, {} frames, method {}, thresholds {:?}", s.agents.len(), s.n_frames, cfg.run.method, IOU_THRESHOLDS);
    Ok(())
}

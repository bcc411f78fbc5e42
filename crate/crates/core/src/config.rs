//! Experiment configuration: TOML files, `--set` overrides and the replayable echo.
//!
//! Loading layers three sources. Built-in defaults fill anything a file leaves
//! out, and `dotted.key=value` overrides replace file values. Each
//! `[[scenario.agents]]` entry only needs `id` and `kind`; the remaining
//! fields default per kind.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::domain::ClassifierConfig;
use crate::error::{HydraError, Result};
use crate::fusion::FusionConfig;
use crate::pgo::PgoConfig;
use crate::runner::Method;
use crate::sim::{AgentKind, AgentSpec, ScenarioConfig};

const SECTIONS: [&str; 6] = ["scenario", "classifier", "pgo", "fusion", "run", "sweep"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { method: Method::Hydra }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub key: String,
    /// TOML literals, applied like `--set key=value`.
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub classifier: ClassifierConfig,
    pub pgo: PgoConfig,
    pub fusion: FusionConfig,
    pub run: RunSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenario.seed > i64::MAX as u64 {
            return Err(HydraError::invalid("scenario.seed", "must fit in a signed 64-bit integer"));
        }
        self.scenario.validate()?;
        self.scenario.resolved().validate()?;
        self.classifier.validate()?;
        self.pgo.validate()?;
        self.fusion.validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(HydraError::invalid("sweep.values", "needs at least one value"));
            }
        }
        Ok(())
    }

    /// Replayable TOML text of the fully explicit configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HydraError::Report(e.to_string()))
    }
}

/// File contents plus overrides, kept as a value tree until the typed parse
/// so that sweeps can layer further overrides on the same base.
#[derive(Debug, Clone)]
pub struct ConfigTree {
    root: Value,
    text: String,
}

impl Default for ConfigTree {
    fn default() -> Self {
        Self { root: Value::Table(Table::new()), text: String::new() }
    }
}

impl ConfigTree {
    pub fn from_text(text: &str) -> Result<Self> {
        let root: Table = text.parse().map_err(|e: toml::de::Error| HydraError::ConfigSyntax {
            message: e.message().trim().to_string(),
            line: e.span().map(|s| line_of_offset(text, s.start)),
        })?;
        Ok(Self { root: Value::Table(root), text: text.to_string() })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HydraError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| HydraError::invalid(assignment, "override must look like key=value"))?;
        self.set_value(key.trim(), parse_literal(raw.trim()))
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        let path = canonical_key(key);
        let segments: Vec<&str> = path.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(HydraError::invalid(key, "malformed key"));
        }
        let (leaf, parents) = segments.split_last().expect("non-empty key");
        let mut node = &mut self.root;
        for seg in parents {
            node = child_mut(node, seg, key)?;
        }
        match node {
            Value::Table(t) => {
                t.insert(leaf.to_string(), value);
            }
            Value::Array(_) => *child_mut(node, leaf, key)? = value,
            _ => return Err(HydraError::invalid(key, format!("`{leaf}` is not inside a table"))),
        }
        Ok(())
    }

    /// Typed, validated configuration.
    pub fn build(&self) -> Result<ExperimentConfig> {
        let mut root = self.root.clone();
        if let Some(t) = root.as_table() {
            if let Some(bad) = t.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
                return Err(self.locate(HydraError::invalid(bad.clone(), "unknown section")));
            }
        }
        expand_agent_defaults(&mut root).map_err(|e| self.locate(e))?;
        let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| {
            let message = e.message().trim().to_string();
            let key = backticked(&message).unwrap_or_default();
            self.locate(HydraError::invalid(key, message))
        })?;
        cfg.validate().map_err(|e| self.locate(e))?;
        Ok(cfg)
    }

    /// Attaches a source line to a validation error when the key appears in the file.
    fn locate(&self, err: HydraError) -> HydraError {
        match err {
            HydraError::InvalidConfig { key, message, line: None } => {
                let line = find_key_line(&self.text, &key);
                HydraError::InvalidConfig { key, message, line }
            }
            other => other,
        }
    }
}

/// Loads a file (or the built-in defaults when `path` is `None`) and applies overrides in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<(ConfigTree, ExperimentConfig)> {
    let mut tree = match path {
        Some(p) => ConfigTree::from_path(p)?,
        None => ConfigTree::default(),
    };
    for o in overrides {
        tree.set(o)?;
    }
    let cfg = tree.build()?;
    Ok((tree, cfg))
}

fn child_mut<'a>(node: &'a mut Value, seg: &str, key: &str) -> Result<&'a mut Value> {
    match node {
        Value::Table(t) => Ok(t.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()))),
        Value::Array(a) => {
            let idx: usize = seg.parse().map_err(|_| HydraError::invalid(key, format!("`{seg}` is not an array index")))?;
            let len = a.len();
            a.get_mut(idx).ok_or_else(|| HydraError::invalid(key, format!("index {idx} out of range (length {len})")))
        }
        _ => Err(HydraError::invalid(key, format!("`{seg}` is not inside a table"))),
    }
}

/// Keys naming a scenario field may omit the `scenario.` prefix.
pub fn canonical_key(key: &str) -> String {
    let first = key.split('.').next().unwrap_or("");
    if SECTIONS.contains(&first) {
        key.to_string()
    } else {
        format!("scenario.{key}")
    }
}

/// A TOML literal, or a bare string when the text is not one.
pub fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}").parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()))
}

fn expand_agent_defaults(root: &mut Value) -> Result<()> {
    let Some(agents) = root.get_mut("scenario").and_then(|s| s.get_mut("agents")) else {
        return Ok(());
    };
    let Value::Array(list) = agents else {
        return Err(HydraError::invalid("scenario.agents", "must be an array of tables"));
    };
    for (i, entry) in list.iter_mut().enumerate() {
        let Value::Table(user) = entry else {
            return Err(HydraError::invalid("scenario.agents", format!("entry {i} is not a table")));
        };
        let kind: AgentKind = user
            .get("kind")
            .cloned()
            .ok_or_else(|| HydraError::invalid("kind", format!("agent entry {i} needs a `kind`")))?
            .try_into()
            .map_err(|e: toml::de::Error| HydraError::invalid("kind", e.message().trim().to_string()))?;
        let id = match user.get("id") {
            Some(Value::Integer(n)) if *n >= 0 && *n <= u32::MAX as i64 => *n as u32,
            _ => return Err(HydraError::invalid("id", format!("agent entry {i} needs a non-negative integer `id`"))),
        };
        let mut base = Value::try_from(AgentSpec::for_kind(id, kind)).map_err(|e| HydraError::Report(e.to_string()))?;
        merge(&mut base, Value::Table(std::mem::take(user)));
        *entry = base;
    }
    Ok(())
}

/// Deep merge of `over` into `base`. Tagged tables whose tag changes are replaced whole.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            let retagged = ["mode", "type"].iter().any(|tag| matches!((b.get(*tag), o.get(*tag)), (Some(x), Some(y)) if x != y));
            if retagged {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the assignment to `key` (dotted, or a bare leaf name) in TOML text.
fn find_key_line(text: &str, key: &str) -> Option<usize> {
    if key.is_empty() {
        return None;
    }
    let path = canonical_key(key);
    let segments: Vec<&str> = path.split('.').filter(|s| s.parse::<usize>().is_err()).collect();
    let (leaf, parents) = segments.split_last()?;
    let leaf = leaf.split('[').next().unwrap_or(leaf);
    let parent = parents.join(".");
    let mut header = String::new();
    let mut fallback = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            header = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if header == path || (header.starts_with(&path) && header[path.len()..].starts_with('.')) {
                return Some(i + 1);
            }
            continue;
        }
        let Some((lhs, _)) = t.split_once('=') else { continue };
        let lhs = lhs.trim();
        let full = if header.is_empty() { lhs.to_string() } else { format!("{header}.{lhs}") };
        if full == path || (header == parent && lhs == leaf) {
            return Some(i + 1);
        }
        if fallback.is_none() && (lhs == leaf || lhs.ends_with(&format!(".{leaf}"))) {
            fallback = Some(i + 1);
        }
    }
    fallback
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DecodeModel;

    const FILE: &str = r#"
[scenario]
seed = 5
n_frames = 12

[[scenario.agents]]
id = 0
kind = "ego"

[[scenario.agents]]
id = 1
kind = "het_latent"

[scenario.agents.decode]
drop_prob = 0.7

[pgo]
max_iters = 20
"#;

    #[test]
    fn defaults_fill_partial_agents() {
        let cfg = ConfigTree::from_text(FILE).unwrap().build().unwrap();
        assert_eq!(cfg.scenario.agents.len(), 2);
        let a = cfg.scenario.agents[1];
        assert_eq!(a.decode, DecodeModel::Degraded { drop_prob: 0.7, offset_sigma: 3.0, conf_noise: 0.3, hallucination_rate: 2.0 });
        assert_eq!(a.placement, AgentSpec::for_kind(1, AgentKind::HetLatent).placement);
    }

    #[test]
    fn retagging_replaces_the_table() {
        let mut tree = ConfigTree::from_text(FILE).unwrap();
        tree.set("scenario.agents.1.decode={ mode = \"faithful\", jitter_sigma = 0.1, conf_jitter = 0.0 }").unwrap();
        let cfg = tree.build().unwrap();
        assert!(cfg.scenario.agents[1].decode.is_faithful());
    }

    #[test]
    fn three_layer_precedence() {
        // Built-in default only.
        let base = ConfigTree::default().build().unwrap();
        assert_eq!(base.pgo.max_iters, 50);
        assert_eq!(base.pgo.outer_rounds, 3);
        // File beats default.
        let mut tree = ConfigTree::from_text(FILE).unwrap();
        assert_eq!(tree.build().unwrap().pgo.max_iters, 20);
        // Override beats file; untouched keys keep lower layers.
        tree.set("pgo.max_iters=7").unwrap();
        tree.set("n_frames=3").unwrap();
        let cfg = tree.build().unwrap();
        assert_eq!(cfg.pgo.max_iters, 7);
        assert_eq!(cfg.pgo.outer_rounds, 3);
        assert_eq!(cfg.scenario.n_frames, 3);
        assert_eq!(cfg.scenario.seed, 5);
    }

    #[test]
    fn echo_round_trips() {
        let mut tree = ConfigTree::from_text(FILE).unwrap();
        tree.set("scenario.pose_noise_sigma=0.4").unwrap();
        let cfg = tree.build().unwrap();
        let echo = cfg.to_toml().unwrap();
        let again = ConfigTree::from_text(&echo).unwrap().build().unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml().unwrap(), echo);
        let d = ExperimentConfig::default();
        assert_eq!(ConfigTree::from_text(&d.to_toml().unwrap()).unwrap().build().unwrap(), d);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = FILE.replace("max_iters = 20", "max_iters = 20\nouter_rounds = 0");
        let err = ConfigTree::from_text(&bad).unwrap().build().unwrap_err();
        assert!(err.is_config_error());
        assert!(err.to_string().starts_with("line 19: invalid value for `pgo.outer_rounds`"), "{err}");

        let err = ConfigTree::from_text("[pgo]\nmax_iter = 3\n").unwrap().build().unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");

        let err = ConfigTree::from_text("[pgo]\nmax_iters = \n").unwrap_err();
        assert!(matches!(err, HydraError::ConfigSyntax { line: Some(2), .. }), "{err}");

        let err = ConfigTree::from_text("[classifier]\ntau = 1.5\n").unwrap().build().unwrap_err();
        assert!(err.to_string().starts_with("line 2: invalid value for `classifier.tau`"), "{err}");
    }

    #[test]
    fn override_errors() {
        let mut tree = ConfigTree::from_text(FILE).unwrap();
        assert!(tree.set("no_equals").is_err());
        assert!(tree.set("scenario.agents.9.id=1").is_err());
        assert!(tree.set("scenario.seed.x=1").is_err());
        let mut tree = ConfigTree::default();
        tree.set("bogus_key=1").unwrap();
        assert!(tree.build().unwrap_err().is_config_error());
        let mut tree = ConfigTree::default();
        tree.set("fusion.nms_iou=2").unwrap();
        assert!(tree.build().is_err());
    }

    #[test]
    fn literals() {
        assert_eq!(parse_literal("0.4"), Value::Float(0.4));
        assert_eq!(parse_literal("3"), Value::Integer(3));
        assert_eq!(parse_literal("hydra_no_pgo"), Value::String("hydra_no_pgo".into()));
        assert_eq!(parse_literal("\"x\""), Value::String("x".into()));
        assert_eq!(canonical_key("pose_noise_sigma"), "scenario.pose_noise_sigma");
        assert_eq!(canonical_key("pgo.gamma"), "pgo.gamma");
    }
}

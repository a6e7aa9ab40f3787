//! Experiment configuration: strict JSON schema, dotted-path overrides and
//! materialized defaults.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::adapter::{InitStrategy, DEFAULT_INIT_STD};
use crate::allocator::{AllocatorMode, BudgetSchedule};
use crate::error::{Error, Result};
use crate::importance::MetricKind;
use crate::trainer::optim::AdamWConfig;
use crate::trainer::task::SyntheticTask;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Linear layer indices (0-based, input side first) that get an adapter.
    /// `None` means every linear layer.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_r_init")]
    pub r_init: usize,
    /// Defaults to `2 · r_init`.
    #[serde(default)]
    pub r_max: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_r_init() -> usize {
    8
}
fn default_alpha() -> f64 {
    16.0
}
fn default_init_std() -> f64 {
    DEFAULT_INIT_STD
}
fn default_true() -> bool {
    true
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_batch_size() -> usize {
    32
}
fn default_log_every() -> usize {
    50
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            layers: None,
            r_init: default_r_init(),
            r_max: None,
            alpha: default_alpha(),
            init_std: default_init_std(),
            bias: true,
        }
    }
}

impl AdapterConfig {
    pub fn r_max(&self) -> usize {
        self.r_max.unwrap_or(2 * self.r_init)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_output_dir")]
    pub dir: String,
}

fn default_output_dir() -> String {
    "flexlora-out".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_output_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub task: SyntheticTask,
    #[serde(default)]
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Weight of the orthogonality penalty.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub schedule: BudgetSchedule,
    #[serde(default)]
    pub metric: MetricKind,
    #[serde(default)]
    pub mode: AllocatorMode,
    #[serde(default)]
    pub init: InitStrategy,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub output: OutputConfig,
    /// Dotted-path overrides applied on top of the file, recorded for the echo.
    #[serde(default)]
    pub overrides: Vec<String>,
}

impl ExperimentConfig {
    /// Parses a config document, applies `overrides` (`path.to.field=value`,
    /// value parsed as JSON and falling back to a string), validates and
    /// materializes defaults.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        if !overrides.is_empty() {
            let recorded = value
                .as_object_mut()
                .ok_or_else(|| Error::config("<document>", "top level must be an object"))?
                .entry("overrides")
                .or_insert_with(|| Value::Array(Vec::new()));
            if let Value::Array(list) = recorded {
                list.extend(overrides.iter().cloned().map(Value::String));
            }
        }
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.materialize();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills every optional field with its effective value.
    pub fn materialize(&mut self) {
        let n = self.task.linear_layers();
        if self.adapters.layers.is_none() {
            self.adapters.layers = Some((0..n).collect());
        }
        if self.adapters.r_max.is_none() {
            self.adapters.r_max = Some(2 * self.adapters.r_init);
        }
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        self.adapters
            .layers
            .clone()
            .unwrap_or_else(|| (0..self.task.linear_layers()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        self.task.validate()?;
        let n = self.task.linear_layers();
        let layers = self.adapted_layers();
        if layers.is_empty() {
            return Err(Error::config("adapters.layers", "at least one layer must be adapted"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &l in &layers {
            if l >= n {
                return Err(Error::config("adapters.layers", format!("layer {l} out of range (model has {n})")));
            }
            if !seen.insert(l) {
                return Err(Error::config("adapters.layers", format!("layer {l} listed twice")));
            }
        }
        let a = &self.adapters;
        if a.r_init == 0 {
            return Err(Error::config("adapters.r_init", "must be positive"));
        }
        if a.r_max() < a.r_init {
            return Err(Error::config("adapters.r_max", "must be >= r_init"));
        }
        if !(a.alpha.is_finite() && a.alpha > 0.0) {
            return Err(Error::config("adapters.alpha", "must be positive"));
        }
        if !(a.init_std.is_finite() && a.init_std > 0.0) {
            return Err(Error::config("adapters.init_std", "must be positive"));
        }
        self.optimizer.validate()?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be finite and non-negative"));
        }
        if self.schedule.t_warmup >= self.schedule.total_steps {
            // allocation never starts: fixed-rank training
            if self.schedule.b0 == 0 || self.schedule.delta_t == 0 {
                self.schedule.validate()?;
            }
        } else {
            self.schedule.validate()?;
        }
        self.metric.validate()?;
        self.init.validate().map_err(|e| Error::config("init", e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 over the canonical JSON form, excluding the output location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("output");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Sets `path.to.field` in a JSON document. Intermediate objects are created
/// as needed.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like path.to.field=value"))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config(path, "malformed override path"));
    }
    let new_value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = match cursor {
            Value::Object(map) => map,
            _ => {
                return Err(Error::config(
                    parts[..i].join("."),
                    "cannot descend into a non-object value",
                ))
            }
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new_value);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "name": "tiny",
        "seed": 3,
        "task": {"kind": "low_rank_teacher", "layer_dims": [4, 5, 3], "teacher_ranks": [2, 1], "samples": 16},
        "schedule": {"b0": 1, "t_warmup": 5, "t_final": 5, "total_steps": 30, "delta_t": 5}
    }"#;

    #[test]
    fn minimal_config_materializes_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.adapters.layers, Some(vec![0, 1]));
        assert_eq!(cfg.adapters.r_max, Some(16));
        assert_eq!(cfg.gamma, 0.1);
        assert_eq!(cfg.metric, MetricKind::default());
        let echo = cfg.to_json_pretty();
        assert!(echo.contains("\"r_max\": 16"));
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let cfg = ExperimentConfig::parse(MINIMAL, &["schedule.b0=2".into(), "mode=prune_only".into()]).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_json_pretty(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.schedule.b0, 2);
        assert_eq!(again.mode, AllocatorMode::PruneOnly);
        assert_eq!(again.overrides, vec!["schedule.b0=2", "mode=prune_only"]);
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace(r#""seed": 3,"#, "");
        let err = ExperimentConfig::parse(&text, &[]).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let text = MINIMAL.replace(r#""samples": 16"#, r#""samples": 16, "bogus": 1"#);
        let err = ExperimentConfig::parse(&text, &[]).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "task");
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for ov in [
            "schedule.t_final=30",
            "adapters.layers=[5]",
            "batch_size=0",
            "gamma=-1",
            "schema_version=2",
            "adapters.r_max=1",
            "metric={\"kind\":\"sensitivity\",\"beta1\":1.5}",
        ] {
            assert!(ExperimentConfig::parse(MINIMAL, &[ov.into()]).is_err(), "{ov} accepted");
        }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::parse(MINIMAL, &[]).unwrap();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 4;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn override_syntax() {
        let mut v: Value = serde_json::from_str(r#"{"a": {"b": 1}, "s": 2}"#).unwrap();
        apply_override(&mut v, "a.b=5").unwrap();
        apply_override(&mut v, "a.c.d=\"x\"").unwrap();
        apply_override(&mut v, "name=plain words").unwrap();
        assert_eq!(v["a"]["b"], 5);
        assert_eq!(v["a"]["c"]["d"], "x");
        assert_eq!(v["name"], "plain words");
        assert!(apply_override(&mut v, "s.x=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
    }
}

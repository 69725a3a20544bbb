//! Scenario configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! layout = layout.json
//! trace = trace.jsonl
//! policy = rotary
//! slot_count = 64
//! per_slot_limit_bytes = 56000000
//!
//! [rotary]
//! lambda = 1.0
//! tau = 0.9
//! ```
//!
//! Keys under a `[rotary]` header may also be written as `rotary.lambda`.
//! Relative paths resolve against the scenario file's directory. Unknown keys
//! are rejected and missing required keys are reported by name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::controller::RotaryParams;
use crate::cost::{CostParameters, MemoryModel, StartupInputs};
use crate::policy::PolicyKind;
use crate::residency::{LayoutError, ModelLayout};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("missing required key {0:?}")]
    MissingKey(&'static str),
    #[error("key {key:?}: {message}")]
    InvalidValue { key: String, message: String },
    #[error("layout {path}: {source}")]
    Layout { path: PathBuf, source: LayoutError },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

const REQUIRED: &[&str] = &[
    "layout",
    "policy",
    "slot_count",
    "per_slot_limit_bytes",
    "context_length",
    "h2d_bandwidth_bytes_per_s",
    "compute_per_token_s",
    "device_budget_bytes",
    "host_budget_bytes",
];

const OPTIONAL: &[&str] = &[
    "trace",
    "seed",
    "host_pinned_layers",
    "per_transfer_latency_s",
    "overlap_factor",
    "fixed_overhead_bytes",
    "kv_bytes_per_token",
    "host_transient_factor",
    "rotary.lambda",
    "rotary.tau",
    "rotary.k_step",
    "rotary.history",
    "rotary.snapshot_period",
    "rotary.tau_boundary",
];

fn is_known(key: &str) -> bool {
    REQUIRED.contains(&key) || OPTIONAL.contains(&key)
}

/// Raw key/value view of a scenario file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioFile {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl ScenarioFile {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ScenarioError> {
        let mut values = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ScenarioError::Syntax {
                        line: line_no,
                        message: format!("unterminated section header {line:?}"),
                    })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ScenarioError::Syntax {
                line: line_no,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim();
            let key = match &section {
                Some(s) => format!("{s}.{key}"),
                None => key.to_string(),
            };
            if !is_known(&key) {
                return Err(ScenarioError::UnknownKey { line: line_no, key });
            }
            let value = unquote(value.trim()).to_string();
            if values.insert(key.clone(), value).is_some() {
                return Err(ScenarioError::Syntax {
                    line: line_no,
                    message: format!("key {key:?} set twice"),
                });
            }
        }
        Ok(ScenarioFile {
            values,
            base_dir: base_dir.into(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    /// Overrides one key, e.g. from a `--set key=value` flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ScenarioError> {
        let key = key.trim();
        if !is_known(key) {
            return Err(ScenarioError::UnknownKey {
                line: 0,
                key: key.to_string(),
            });
        }
        self.values
            .insert(key.to_string(), unquote(value.trim()).to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn trace_path(&self) -> Option<PathBuf> {
        self.get("trace").map(|t| self.resolve(t))
    }

    fn required(&self, key: &'static str) -> Result<&str, ScenarioError> {
        self.get(key).ok_or(ScenarioError::MissingKey(key))
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: Option<T>) -> Result<T, ScenarioError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            Some(v) => v.parse().map_err(|e: T::Err| ScenarioError::InvalidValue {
                key: key.to_string(),
                message: e.to_string(),
            }),
            None => default.ok_or_else(|| {
                let k = REQUIRED.iter().find(|k| **k == key).copied().unwrap_or("?");
                ScenarioError::MissingKey(k)
            }),
        }
    }

    fn non_negative(&self, key: &str, default: Option<f64>) -> Result<f64, ScenarioError> {
        let v: f64 = self.num(key, default)?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(ScenarioError::InvalidValue {
                key: key.to_string(),
                message: format!("must be a finite non-negative number, got {v}"),
            });
        }
        Ok(v)
    }

    pub fn rotary_params(&self) -> Result<RotaryParams, ScenarioError> {
        let d = RotaryParams::default();
        Ok(RotaryParams {
            lambda: self.num("rotary.lambda", Some(d.lambda))?,
            tau: self.num("rotary.tau", Some(d.tau))?,
            k_step: self.num("rotary.k_step", Some(d.k_step))?,
            history: self.num("rotary.history", Some(d.history))?,
            snapshot_period: self.num("rotary.snapshot_period", Some(d.snapshot_period))?,
            tau_boundary: self.num("rotary.tau_boundary", Some(d.tau_boundary))?,
        })
    }

    /// Resolves every key, loads the layout and validates the result.
    pub fn to_config(&self) -> Result<ScenarioConfig, ScenarioError> {
        for key in REQUIRED {
            self.required(key)?;
        }
        let layout_path = self.resolve(self.required("layout")?);
        let layout = ModelLayout::read(&layout_path).map_err(|source| ScenarioError::Layout {
            path: layout_path.clone(),
            source,
        })?;
        let seed: u64 = self.num("seed", Some(0))?;
        let policy = PolicyKind::parse(self.required("policy")?, seed, self.rotary_params()?)
            .map_err(|e| ScenarioError::InvalidValue {
                key: "policy".into(),
                message: e.to_string(),
            })?;
        let cfg = ScenarioConfig {
            layout,
            context_length: self.num("context_length", None)?,
            host_pinned_layers: self.num("host_pinned_layers", Some(0))?,
            policy,
            slot_count: self.num("slot_count", None)?,
            per_slot_limit: self.num("per_slot_limit_bytes", None)?,
            cost: CostParameters {
                h2d_bandwidth: self.non_negative("h2d_bandwidth_bytes_per_s", None)?,
                per_transfer_latency: self.non_negative("per_transfer_latency_s", Some(0.0))?,
                compute_per_token: self.non_negative("compute_per_token_s", None)?,
                overlap_factor: self.non_negative("overlap_factor", Some(0.0))?,
            },
            memory: MemoryModel {
                device_budget: self.num("device_budget_bytes", None)?,
                host_budget: self.num("host_budget_bytes", None)?,
                fixed_overhead: self.num("fixed_overhead_bytes", Some(0))?,
                kv_bytes_per_token: self.num("kv_bytes_per_token", Some(0))?,
                host_transient_factor: self.non_negative("host_transient_factor", Some(1.0))?,
            },
            seed,
        };
        cfg.validate().map_err(ScenarioError::Invalid)?;
        Ok(cfg)
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub layout: ModelLayout,
    pub context_length: u64,
    pub host_pinned_layers: u32,
    pub policy: PolicyKind,
    pub slot_count: usize,
    pub per_slot_limit: u64,
    pub cost: CostParameters,
    pub memory: MemoryModel,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.slot_count == 0 {
            return Err("slot_count must be at least 1".into());
        }
        if self.per_slot_limit == 0 {
            return Err("per_slot_limit_bytes must be positive".into());
        }
        let expert_layers = self.layout.expert_layers().len();
        if self.host_pinned_layers as usize > expert_layers {
            return Err(format!(
                "host_pinned_layers {} exceeds the {expert_layers} expert-bearing layers",
                self.host_pinned_layers
            ));
        }
        self.cost.validate()?;
        self.memory.validate()?;
        if let PolicyKind::Rotary(p) = &self.policy {
            p.validate(self.slot_count).map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn startup_inputs(&self) -> StartupInputs<'_> {
        StartupInputs {
            layout: &self.layout,
            slot_count: self.slot_count,
            per_slot_limit: self.per_slot_limit,
            context_length: self.context_length,
            host_pinned_layers: self.host_pinned_layers,
            memory: &self.memory,
        }
    }

    pub fn with_policy(&self, policy: PolicyKind) -> Self {
        ScenarioConfig {
            policy,
            ..self.clone()
        }
    }
}

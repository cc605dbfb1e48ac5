//! Run configuration: embedded defaults, merged with an optional JSON file,
//! then with `--set path.to.key=value` overrides.

use cotransport::cognition::CognitionConfig;
use cotransport::eval::{EvalConfig, Variant};
use cotransport::marl::{GradOracleConfig, Prop1Config, TrainConfig};
use cotransport_hitl::SessionConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::PathBuf;
use thiserror::Error;

/// Environment variable that replaces the default output root.
pub const OUT_ROOT_VAR: &str = "COTRANSPORT_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub const SUITE: [&str; 9] = ["S11", "S12", "S13", "S21", "S22", "S23", "S31", "S32", "S33"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("override {0} is not of the form key=value")]
    Override(String),
    #[error("config file {path}: {msg}")]
    File { path: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub scenarios: Vec<String>,
    /// Directory with `agent0.ckpt` / `agent1.ckpt`; absent means scripted.
    pub ckpt: Option<PathBuf>,
    #[serde(flatten)]
    pub cfg: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateSection {
    pub scenario: String,
    pub ckpt: Option<PathBuf>,
    /// Separately trained actors for the no-cognition variant.
    pub no_cognition_ckpt: Option<PathBuf>,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySection {
    pub file: Option<PathBuf>,
    /// Record a fresh episode into `file` before verifying it.
    pub record: bool,
    pub scenario: String,
    pub ckpt: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSection {
    pub scenario: String,
    /// Argument vector of an external planner process.
    pub planner: Option<Vec<String>>,
    pub planner_timeout_s: f64,
    pub cognition: CognitionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeSection {
    pub scenario: String,
    pub ckpt: Option<PathBuf>,
    pub addr: String,
    pub session: SessionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub replay: ReplaySection,
    pub plan: PlanSection,
    pub serve: ServeSection,
    pub diag_grad: GradOracleConfig,
    pub diag_prop1: Prop1Config,
}

impl RunConfig {
    pub fn defaults(command: &str) -> Self {
        Self {
            command: command.into(),
            out: None,
            train: TrainConfig::default(),
            eval: EvalSection {
                scenarios: SUITE.iter().map(|s| s.to_string()).collect(),
                ckpt: None,
                cfg: EvalConfig::default(),
            },
            ablate: AblateSection {
                scenario: "S33".into(),
                ckpt: None,
                no_cognition_ckpt: None,
                variants: vec![Variant::Full, Variant::NoSkill, Variant::NoCognition],
            },
            replay: ReplaySection {
                file: None,
                record: false,
                scenario: "S21".into(),
                ckpt: None,
                seed: 0,
            },
            plan: PlanSection {
                scenario: "S22".into(),
                planner: None,
                planner_timeout_s: 10.0,
                cognition: CognitionConfig::default(),
            },
            serve: ServeSection {
                scenario: "S21".into(),
                ckpt: None,
                addr: "127.0.0.1:8765".into(),
                session: SessionConfig::default(),
            },
            diag_grad: GradOracleConfig::default(),
            diag_prop1: Prop1Config::default(),
        }
    }

    /// Defaults, then the file, then the overrides, in that order.
    pub fn resolve(command: &str, file: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(Self::defaults(command)).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
                path: path.into(),
                msg: e.to_string(),
            })?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| ConfigError::File {
                path: path.into(),
                msg: e.to_string(),
            })?;
            merge(&mut tree, patch, "")?;
            // the stored command never overrides the one being run
            tree["command"] = Value::String(command.into());
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Recursive merge that only accepts keys already present in `base`.
pub fn merge(base: &mut Value, patch: Value, path: &str) -> Result<(), ConfigError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| ConfigError::UnknownKey(sub.clone()))?;
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is read as JSON, or as a plain string when it is
/// not valid JSON.
pub fn apply_override(tree: &mut Value, text: &str) -> Result<(), ConfigError> {
    let (key, raw) = text.split_once('=').ok_or_else(|| ConfigError::Override(text.into()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut slot = &mut *tree;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
    }
    *slot = value;
    Ok(())
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_string() {
        let c = RunConfig::resolve(
            "train",
            None,
            &["train.lr=0.0003".into(), "train.scenario=S21".into(), "train.hidden=[8,8]".into()],
        )
        .unwrap();
        assert_eq!(c.train.lr, 3e-4);
        assert_eq!(c.train.scenario, "S21");
        assert_eq!(c.train.hidden, vec![8, 8]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::resolve("train", None, &["train.lrr=1".into()]),
            Err(ConfigError::UnknownKey(_))
        ));
        let mut tree = serde_json::to_value(RunConfig::defaults("x")).unwrap();
        let patch = serde_json::json!({"train": {"epochz": 3}});
        assert!(merge(&mut tree, patch, "").is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::defaults("eval");
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}

//! Run configuration: TOML sections mirroring the core configs.
//!
//! A JSON file is accepted too, either a bare config or a `summary.json`
//! whose `config` field echoes the config of an earlier run.

use std::fs;
use std::path::{Path, PathBuf};

use perfed_core::experiment::{DataConfig, ModelChoice, ModelConfig};
use perfed_core::federation::{clients_for_fraction, FederationConfig, LrSchedule};
use perfed_core::par::Execution;
use perfed_core::theory::{TheoryCheckConfig, ToyConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    PerfedCkt,
    Fedavg,
    Local,
    TheoryCheck,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Master seed for every random stream.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub federation: FederationSection,
    pub theory: TheoryCheckConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::default(),
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            federation: FederationSection::default(),
            theory: TheoryCheckConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Softmax,
    Mlp,
    /// Architecture by dataset-size tercile: softmax, `hidden_medium`, `hidden_large`.
    Tercile,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden: usize,
    pub hidden_medium: usize,
    pub hidden_large: usize,
    pub init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Softmax,
            hidden: 32,
            hidden_medium: 16,
            hidden_large: 64,
            init_scale: ModelConfig::default().init_scale,
        }
    }
}

impl ModelSection {
    pub fn to_core(self) -> ModelConfig {
        let choice = match self.kind {
            ModelKind::Softmax => ModelChoice::Softmax,
            ModelKind::Mlp => ModelChoice::Mlp {
                hidden: self.hidden,
            },
            ModelKind::Tercile => ModelChoice::Tercile {
                hidden_medium: self.hidden_medium,
                hidden_large: self.hidden_large,
            },
        };
        ModelConfig {
            choice,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    #[default]
    Constant,
    RobbinsMonro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_iters: usize,
    /// Exactly one of `clients_per_round` and `client_fraction` may be set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    /// `C`, giving `m = round(C·K)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_fraction: Option<f64>,
    pub batch: usize,
    pub public_batch: usize,
    pub lambda: f64,
    pub clusters: usize,
    pub lr: LrKind,
    /// Constant step, or `eta0` of the Robbins-Monro schedule.
    pub eta: f64,
    pub decay: f64,
    pub eval_interval: usize,
    pub execution: Execution,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        let d = FederationConfig::default();
        Self {
            rounds: d.rounds,
            local_iters: d.local_iters,
            clients_per_round: None,
            client_fraction: None,
            batch: d.batch,
            public_batch: d.public_batch,
            lambda: d.lambda,
            clusters: d.clusters,
            lr: LrKind::Constant,
            eta: 0.05,
            decay: 0.0,
            eval_interval: d.eval_interval,
            execution: d.execution,
            kmeans_max_iters: d.kmeans_max_iters,
            kmeans_tol: d.kmeans_tol,
        }
    }
}

impl FederationSection {
    pub fn to_core(&self, seed: u64, num_clients: usize) -> Result<FederationConfig, CliError> {
        let clients_per_round = match (self.clients_per_round, self.client_fraction) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "federation: set either clients_per_round or client_fraction, not both".into(),
                ))
            }
            (Some(m), None) => m,
            (None, Some(c)) if c > 0.0 && c <= 1.0 => clients_for_fraction(c, num_clients),
            (None, Some(c)) => {
                return Err(CliError::Config(format!(
                    "federation.client_fraction {c} must be in (0, 1]"
                )))
            }
            (None, None) => FederationConfig::default().clients_per_round,
        };
        let lr = match self.lr {
            LrKind::Constant => LrSchedule::Constant { eta: self.eta },
            LrKind::RobbinsMonro => LrSchedule::RobbinsMonro {
                eta0: self.eta,
                decay: self.decay,
            },
        };
        Ok(FederationConfig {
            rounds: self.rounds,
            local_iters: self.local_iters,
            clients_per_round,
            batch: self.batch,
            public_batch: self.public_batch,
            lambda: self.lambda,
            clusters: self.clusters,
            lr,
            seed,
            eval_interval: self.eval_interval,
            execution: self.execution,
            kmeans_max_iters: self.kmeans_max_iters,
            kmeans_tol: self.kmeans_tol,
            record_centroids: false,
        })
    }
}

pub fn parse_toml(text: &str) -> Result<RunConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

pub fn parse_json(text: &str) -> Result<RunConfig, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let inner = match value {
        serde_json::Value::Object(mut map) if map.contains_key("config") => {
            map.remove("config").unwrap_or_default()
        }
        other => other,
    };
    serde_json::from_value(inner).map_err(|e| format!("field error: {e}"))
}

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|x| x == "json") {
        parse_json(&text)
    } else {
        parse_toml(&text)
    };
    parsed.map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

//! The JSON run summary written by `fnn cv --out`.
//!
//! One summary document per run, serialized as a single compact JSON line.
//! Field order is fixed by the struct, so identical runs produce identical
//! bytes — reproducibility checks diff the files directly.

use fnn_core::config::RunConfig;
use fnn_core::report::CvSummary;
use serde::{Deserialize, Serialize};

/// Non-numeric choices that affect results, echoed so a reader can interpret
/// the numbers without consulting the config grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionLog {
    /// How a score becomes a kin/non-kin call.
    pub prediction_rule: String,
    /// Sign and magnitude of the non-kin gap weight actually used.
    pub w_neg: f64,
    /// False when `w0 = 0`: the centers stay at their initialization.
    pub center_updates_enabled: bool,
    /// The learning rate is multiplied by `lr_decay` after each completed
    /// interval of this many epochs.
    pub decay_interval: usize,
    pub lr_decay: f64,
}

/// Complete record of one `cv` invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    /// Canonical one-line rendering of the configuration.
    pub config: String,
    /// Hex SHA-256 of `config`.
    pub config_sha256: String,
    pub decisions: DecisionLog,
    /// One entry per relationship, each carrying five fold accuracies and
    /// their mean.
    pub relationships: Vec<CvSummary>,
    /// Mean of the relationship means; absent when no relationship ran.
    pub overall_mean: Option<f64>,
}

impl RunSummary {
    pub fn new(cfg: &RunConfig, seed: u64, relationships: Vec<CvSummary>) -> Self {
        let overall_mean = if relationships.is_empty() {
            None
        } else {
            Some(
                relationships.iter().map(|s| s.mean_accuracy).sum::<f64>()
                    / relationships.len() as f64,
            )
        };
        RunSummary {
            seed,
            config: cfg.canonical_string(),
            config_sha256: fnn_core::checkpoint::config_hash_hex(cfg),
            decisions: DecisionLog {
                prediction_rule: "sigmoid(logit) > 0.5".to_string(),
                w_neg: cfg.w_neg,
                center_updates_enabled: cfg.w0 != 0.0,
                decay_interval: cfg.decay_epoch_resolved(),
                lr_decay: cfg.lr_decay,
            },
            relationships,
            overall_mean,
        }
    }

    /// The document as one JSON line, newline included.
    pub fn to_json_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("summary always serializes");
        line.push('\n');
        line
    }
}

//! Run reporting: typed JSON-Lines records and a plain-text results table.
//!
//! A run log is one header record, one record per training epoch, and one
//! cross-validation summary per relationship. Serialization uses a fixed
//! field order and shortest-roundtrip float formatting, so two runs with
//! identical configuration and seed produce byte-identical records.

use serde::{Deserialize, Serialize};

/// Per-epoch mean values of the seven unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct LossComponents {
    pub kin_bce: f64,
    pub cross_pos: f64,
    pub cross_neg: f64,
    pub direction: f64,
    pub triplet: f64,
    pub family_id: f64,
    pub center: f64,
}

/// One training epoch on one fold.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochReport {
    /// Held-out fold of this training run.
    pub fold: u8,
    /// Epoch counter `t`, starting at 0.
    pub epoch: usize,
    /// Learning rate in effect this epoch (after decay).
    pub lr: f64,
    /// Scheduled center weight `w0 * alpha^t`.
    pub center_weight: f64,
    /// Fused loss, averaged over the epoch's iterations.
    pub epoch_loss: f64,
    /// Training accuracy under the run's prediction rule.
    pub train_accuracy: f64,
    /// Unweighted per-term means over the epoch's iterations.
    pub components: LossComponents,
}

/// Head record of a run log: the decisions that apply to every line after
/// it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunHeader {
    /// How scores become predictions.
    pub prediction_rule: String,
    /// Sign and size of the non-kin gap weight actually used.
    pub w_neg: f64,
    /// False when the center weight is zero and the centers stay frozen.
    pub center_updates_enabled: bool,
    pub seed: u64,
    /// Canonical one-line rendering of the full configuration.
    pub config: String,
}

/// Final record of a five-fold run on one relationship.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CvSummary {
    pub relationship: String,
    pub seed: u64,
    /// Hex SHA-256 of the canonical configuration string.
    pub config_sha256: String,
    /// Test accuracy per fold, in fold order 1..=5.
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// One line of a run log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportRecord {
    Header(RunHeader),
    Epoch(EpochReport),
    CvSummary(CvSummary),
}

/// Serializes one record as a JSON-Lines row (newline included).
pub fn jsonl_line(record: &ReportRecord) -> String {
    let mut line = serde_json::to_string(record).expect("report records always serialize");
    line.push('\n');
    line
}

/// Parses one JSON-Lines row.
pub fn parse_line(line: &str) -> Result<ReportRecord, serde_json::Error> {
    serde_json::from_str(line)
}

/// Renders summaries as an aligned text table, one row per relationship.
pub fn format_cv_table(summaries: &[CvSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14}{:>8}{:>8}{:>8}{:>8}{:>8}{:>9}\n",
        "relationship", "fold1", "fold2", "fold3", "fold4", "fold5", "mean"
    ));
    for s in summaries {
        out.push_str(&format!("{:<14}", s.relationship));
        for i in 0..5 {
            match s.fold_accuracies.get(i) {
                Some(a) => out.push_str(&format!("{:>8.4}", a)),
                None => out.push_str(&format!("{:>8}", "-")),
            }
        }
        out.push_str(&format!("{:>9.4}\n", s.mean_accuracy));
    }
    if summaries.len() > 1 {
        let mean: f64 =
            summaries.iter().map(|s| s.mean_accuracy).sum::<f64>() / summaries.len() as f64;
        out.push_str(&format!("{:<14}{:>40}{:>9.4}\n", "overall", "", mean));
    }
    out
}

/// Renders mean accuracies as one wide row — a column per relationship (its
/// table label, e.g. `F-S`) plus a trailing `Mean` column averaging them.
/// Empty input yields just the `Mean` header over an empty row.
pub fn format_mean_table(summaries: &[CvSummary]) -> String {
    let mut header = String::new();
    let mut row = String::new();
    for s in summaries {
        header.push_str(&format!("{:>8}", s.relationship));
        row.push_str(&format!("{:>8.4}", s.mean_accuracy));
    }
    header.push_str(&format!("{:>8}\n", "Mean"));
    if summaries.is_empty() {
        row.push_str(&format!("{:>8}\n", "-"));
    } else {
        let mean: f64 =
            summaries.iter().map(|s| s.mean_accuracy).sum::<f64>() / summaries.len() as f64;
        row.push_str(&format!("{:>8.4}\n", mean));
    }
    header + &row
}

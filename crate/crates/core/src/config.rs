//! Run configuration: hyperparameters, loss weights, and model sizes.
//!
//! Configs live in plain `key=value` files with `#` comments. Every key has
//! a default, so an empty file (or no file at all) is a valid config;
//! individual keys can be overridden from the command line.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: key `{key}` expects {expected}, got `{value}`")]
    BadValue { line: usize, key: String, value: String, expected: &'static str },
    #[error("unknown config key `{key}`")]
    UnknownOverride { key: String },
    #[error("config key `{key}` expects {expected}, got `{value}`")]
    BadOverride { key: String, value: String, expected: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// All tunables for training and evaluation.
///
/// `w1..w6` weight, in order: the kinship cross-entropy, the positive-pair
/// feature gap, the negative-pair feature gap, the direction (cosine) term,
/// the triplet term, and the family-identity term. The center term is
/// weighted by the scheduled product `w0 * alpha^epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Adam learning rate for all non-center parameters.
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Multiplier applied to the learning rate per completed decay interval.
    pub lr_decay: f64,
    /// Length of the decay interval in epochs; `None` means `epochs / 2`.
    pub decay_epoch: Option<usize>,
    /// Growth base of the center-loss schedule; must be >= 1.
    pub alpha: f64,
    /// Base weight of the center loss; 0 disables center updates entirely.
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub w6: f64,
    /// Extra factors on the positive/negative feature-gap terms.
    pub w_pos: f64,
    pub w_neg: f64,
    /// Triplet hinge margin.
    pub margin: f64,
    /// Widths of the two hidden layers in the kinship head.
    pub h1: usize,
    pub h2: usize,
    /// Gated graph-convolution layers per component graph.
    pub layers: usize,
    /// Number of contiguous feature parts fed to the family-identity head.
    pub parts: usize,
    /// Node-state width inside each component graph.
    pub dh: usize,
    /// Share one set of layer weights across all nine component graphs.
    pub share_params: bool,
    /// Plain-SGD rate for the center vectors.
    pub center_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lr: 1e-5,
            batch: 64,
            epochs: 70,
            lr_decay: 0.5,
            decay_epoch: None,
            alpha: 1.05,
            w0: 0.01,
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            w5: 1.0,
            w6: 1.0,
            w_pos: 1.0,
            w_neg: -1.0,
            margin: 0.0,
            h1: 256,
            h2: 8,
            layers: 4,
            parts: 4,
            dh: 64,
            share_params: false,
            center_lr: 0.5,
        }
    }
}

enum SetFailure {
    Unknown,
    Bad(&'static str),
}

fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), SetFailure> {
    fn float(v: &str) -> Result<f64, SetFailure> {
        v.parse::<f64>().map_err(|_| SetFailure::Bad("a number"))
    }
    fn int(v: &str) -> Result<usize, SetFailure> {
        v.parse::<usize>().map_err(|_| SetFailure::Bad("a non-negative integer"))
    }
    match key {
        "lr" => cfg.lr = float(value)?,
        "batch" => cfg.batch = int(value)?,
        "epochs" => cfg.epochs = int(value)?,
        "lr_decay" => cfg.lr_decay = float(value)?,
        "decay_epoch" => {
            cfg.decay_epoch = if value == "auto" { None } else { Some(int(value)?) };
        }
        "alpha" => cfg.alpha = float(value)?,
        "w0" => cfg.w0 = float(value)?,
        "w1" => cfg.w1 = float(value)?,
        "w2" => cfg.w2 = float(value)?,
        "w3" => cfg.w3 = float(value)?,
        "w4" => cfg.w4 = float(value)?,
        "w5" => cfg.w5 = float(value)?,
        "w6" => cfg.w6 = float(value)?,
        "w_pos" => cfg.w_pos = float(value)?,
        "w_neg" => cfg.w_neg = float(value)?,
        "margin" => cfg.margin = float(value)?,
        "h1" => cfg.h1 = int(value)?,
        "h2" => cfg.h2 = int(value)?,
        "layers" => cfg.layers = int(value)?,
        "parts" => cfg.parts = int(value)?,
        "dh" => cfg.dh = int(value)?,
        "share_params" => {
            cfg.share_params = match value {
                "true" => true,
                "false" => false,
                _ => return Err(SetFailure::Bad("`true` or `false`")),
            };
        }
        "center_lr" => cfg.center_lr = float(value)?,
        _ => return Err(SetFailure::Unknown),
    }
    Ok(())
}

impl RunConfig {
    /// Parses a config file and validates the result.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_str(&text)
    }

    /// Parses `key=value` text (with `#` comments) over the defaults.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, text: stripped.to_string() })?;
            let (key, value) = (key.trim(), value.trim());
            set_key(&mut cfg, key, value).map_err(|e| match e {
                SetFailure::Unknown => ConfigError::UnknownKey { line, key: key.to_string() },
                SetFailure::Bad(expected) => ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    expected,
                },
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a single `key=value` override (the CLI's `--set`).
    /// Callers should re-run [`RunConfig::validate`] after the last override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        set_key(self, key, value).map_err(|e| match e {
            SetFailure::Unknown => ConfigError::UnknownOverride { key: key.to_string() },
            SetFailure::Bad(expected) => ConfigError::BadOverride {
                key: key.to_string(),
                value: value.to_string(),
                expected,
            },
        })
    }

    /// Cross-field sanity checks shared by every entry point.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        // lr = 0 is legal: it freezes the Adam-driven parameters, which is
        // useful for schedule and center diagnostics.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return fail(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        if !(self.center_lr.is_finite() && self.center_lr >= 0.0) {
            return fail(format!("center_lr must be >= 0, got {}", self.center_lr));
        }
        if self.batch == 0 {
            return fail("batch must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return fail(format!("alpha must be >= 1 so the center weight never shrinks, got {}", self.alpha));
        }
        if !(self.w0.is_finite() && self.w0 >= 0.0) {
            return fail(format!("w0 must be >= 0, got {}", self.w0));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return fail(format!("margin must be >= 0, got {}", self.margin));
        }
        for (name, v) in [
            ("w1", self.w1),
            ("w2", self.w2),
            ("w3", self.w3),
            ("w4", self.w4),
            ("w5", self.w5),
            ("w6", self.w6),
            ("w_pos", self.w_pos),
            ("w_neg", self.w_neg),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite, got {v}"));
            }
        }
        if self.h2 < 2 {
            return fail(format!("h2 must be at least 2 (one center per class needs room), got {}", self.h2));
        }
        if self.h1 <= self.h2 {
            return fail(format!("h1 ({}) must exceed h2 ({})", self.h1, self.h2));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.dh == 0 {
            return fail("dh must be at least 1".into());
        }
        if self.parts == 0 {
            return fail("parts must be at least 1".into());
        }
        if !(self.layers * self.dh).is_multiple_of(self.parts) {
            return fail(format!(
                "parts ({}) must divide the readout width layers*dh = {}",
                self.parts,
                self.layers * self.dh
            ));
        }
        Ok(())
    }

    /// Epoch at which the one-shot learning-rate decay fires.
    pub fn decay_epoch_resolved(&self) -> usize {
        self.decay_epoch.unwrap_or(self.epochs / 2)
    }

    /// Fixed-order textual form; feeds the checkpoint config hash and makes
    /// summaries reproducible byte-for-byte.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr={:?}", self.lr);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "lr_decay={:?}", self.lr_decay);
        match self.decay_epoch {
            Some(e) => {
                let _ = writeln!(s, "decay_epoch={e}");
            }
            None => {
                let _ = writeln!(s, "decay_epoch=auto");
            }
        }
        let _ = writeln!(s, "alpha={:?}", self.alpha);
        let _ = writeln!(s, "w0={:?}", self.w0);
        let _ = writeln!(s, "w1={:?}", self.w1);
        let _ = writeln!(s, "w2={:?}", self.w2);
        let _ = writeln!(s, "w3={:?}", self.w3);
        let _ = writeln!(s, "w4={:?}", self.w4);
        let _ = writeln!(s, "w5={:?}", self.w5);
        let _ = writeln!(s, "w6={:?}", self.w6);
        let _ = writeln!(s, "w_pos={:?}", self.w_pos);
        let _ = writeln!(s, "w_neg={:?}", self.w_neg);
        let _ = writeln!(s, "margin={:?}", self.margin);
        let _ = writeln!(s, "h1={}", self.h1);
        let _ = writeln!(s, "h2={}", self.h2);
        let _ = writeln!(s, "layers={}", self.layers);
        let _ = writeln!(s, "parts={}", self.parts);
        let _ = writeln!(s, "dh={}", self.dh);
        let _ = writeln!(s, "share_params={}", self.share_params);
        let _ = writeln!(s, "center_lr={:?}", self.center_lr);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr, 1e-5);
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.epochs, 70);
        assert_eq!(cfg.lr_decay, 0.5);
        assert_eq!(cfg.decay_epoch_resolved(), 35);
        assert_eq!(cfg.alpha, 1.05);
        assert_eq!(cfg.w0, 0.01);
        assert_eq!(cfg.w_neg, -1.0);
        assert_eq!(cfg.h1, 256);
        assert_eq!(cfg.h2, 8);
        assert_eq!(cfg.layers, 4);
        assert_eq!(cfg.parts, 4);
        assert_eq!(cfg.dh, 64);
        assert!(!cfg.share_params);
        cfg.validate().unwrap();
    }

    #[test]
    fn parses_comments_blanks_and_overrides() {
        let text = "\n# a comment\nlr = 0.001   # trailing comment\nbatch=16\nshare_params=true\ndecay_epoch=10\n";
        let cfg = RunConfig::parse_str(text).unwrap();
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.batch, 16);
        assert!(cfg.share_params);
        assert_eq!(cfg.decay_epoch, Some(10));
        // Untouched keys keep their defaults.
        assert_eq!(cfg.epochs, 70);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse_str("lr=0.1\nlearning_rate=0.1\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "learning_rate");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_value_reports_key_and_line() {
        let err = RunConfig::parse_str("batch=sixty-four").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        assert!(err.to_string().contains("batch"));
    }

    #[test]
    fn missing_equals_is_a_syntax_error() {
        let err = RunConfig::parse_str("batch 64").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
    }

    #[test]
    fn validation_rejects_shrinking_center_schedule() {
        let err = RunConfig::parse_str("alpha=0.9").unwrap_err();
        assert!(err.to_string().contains("alpha"));
    }

    #[test]
    fn validation_rejects_indivisible_parts() {
        // layers*dh = 256 by default; 7 does not divide it.
        let err = RunConfig::parse_str("parts=7").unwrap_err();
        assert!(err.to_string().contains("parts"));
    }

    #[test]
    fn validation_rejects_narrow_first_hidden_layer() {
        let err = RunConfig::parse_str("h1=8\nh2=8").unwrap_err();
        assert!(err.to_string().contains("h1"));
    }

    #[test]
    fn canonical_string_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.025").unwrap();
        cfg.set("decay_epoch", "12").unwrap();
        cfg.set("w_neg", "-0.75").unwrap();
        let text = cfg.canonical_string();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn override_rejects_unknown_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("momentum", "0.9").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownOverride { .. }));
    }
}

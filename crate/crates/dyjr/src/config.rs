//! Experiment configuration: JSON-backed, defaulted per field, unknown keys
//! rejected. A SHA-256 digest of the normalized config ties checkpoints to the
//! exact run settings.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::divergence::{RegKind, RegularizerConfig};
use crate::error::{Error, Result};
use crate::grpo::ClipConfig;
use crate::replay::FillSchedule;
use crate::task::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    /// On-policy baseline: no buffer, no replay term.
    Grpo,
    /// Dynamic buffer + divergence regularizer.
    Dyjr,
    /// Unbounded buffer of perfect samples replayed through the clipped surrogate.
    Rlep,
    /// Dynamic buffer rules with the clipped-surrogate replay objective.
    RlepDynamic,
}

/// Buffer settings: max age plus the two-plateau fill schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    #[serde(default = "default_max_age")]
    pub max_age: u64,
    #[serde(default = "default_warmup_steps")]
    pub warmup_steps: u64,
    #[serde(default = "default_eta_warmup")]
    pub eta_warmup: f64,
    #[serde(default = "default_eta_steady")]
    pub eta_steady: f64,
}

fn default_max_age() -> u64 {
    8
}
fn default_warmup_steps() -> u64 {
    20
}
fn default_eta_warmup() -> f64 {
    0.20
}
fn default_eta_steady() -> f64 {
    0.05
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            max_age: default_max_age(),
            warmup_steps: default_warmup_steps(),
            eta_warmup: default_eta_warmup(),
            eta_steady: default_eta_steady(),
        }
    }
}

impl BufferConfig {
    pub fn fill_schedule(&self) -> FillSchedule {
        FillSchedule {
            warmup_steps: self.warmup_steps,
            eta_warmup: self.eta_warmup,
            eta_steady: self.eta_steady,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    #[serde(default = "default_prompt_batch")]
    pub prompt_batch: usize,
    /// Queries per optimization update; the online batch is processed in
    /// consecutive slices of this size (one update per step when it equals
    /// `prompt_batch`).
    #[serde(default = "default_prompt_batch")]
    pub mini_batch: usize,
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    #[serde(default)]
    pub buffer: BufferConfig,
    #[serde(default = "default_replay_batch")]
    pub replay_batch: usize,
    #[serde(default = "default_replay_mode")]
    pub replay_mode: ReplayMode,
    #[serde(default = "default_temperature_train")]
    pub temperature_train: f64,
    #[serde(default = "default_temperature_eval")]
    pub temperature_eval: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_queries")]
    pub eval_queries: usize,
    /// Top-k width for the entropy / rank-probability diagnostics (clipped to
    /// the vocabulary size at collection time).
    #[serde(default = "default_entropy_topk")]
    pub entropy_topk: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_group_size() -> usize {
    8
}
fn default_prompt_batch() -> usize {
    64
}
fn default_total_steps() -> u64 {
    300
}
fn default_learning_rate() -> f64 {
    0.5
}
fn default_replay_batch() -> usize {
    64
}
fn default_replay_mode() -> ReplayMode {
    ReplayMode::Dyjr
}
fn default_temperature_train() -> f64 {
    1.0
}
fn default_temperature_eval() -> f64 {
    0.7
}
fn default_eval_every() -> u64 {
    10
}
fn default_eval_queries() -> usize {
    32
}
fn default_entropy_topk() -> usize {
    20
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config deserializes via defaults")
    }
}

impl TrainConfig {
    /// Validate all invariants and normalize: the plain GRPO mode forces the
    /// regularizer off.
    pub fn normalized(mut self) -> Result<TrainConfig> {
        self.task.validate()?;
        self.clip.validate()?;
        self.regularizer.validate()?;
        self.buffer.fill_schedule().validate()?;
        for (name, value) in [
            ("group_size", self.group_size),
            ("prompt_batch", self.prompt_batch),
            ("mini_batch", self.mini_batch),
            ("replay_batch", self.replay_batch),
            ("eval_queries", self.eval_queries),
            ("entropy_topk", self.entropy_topk),
        ] {
            if value < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.total_steps < 1 || self.eval_every < 1 {
            return Err(Error::Config("total_steps and eval_every must be >= 1".into()));
        }
        if self.buffer.max_age < 1 {
            return Err(Error::Config("buffer.max_age must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.temperature_train > 0.0) || !(self.temperature_eval > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.replay_mode == ReplayMode::Grpo {
            self.regularizer.kind = RegKind::None;
        }
        Ok(self)
    }

    /// Total rollouts per macro-step: N = prompt_batch x group_size.
    pub fn rollouts_per_step(&self) -> usize {
        self.prompt_batch * self.group_size
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(canon.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parse a config from JSON text; unknown keys are config errors.
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.normalized()
    }

    /// Parse a config applying `key=value` overrides (dotted paths into the
    /// JSON structure; values parsed as JSON scalars with a bare-string
    /// fallback) and an optional seed override.
    pub fn from_json_with_overrides(
        text: &str,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<TrainConfig> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        if !value.is_object() {
            return Err(Error::Config("config root must be a JSON object".into()));
        }
        for entry in overrides {
            let (path, raw) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {entry:?} is not key=value")))?;
            let leaf: serde_json::Value = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let segments: Vec<&str> = path.split('.').collect();
            let (last, parents) = segments.split_last().expect("split produces a segment");
            let mut node = &mut value;
            for seg in parents {
                let obj = node.as_object_mut().ok_or_else(|| {
                    Error::Config(format!("override path {path:?} crosses a non-object"))
                })?;
                node = obj
                    .entry((*seg).to_string())
                    .or_insert_with(|| serde_json::json!({}));
            }
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::Config(format!("override path {path:?} crosses a non-object"))
            })?;
            obj.insert((*last).to_string(), leaf);
        }
        if let Some(s) = seed {
            value["seed"] = serde_json::json!(s);
        }
        let cfg: TrainConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("bad config after overrides: {e}")))?;
        cfg.normalized()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = TrainConfig::default().normalized().unwrap();
        assert_eq!(cfg.group_size, 8);
        assert_eq!(cfg.prompt_batch, 64);
        assert_eq!(cfg.total_steps, 300);
        assert_eq!(cfg.buffer.max_age, 8);
        assert_eq!(cfg.buffer.warmup_steps, 20);
        assert!((cfg.buffer.eta_warmup - 0.20).abs() < 1e-15);
        assert!((cfg.buffer.eta_steady - 0.05).abs() < 1e-15);
        assert!((cfg.regularizer.alpha - 0.05).abs() < 1e-15);
        assert!((cfg.clip.eps_low - 0.2).abs() < 1e-15);
        assert!((cfg.clip.eps_high - 0.28).abs() < 1e-15);
        assert!((cfg.temperature_train - 1.0).abs() < 1e-15);
        assert!((cfg.temperature_eval - 0.7).abs() < 1e-15);
        assert_eq!(cfg.task.vocab_size, 10);
        assert_eq!(cfg.task.seq_len, 6);
        assert_eq!(cfg.task.modulus_range, [3, 9]);
        assert_eq!(cfg.rollouts_per_step(), 512);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = TrainConfig::from_json(r#"{"group_sizee": 8}"#);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = TrainConfig::from_json(r#"{"task": {"vocab": 10}}"#);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn grpo_mode_forces_regularizer_off() {
        let cfg = TrainConfig::from_json(
            r#"{"replay_mode": "grpo", "regularizer": {"kind": "js", "alpha": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.regularizer.kind, RegKind::None);
    }

    #[test]
    fn overrides_reach_nested_fields_and_bad_keys_fail() {
        let cfg = TrainConfig::from_json_with_overrides(
            "{}",
            &[
                "replay_mode=rlep_dynamic".to_string(),
                "regularizer.alpha=0.2".to_string(),
                "buffer.max_age=16".to_string(),
                "task.modulus_range=[5,9]".to_string(),
            ],
            Some(99),
        )
        .unwrap();
        assert_eq!(cfg.replay_mode, ReplayMode::RlepDynamic);
        assert!((cfg.regularizer.alpha - 0.2).abs() < 1e-15);
        assert_eq!(cfg.buffer.max_age, 16);
        assert_eq!(cfg.task.modulus_range, [5, 9]);
        assert_eq!(cfg.seed, 99);

        let err = TrainConfig::from_json_with_overrides(
            "{}",
            &["buffer.maxage=16".to_string()],
            None,
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let err =
            TrainConfig::from_json_with_overrides("{}", &["no_equals_sign".to_string()], None);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn digest_tracks_every_field() {
        let a = TrainConfig::default().normalized().unwrap();
        let b = TrainConfig::from_json_with_overrides("{}", &["seed=1".to_string()], None).unwrap();
        let c =
            TrainConfig::from_json_with_overrides("{}", &["learning_rate=0.25".to_string()], None)
                .unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest(), TrainConfig::default().normalized().unwrap().digest());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::from_json(r#"{"group_size": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"learning_rate": 0.0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"clip": {"eps_low": 1.5}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"buffer": {"eta_steady": 0.5}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"task": {"modulus_range": [1, 9]}}"#).is_err());
    }
}

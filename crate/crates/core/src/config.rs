//! Run configuration: a flat key/value TOML file with typed validation.
//! One file fully determines a run; unknown keys are rejected and every
//! default matches the published hyperparameter tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::OutputActivation;

fn default_env() -> String {
    "mountaincar".into()
}

/// Generator/evaluator training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub env: String,
    /// Policy hidden width (two hidden layers).
    pub hidden: usize,
    /// Hypernetwork slice side length `f`.
    pub slice_size: usize,
    /// Slice embedding dimension `d`.
    pub embedding_dim: usize,
    /// Hidden width of the generator head MLPs.
    pub head_hidden: usize,
    /// Number of learnable probing states.
    pub probing_states: usize,
    /// Hidden width of the evaluator MLP `U`.
    pub u_hidden: usize,
    /// Exploration noise std in parameter space.
    pub noise_std: f64,
    /// Offset added to the best seen return to form the next command.
    pub drive: f64,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub evaluator_lr: f64,
    /// Generator Adam steps per episode.
    pub generator_updates: usize,
    /// Evaluator Adam steps per episode.
    pub evaluator_updates: usize,
    pub buffer_capacity: usize,
    /// Replay sampling weight is `1 / age^recency_exponent`; 0 is uniform.
    pub recency_exponent: f64,
    pub total_interactions: u64,
    /// Evaluate every this many environment interactions.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Multiplier applied to commands before the generator heads.
    pub command_scale: f64,
    /// Scale generated layers by `2 / sqrt(fan_in)`.
    pub output_scaling: bool,
    /// Feed the command to the bias heads too.
    pub bias_head_command: bool,
    pub output_activation: OutputActivation,
    /// Write the replay buffer next to the checkpoint (required for resume
    /// and for the PCA tool).
    pub dump_buffer: bool,
    /// Resume from this checkpoint instead of a fresh initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<String>,
    /// Also write a checkpoint at every evaluation point.
    pub stage_checkpoints: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            env: default_env(),
            hidden: 256,
            slice_size: 16,
            embedding_dim: 8,
            head_hidden: 256,
            probing_states: 200,
            u_hidden: 256,
            noise_std: 0.1,
            drive: 20.0,
            batch_size: 16,
            generator_lr: 2e-6,
            evaluator_lr: 5e-3,
            generator_updates: 20,
            evaluator_updates: 5,
            buffer_capacity: 10_000,
            recency_exponent: 1.1,
            total_interactions: 100_000,
            eval_interval: 1000,
            eval_episodes: 10,
            seed: 0,
            command_scale: 1.0,
            output_scaling: true,
            bias_head_command: true,
            output_activation: OutputActivation::Linear,
            dump_buffer: false,
            resume: None,
            stage_checkpoints: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        crate::envs::make_env(&self.env)?;
        let invalid = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        if self.slice_size == 0 {
            return invalid("slice_size", "must be >= 1".into());
        }
        if self.hidden == 0 || self.hidden % self.slice_size != 0 {
            return invalid(
                "hidden",
                format!(
                    "hidden width {} must be a positive multiple of slice_size {}",
                    self.hidden, self.slice_size
                ),
            );
        }
        if self.embedding_dim == 0 {
            return invalid("embedding_dim", "must be >= 1".into());
        }
        if self.head_hidden == 0 {
            return invalid("head_hidden", "must be >= 1".into());
        }
        if self.probing_states == 0 {
            return invalid("probing_states", "must be >= 1".into());
        }
        if self.u_hidden == 0 {
            return invalid("u_hidden", "must be >= 1".into());
        }
        if !(self.noise_std >= 0.0) {
            return invalid("noise_std", format!("must be >= 0, got {}", self.noise_std));
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be >= 1".into());
        }
        if !(self.generator_lr > 0.0) {
            return invalid(
                "generator_lr",
                format!("must be > 0, got {}", self.generator_lr),
            );
        }
        if !(self.evaluator_lr > 0.0) {
            return invalid(
                "evaluator_lr",
                format!("must be > 0, got {}", self.evaluator_lr),
            );
        }
        if self.generator_updates == 0 {
            return invalid("generator_updates", "must be >= 1".into());
        }
        if self.evaluator_updates == 0 {
            return invalid("evaluator_updates", "must be >= 1".into());
        }
        if self.buffer_capacity == 0 {
            return invalid("buffer_capacity", "must be >= 1".into());
        }
        if !(self.recency_exponent >= 0.0) {
            return invalid(
                "recency_exponent",
                format!("must be >= 0, got {}", self.recency_exponent),
            );
        }
        if self.total_interactions == 0 {
            return invalid("total_interactions", "must be >= 1".into());
        }
        if self.eval_interval == 0 {
            return invalid("eval_interval", "must be >= 1".into());
        }
        if self.eval_episodes == 0 {
            return invalid("eval_episodes", "must be >= 1".into());
        }
        if !(self.command_scale > 0.0) {
            return invalid(
                "command_scale",
                format!("must be > 0, got {}", self.command_scale),
            );
        }
        if !self.drive.is_finite() {
            return invalid("drive", "must be finite".into());
        }
        Ok(())
    }
}

/// Augmented Random Search run; defaults are the tuned mountain car values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ArsConfig {
    pub env: String,
    pub hidden: usize,
    pub slice_size: usize,
    /// Step size alpha.
    pub step_size: f64,
    /// Sampled perturbation directions per iteration.
    pub directions: usize,
    /// Elite directions kept for the update.
    pub elite: usize,
    /// Exploration noise scale nu.
    pub noise: f64,
    pub total_interactions: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub output_activation: OutputActivation,
}

impl Default for ArsConfig {
    fn default() -> Self {
        ArsConfig {
            env: default_env(),
            hidden: 256,
            slice_size: 16,
            step_size: 0.01,
            directions: 1,
            elite: 1,
            noise: 0.05,
            total_interactions: 100_000,
            eval_interval: 1000,
            eval_episodes: 10,
            seed: 0,
            output_activation: OutputActivation::Linear,
        }
    }
}

impl ArsConfig {
    pub fn validate(&self) -> Result<()> {
        crate::envs::make_env(&self.env)?;
        let invalid = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        if self.slice_size == 0 {
            return invalid("slice_size", "must be >= 1".into());
        }
        if self.hidden == 0 || self.hidden % self.slice_size != 0 {
            return invalid(
                "hidden",
                format!(
                    "hidden width {} must be a positive multiple of slice_size {}",
                    self.hidden, self.slice_size
                ),
            );
        }
        if !(self.step_size > 0.0) {
            return invalid("step_size", format!("must be > 0, got {}", self.step_size));
        }
        if self.directions == 0 {
            return invalid("directions", "must be >= 1".into());
        }
        if self.elite == 0 || self.elite > self.directions {
            return invalid(
                "elite",
                format!(
                    "need 1 <= elite <= directions, got elite {} directions {}",
                    self.elite, self.directions
                ),
            );
        }
        if !(self.noise > 0.0) {
            return invalid("noise", format!("must be > 0, got {}", self.noise));
        }
        if self.total_interactions == 0 {
            return invalid("total_interactions", "must be >= 1".into());
        }
        if self.eval_interval == 0 {
            return invalid("eval_interval", "must be >= 1".into());
        }
        if self.eval_episodes == 0 {
            return invalid("eval_episodes", "must be >= 1".into());
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::ConfigParse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Parses and validates a training config file.
pub fn parse_training_config(path: &Path) -> Result<TrainingConfig> {
    let cfg: TrainingConfig = parse_toml(path, &read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and validates an ARS config file.
pub fn parse_ars_config(path: &Path) -> Result<ArsConfig> {
    let cfg: ArsConfig = parse_toml(path, &read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes a resolved config for exact replay.
pub fn to_toml<T: Serialize>(cfg: &T) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, contents: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    #[test]
    fn empty_config_gives_paper_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "a.toml", "");
        let cfg = parse_training_config(&path).unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.generator_lr, 2e-6);
        assert_eq!(cfg.evaluator_lr, 5e-3);
        assert_eq!(cfg.buffer_capacity, 10_000);
        assert_eq!(cfg.noise_std, 0.1);
        assert_eq!(cfg.drive, 20.0);
        assert_eq!(cfg.probing_states, 200);
        assert_eq!(cfg.slice_size, 16);
        assert_eq!(cfg.embedding_dim, 8);
        assert_eq!(cfg.generator_updates, 20);
        assert_eq!(cfg.evaluator_updates, 5);
        assert_eq!(cfg.recency_exponent, 1.1);
        assert_eq!(cfg.hidden, 256);
        assert_eq!(cfg.head_hidden, 256);
        assert_eq!(cfg.u_hidden, 256);
        assert_eq!(cfg.total_interactions, 100_000);
        assert_eq!(cfg.eval_interval, 1000);
        assert_eq!(cfg.eval_episodes, 10);
    }

    #[test]
    fn ars_defaults_are_tuned_mountain_car_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "a.toml", "");
        let cfg = parse_ars_config(&path).unwrap();
        assert_eq!(cfg.step_size, 0.01);
        assert_eq!(cfg.directions, 1);
        assert_eq!(cfg.elite, 1);
        assert_eq!(cfg.noise, 0.05);
    }

    #[test]
    fn divisibility_violation_names_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "a.toml", "hidden = 60\n");
        let err = parse_training_config(&path).unwrap_err();
        assert!(err.to_string().contains("hidden"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "a.toml", "foo = 1\n");
        let err = parse_training_config(&path).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = parse_training_config(Path::new("/nonexistent/x.toml")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn malformed_value_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "a.toml", "hidden = \"many\"\n");
        let err = parse_training_config(&path).unwrap_err();
        assert!(matches!(err, Error::ConfigParse { .. }));
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn zero_noise_ars_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "a.toml", "noise = 0.0\n");
        assert!(parse_ars_config(&path).is_err());
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = TrainingConfig {
            seed: 42,
            hidden: 64,
            env: "pointreacher".into(),
            ..TrainingConfig::default()
        };
        let text = to_toml(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "resolved.toml", &text);
        let back = parse_training_config(&path).unwrap();
        assert_eq!(cfg, back);
    }
}

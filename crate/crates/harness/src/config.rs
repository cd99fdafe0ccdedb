//! Experiment configuration, read from a TOML file.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected in every section.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stillguard_core::{AttackConfig, DitConfig, LossKind, NoiseSchedule, VaeConfig};

use crate::error::{HarnessError, Result};

/// Environment variable that replaces `output.dir` when set.
pub const OUTPUT_ENV: &str = "STILLGUARD_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    /// Seeds evaluation images, PGD draws and sampling noise. Default 0.
    pub seed: u64,
    pub output: OutputConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub attack: AttackSection,
    pub sweep: SweepConfig,
    pub runtime: RuntimeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Root of all artifacts. Default `"runs"`.
    pub dir: PathBuf,
    /// Subdirectory for experiment artifacts. Default `"default"`.
    pub run_id: String,
}

/// Geometry of the data and both networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Default 32.
    pub height: usize,
    /// Default 32.
    pub width: usize,
    /// Video length. Default 8.
    pub frames: usize,
    /// Default 64.
    pub d_model: usize,
    /// Default 3.
    pub layers: usize,
    /// Default 2.
    pub heads: usize,
    /// Caption token budget. Default 4.
    pub n_text: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Default 50.
    pub t_train: usize,
    /// Default 1e-4.
    pub beta_min: f64,
    /// Default 0.0926, which puts ᾱ_T near 0.09.
    pub beta_max: f64,
    /// DDIM steps. Default 10.
    pub sampling_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Seeds the training set, initialization and optimizer order. Default 0.
    pub seed: u64,
    /// Sprite clips in the training set. Default 50.
    pub dataset_size: usize,
    /// Default 100.
    pub vae_epochs: usize,
    /// Default 1e-3.
    pub vae_lr: f64,
    /// Default 200.
    pub dit_epochs: usize,
    /// Default 1e-3.
    pub dit_lr: f64,
    /// Samples per optimizer step. Default 1.
    pub dit_batch: usize,
    /// Train instead of failing when checkpoints are absent. Default false.
    pub train_if_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Held-out sprite images per experiment. Default 8.
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Method rows of the comparison table. Default: all five losses.
    #[serde(with = "loss_names")]
    pub methods: Vec<LossKind>,
    /// Pixel budget on the 0-255 scale. Default 16.
    pub epsilon: u32,
    /// PGD iterations. Default 300.
    pub iterations: usize,
    /// Step size on the unit scale; `ε/2550` when absent.
    pub step_size: Option<f64>,
    /// Monte Carlo `(t, noise)` draws per iteration. Default 2.
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Budgets for the attn_full sweep. Default `[2, 4, 8, 16, 32]`.
    pub epsilons: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Worker threads for independent cells. Default 1.
    pub workers: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), run_id: "default".into() }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DitConfig::default();
        Self { height: 32, width: 32, frames: 8, d_model: d.d_model, layers: d.layers, heads: d.heads, n_text: d.n_text }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_train: 50, beta_min: 1e-4, beta_max: 0.0926, sampling_steps: 10 }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset_size: 50,
            vae_epochs: 100,
            vae_lr: 1e-3,
            dit_epochs: 200,
            dit_lr: 1e-3,
            dit_batch: 1,
            train_if_missing: false,
        }
    }
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { images: 8 }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { methods: LossKind::ALL.to_vec(), epsilon: 16, iterations: 300, step_size: None, mc_samples: 2 }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { epsilons: vec![2, 4, 8, 16, 32] }
    }
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self { workers: 1 }
    }
}

impl ExperimentConfig {
    /// Parses `text`; `origin` only labels errors.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config { path: origin.to_path_buf(), detail: e.to_string() })?;
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text, path)
    }

    /// Applies the output-root environment override.
    pub fn with_env_override(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            self.output.dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let bad = |detail: String| Err(HarnessError::Config { path: origin.to_path_buf(), detail });
        let m = &self.model;
        if m.height == 0 || m.width == 0 || !m.height.is_multiple_of(4) || !m.width.is_multiple_of(4) {
            return bad(format!("model height/width must be positive multiples of 4, got {}x{}", m.height, m.width));
        }
        if m.frames < 2 {
            return bad(format!("model.frames must be at least 2, got {}", m.frames));
        }
        if self.evaluation.images == 0 {
            return bad("evaluation.images must be at least 1".into());
        }
        if self.training.dataset_size == 0 {
            return bad("training.dataset_size must be at least 1".into());
        }
        if self.runtime.workers == 0 {
            return bad("runtime.workers must be at least 1".into());
        }
        if self.output.run_id.is_empty() || self.output.run_id.contains(['/', '\\']) {
            return bad(format!("output.run_id must be a single path component, got {:?}", self.output.run_id));
        }
        self.noise_schedule().map_err(|e| HarnessError::Config { path: origin.to_path_buf(), detail: e.to_string() })?;
        self.attack_config(LossKind::AttnFull, self.attack.epsilon, String::new())
            .validate()
            .map_err(|e| HarnessError::Config { path: origin.to_path_buf(), detail: e.to_string() })?;
        Ok(())
    }

    pub fn dit_config(&self) -> DitConfig {
        DitConfig {
            d_model: self.model.d_model,
            layers: self.model.layers,
            heads: self.model.heads,
            n_text: self.model.n_text,
            t_train: self.schedule.t_train,
            ..DitConfig::default()
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig::default()
    }

    pub fn noise_schedule(&self) -> stillguard_core::Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule.t_train, self.schedule.beta_min, self.schedule.beta_max)
    }

    /// PGD settings for one cell; the seed is filled in by the caller.
    pub fn attack_config(&self, loss: LossKind, eps: u32, caption: String) -> AttackConfig {
        let mut c = AttackConfig::new(loss, eps);
        c.iterations = self.attack.iterations;
        c.mc_samples = self.attack.mc_samples;
        if let Some(step) = self.attack.step_size {
            c.step_size = step;
        }
        c.caption = caption;
        c
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output.dir.join("checkpoints")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(&self.output.run_id)
    }
}

/// `LossKind` lists as their snake_case names.
mod loss_names {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use stillguard_core::LossKind;

    pub fn serialize<S: Serializer>(v: &[LossKind], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|k| k.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<LossKind>, D::Error> {
        Vec::<String>::deserialize(d)?.iter().map(|n| n.parse().map_err(D::Error::custom)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("", Path::new("x.toml")).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.attack.methods.len(), 5);
        assert_eq!(c.sweep.epsilons, vec![2, 4, 8, 16, 32]);
    }

    #[test]
    fn sections_override_fields() {
        let text = r#"
seed = 4
[attack]
methods = ["attn_full", "attn-cross"]
epsilon = 8
[output]
run_id = "small"
"#;
        let c = ExperimentConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.attack.methods, vec![LossKind::AttnFull, LossKind::AttnCross]);
        assert_eq!(c.attack.epsilon, 8);
        assert_eq!(c.attack.iterations, 300);
        assert_eq!(c.run_dir(), PathBuf::from("runs/small"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1", "[attack]\niteration = 3", "[nope]\nx = 1"] {
            let e = ExperimentConfig::from_toml(text, Path::new("x.toml")).unwrap_err();
            assert!(matches!(e, HarnessError::Config { .. }), "{text}");
            assert_eq!(e.exit_code(), 2);
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "[model]\nheight = 30",
            "[schedule]\nbeta_max = 2.0",
            "[attack]\niterations = 0",
            "[attack]\nmethods = [\"lpips\"]",
            "[output]\nrun_id = \"a/b\"",
        ] {
            assert!(ExperimentConfig::from_toml(text, Path::new("x.toml")).is_err(), "{text}");
        }
    }
}

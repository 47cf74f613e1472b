//! Flat `key = value` run configuration.
//!
//! Every key has a default; a file only needs the keys it changes plus
//! `version`. Unknown keys are rejected so typos never pass silently.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use sketchguide::finetune::{EncodeMode, FineTuneConfig, PretrainConfig};
use sketchguide::sampler::SamplerConfig;
use sketchguide::schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec, TimestepMap};
use sketchguide::sketch::{ClassifierTrainConfig, NUM_CLASSES};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Optional class label, written `none` when absent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct MaybeClass(pub Option<usize>);

impl FromStr for MaybeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(Self(None));
        }
        let y: usize = s.parse().map_err(|_| format!("expected a class index or `none`, got `{s}`"))?;
        if y >= NUM_CLASSES {
            return Err(format!("class index {y} out of range 0..{NUM_CLASSES}"));
        }
        Ok(Self(Some(y)))
    }
}

impl std::fmt::Display for MaybeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(y) => write!(f, "{y}"),
            None => f.write_str("none"),
        }
    }
}

/// Directory path as a config value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirPath(pub PathBuf);

impl FromStr for DirPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(Self(PathBuf::from(s)))
    }
}

impl std::fmt::Display for DirPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.display().fmt(f)
    }
}

impl std::ops::Deref for DirPath {
    type Target = Path;

    fn deref(&self) -> &Path {
        &self.0
    }
}

impl AsRef<Path> for DirPath {
    fn as_ref(&self) -> &Path {
        &self.0
    }
}

macro_rules! run_config {
    ($($key:literal => $field:ident : $ty:ty = $default:expr),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &["version", $($key),*];

            /// Parses and assigns one value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    "version" => {
                        let v: u32 = value
                            .parse()
                            .map_err(|_| CliError::Config(format!("version: bad value `{value}`")))?;
                        if v != CONFIG_VERSION {
                            return Err(CliError::Config(format!(
                                "unsupported config version {v}, expected {CONFIG_VERSION}"
                            )));
                        }
                    }
                    $($key => {
                        self.$field = value
                            .parse()
                            .map_err(|e| CliError::Config(format!("{}: bad value `{value}`: {e}", $key)))?;
                    })*
                    other => return Err(CliError::UnknownKey(other.to_string())),
                }
                Ok(())
            }

            /// Canonical text form: every key in a fixed order.
            pub fn to_text(&self) -> String {
                let mut out = format!("version = {CONFIG_VERSION}\n");
                $(let _ = writeln!(out, "{} = {}", $key, self.$field);)*
                out
            }
        }
    };
}

run_config! {
    "seed" => seed: u64 = 0,
    "run_dir" => run_dir: DirPath = DirPath("runs".into()),
    "model_dir" => model_dir: DirPath = DirPath("models".into()),
    "schedule.kind" => schedule_kind: ScheduleKind = ScheduleKind::Linear,
    "schedule.steps" => schedule_steps: usize = ScheduleSpec::DEFAULT_STEPS,
    "schedule.beta_start" => beta_start: f64 = ScheduleSpec::DEFAULT_BETA_START,
    "schedule.beta_end" => beta_end: f64 = ScheduleSpec::DEFAULT_BETA_END,
    "data.size" => data_size: usize = 20000,
    "data.seed" => data_seed: u64 = 1,
    "classifier.iterations" => classifier_iterations: usize = 4000,
    "classifier.batch_size" => classifier_batch_size: usize = 32,
    "classifier.learning_rate" => classifier_learning_rate: f64 = 3e-3,
    "classifier.noise_aware" => classifier_noise_aware: bool = true,
    "pretrain.epochs" => pretrain_epochs: usize = 4,
    "pretrain.batch_size" => pretrain_batch_size: usize = 32,
    "pretrain.learning_rate" => pretrain_learning_rate: f64 = 3e-3,
    "pretrain.class_conditional" => pretrain_class_conditional: bool = false,
    "finetune.lambda" => finetune_lambda: f64 = 0.5,
    "finetune.rollout_steps" => finetune_rollout_steps: usize = 16,
    "finetune.iterations" => finetune_iterations: usize = 200,
    "finetune.learning_rate" => finetune_learning_rate: f64 = 1e-4,
    "finetune.guidance_scale" => finetune_guidance_scale: f64 = 1.0,
    "finetune.target_class" => finetune_target_class: MaybeClass = MaybeClass(None),
    "finetune.encode_mode" => finetune_encode_mode: EncodeModeValue = EncodeModeValue(EncodeMode::Stochastic),
    "finetune.rollout_batch" => finetune_rollout_batch: usize = 2,
    "finetune.checkpoint_every" => finetune_checkpoint_every: usize = 50,
    "sample.count" => sample_count: usize = 16,
    "sample.steps" => sample_steps: usize = 50,
    "sample.eta" => sample_eta: f64 = 0.0,
    "sample.guidance_scale" => sample_guidance_scale: f64 = 1.0,
    "sample.target_class" => sample_target_class: MaybeClass = MaybeClass(None),
    "interpolate.count" => interpolate_count: usize = 8,
    "metrics.count" => metrics_count: usize = 256,
    "metrics.k" => metrics_k: usize = 3,
    "metrics.splits" => metrics_splits: usize = 4,
    "serve.port" => serve_port: u16 = 8080,
    "serve.samples" => serve_samples: usize = 4,
}

/// [`EncodeMode`] with the string form used in config files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeModeValue(pub EncodeMode);

impl FromStr for EncodeModeValue {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(Self).map_err(|e: sketchguide::Error| e.to_string())
    }
}

impl std::fmt::Display for EncodeModeValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl RunConfig {
    /// Reads `key = value` lines; `#` starts a comment line. The file must
    /// carry a `version` key and may not repeat a key.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key `{key}`", ln + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        if !seen.contains("version") {
            return Err(CliError::Config("config file lacks a `version` key".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), CliError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        Ok(NoiseSchedule::from_spec(ScheduleSpec {
            kind: self.schedule_kind,
            steps: self.schedule_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        })?)
    }

    pub fn classifier(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            iterations: self.classifier_iterations,
            batch_size: self.classifier_batch_size,
            learning_rate: self.classifier_learning_rate,
            noise_aware: self.classifier_noise_aware,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            learning_rate: self.pretrain_learning_rate,
            class_conditional: self.pretrain_class_conditional,
        }
    }

    pub fn finetune(&self) -> FineTuneConfig {
        FineTuneConfig {
            lambda: self.finetune_lambda,
            rollout_steps: self.finetune_rollout_steps,
            iterations: self.finetune_iterations,
            learning_rate: self.finetune_learning_rate,
            guidance_scale: self.finetune_guidance_scale,
            target_class: self.finetune_target_class.0,
            encode_mode: self.finetune_encode_mode.0,
            rollout_batch: self.finetune_rollout_batch,
            checkpoint_every: self.finetune_checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn sampler(&self) -> Result<SamplerConfig, CliError> {
        Ok(SamplerConfig {
            timestep_map: TimestepMap::evenly_spaced(self.schedule_steps, self.sample_steps)?,
            eta: self.sample_eta,
            guidance_scale: self.sample_guidance_scale,
            target_class: self.sample_target_class.0,
            seed: self.seed,
        })
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.model_dir.join("classifier.ckpt")
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.model_dir.join("pretrained.ckpt")
    }

    pub fn finetuned_path(&self) -> PathBuf {
        self.model_dir.join("finetuned.ckpt")
    }
}

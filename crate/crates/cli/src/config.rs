//! Run configuration files: a JSON document mirroring the training
//! hyperparameters plus the network spec, dataset source and output
//! directory. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tinydistill_core::data::SyntheticSpec;
use tinydistill_core::distill::{default_normalized_threshold, ThresholdMode, UncertaintyPolicy};
use tinydistill_core::train::{ExternalKdMode, StudentLossMode, TrainConfig};
use tinydistill_core::nn::NetworkSpec;

use crate::{CliError, CliResult};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub network: NetworkSpec,
    #[serde(default)]
    pub mode: RunMode,
    pub train: TrainSection,
    pub dataset: DatasetSection,
    pub output_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// The full weight-sharing recipe.
    #[default]
    Distilled,
    /// Plain smoothed-CE training of the target network alone.
    Baseline,
    /// CE plus KL toward a frozen external teacher, no weight sharing.
    StandardKd,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::Distilled => "distilled",
            RunMode::Baseline => "baseline",
            RunMode::StandardKd => "standard_kd",
        }
    }
}

fn d_momentum() -> f64 {
    0.9
}
fn d_clip() -> f64 {
    1.0
}
fn d_smoothing() -> f64 {
    0.1
}
fn d_expansion() -> usize {
    3
}
fn d_weight() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "d_expansion")]
    pub expansion_rate: usize,
    #[serde(default)]
    pub student_loss: StudentLossSection,
    #[serde(default = "d_true")]
    pub surgery: bool,
    #[serde(default = "d_weight")]
    pub student_loss_weight: f64,
    #[serde(default = "d_true")]
    pub detach_teacher_logits: bool,
    #[serde(default)]
    pub external_kd: Option<ExternalKdSection>,
    #[serde(default = "d_true")]
    pub augment: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum StudentLossSection {
    Uncertainty {
        threshold: f64,
        space: ThresholdMode,
    },
    AlwaysKl,
    AlwaysCe,
}

impl Default for StudentLossSection {
    fn default() -> Self {
        StudentLossSection::Uncertainty {
            threshold: default_normalized_threshold(),
            space: ThresholdMode::Normalized,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalKdSection {
    #[serde(default)]
    pub logits_file: Option<PathBuf>,
    #[serde(default)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub replace_insitu: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    Synthetic(SyntheticSection),
    Idx(IdxSection),
}

fn d_channels() -> usize {
    3
}
fn d_sigma() -> f64 {
    0.25
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_sigma")]
    pub noise_sigma: f64,
    pub seed: u64,
    pub eval_per_class: usize,
    pub eval_seed: u64,
}

impl SyntheticSection {
    pub fn train_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            per_class: self.per_class,
            image_size: self.image_size,
            channels: self.channels,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            noise_seed: self.seed,
        }
    }

    /// Eval split: same class templates, fresh per-sample noise.
    pub fn eval_spec(&self) -> SyntheticSpec {
        self.train_spec().eval_split(self.eval_per_class, self.eval_seed)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub eval_images: PathBuf,
    pub eval_labels: PathBuf,
}

impl TrainSection {
    pub fn to_train_config(&self) -> CliResult<TrainConfig> {
        let student_loss = match &self.student_loss {
            StudentLossSection::Uncertainty { threshold, space } => {
                StudentLossMode::Uncertainty(UncertaintyPolicy {
                    threshold: *threshold,
                    mode: *space,
                    label_smoothing: self.label_smoothing,
                })
            }
            StudentLossSection::AlwaysKl => StudentLossMode::AlwaysKl,
            StudentLossSection::AlwaysCe => StudentLossMode::AlwaysCe,
        };
        let external_kd = self.external_kd.as_ref().map(|e| ExternalKdMode {
            replace_insitu: e.replace_insitu,
        });
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            momentum: self.momentum,
            warmup_epochs: self.warmup_epochs,
            clip_norm: self.clip_norm,
            label_smoothing: self.label_smoothing,
            expansion_rate: self.expansion_rate,
            student_loss,
            surgery_enabled: self.surgery,
            student_loss_weight: self.student_loss_weight,
            detach_teacher_logits: self.detach_teacher_logits,
            external_kd,
            augment: self.augment,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfigFile {
    /// Reads and schema-validates a config file. Any problem here is a
    /// configuration error (exit 2), including an unreadable path.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network.validate()?;
        self.to_train_config()?;
        if let Some(ext) = &self.train.external_kd {
            let sources = ext.logits_file.is_some() as u8 + ext.teacher_checkpoint.is_some() as u8;
            if sources != 1 {
                return Err(CliError::Config(
                    "external_kd needs exactly one of logits_file or teacher_checkpoint".into(),
                ));
            }
        }
        match self.mode {
            RunMode::StandardKd if self.train.external_kd.is_none() => {
                return Err(CliError::Config(
                    "standard_kd mode requires train.external_kd".into(),
                ))
            }
            RunMode::Baseline if self.train.external_kd.is_some() => {
                return Err(CliError::Config(
                    "baseline mode does not take an external teacher".into(),
                ))
            }
            _ => {}
        }
        if let DatasetSection::Synthetic(s) = &self.dataset {
            s.train_spec().validate()?;
            s.eval_spec().validate()?;
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> CliResult<TrainConfig> {
        let mut cfg = self.train.to_train_config()?;
        // Standard KD consumes the external teacher directly; the core
        // config flag is only meaningful for the weight-sharing trainer.
        if self.mode != RunMode::Distilled {
            cfg.external_kd = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

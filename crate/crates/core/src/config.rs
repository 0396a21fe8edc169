//! Run configuration: a versioned TOML schema whose content hash is embedded
//! in every artifact a run produces, so dependent stages can detect drift.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ROSTER_SIZE;
use crate::diffusion::ScheduleKind;
use crate::distill::KDConfig;
use crate::error::{Error, Result};
use crate::nn::classifier::ClassifierConfig;
use crate::nn::train::{DenoiserTrainConfig, SupervisedTrainConfig};
use crate::nn::DenoiserConfig;
use crate::synthesis::SynthesisConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the configured output root.
pub const OUTPUT_ROOT_ENV: &str = "DFKD_OUTPUT_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    /// Dataset family; only the procedural `shapes` set is built in.
    pub name: String,
    pub resolution: usize,
    /// Roster classes forming the teacher's label space.
    pub classes: Vec<usize>,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Per-roster-class size of the denoiser pre-training corpus.
    pub corpus_per_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    /// Channel widths `[stem, stage1, stage2, stage3]`.
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserSection {
    pub base_channels: usize,
    pub emb_dim: usize,
    pub train: DenoiserTrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Identity,
    Autoencoder,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecSection {
    pub kind: CodecKind,
    pub latent_channels: usize,
    pub hidden: usize,
    pub train_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSection {
    #[serde(flatten)]
    pub kd: KDConfig,
    /// Interleave generation rounds and distillation epochs.
    pub alternating: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub teacher: ModelSection,
    pub student: ModelSection,
    pub teacher_train: SupervisedTrainConfig,
    pub denoiser: DenoiserSection,
    pub codec: CodecSection,
    pub schedule: ScheduleSection,
    pub synthesis: SynthesisConfig,
    pub distill: DistillSection,
}

impl RunConfig {
    /// Desk-scale defaults: two shape classes at 16x16, ten sampling steps.
    pub fn desk_default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 42,
            output_dir: PathBuf::from("runs/desk"),
            dataset: DatasetSection {
                name: "shapes".into(),
                resolution: 16,
                classes: vec![0, 1],
                train_per_class: 100,
                eval_per_class: 100,
                corpus_per_class: 60,
            },
            teacher: ModelSection {
                widths: vec![8, 16, 32, 64],
            },
            student: ModelSection {
                widths: vec![4, 8, 16, 32],
            },
            teacher_train: SupervisedTrainConfig::default(),
            denoiser: DenoiserSection {
                base_channels: 10,
                emb_dim: 32,
                train: DenoiserTrainConfig::default(),
            },
            codec: CodecSection {
                kind: CodecKind::Identity,
                latent_channels: 2,
                hidden: 8,
                train_steps: 600,
            },
            schedule: ScheduleSection {
                kind: ScheduleKind::Cosine,
            },
            synthesis: SynthesisConfig::default(),
            distill: DistillSection {
                kd: KDConfig::default(),
                alternating: false,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialized config.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dataset.name != "shapes" {
            return Err(Error::Config(format!(
                "unknown dataset {:?} (only \"shapes\" is built in)",
                self.dataset.name
            )));
        }
        if self.dataset.classes.is_empty() {
            return Err(Error::Config("dataset.classes must be nonempty".into()));
        }
        let mut seen = [false; ROSTER_SIZE];
        for &c in &self.dataset.classes {
            if c >= ROSTER_SIZE {
                return Err(Error::Config(format!(
                    "class {c} outside the {ROSTER_SIZE}-class roster"
                )));
            }
            if seen[c] {
                return Err(Error::Config(format!("class {c} listed twice")));
            }
            seen[c] = true;
        }
        if self.dataset.train_per_class == 0 || self.dataset.eval_per_class == 0 {
            return Err(Error::Config(
                "train_per_class and eval_per_class must be >= 1".into(),
            ));
        }
        self.teacher_classifier_config().validate()?;
        self.student_classifier_config().validate()?;
        self.denoiser_config().validate()?;
        self.synthesis.validate()?;
        self.distill.kd.validate()?;
        if self.codec.kind == CodecKind::Autoencoder && self.dataset.resolution % 2 != 0 {
            return Err(Error::Config(
                "autoencoder codec needs an even resolution".into(),
            ));
        }
        Ok(())
    }

    pub fn teacher_classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            in_channels: 1,
            resolution: self.dataset.resolution,
            widths: self.teacher.widths.clone(),
            num_classes: self.dataset.classes.len(),
        }
    }

    pub fn student_classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            in_channels: 1,
            resolution: self.dataset.resolution,
            widths: self.student.widths.clone(),
            num_classes: self.dataset.classes.len(),
        }
    }

    /// The denoiser conditions on the full roster plus a null slot, whatever
    /// subset the teacher uses.
    pub fn denoiser_config(&self) -> DenoiserConfig {
        let latent = self.latent_shape();
        DenoiserConfig {
            in_channels: latent[0],
            resolution: latent[1],
            base_channels: self.denoiser.base_channels,
            cond_vocab: ROSTER_SIZE + 1,
            emb_dim: self.denoiser.emb_dim,
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        match self.codec.kind {
            CodecKind::Identity => [1, self.dataset.resolution, self.dataset.resolution],
            CodecKind::Autoencoder => [
                self.codec.latent_channels,
                self.dataset.resolution / 2,
                self.dataset.resolution / 2,
            ],
        }
    }

    /// Output root after `--out-root` and environment overrides.
    pub fn resolved_output_dir(&self, cli_override: Option<&Path>) -> PathBuf {
        if let Some(p) = cli_override {
            return p.to_path_buf();
        }
        if let Ok(p) = std::env::var(OUTPUT_ROOT_ENV) {
            if !p.is_empty() {
                return PathBuf::from(p);
            }
        }
        self.output_dir.clone()
    }
}

/// Canonical artifact locations under one output root.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: PathBuf) -> Self {
        OutputLayout { root }
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.root.join("data/eval")
    }

    pub fn corpus_data(&self) -> PathBuf {
        self.root.join("data/corpus")
    }

    pub fn teacher_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/teacher.json")
    }

    pub fn denoiser_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/denoiser.json")
    }

    pub fn codec_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/codec.json")
    }

    pub fn student_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/student.json")
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.root.join("synth")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn teacher_curve(&self) -> PathBuf {
        self.metrics_dir().join("teacher_train.csv")
    }

    pub fn denoiser_curve(&self) -> PathBuf {
        self.metrics_dir().join("denoiser_train.csv")
    }

    pub fn codec_curve(&self) -> PathBuf {
        self.metrics_dir().join("codec_train.csv")
    }

    pub fn synthesis_metrics(&self) -> PathBuf {
        self.metrics_dir().join("synthesis.csv")
    }

    pub fn distill_metrics(&self) -> PathBuf {
        self.metrics_dir().join("distill.csv")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval/report.json")
    }

    pub fn ablation_dir(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn ablation_table(&self) -> PathBuf {
        self.ablation_dir().join("table.csv")
    }

    pub fn figures_dir(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn sample_grid(&self) -> PathBuf {
        self.figures_dir().join("samples_grid.png")
    }

    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_round_trips() {
        let cfg = RunConfig::desk_default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.hash(), cfg.hash());
    }

    #[test]
    fn hash_is_sensitive_to_any_field() {
        let cfg = RunConfig::desk_default();
        let mut other = cfg.clone();
        other.synthesis.guidance_scale = 7.5;
        assert_ne!(cfg.hash(), other.hash());
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn validation_rejects_bad_classes_and_versions() {
        let mut cfg = RunConfig::desk_default();
        cfg.dataset.classes = vec![0, 0];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default();
        cfg.dataset.classes = vec![99];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default();
        cfg.schema_version = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk_default();
        cfg.synthesis.lca_period = Some(cfg.synthesis.total_steps + 1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_dir_override_precedence() {
        let cfg = RunConfig::desk_default();
        let flag = PathBuf::from("/tmp/flag");
        assert_eq!(cfg.resolved_output_dir(Some(&flag)), flag);
        assert_eq!(cfg.resolved_output_dir(None), cfg.output_dir);
    }
}

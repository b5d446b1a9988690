//! Run configuration shared by all CLI commands.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionContext, AttentionMode};
use crate::denoiser::{NoisePredictor, UNetConfig};
use crate::error::{Error, Result};
use crate::inversion::NullTextConfig;
use crate::metrics::EditThresholds;
use crate::pipeline::EditConfig;
use crate::schedule::{Schedule, ScheduleParams};
use crate::toyworld::{SceneSpec, ToyTextEncoder, TrainConfig};

/// File locations. Unset entries default to places below
/// `output/<run_id>/` (the checkpoint to `output/model.bin`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Root of all outputs.
    pub output: PathBuf,
    /// Model checkpoint file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Input frame directory (default: the `render` output).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub video: Option<PathBuf>,
    /// Inversion record directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<PathBuf>,
    /// Frame directories compared by `eval` (default: input and edit output).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub original: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edited: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            output: "out".into(),
            checkpoint: None,
            video: None,
            record: None,
            original: None,
            edited: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub len: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 32, len: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub size: usize,
    pub seed: u64,
    /// Frame count, canvas and object geometry of sampled scenes.
    pub template: SceneSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { size: 2048, seed: 0, template: SceneSpec::default() }
    }
}

/// Per-layer attention mode overrides. `modes` (one name per layer) wins
/// over `uniform`; with neither set the model's default placement is used.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniform: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<String>,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(u) = &self.uniform {
            AttentionMode::parse(u).map_err(|e| Error::Config(e.to_string()))?;
        }
        for m in &self.modes {
            AttentionMode::parse(m).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn context<M: NoisePredictor>(&self, model: &M) -> Result<AttentionContext> {
        let n = model.num_attention_layers();
        if !self.modes.is_empty() {
            if self.modes.len() != n {
                return Err(Error::Config(format!(
                    "attention.modes lists {} layers, the model has {n}",
                    self.modes.len()
                )));
            }
            let modes = self.modes.iter().map(|m| AttentionMode::parse(m)).collect::<Result<Vec<_>>>()?;
            return Ok(AttentionContext::new(modes));
        }
        match &self.uniform {
            Some(u) => Ok(AttentionContext::uniform(AttentionMode::parse(u)?, n)),
            None => Ok(model.default_context()),
        }
    }
}

/// Scene whose foreground mask `edit` and `eval` use to score edit success.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRef {
    pub spec: SceneSpec,
    pub seed: u64,
}


#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: EditThresholds,
    /// Scene the input video was rendered from, when known.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnExportConfig {
    /// Export every `stride`-th sampling step.
    pub stride: usize,
}

impl Default for AttnExportConfig {
    fn default() -> Self {
        Self { stride: 10 }
    }
}

/// Everything one CLI invocation needs. Missing keys take defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    /// Source prompt of the input video.
    pub source_prompt: String,
    pub paths: Paths,
    pub schedule: ScheduleParams,
    pub model: UNetConfig,
    pub encoder: EncoderConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub null_text: NullTextConfig,
    pub edit: EditConfig,
    pub attention: AttentionConfig,
    pub eval: EvalConfig,
    pub attn_export: AttnExportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            source_prompt: SceneSpec::default().prompt(),
            paths: Paths::default(),
            schedule: ScheduleParams::default(),
            model: UNetConfig::default(),
            encoder: EncoderConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            null_text: NullTextConfig::default(),
            edit: EditConfig {
                target_prompt: SceneSpec::default().with_color(crate::toyworld::Color::Blue).prompt(),
                ..EditConfig::default()
            },
            attention: AttentionConfig::default(),
            eval: EvalConfig::default(),
            attn_export: AttnExportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Checks every value-level constraint (paths are checked by the command
    /// that reads them).
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!("run_id {:?} is not a plain name", self.run_id)));
        }
        Schedule::new(self.schedule.clone()).map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        ToyTextEncoder::new(self.encoder.dim, self.encoder.len, self.encoder.seed).map_err(cfg)?;
        if self.encoder.dim != self.model.text_dim {
            return Err(Error::Config(format!(
                "encoder.dim ({}) must equal model.text_dim ({})",
                self.encoder.dim, self.model.text_dim
            )));
        }
        self.dataset.template.validate().map_err(cfg)?;
        if self.dataset.template.size != self.model.image_size {
            return Err(Error::Config("dataset.template.size must equal model.image_size".into()));
        }
        if self.dataset.size == 0 || self.train.steps == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("dataset.size, train.steps and train.batch_size must be positive".into()));
        }
        self.null_text.validate()?;
        self.edit.validate()?;
        if self.edit.num_steps != self.schedule.num_inference_steps {
            return Err(Error::Config(format!(
                "edit.num_steps ({}) must equal schedule.num_inference_steps ({})",
                self.edit.num_steps, self.schedule.num_inference_steps
            )));
        }
        self.attention.validate()?;
        if self.attn_export.stride == 0 {
            return Err(Error::Config("attn_export.stride must be positive".into()));
        }
        if let Some(s) = &self.eval.scene {
            s.spec.validate().map_err(cfg)?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.schedule.clone())
    }

    pub fn encoder(&self) -> Result<ToyTextEncoder> {
        ToyTextEncoder::new(self.encoder.dim, self.encoder.len, self.encoder.seed)
    }

    /// Output directory of `command` for this run.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        self.paths.output.join(&self.run_id).join(command)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.paths.output.join("model.bin"))
    }

    pub fn video_path(&self) -> PathBuf {
        self.paths.video.clone().unwrap_or_else(|| self.output_dir("render").join("frames"))
    }

    pub fn record_path(&self) -> PathBuf {
        self.paths.record.clone().unwrap_or_else(|| self.output_dir("invert").join("record"))
    }

    pub fn original_path(&self) -> PathBuf {
        self.paths.original.clone().unwrap_or_else(|| self.video_path())
    }

    pub fn edited_path(&self) -> PathBuf {
        self.paths.edited.clone().unwrap_or_else(|| self.output_dir("edit").join("frames"))
    }
}

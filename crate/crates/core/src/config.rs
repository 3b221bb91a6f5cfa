//! Declarative run configuration (TOML, strict schema).
//!
//! One file drives every stage. Unset pieces are resolved once at parse time:
//! model specs from the chosen preset, and the split / training seeds from the
//! top-level `seed` via [`derive_seed`]. The resolved spec is echoed to
//! `<output_dir>/effective_config.toml`; parsing that echo yields the same spec.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Preprocessing, SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::models::{DecoderSpec, EncoderSpec, PerceptualSpec, PromptPolicy};
use crate::scalar::DType;
use crate::train::{Phase, TrainConfig};

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Embedding width of the toy preset.
pub const TOY_EMBED_CHANNELS: usize = 16;

/// Sub-seed for a named stage: the first eight bytes (little-endian) of
/// `sha256(seed.to_le_bytes() ‖ stage)` with the top bit cleared (TOML integers are signed).
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap()) & (i64::MAX as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    /// ViT-H teacher, ResNet-50 student, VGG16 perceptual network, full decoder.
    #[default]
    Paper,
    /// Small randomly initialized stand-ins sized from `dataset.preprocessing.resize_to`.
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default = "default_dataset_name")]
    pub name: String,
    pub root: PathBuf,
    /// Embedding cache root; defaults to `<output_dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub preprocessing: Preprocessing,
    /// When present, `gen-synthetic` writes this dataset to `root`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

fn default_dataset_name() -> String {
    "dataset".into()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: ModelPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<EncoderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student: Option<EncoderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<PerceptualSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "distill_default")]
    pub encoder_distill: TrainConfig,
    #[serde(default = "finetune_default")]
    pub decoder_finetune: TrainConfig,
}

fn distill_default() -> TrainConfig {
    TrainConfig::for_phase(Phase::EncoderDistill)
}

fn finetune_default() -> TrainConfig {
    TrainConfig::for_phase(Phase::DecoderFinetune)
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            encoder_distill: distill_default(),
            decoder_finetune: finetune_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    pub prompt_policy: PromptPolicy,
    /// Label of the evaluated model in reports.
    pub model_name: String,
    /// Include the bundled reference table in reports.
    pub include_reference: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            prompt_policy: PromptPolicy::CentroidPoint,
            model_name: "KD SAM".into(),
            include_reference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub run_name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_precision")]
    pub precision: DType,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_precision() -> DType {
    DType::F32
}

/// Models after preset resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedModels {
    pub teacher: EncoderSpec,
    pub student: EncoderSpec,
    pub perceptual: PerceptualSpec,
    pub decoder: DecoderSpec,
}

fn toml_error(path: &Path, e: toml::de::Error) -> Error {
    Error::config(format!(
        "{}: {}",
        path.display(),
        e.to_string().trim().replace('\n', " ")
    ))
}

/// Overrides applied on top of the file before resolution.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl RunSpec {
    pub fn parse_str(text: &str, origin: &Path, overrides: &Overrides) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| toml_error(origin, e))?;
        let mut spec: RunSpec =
            RunSpec::deserialize(toml::Value::Table(table.clone())).map_err(|e| toml_error(origin, e))?;
        if let Some(d) = &overrides.output_dir {
            spec.output_dir = d.clone();
        }
        if let Some(s) = overrides.seed {
            spec.seed = s;
        }
        let has_seed = |phase: &str| {
            table
                .get("train")
                .and_then(|t| t.get(phase))
                .and_then(|t| t.get("seed"))
                .is_some()
        };
        if !has_seed("encoder_distill") {
            spec.train.encoder_distill.seed = derive_seed(spec.seed, "encoder_distill");
        }
        if !has_seed("decoder_finetune") {
            spec.train.decoder_finetune.seed = derive_seed(spec.seed, "decoder_finetune");
        }
        spec.resolve()?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads and fully resolves a config file.
    pub fn parse_file(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path, overrides)
    }

    fn resolve(&mut self) -> Result<()> {
        if self.dataset.split.is_none() {
            self.dataset.split = Some(SplitSpec {
                seed: derive_seed(self.seed, "split"),
                ..SplitSpec::default()
            });
        }
        if self.dataset.cache_dir.is_none() {
            self.dataset.cache_dir = Some(self.output_dir.join("cache"));
        }
        let [h, w] = self.dataset.preprocessing.resize_to;
        let m = &mut self.model;
        match m.preset {
            ModelPreset::Paper => {
                m.teacher.get_or_insert_with(EncoderSpec::paper_teacher);
                m.student.get_or_insert_with(EncoderSpec::paper_student);
                m.perceptual.get_or_insert_with(PerceptualSpec::vgg16);
                m.decoder.get_or_insert_with(DecoderSpec::paper);
            }
            ModelPreset::Toy => {
                if h != w {
                    return Err(Error::config("the toy preset needs a square resize_to"));
                }
                m.teacher
                    .get_or_insert_with(|| EncoderSpec::toy_teacher(h, TOY_EMBED_CHANNELS));
                m.student
                    .get_or_insert_with(|| EncoderSpec::toy_student(h, TOY_EMBED_CHANNELS));
                m.perceptual.get_or_insert_with(PerceptualSpec::toy);
                m.decoder.get_or_insert_with(|| DecoderSpec::toy(h, TOY_EMBED_CHANNELS));
            }
        }
        self.train.encoder_distill.phase = Phase::EncoderDistill;
        self.train.decoder_finetune.phase = Phase::DecoderFinetune;
        Ok(())
    }

    pub fn models(&self) -> ResolvedModels {
        let m = &self.model;
        ResolvedModels {
            teacher: m.teacher.clone().expect("resolved"),
            student: m.student.clone().expect("resolved"),
            perceptual: m.perceptual.clone().expect("resolved"),
            decoder: m.decoder.clone().expect("resolved"),
        }
    }

    pub fn split(&self) -> SplitSpec {
        self.dataset.split.expect("resolved")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.dataset.cache_dir.clone().expect("resolved")
    }

    /// Schema-level checks that need no filesystem access.
    pub fn validate(&self) -> Result<()> {
        if self.run_name.trim().is_empty() {
            return Err(Error::config("run_name must not be empty"));
        }
        let seeds = [
            self.seed,
            self.train.encoder_distill.seed,
            self.train.decoder_finetune.seed,
            self.split().seed,
        ];
        if seeds.iter().any(|&s| s > i64::MAX as u64) {
            return Err(Error::config(format!("seeds must not exceed {}", i64::MAX)));
        }
        self.split().validate()?;
        self.dataset.preprocessing.validate()?;
        if let Some(s) = &self.dataset.synthetic {
            s.validate()?;
        }
        self.train.encoder_distill.validate()?;
        self.train.decoder_finetune.validate()?;
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::config("eval.threshold must lie in [0, 1]"));
        }
        let m = self.models();
        m.teacher.validate()?;
        m.student.validate()?;
        m.perceptual.validate()?;
        m.decoder.validate()?;
        let size = self.dataset.preprocessing.resize_to;
        for (role, spec) in [("teacher", &m.teacher), ("student", &m.student)] {
            if spec.input_size != size {
                return Err(Error::config(format!(
                    "model.{role}.input_size {:?} differs from dataset.preprocessing.resize_to {size:?}",
                    spec.input_size
                )));
            }
        }
        if m.teacher.output_shape(1) != m.student.output_shape(1) {
            return Err(Error::config(format!(
                "teacher embeddings {:?} and student embeddings {:?} differ",
                m.teacher.output_shape(1),
                m.student.output_shape(1)
            )));
        }
        if m.decoder.embed_channels != m.student.embed_channels || m.decoder.embed_spatial != m.student.embed_spatial {
            return Err(Error::config(
                "model.decoder does not match the student embedding shape",
            ));
        }
        if m.decoder.output_size != size {
            return Err(Error::config(
                "model.decoder.output_size must equal dataset.preprocessing.resize_to",
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run spec serializes")
    }

    /// Writes `<output_dir>/effective_config.toml` and returns its sha256.
    pub fn write_effective(&self) -> Result<(PathBuf, String)> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join(EFFECTIVE_CONFIG);
        let text = self.to_toml();
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        Ok((path, hex::encode(Sha256::digest(text.as_bytes()))))
    }
}

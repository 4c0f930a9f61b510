//! Run configuration: presets, TOML overlays and the provenance hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use posediff_core::denoiser::DenoiserConfig;
use posediff_core::diffusion::{build_schedule, NoiseSchedule, ScheduleKind};
use posediff_core::io::normalize::NormalizationMode;
use posediff_core::metrics::Alignment;
use posediff_core::sampler::SamplerConfig;
use posediff_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> posediff_core::Result<NoiseSchedule> {
        build_schedule(self.steps, self.kind, self.beta_min, self.beta_max)
    }
}

/// Synthetic data generated by `posediff synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sequences: usize,
    pub validation_sequences: usize,
    /// `walk_cycle`, `arm_wave`, `sit` or `mixed`.
    pub motion: String,
    pub normalization: NormalizationMode,
    /// Container of precomputed frozen prompt tokens (`prompt/<k>/frozen`,
    /// `4×D`) used for every action instead of the built-in hash encoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_embeddings: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Keep a numbered checkpoint every this many epochs, besides the
    /// rolling `checkpoint.ptc`.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub alignment: Alignment,
}

/// Component switches of the denoiser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Prompt learning, prompt cross-attention and timestamp stylization.
    #[default]
    Full,
    /// No prompt at all: no pooled prompt, no cross-attention, no
    /// stylization.
    NoPrompt,
    /// Prompt bank removed; stylization driven by the timestamp alone.
    NoFpp,
    /// No prompt cross-attention.
    NoFpc,
    /// No timestamp stylization.
    NoPts,
}

impl Ablation {
    pub fn apply(self, d: &mut DenoiserConfig) {
        let (p, c, s) = match self {
            Ablation::Full => (true, true, true),
            Ablation::NoPrompt => (false, false, false),
            Ablation::NoFpp => (false, false, true),
            Ablation::NoFpc => (true, false, true),
            Ablation::NoPts => (true, true, false),
        };
        d.use_prompt = p;
        d.use_fpc = c;
        d.use_pts = s;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

pub const PRESETS: [&str; 2] = ["tiny", "paper"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let schedule = ScheduleConfig { steps: 1000, kind: ScheduleKind::Cosine, beta_min: 1e-4, beta_max: 0.999 };
        let sampler = SamplerConfig::default();
        let eval = EvalConfig { alignment: Alignment::Similarity };
        match name {
            "tiny" => Ok(Self {
                preset: name.into(),
                seed: 0,
                schedule,
                denoiser: DenoiserConfig { dim: 64, heads: 4, frames: 16, joints: 17, ..Default::default() },
                train: TrainConfig { epochs: 100, lr0: 3e-3, lr_decay: 0.998, ..Default::default() },
                sampler,
                data: DataConfig {
                    sequences: 8,
                    validation_sequences: 6,
                    motion: "mixed".into(),
                    normalization: NormalizationMode::RootCentered,
                    prompt_embeddings: None,
                },
                eval,
                output: OutputConfig { checkpoint_every: 25 },
            }),
            "paper" => Ok(Self {
                preset: name.into(),
                seed: 0,
                schedule,
                denoiser: DenoiserConfig::default(),
                train: TrainConfig::default(),
                sampler,
                data: DataConfig {
                    sequences: 64,
                    validation_sequences: 16,
                    motion: "mixed".into(),
                    normalization: NormalizationMode::RootCentered,
                    prompt_embeddings: None,
                },
                eval,
                output: OutputConfig { checkpoint_every: 1 },
            }),
            other => bail!("unknown preset {other:?} (expected one of {})", PRESETS.join(", ")),
        }
    }

    /// Preset named in the file (or `default_preset`), overlaid with every
    /// key the file sets. Unknown keys are rejected.
    pub fn from_toml_str(text: &str, default_preset: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).context("config file is not valid TOML")?;
        let preset = match overlay.get("preset") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => bail!("`preset` must be a string"),
            None => default_preset.to_string(),
        };
        let base = toml::Table::try_from(Self::preset(&preset)?).context("serializing preset")?;
        let merged = merge(base, overlay);
        let cfg: Self = merged.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_preset: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text, default_preset).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.schedule.build()?;
        if self.output.checkpoint_every == 0 {
            bail!("output.checkpoint_every must be at least 1");
        }
        if self.data.sequences == 0 {
            bail!("data.sequences must be at least 1");
        }
        if self.data.motion != "mixed" {
            posediff_core::io::synth::MotionKind::parse(&self.data.motion)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn ablation(&self) -> Ablation {
        let d = &self.denoiser;
        match (d.use_prompt, d.use_fpc, d.use_pts) {
            (false, false, false) => Ablation::NoPrompt,
            (false, false, true) => Ablation::NoFpp,
            (true, false, true) => Ablation::NoFpc,
            (true, true, false) => Ablation::NoPts,
            _ => Ablation::Full,
        }
    }
}

fn merge(mut base: toml::Table, overlay: toml::Table) -> toml::Table {
    for (k, v) in overlay {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

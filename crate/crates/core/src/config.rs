//! TOML run configuration. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AlignMode;
use crate::prior::{PriorConfig, PriorTrainConfig};
use crate::sampler::{make_schedule, schedule_from_weights, GuidanceConfig, PriorBranch};
use crate::synth::{NormalizationSpec, SceneConfig, SceneFamily};
use crate::tokenizer::{ScaleSchedule, TokenizerConfig, TokenizerTrainConfig};
use crate::upsampler::{UpsamplerConfig, UpsamplerTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `V`.
    pub vocab: usize,
    /// `C`.
    pub channels: usize,
    /// `K`; must equal the schedule length.
    pub scales: usize,
    pub schedule: ScaleSchedule,
    pub tokenizer_widths: [usize; 3],
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub upsampler_widths: [usize; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            vocab: 256,
            channels: 16,
            scales: 10,
            schedule: ScaleSchedule::desk(),
            tokenizer_widths: [16, 32, 48],
            d_model: 128,
            blocks: 6,
            heads: 4,
            ffn_mult: 4,
            upsampler_widths: [32, 64, 128],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset root holding `train/`, `val/` and `test/`.
    pub dir: PathBuf,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_seed: u64,
    /// Scene families, assigned round-robin over sample indices.
    pub families: Vec<SceneFamily>,
    pub normalization: NormalizationSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: PathBuf::from("data"),
            height: 48,
            width: 64,
            n_train: 200,
            n_val: 20,
            n_test: 50,
            base_seed: 7,
            families: vec![SceneFamily::Indoor, SceneFamily::Roadway],
            normalization: NormalizationSpec::default(),
        }
    }
}

impl DataSection {
    pub fn scene(&self, index: usize) -> SceneConfig {
        SceneConfig::new(self.height, self.width, self.families[index % self.families.len()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    pub tokenizer: TokenizerTrainConfig,
    pub prior: PriorTrainConfig,
    pub upsampler: UpsamplerTrainConfig,
    /// Family of the first prior phase; the second phase uses everything.
    pub phase_a_family: SceneFamily,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 0,
            tokenizer: TokenizerTrainConfig::default(),
            prior: PriorTrainConfig::default(),
            upsampler: UpsamplerTrainConfig::default(),
            phase_a_family: SceneFamily::Roadway,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    /// `none`, `constant` or `optimized`; ignored when `weights` is set.
    pub preset: String,
    pub weights: Option<Vec<f32>>,
    pub temperature: f32,
    pub top_k: Option<usize>,
    pub seed: u64,
    pub prior_branch: PriorBranch,
    /// Median over this many seeds; 1 disables ensembling.
    pub ensemble: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            preset: "optimized".into(),
            weights: None,
            temperature: 1.0,
            top_k: None,
            seed: 0,
            prior_branch: PriorBranch::Expected,
            ensemble: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub align: AlignMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Checkpoints and logs.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub guidance: GuidanceSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative data and output paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.data.dir, &mut cfg.output.dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.schedule.len() != m.scales {
            return Err(Error::Config(format!(
                "model.scales is {} but the schedule has {} entries",
                m.scales,
                m.schedule.len()
            )));
        }
        let (lh, lw) = m.schedule.latent();
        if (self.data.height, self.data.width) != (lh * 8, lw * 8) {
            return Err(Error::Config(format!(
                "image size {}x{} does not encode to the schedule's {lh}x{lw} latent",
                self.data.height, self.data.width
            )));
        }
        if self.data.families.is_empty() {
            return Err(Error::Config("data.families is empty".into()));
        }
        if self.guidance.ensemble == 0 {
            return Err(Error::Config("guidance.ensemble must be at least 1".into()));
        }
        self.guidance()?;
        Ok(())
    }

    pub fn depth_tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            widths: self.model.tokenizer_widths,
            ..TokenizerConfig::depth(self.model.channels, self.model.vocab, self.model.schedule.clone())
        }
    }

    pub fn rgb_tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            widths: self.model.tokenizer_widths,
            ..TokenizerConfig::rgb(self.model.channels, self.model.vocab, self.model.schedule.clone())
        }
    }

    pub fn prior(&self) -> PriorConfig {
        PriorConfig {
            d_model: self.model.d_model,
            blocks: self.model.blocks,
            heads: self.model.heads,
            ffn_mult: self.model.ffn_mult,
            ..PriorConfig::new(self.model.vocab, self.model.channels, self.model.schedule.clone())
        }
    }

    pub fn upsampler(&self) -> UpsamplerConfig {
        UpsamplerConfig {
            widths: self.model.upsampler_widths,
            ..UpsamplerConfig::new(self.model.channels, self.model.scales)
        }
    }

    /// Sampler settings from the guidance section.
    pub fn guidance(&self) -> Result<GuidanceConfig> {
        let g = &self.guidance;
        let mut cfg = match &g.weights {
            Some(w) => schedule_from_weights(w, self.model.scales)?,
            None => make_schedule(&g.preset, self.model.scales)?,
        };
        cfg.temperature = g.temperature;
        cfg.top_k = g.top_k;
        cfg.seed = g.seed;
        cfg.prior_branch = g.prior_branch;
        Ok(cfg)
    }
}

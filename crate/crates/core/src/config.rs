//! Run configuration: one structured file drives a whole run.
//!
//! Every field has a documented default; a config file only needs the fields
//! it overrides. Resolution is total: presets provide the base, the file is
//! merged on top, and the fully resolved config is echoed to the run
//! directory before any compute starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training strategy. `End2` with all three flags on is the full method;
/// turning flags off yields the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StrategyVariant {
    /// Dual decoder with gradient-blocked distortion. Flags control the
    /// feature-alignment loss, momentum updating, and swapping learning.
    End2 { use_fa: bool, use_mu: bool, use_sl: bool },
    /// Single decoder, differentiable distortions only; gradients flow
    /// through the noise layer.
    VanillaEnd,
    /// Single decoder fed `x_hat + blocked(x_tilde - x_hat)`: the forward
    /// pass sees the distortion, the backward path sees the clean image.
    ForwardAsl,
    /// Two-stage: joint noise-free training, then decoder-only training on
    /// distorted images with the encoder frozen.
    Tdsl { stage1_fraction: f64 },
}

impl StrategyVariant {
    pub fn end2() -> Self {
        StrategyVariant::End2 { use_fa: true, use_mu: true, use_sl: true }
    }

    /// Ablation row with no strategy enabled ("None" row).
    pub fn end2_none() -> Self {
        StrategyVariant::End2 { use_fa: false, use_mu: false, use_sl: false }
    }

    pub fn label(&self) -> String {
        match self {
            StrategyVariant::End2 { use_fa: true, use_mu: true, use_sl: true } => "end2".into(),
            StrategyVariant::End2 { use_fa, use_mu, use_sl } => {
                format!("end2(fa={use_fa},mu={use_mu},sl={use_sl})")
            }
            StrategyVariant::VanillaEnd => "vanilla_end".into(),
            StrategyVariant::ForwardAsl => "forward_asl".into(),
            StrategyVariant::Tdsl { .. } => "tdsl".into(),
        }
    }
}

/// How the loss aligns teacher and student features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentKind {
    /// `2 - 2 cos` on the hypersphere (squared distance of unit vectors).
    Cosine,
    /// Mean squared error on raw (unnormalized) projections.
    Mse,
    /// Softmax cross-entropy with teacher centering and sharpening.
    Dino,
}

/// Which decoder the checkpoint exports for extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportDecoder {
    /// The decoder last assigned the distorted branch (default).
    Student,
    /// The decoder last assigned the clean branch.
    Teacher,
    /// Element-wise mean of the two decoders' parameters.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    /// `end2` | `vanilla_end` | `forward_asl` | `tdsl`. Default `end2`.
    pub kind: String,
    /// Feature-alignment loss on/off (end2 only). Default true.
    pub use_feature_alignment: bool,
    /// Momentum updating on/off (end2 only). Default true.
    pub use_momentum_update: bool,
    /// Swapping learning on/off (end2 only). Default true.
    pub use_swapping: bool,
    /// Fraction of the step budget spent in TDSL stage 1. Default 0.5.
    pub tdsl_stage1_fraction: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: "end2".into(),
            use_feature_alignment: true,
            use_momentum_update: true,
            use_swapping: true,
            tdsl_stage1_fraction: 0.5,
        }
    }
}

impl StrategyConfig {
    pub fn variant(&self) -> Result<StrategyVariant> {
        match self.kind.as_str() {
            "end2" => Ok(StrategyVariant::End2 {
                use_fa: self.use_feature_alignment,
                use_mu: self.use_momentum_update,
                use_sl: self.use_swapping,
            }),
            "vanilla_end" => Ok(StrategyVariant::VanillaEnd),
            "forward_asl" => Ok(StrategyVariant::ForwardAsl),
            "tdsl" => {
                if !(0.0..=1.0).contains(&self.tdsl_stage1_fraction) {
                    return Err(Error::InvalidConfig(
                        "tdsl_stage1_fraction must be in [0, 1]".into(),
                    ));
                }
                Ok(StrategyVariant::Tdsl { stage1_fraction: self.tdsl_stage1_fraction })
            }
            other => Err(Error::InvalidConfig(format!("unknown strategy kind '{other}'"))),
        }
    }

    pub fn from_variant(v: StrategyVariant) -> Self {
        let mut c = Self::default();
        match v {
            StrategyVariant::End2 { use_fa, use_mu, use_sl } => {
                c.kind = "end2".into();
                c.use_feature_alignment = use_fa;
                c.use_momentum_update = use_mu;
                c.use_swapping = use_sl;
            }
            StrategyVariant::VanillaEnd => c.kind = "vanilla_end".into(),
            StrategyVariant::ForwardAsl => c.kind = "forward_asl".into(),
            StrategyVariant::Tdsl { stage1_fraction } => {
                c.kind = "tdsl".into();
                c.tdsl_stage1_fraction = stage1_fraction;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Payload length n. Default 8 (desk); paper preset uses 30.
    pub message_length: usize,
    /// Image height and width. Default [32, 32]; paper preset [128, 128].
    pub image_size: [usize; 2],
    /// Decoder feature dimension d. Default 128; paper preset 256.
    pub latent_dim: usize,
    /// Projection dimension for the alignment hypersphere. Default 256.
    pub projection_dim: usize,
    /// Encoder trunk width. Default 16; paper preset 64.
    pub enc_channels: usize,
    /// Encoder body conv blocks. Default 2.
    pub enc_blocks: usize,
    /// Decoder stem width (doubles per downsampling stage). Default 16.
    pub dec_channels: usize,
    /// Decoder stride-2 downsampling stages. Default 3; paper preset 5.
    pub dec_blocks: usize,
    /// Scalar on the encoder residual: `x_hat = x + strength * r`. Default 1.0.
    pub embed_strength: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            message_length: 8,
            image_size: [32, 32],
            latent_dim: 128,
            projection_dim: 256,
            enc_channels: 16,
            enc_blocks: 2,
            dec_channels: 16,
            dec_blocks: 3,
            embed_strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight on the feature-alignment loss. Default 0.01.
    pub lambda_align: f64,
    /// Weight on the message loss. Default 8.
    pub lambda_msg: f64,
    /// Weight on the quality loss. Default 5.
    pub lambda_quality: f64,
    /// Alignment-loss plugin. Default cosine.
    pub alignment: AlignmentKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_align: 0.01,
            lambda_msg: 8.0,
            lambda_quality: 5.0,
            alignment: AlignmentKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fixed learning rate. Default 8e-4.
    pub learning_rate: f64,
    /// Batch size. Default 16 (desk); paper preset 32.
    pub batch_size: usize,
    /// Total optimizer steps. Default 2000.
    pub steps: u64,
    /// Momentum weight tau for the teacher update. Default 0.999.
    pub momentum_tau: f64,
    /// Swap roles every k steps. Default 1.
    pub swap_interval: u64,
    /// Held-out evaluation every this many steps (0 disables). Default 500.
    pub eval_interval: u64,
    /// Checkpoint every this many steps (0 = final only). Default 0.
    pub checkpoint_interval: u64,
    /// Which decoder the final checkpoint exports for extraction.
    pub export_decoder: ExportDecoder,
    /// Whether the teacher decoder also receives gradient updates (the
    /// schedule's literal reading). With `false` the teacher moves only by
    /// momentum, the stricter alternative reading. Default true.
    pub teacher_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-4,
            batch_size: 16,
            steps: 2000,
            momentum_tau: 0.999,
            swap_interval: 1,
            eval_interval: 500,
            checkpoint_interval: 0,
            export_decoder: ExportDecoder::Student,
            teacher_gradient: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// `synthetic` (procedural corpus) or `directory`. Default synthetic.
    pub source: String,
    /// Image directory when `source = "directory"`.
    pub path: Option<PathBuf>,
    /// Number of procedural images when `source = "synthetic"`. Default 256.
    pub synthetic_size: usize,
    /// Images held out for periodic evaluation. Default 32.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: "synthetic".into(), path: None, synthetic_size: 256, holdout: 32 }
    }
}

/// One distortion in a suite: a registry name plus named parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub name: String,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Only for `external` distortions: the command template.
    #[serde(default)]
    pub command: Option<ExternalCommandSpec>,
}

fn default_weight() -> f64 {
    1.0
}

impl DistortionSpec {
    pub fn named(name: &str, params: &[(&str, f64)]) -> Self {
        Self {
            name: name.into(),
            weight: 1.0,
            params: params.iter().map(|(k, v)| ((*k).into(), *v)).collect(),
            command: None,
        }
    }
}

/// External image-to-image program: executable, argument template with
/// `{in}` / `{out}` placeholders, and a timeout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalCommandSpec {
    pub program: String,
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// `random` (weight-proportional draw per step) or `fixed` (round-robin
    /// over entries in order). Default random.
    pub mode: String,
    pub entries: Vec<DistortionSpec>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            mode: "random".into(),
            entries: vec![
                DistortionSpec::named("identity", &[]),
                DistortionSpec::named("gaussian_noise", &[("std", 0.01)]),
                DistortionSpec::named("jpeg_real", &[("quality", 50.0)]),
            ],
        }
    }
}

/// Fully resolved configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; all randomness fans out from here. Default 7.
    pub seed: u64,
    /// Force serial execution for bit-reproducibility. Default true.
    pub deterministic: bool,
    pub strategy: StrategyConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub distortions: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            deterministic: true,
            strategy: StrategyConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            distortions: SuiteConfig::default(),
        }
    }
}

impl RunConfig {
    /// Named presets. `desk` is the fast default; `paper` mirrors the
    /// published training regime (128x128, 30 bits, batch 32, combined noise).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => {
                let mut c = Self::default();
                c.model = ModelConfig {
                    message_length: 30,
                    image_size: [128, 128],
                    latent_dim: 256,
                    projection_dim: 256,
                    enc_channels: 64,
                    enc_blocks: 4,
                    dec_channels: 32,
                    dec_blocks: 5,
                    embed_strength: 1.0,
                };
                c.train.batch_size = 32;
                c.train.steps = 100_000;
                c.train.eval_interval = 2000;
                c.distortions = SuiteConfig { mode: "random".into(), entries: combined_suite() };
                Ok(c)
            }
            other => Err(Error::InvalidConfig(format!("unknown preset '{other}'"))),
        }
    }

    /// Load a TOML file and merge it over `base` (field-by-field).
    pub fn load_over(base: Self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_over(base, &text)
    }

    pub fn parse_over(base: Self, text: &str) -> Result<Self> {
        let overlay: toml::Value = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse error: {e}")))?;
        let base_value =
            toml::Value::try_from(&base).map_err(|e| Error::Serialization(e.to_string()))?;
        let merged = merge_toml(base_value, overlay);
        let config: RunConfig = merged
            .try_into()
            .map_err(|e| Error::InvalidConfig(format!("config field error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.message_length == 0 {
            return Err(Error::InvalidConfig("message_length must be >= 1".into()));
        }
        if m.image_size[0] < 16 || m.image_size[1] < 16 {
            return Err(Error::InvalidConfig("image sides must be >= 16".into()));
        }
        if m.latent_dim == 0 || m.projection_dim == 0 {
            return Err(Error::InvalidConfig("latent/projection dims must be >= 1".into()));
        }
        if m.enc_channels == 0 || m.dec_channels == 0 || m.dec_blocks == 0 {
            return Err(Error::InvalidConfig("channel/block counts must be >= 1".into()));
        }
        let min_side = m.image_size[0].min(m.image_size[1]);
        if min_side >> m.dec_blocks == 0 {
            return Err(Error::InvalidConfig(format!(
                "dec_blocks={} downsamples a {}px side to nothing",
                m.dec_blocks, min_side
            )));
        }
        if m.embed_strength <= 0.0 {
            return Err(Error::InvalidConfig("embed_strength must be > 0".into()));
        }
        let l = &self.loss;
        if l.lambda_align <= 0.0 || l.lambda_msg <= 0.0 || l.lambda_quality <= 0.0 {
            return Err(Error::InvalidConfig("loss weights must be > 0".into()));
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.momentum_tau) {
            return Err(Error::InvalidConfig("momentum_tau must be in [0, 1]".into()));
        }
        if t.swap_interval == 0 {
            return Err(Error::InvalidConfig("swap_interval must be >= 1".into()));
        }
        if t.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        match self.data.source.as_str() {
            "synthetic" => {
                if self.data.synthetic_size == 0 {
                    return Err(Error::InvalidConfig("synthetic_size must be >= 1".into()));
                }
            }
            "directory" => {
                if self.data.path.is_none() {
                    return Err(Error::InvalidConfig(
                        "data.path is required for source = \"directory\"".into(),
                    ));
                }
            }
            other => {
                return Err(Error::InvalidConfig(format!("unknown data source '{other}'")));
            }
        }
        if self.distortions.entries.is_empty() {
            return Err(Error::InvalidConfig("distortion suite must be non-empty".into()));
        }
        if self.distortions.entries.iter().any(|e| e.weight <= 0.0) {
            return Err(Error::InvalidConfig("distortion weights must be > 0".into()));
        }
        match self.distortions.mode.as_str() {
            "random" | "fixed" => {}
            other => {
                return Err(Error::InvalidConfig(format!("unknown suite mode '{other}'")));
            }
        }
        self.strategy.variant()?;
        Ok(())
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.model.image_size[0], self.model.image_size[1])
    }
}

/// The combined-noise suite used by the paper-scale benchmark rows.
pub fn combined_suite() -> Vec<DistortionSpec> {
    vec![
        DistortionSpec::named("rotate", &[("deg", 10.0)]),
        DistortionSpec::named("crop", &[("p", 0.1)]),
        DistortionSpec::named("translate", &[("dis", 0.05)]),
        DistortionSpec::named("scale", &[("f", 0.65)]),
        DistortionSpec::named("shear", &[("deg", 10.0)]),
        DistortionSpec::named("dropout", &[("p", 0.5)]),
        DistortionSpec::named("cropout", &[("p", 0.3)]),
        DistortionSpec::named("color_jitter", &[]),
        DistortionSpec::named("jpeg_real", &[("quality", 50.0)]),
        DistortionSpec::named("gaussian_filter", &[("sigma", 2.0)]),
        DistortionSpec::named("gaussian_noise", &[("std", 0.01)]),
    ]
}

/// The nine-distortion benchmark suite (identity through gaussian noise).
pub fn benchmark_suite() -> Vec<DistortionSpec> {
    vec![
        DistortionSpec::named("identity", &[]),
        DistortionSpec::named("gaussian_filter", &[("sigma", 2.0)]),
        DistortionSpec::named("jpeg_real", &[("quality", 50.0)]),
        DistortionSpec::named("crop", &[("p", 0.1)]),
        DistortionSpec::named("dropout", &[("p", 0.5)]),
        DistortionSpec::named("rotate", &[("deg", 10.0)]),
        DistortionSpec::named("translate", &[("dis", 0.05)]),
        DistortionSpec::named("scale", &[("f", 0.65)]),
        DistortionSpec::named("gaussian_noise", &[("std", 0.01)]),
    ]
}

fn merge_toml(base: toml::Value, overlay: toml::Value) -> toml::Value {
    match (base, overlay) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.remove(&k) {
                    Some(existing) => {
                        b.insert(k, merge_toml(existing, v));
                    }
                    None => {
                        b.insert(k, v);
                    }
                }
            }
            toml::Value::Table(b)
        }
        // Arrays and scalars replace wholesale.
        (_, o) => o,
    }
}

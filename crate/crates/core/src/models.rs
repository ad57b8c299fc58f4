//! The watermark encoder, the two structurally identical decoders, and the
//! shared bias-free projection head.
//!
//! The encoder tiles the message spatially, fuses it with image features
//! through a small convolutional trunk, and adds the result to the input as
//! a residual. Each decoder is a strided convolutional stack ending in
//! global average pooling to the latent dimension, followed by a linear
//! message head. All forward passes run on a [`Tape`], so the same code
//! serves training (with gradients) and evaluation (with constants).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ops::Conv2dSpec, Tape, Var};
use crate::config::{ExportDecoder, ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::message::BitMessage;
use crate::params::ParameterSet;
use crate::rng::stream_rng;
use crate::scalar::Scalar;

/// Decoder latent features, one row of dimension `d` per batch element.
pub type FeatureBatch<F> = Array2<F>;
/// Unit-norm projections on the alignment hypersphere, one row per element.
pub type ProjectedBatch<F> = Array2<F>;

/// Norm below which a projection is considered degenerate.
pub const MIN_PROJECTION_NORM: f64 = 1e-12;

/// Which branch a decoder currently serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Teacher,
    Student,
}

/// Parameters of one model component bound onto a tape as leaves.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind<F: Scalar>(tape: &Tape<F>, params: &ParameterSet<F>, requires_grad: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, value)| (name.clone(), tape.leaf(value.clone(), requires_grad)))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    /// Collect gradients for every bound parameter (zeros where no path
    /// contributed).
    pub fn gradients<F: Scalar>(
        &self,
        tape: &Tape<F>,
        grads: &crate::autodiff::Gradients<F>,
    ) -> ParameterSet<F> {
        let mut out = ParameterSet::new();
        for (name, var) in &self.vars {
            let shape = tape.value(*var).shape().to_vec();
            out.insert(name.clone(), grads.get_or_zero(*var, &shape));
        }
        out
    }
}

fn kaiming_conv<F: Scalar>(
    rng: &mut impl Rng,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<F> {
    let fan_in = (ci * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[co, ci, kh, kw]), |_| F::from_f64c(normal_draw(rng) * std))
}

fn kaiming_linear<F: Scalar>(rng: &mut impl Rng, dout: usize, din: usize) -> ArrayD<F> {
    let std = (2.0 / din as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[dout, din]), |_| F::from_f64c(normal_draw(rng) * std))
}

/// Standard normal via Box-Muller on the f64 path, so f32 and f64 models
/// initialize from identical draws.
fn normal_draw(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Decoder trunk channel plan: stem, doubling per stride-2 stage (capped),
/// with the final stage emitting the latent dimension.
fn decoder_channels(cfg: &ModelConfig) -> Vec<usize> {
    let mut chans = Vec::with_capacity(cfg.dec_blocks + 1);
    chans.push(cfg.dec_channels);
    for i in 0..cfg.dec_blocks {
        if i + 1 == cfg.dec_blocks {
            chans.push(cfg.latent_dim);
        } else {
            chans.push((cfg.dec_channels << (i + 1)).min(256));
        }
    }
    chans
}

const STRIDE1: Conv2dSpec = Conv2dSpec { stride: 1, pad: 1 };
const STRIDE2: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };

/// The watermark embedder `x_hat = clamp(x + strength * residual(x, m))`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct EncoderModel<F: Scalar> {
    pub params: ParameterSet<F>,
    pub config: ModelConfig,
}

impl<F: Scalar> EncoderModel<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "encoder_init", 0);
        let c = config.enc_channels;
        let cin = 3 + config.message_length;
        let mut params = ParameterSet::new();
        params.insert("enc.stem.weight", kaiming_conv(&mut rng, c, cin, 3, 3));
        params.insert("enc.stem.bias", ArrayD::zeros(IxDyn(&[c])));
        for i in 0..config.enc_blocks {
            params.insert(format!("enc.body{i}.weight"), kaiming_conv(&mut rng, c, c, 3, 3));
            params.insert(format!("enc.body{i}.bias"), ArrayD::zeros(IxDyn(&[c])));
        }
        params.insert("enc.head.weight", kaiming_conv(&mut rng, 3, c, 3, 3));
        params.insert("enc.head.bias", ArrayD::zeros(IxDyn(&[3])));
        Self { params, config: config.clone() }
    }

    /// Graph forward: returns the watermarked batch node.
    pub fn forward(&self, tape: &Tape<F>, p: &BoundParams, x: Var, message: Var) -> Var {
        let (h, w) = {
            let xv = tape.value(x);
            (xv.shape()[2], xv.shape()[3])
        };
        let tiled = tape.broadcast_spatial(message, h, w);
        let cat = tape.concat_channels(x, tiled);
        let mut hid = tape.relu(tape.conv2d(
            cat,
            p.var("enc.stem.weight"),
            Some(p.var("enc.stem.bias")),
            STRIDE1,
        ));
        for i in 0..self.config.enc_blocks {
            hid = tape.relu(tape.conv2d(
                hid,
                p.var(&format!("enc.body{i}.weight")),
                Some(p.var(&format!("enc.body{i}.bias"))),
                STRIDE1,
            ));
        }
        let residual = tape.conv2d(
            hid,
            p.var("enc.head.weight"),
            Some(p.var("enc.head.bias")),
            STRIDE1,
        );
        let scaled = tape.scale(residual, F::from_f64c(self.config.embed_strength));
        tape.clamp01(tape.add(x, scaled))
    }
}

/// One of the two structurally identical decoders.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct DecoderModel<F: Scalar> {
    pub params: ParameterSet<F>,
    pub config: ModelConfig,
    pub role: Role,
}

impl<F: Scalar> DecoderModel<F> {
    pub fn init(config: &ModelConfig, seed: u64, stream: u64, role: Role) -> Self {
        let mut rng = stream_rng(seed, "decoder_init", stream);
        let chans = decoder_channels(config);
        let mut params = ParameterSet::new();
        params.insert("dec.stem.weight", kaiming_conv(&mut rng, chans[0], 3, 3, 3));
        params.insert("dec.stem.bias", ArrayD::zeros(IxDyn(&[chans[0]])));
        for i in 0..config.dec_blocks {
            params.insert(
                format!("dec.down{i}.weight"),
                kaiming_conv(&mut rng, chans[i + 1], chans[i], 3, 3),
            );
            params.insert(format!("dec.down{i}.bias"), ArrayD::zeros(IxDyn(&[chans[i + 1]])));
        }
        params.insert(
            "dec.head.weight",
            kaiming_linear(&mut rng, config.message_length, config.latent_dim),
        );
        params.insert("dec.head.bias", ArrayD::zeros(IxDyn(&[config.message_length])));
        Self { params, config: config.clone(), role }
    }

    /// Feature extraction: image node -> latent `(b, d)` node.
    pub fn features(&self, tape: &Tape<F>, p: &BoundParams, x: Var) -> Var {
        let mut hid = tape.relu(tape.conv2d(
            x,
            p.var("dec.stem.weight"),
            Some(p.var("dec.stem.bias")),
            STRIDE1,
        ));
        for i in 0..self.config.dec_blocks {
            let conv = tape.conv2d(
                hid,
                p.var(&format!("dec.down{i}.weight")),
                Some(p.var(&format!("dec.down{i}.bias"))),
                STRIDE2,
            );
            // The last stage feeds pooling directly, without an activation.
            hid = if i + 1 == self.config.dec_blocks { conv } else { tape.relu(conv) };
        }
        tape.global_avg_pool(hid)
    }

    /// Message head: latent node -> raw logits `(b, n)`.
    pub fn logits(&self, tape: &Tape<F>, p: &BoundParams, z: Var) -> Var {
        tape.linear(z, p.var("dec.head.weight"), Some(p.var("dec.head.bias")))
    }

    /// Full decode: image node -> squashed scores in `[0, 1]`.
    pub fn decode(&self, tape: &Tape<F>, p: &BoundParams, x: Var) -> Var {
        let z = self.features(tape, p, x);
        tape.sigmoid(self.logits(tape, p, z))
    }
}

/// Shared bias-free linear map onto the alignment space. Exactly one
/// instance per trainer, referenced by both decoders; used only in training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ProjectionHead<F: Scalar> {
    pub params: ParameterSet<F>,
    pub config: ModelConfig,
}

impl<F: Scalar> ProjectionHead<F> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "projection_init", 0);
        let mut params = ParameterSet::new();
        params.insert(
            "proj.weight",
            kaiming_linear(&mut rng, config.projection_dim, config.latent_dim),
        );
        Self { params, config: config.clone() }
    }

    /// Raw (unnormalized) projection node.
    pub fn raw(&self, tape: &Tape<F>, p: &BoundParams, z: Var) -> Var {
        tape.linear(z, p.var("proj.weight"), None)
    }

    /// Hypersphere projection: `phi(z) / ||phi(z)||`, unit rows.
    pub fn project(&self, tape: &Tape<F>, p: &BoundParams, z: Var) -> Result<Var> {
        tape.row_normalize(self.raw(tape, p, z), F::from_f64c(MIN_PROJECTION_NORM))
    }
}

/// Initialize the full model family: encoder, two decoders with identical
/// schemas but independent draws, and the shared projection head.
pub fn init_models<F: Scalar>(
    config: &RunConfig,
    seed: u64,
) -> (EncoderModel<F>, [DecoderModel<F>; 2], ProjectionHead<F>) {
    let encoder = EncoderModel::init(&config.model, seed);
    let teacher = DecoderModel::init(&config.model, seed, 1, Role::Teacher);
    let student = DecoderModel::init(&config.model, seed, 2, Role::Student);
    let projection = ProjectionHead::init(&config.model, seed);
    (encoder, [teacher, student], projection)
}

// ---- Value-level (eval mode) entry points ----

pub(crate) fn message_to_node<F: Scalar>(tape: &Tape<F>, m: &BitMessage, batch: usize) -> Var {
    let scalars = m.as_scalars::<F>();
    let n = scalars.len();
    let mut arr = Array2::<F>::zeros((batch, n));
    for bi in 0..batch {
        for (ni, &v) in scalars.iter().enumerate() {
            arr[(bi, ni)] = v;
        }
    }
    tape.constant(arr.into_dyn())
}

/// Embed a message into every image of the batch (eval mode, deterministic).
pub fn encode<F: Scalar>(
    encoder: &EncoderModel<F>,
    x: &ImageBatch<F>,
    m: &BitMessage,
) -> Result<ImageBatch<F>> {
    if m.len() != encoder.config.message_length {
        return Err(Error::InvalidConfig(format!(
            "message length {} does not match configured {}",
            m.len(),
            encoder.config.message_length
        )));
    }
    let tape = Tape::<F>::new();
    let p = BoundParams::bind(&tape, &encoder.params, false);
    let xv = tape.constant(x.data().clone().into_dyn());
    let mv = message_to_node(&tape, m, x.batch_size());
    let out = encoder.forward(&tape, &p, xv, mv);
    ImageBatch::from_dyn(tape.value(out).as_ref().clone())
}

/// Extract latent features from a batch (eval mode).
pub fn extract_features<F: Scalar>(
    decoder: &DecoderModel<F>,
    x: &ImageBatch<F>,
) -> Result<FeatureBatch<F>> {
    let tape = Tape::<F>::new();
    let p = BoundParams::bind(&tape, &decoder.params, false);
    let xv = tape.constant(x.data().clone().into_dyn());
    let z = decoder.features(&tape, &p, xv);
    Ok(tape
        .value(z)
        .as_ref()
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("features are rank 2"))
}

/// Squash latent features into per-bit scores in `[0, 1]`.
pub fn predict_message<F: Scalar>(
    decoder: &DecoderModel<F>,
    z: &FeatureBatch<F>,
) -> Result<Array2<F>> {
    if z.dim().1 != decoder.config.latent_dim {
        return Err(Error::Shape(format!(
            "feature dim {} does not match configured {}",
            z.dim().1,
            decoder.config.latent_dim
        )));
    }
    let tape = Tape::<F>::new();
    let p = BoundParams::bind(&tape, &decoder.params, false);
    let zv = tape.constant(z.clone().into_dyn());
    let scores = tape.sigmoid(decoder.logits(&tape, &p, zv));
    Ok(tape
        .value(scores)
        .as_ref()
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("scores are rank 2"))
}

/// Project features onto the unit hypersphere (eval mode).
pub fn project<F: Scalar>(
    head: &ProjectionHead<F>,
    z: &FeatureBatch<F>,
) -> Result<ProjectedBatch<F>> {
    let tape = Tape::<F>::new();
    let p = BoundParams::bind(&tape, &head.params, false);
    let zv = tape.constant(z.clone().into_dyn());
    let out = head.project(&tape, &p, zv)?;
    Ok(tape
        .value(out)
        .as_ref()
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("projection is rank 2"))
}

// ---- Checkpoints ----

const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to reproduce and deploy a trained model: each
/// component's parameters, the resolved config, and the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Checkpoint<F: Scalar> {
    pub format_version: u32,
    pub scalar_type: String,
    pub config: RunConfig,
    pub step: u64,
    pub encoder: ParameterSet<F>,
    pub decoders: [ParameterSet<F>; 2],
    /// Index into `decoders` of the current teacher (clean branch).
    pub teacher_index: usize,
    pub projection: ParameterSet<F>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(
        config: RunConfig,
        step: u64,
        encoder: &EncoderModel<F>,
        decoders: &[DecoderModel<F>; 2],
        teacher_index: usize,
        projection: &ProjectionHead<F>,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            scalar_type: F::NAME.to_string(),
            config,
            step,
            encoder: encoder.params.clone(),
            decoders: [decoders[0].params.clone(), decoders[1].params.clone()],
            teacher_index,
            projection: projection.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let bytes = bincode::serialize(self).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Load and validate: scalar type, format version, and every parameter
    /// schema must match what the stored config reconstructs.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt: Self = bincode::deserialize(&bytes)
            .map_err(|e| Error::Serialization(format!("checkpoint parse: {e}")))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Contract(format!(
                "checkpoint format v{} unsupported (expected v{CHECKPOINT_VERSION})",
                ckpt.format_version
            )));
        }
        if ckpt.scalar_type != F::NAME {
            return Err(Error::Contract(format!(
                "checkpoint scalar type {} does not match requested {}",
                ckpt.scalar_type,
                F::NAME
            )));
        }
        ckpt.config.validate()?;
        let (enc, decs, proj) = init_models::<F>(&ckpt.config, 0);
        if !enc.params.same_schema(&ckpt.encoder)
            || !decs[0].params.same_schema(&ckpt.decoders[0])
            || !decs[1].params.same_schema(&ckpt.decoders[1])
            || !proj.params.same_schema(&ckpt.projection)
        {
            return Err(Error::Contract(
                "checkpoint parameter schema does not match its config".into(),
            ));
        }
        if ckpt.teacher_index > 1 {
            return Err(Error::Contract("teacher_index out of range".into()));
        }
        Ok(ckpt)
    }

    pub fn encoder_model(&self) -> EncoderModel<F> {
        EncoderModel { params: self.encoder.clone(), config: self.config.model.clone() }
    }

    pub fn decoder_model(&self, index: usize) -> DecoderModel<F> {
        let role = if index == self.teacher_index { Role::Teacher } else { Role::Student };
        DecoderModel {
            params: self.decoders[index].clone(),
            config: self.config.model.clone(),
            role,
        }
    }

    /// The decoder exported for extraction, per the config's export policy.
    pub fn extraction_decoder(&self) -> Result<DecoderModel<F>> {
        let student = 1 - self.teacher_index;
        match self.config.train.export_decoder {
            ExportDecoder::Student => Ok(self.decoder_model(student)),
            ExportDecoder::Teacher => Ok(self.decoder_model(self.teacher_index)),
            ExportDecoder::Average => {
                let params = self.decoders[0].lerp(&self.decoders[1], F::from_f64c(0.5))?;
                Ok(DecoderModel { params, config: self.config.model.clone(), role: Role::Student })
            }
        }
    }
}

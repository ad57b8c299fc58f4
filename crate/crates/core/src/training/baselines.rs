//! Reference trainers the dual-decoder schedule is compared against.
//!
//! - Vanilla END: single decoder, gradients flow through the (necessarily
//!   differentiable) noise layer.
//! - Forward ASL: single decoder; the forward pass sees the distorted image
//!   while the backward path treats the distortion as additive and routes
//!   gradients through the clean watermarked image.
//! - TDSL: stage one trains encoder and decoder jointly without noise;
//!   stage two freezes the encoder and trains the decoder alone on real
//!   (gradient-blocked) distortions.

use crate::autodiff::Tape;
use crate::config::{RunConfig, StrategyVariant};
use crate::data::Dataset;
use crate::distortions::DistortionSuite;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::losses::{total_loss, LossBreakdown};
use crate::message::BitMessage;
use crate::models::{init_models, BoundParams, Checkpoint, DecoderModel, EncoderModel};
use crate::scalar::Scalar;

use super::optimizer::{Adam, AdamState};
use super::{batch_messages, evaluate_holdout, messages_to_array, TrainEvent};

/// How the single decoder sees the distorted image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NoiseRouting {
    /// No distortion at all (TDSL stage one).
    None,
    /// Gradient flows through the distortion (vanilla END).
    Differentiable,
    /// Forward sees the distortion, backward sees the clean image.
    AdditiveBypass,
    /// Gradient fully blocked (TDSL stage two; decoder-only training).
    Blocked,
}

/// Single-decoder trainer state shared by all baselines.
pub struct SingleDecoderState<F: Scalar> {
    pub config: RunConfig,
    pub step: u64,
    pub encoder: EncoderModel<F>,
    pub decoder: DecoderModel<F>,
    pub suite: DistortionSuite,
    routing: NoiseRouting,
    freeze_encoder: bool,
    adam: Adam,
    opt_encoder: AdamState<F>,
    opt_decoder: AdamState<F>,
}

impl<F: Scalar> SingleDecoderState<F> {
    fn new(config: &RunConfig, routing: NoiseRouting) -> Result<Self> {
        let suite = DistortionSuite::from_config(&config.distortions)?;
        if routing == NoiseRouting::Differentiable {
            for d in suite.entries() {
                if !d.supports_differentiable_application() {
                    return Err(Error::InvalidConfig(format!(
                        "strategy vanilla_end requires differentiable distortions, but '{}' \
                         can only be gradient-blocked",
                        d.name()
                    )));
                }
            }
        }
        let (encoder, decoders, _) = init_models::<F>(config, config.seed);
        let [decoder, _] = decoders;
        let adam = Adam::new(config.train.learning_rate);
        let opt_encoder = AdamState::new_like(&encoder.params);
        let opt_decoder = AdamState::new_like(&decoder.params);
        Ok(Self {
            config: config.clone(),
            step: 0,
            encoder,
            decoder,
            suite,
            routing,
            freeze_encoder: false,
            adam,
            opt_encoder,
            opt_decoder,
        })
    }

    fn train_step(&mut self, x: &ImageBatch<F>, messages: &[BitMessage]) -> Result<LossBreakdown> {
        let i = self.step;
        let tape = Tape::<F>::new();
        let enc_params = BoundParams::bind(&tape, &self.encoder.params, !self.freeze_encoder);
        let dec_params = BoundParams::bind(&tape, &self.decoder.params, true);

        let x_var = tape.constant(x.data().clone().into_dyn());
        let msg_arr = messages_to_array::<F>(messages);
        let msg_var = tape.constant(msg_arr.clone().into_dyn());
        let target = tape.constant(msg_arr.into_dyn());

        let xhat = self.encoder.forward(&tape, &enc_params, x_var, msg_var);

        let decoder_input = match self.routing {
            NoiseRouting::None => xhat,
            NoiseRouting::Differentiable => {
                let d = self.suite.pick(i, self.config.seed);
                let seed = self.suite.application_seed(i, self.config.seed);
                d.apply_differentiable_node(&tape, xhat, Some(x), seed)?
            }
            NoiseRouting::AdditiveBypass => {
                let d = self.suite.pick(i, self.config.seed);
                let seed = self.suite.application_seed(i, self.config.seed);
                let xhat_value = ImageBatch::from_dyn(tape.value(xhat).as_ref().clone())?;
                let distorted = d.apply(&xhat_value, Some(x), seed)?;
                tape.bypass(xhat, distorted.into_data().into_dyn())
            }
            NoiseRouting::Blocked => {
                let d = self.suite.pick(i, self.config.seed);
                let seed = self.suite.application_seed(i, self.config.seed);
                d.apply_blocked_node(&tape, xhat, Some(x), seed)?
            }
        };

        let scores = self.decoder.decode(&tape, &dec_params, decoder_input);
        let l_msg = tape.mse(scores, target);
        let l_quality = tape.mse(xhat, x_var);
        let lambda_m = F::from_f64c(self.config.loss.lambda_msg);
        let lambda_q = F::from_f64c(self.config.loss.lambda_quality);
        let total = tape.weighted_sum(&[(l_msg, lambda_m), (l_quality, lambda_q)]);

        let breakdown = total_loss(
            0.0,
            tape.scalar_value(l_msg).to_f64c(),
            tape.scalar_value(l_quality).to_f64c(),
            0.0,
            self.config.loss.lambda_msg,
            self.config.loss.lambda_quality,
        );
        if !breakdown.is_finite() {
            return Err(Error::NumericalAbort(format!(
                "non-finite loss at step {i}: {breakdown:?}"
            )));
        }

        let grads = tape.backward(total);
        if !self.freeze_encoder {
            let enc_grads = enc_params.gradients(&tape, &grads);
            self.adam.step(&mut self.encoder.params, &enc_grads, &mut self.opt_encoder)?;
        }
        let dec_grads = dec_params.gradients(&tape, &grads);
        self.adam.step(&mut self.decoder.params, &dec_grads, &mut self.opt_decoder)?;

        if !(self.encoder.params.all_finite() && self.decoder.params.all_finite()) {
            return Err(Error::NumericalAbort(format!(
                "non-finite parameters after step {i}"
            )));
        }

        self.step = i + 1;
        Ok(breakdown)
    }

    /// Checkpoint with both decoder slots holding the single trained decoder.
    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        let pair = [self.decoder.clone(), self.decoder.clone()];
        Checkpoint::new(self.config.clone(), self.step, &self.encoder, &pair, 0, &init_projection(&self.config))
    }
}

fn init_projection<F: Scalar>(config: &RunConfig) -> crate::models::ProjectionHead<F> {
    crate::models::ProjectionHead::init(&config.model, config.seed)
}

/// Vanilla END and Forward ASL share one loop; routing differs.
pub fn single_decoder_loop<F: Scalar>(
    config: &RunConfig,
    dataset: &Dataset<F>,
    observer: &mut dyn FnMut(TrainEvent<'_, F>),
) -> Result<Checkpoint<F>> {
    let routing = match config.strategy.variant()? {
        StrategyVariant::VanillaEnd => NoiseRouting::Differentiable,
        StrategyVariant::ForwardAsl => NoiseRouting::AdditiveBypass,
        other => {
            return Err(Error::InvalidConfig(format!(
                "single_decoder_loop does not drive {}",
                other.label()
            )))
        }
    };
    let mut state = SingleDecoderState::<F>::new(config, routing)?;
    run_steps(&mut state, 0, config.train.steps, dataset, observer)?;
    Ok(state.to_checkpoint())
}

/// Two-stage loop: joint noise-free training, then decoder-only training on
/// real distortions with the encoder frozen bit-exactly.
pub fn tdsl_loop<F: Scalar>(
    config: &RunConfig,
    dataset: &Dataset<F>,
    observer: &mut dyn FnMut(TrainEvent<'_, F>),
) -> Result<Checkpoint<F>> {
    let stage1_fraction = match config.strategy.variant()? {
        StrategyVariant::Tdsl { stage1_fraction } => stage1_fraction,
        other => {
            return Err(Error::InvalidConfig(format!(
                "tdsl_loop does not drive {}",
                other.label()
            )))
        }
    };
    let steps1 = (config.train.steps as f64 * stage1_fraction).round() as u64;
    let mut state = SingleDecoderState::<F>::new(config, NoiseRouting::None)?;
    run_steps(&mut state, 0, steps1, dataset, observer)?;

    let boundary = state.to_checkpoint();
    observer(TrainEvent::StageBoundary { step: steps1, checkpoint: &boundary });

    state.routing = NoiseRouting::Blocked;
    state.freeze_encoder = true;
    run_steps(&mut state, steps1, config.train.steps, dataset, observer)?;
    Ok(state.to_checkpoint())
}

/// Forward the single decoder on a distorted batch exactly as the
/// dual-decoder student sees it: same function, different gradient routing.
pub fn forward_scores_on<F: Scalar>(
    decoder: &DecoderModel<F>,
    distorted: &ImageBatch<F>,
) -> Result<ndarray::Array2<F>> {
    let z = crate::models::extract_features(decoder, distorted)?;
    crate::models::predict_message(decoder, &z)
}

fn run_steps<F: Scalar>(
    state: &mut SingleDecoderState<F>,
    from: u64,
    to: u64,
    dataset: &Dataset<F>,
    observer: &mut dyn FnMut(TrainEvent<'_, F>),
) -> Result<()> {
    let config = state.config.clone();
    let hw = config.image_hw();
    let batch = config.train.batch_size;
    let n = config.model.message_length;
    for step in from..to {
        let x = dataset.train_batch(batch, hw, config.seed, step)?;
        let msgs = batch_messages(config.seed, step, batch, n);
        match state.train_step(&x, &msgs) {
            Ok(loss) => observer(TrainEvent::Step { step, loss: &loss }),
            Err(e @ Error::NumericalAbort(_)) => {
                let ckpt = state.to_checkpoint();
                observer(TrainEvent::Checkpoint { step, checkpoint: &ckpt, diagnostic: true });
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        let done = step + 1;
        if config.train.eval_interval > 0 && done % config.train.eval_interval == 0 {
            let ckpt = state.to_checkpoint();
            let eval = evaluate_holdout(&ckpt, dataset, done)?;
            observer(TrainEvent::Eval { eval: &eval });
        }
        if config.train.checkpoint_interval > 0 && done % config.train.checkpoint_interval == 0 {
            let ckpt = state.to_checkpoint();
            observer(TrainEvent::Checkpoint { step: done, checkpoint: &ckpt, diagnostic: false });
        }
    }
    Ok(())
}

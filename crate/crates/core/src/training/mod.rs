//! The dual-decoder training loop: gradient-blocked distortion, joint
//! optimization of encoder and both decoders, momentum updating of the
//! teacher toward the student, and periodic role swapping. Baseline
//! strategies (single decoder, additive-bypass, two-stage) live in
//! [`baselines`].
//!
//! Per step: encode, apply the sampled distortion behind the gradient
//! barrier, run the teacher on the clean watermarked batch and the student
//! on the distorted one, combine the losses, backpropagate, take one
//! optimizer step, then momentum-update and maybe swap, in that order.

pub mod baselines;
pub mod optimizer;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{RunConfig, StrategyVariant};
use crate::data::Dataset;
use crate::distortions::DistortionSuite;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::losses::{total_loss, AlignmentPlugin, LossBreakdown};
use crate::message::{make_message, BitMessage};
use crate::models::{
    init_models, BoundParams, Checkpoint, DecoderModel, EncoderModel, ProjectionHead, Role,
};
use crate::params::ParameterSet;
use crate::rng::derive_seed;
use crate::scalar::Scalar;

use optimizer::{Adam, AdamState};

/// Eq-style momentum update: `tau * teacher + (1 - tau) * student`,
/// element-wise and exact at the endpoints.
pub fn momentum_update<F: Scalar>(
    teacher: &ParameterSet<F>,
    student: &ParameterSet<F>,
    tau: F,
) -> Result<ParameterSet<F>> {
    let t = tau.to_f64c();
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!("momentum tau must be in [0, 1], got {t}")));
    }
    teacher.lerp(student, tau)
}

/// Result of one training step.
#[derive(Debug, Clone)]
pub enum StepOutcome {
    Applied(LossBreakdown),
    /// The projection degenerated on this batch; parameters untouched, the
    /// step counter still advanced.
    SkippedDegenerate { reason: String },
}

/// One batch's messages: one per element, sampled from the message stream.
pub fn batch_messages(master_seed: u64, step: u64, batch: usize, n: usize) -> Vec<BitMessage> {
    (0..batch)
        .map(|i| {
            let seed = derive_seed(master_seed, "message", step * batch as u64 + i as u64);
            make_message(seed, n).expect("n >= 1 validated")
        })
        .collect()
}

pub(crate) fn messages_to_array<F: Scalar>(msgs: &[BitMessage]) -> Array2<F> {
    let b = msgs.len();
    let n = msgs[0].len();
    let mut arr = Array2::<F>::zeros((b, n));
    for (bi, m) in msgs.iter().enumerate() {
        for (ni, &v) in m.as_scalars::<F>().iter().enumerate() {
            arr[(bi, ni)] = v;
        }
    }
    arr
}

/// The full mutable state of one dual-decoder training run.
pub struct TrainerState<F: Scalar> {
    pub config: RunConfig,
    pub step: u64,
    pub encoder: EncoderModel<F>,
    pub decoders: [DecoderModel<F>; 2],
    /// Index into `decoders` of the clean-branch (teacher) decoder. Swapping
    /// exchanges roles, not parameters, so the value multiset is conserved
    /// by construction.
    pub teacher_index: usize,
    pub projection: ProjectionHead<F>,
    pub suite: DistortionSuite,
    pub skipped_batches: u64,
    /// Phases executed by the most recent step, in order.
    pub last_phases: Vec<&'static str>,
    use_fa: bool,
    use_mu: bool,
    use_sl: bool,
    adam: Adam,
    opt_encoder: AdamState<F>,
    opt_decoders: [AdamState<F>; 2],
    opt_projection: AdamState<F>,
    alignment: AlignmentPlugin<F>,
}

/// Handles into a built step graph, for introspection and tests.
pub struct StepGraph<F: Scalar> {
    pub tape: Tape<F>,
    pub total: Var,
    pub xhat: Var,
    pub teacher_features: Var,
    pub student_features: Option<Var>,
    pub enc_params: BoundParams,
    pub dec_t_params: BoundParams,
    pub dec_s_params: Option<BoundParams>,
    pub proj_params: Option<BoundParams>,
    pub breakdown: LossBreakdown,
}

impl<F: Scalar> TrainerState<F> {
    /// Build a fresh trainer. The strategy must be the dual-decoder family;
    /// baselines have their own constructors.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let (use_fa, use_mu, use_sl) = match config.strategy.variant()? {
            StrategyVariant::End2 { use_fa, use_mu, use_sl } => (use_fa, use_mu, use_sl),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "TrainerState drives the dual-decoder strategy, not {}",
                    other.label()
                )))
            }
        };
        let (encoder, decoders, projection) = init_models::<F>(config, config.seed);
        let suite = DistortionSuite::from_config(&config.distortions)?;
        let adam = Adam::new(config.train.learning_rate);
        let opt_encoder = AdamState::new_like(&encoder.params);
        let opt_decoders =
            [AdamState::new_like(&decoders[0].params), AdamState::new_like(&decoders[1].params)];
        let opt_projection = AdamState::new_like(&projection.params);
        let alignment =
            AlignmentPlugin::new(config.loss.alignment, config.model.projection_dim);
        Ok(Self {
            config: config.clone(),
            step: 0,
            encoder,
            decoders,
            teacher_index: 0,
            projection,
            suite,
            skipped_batches: 0,
            last_phases: Vec::new(),
            use_fa,
            use_mu,
            use_sl,
            adam,
            opt_encoder,
            opt_decoders,
            opt_projection,
            alignment,
        })
    }

    pub fn student_index(&self) -> usize {
        1 - self.teacher_index
    }

    /// Build the step graph without mutating parameters. With
    /// `include_student = false` the student branch (and the alignment and
    /// student message terms) is excised entirely, which is how the
    /// gradient-routing property is checked.
    pub fn build_step_graph(
        &mut self,
        x: &ImageBatch<F>,
        messages: &[BitMessage],
        include_student: bool,
    ) -> Result<StepGraph<F>> {
        let batch = x.batch_size();
        if messages.len() != batch {
            return Err(Error::Shape(format!(
                "expected {batch} messages, got {}",
                messages.len()
            )));
        }
        if messages.iter().any(|m| m.len() != self.config.model.message_length) {
            return Err(Error::InvalidConfig("message length mismatch".into()));
        }

        let tape = Tape::<F>::new();
        let enc_params = BoundParams::bind(&tape, &self.encoder.params, true);
        let teacher = &self.decoders[self.teacher_index];
        let student = &self.decoders[self.student_index()];
        let dec_t_params = BoundParams::bind(&tape, &teacher.params, true);

        let x_var = tape.constant(x.data().clone().into_dyn());
        let msg_arr = messages_to_array::<F>(messages);
        let msg_var = tape.constant(msg_arr.clone().into_dyn());
        let target_var = tape.constant(msg_arr.into_dyn());

        // Encode and the teacher (clean) branch.
        let xhat = self.encoder.forward(&tape, &enc_params, x_var, msg_var);
        let z_t = teacher.features(&tape, &dec_t_params, xhat);
        let scores_t = tape.sigmoid(teacher.logits(&tape, &dec_t_params, z_t));

        let lambda_a = F::from_f64c(self.config.loss.lambda_align);
        let lambda_m = F::from_f64c(self.config.loss.lambda_msg);
        let lambda_q = F::from_f64c(self.config.loss.lambda_quality);

        let l_quality = tape.mse(xhat, x_var);

        let mut student_features = None;
        let mut dec_s_params = None;
        let mut proj_params = None;
        let mut l_align_node = None;

        let l_msg_node;
        if include_student {
            // Distortion behind the gradient barrier.
            let distortion = self.suite.pick(self.step, self.config.seed);
            let app_seed = self.suite.application_seed(self.step, self.config.seed);
            let x_tilde = distortion.apply_blocked_node(&tape, xhat, Some(x), app_seed)?;

            let ds_params = BoundParams::bind(&tape, &student.params, true);
            let z_s = student.features(&tape, &ds_params, x_tilde);
            let scores_s = tape.sigmoid(student.logits(&tape, &ds_params, z_s));
            l_msg_node = crate::losses::message_loss_node(&tape, scores_t, scores_s, target_var);

            if self.use_fa {
                let p_params = BoundParams::bind(&tape, &self.projection.params, true);
                let raw_t = self.projection.raw(&tape, &p_params, z_t);
                let raw_s = self.projection.raw(&tape, &p_params, z_s);
                let zbar_t =
                    tape.row_normalize(raw_t, F::from_f64c(crate::models::MIN_PROJECTION_NORM))?;
                let zbar_s =
                    tape.row_normalize(raw_s, F::from_f64c(crate::models::MIN_PROJECTION_NORM))?;
                let node = self.alignment.node(&tape, raw_s, raw_t, zbar_s, zbar_t)?;
                l_align_node = Some(node);
                proj_params = Some(p_params);
            }
            student_features = Some(z_s);
            dec_s_params = Some(ds_params);
        } else {
            // Student branch excised: only the teacher message term remains.
            l_msg_node = tape.mse(scores_t, target_var);
        }

        let mut terms = Vec::new();
        if let Some(a) = l_align_node {
            terms.push((a, lambda_a));
        }
        terms.push((l_msg_node, lambda_m));
        terms.push((l_quality, lambda_q));
        let total = tape.weighted_sum(&terms);

        let l_align_val = l_align_node.map(|v| tape.scalar_value(v).to_f64c()).unwrap_or(0.0);
        let breakdown = total_loss(
            l_align_val,
            tape.scalar_value(l_msg_node).to_f64c(),
            tape.scalar_value(l_quality).to_f64c(),
            if l_align_node.is_some() { self.config.loss.lambda_align } else { 0.0 },
            self.config.loss.lambda_msg,
            self.config.loss.lambda_quality,
        );

        Ok(StepGraph {
            tape,
            total,
            xhat,
            teacher_features: z_t,
            student_features,
            enc_params,
            dec_t_params,
            dec_s_params,
            proj_params,
            breakdown,
        })
    }

    /// One full training step per the schedule: forward, backward, optimizer
    /// update, momentum update (if enabled), swap (if due). The step counter
    /// advances even when the batch is skipped for a degenerate projection.
    pub fn train_step(
        &mut self,
        x: &ImageBatch<F>,
        messages: &[BitMessage],
    ) -> Result<StepOutcome> {
        self.last_phases.clear();
        let i = self.step;

        let graph = match self.build_step_graph(x, messages, true) {
            Ok(g) => g,
            Err(Error::DegenerateProjection { norm, min }) => {
                self.step = i + 1;
                self.skipped_batches += 1;
                return Ok(StepOutcome::SkippedDegenerate {
                    reason: format!("projection norm {norm} below {min}"),
                });
            }
            Err(e) => return Err(e),
        };
        self.last_phases.push("forward");

        if !graph.breakdown.is_finite() {
            return Err(Error::NumericalAbort(format!(
                "non-finite loss at step {i}: {:?}",
                graph.breakdown
            )));
        }

        let grads = graph.tape.backward(graph.total);
        self.last_phases.push("backward");

        let enc_grads = graph.enc_params.gradients(&graph.tape, &grads);
        self.adam.step(&mut self.encoder.params, &enc_grads, &mut self.opt_encoder)?;

        let ti = self.teacher_index;
        let si = 1 - ti;
        if self.config.train.teacher_gradient {
            let dec_t_grads = graph.dec_t_params.gradients(&graph.tape, &grads);
            self.adam.step(
                &mut self.decoders[ti].params,
                &dec_t_grads,
                &mut self.opt_decoders[ti],
            )?;
        }
        if let Some(ds) = &graph.dec_s_params {
            let dec_s_grads = ds.gradients(&graph.tape, &grads);
            self.adam.step(
                &mut self.decoders[si].params,
                &dec_s_grads,
                &mut self.opt_decoders[si],
            )?;
        }
        if let Some(pp) = &graph.proj_params {
            let proj_grads = pp.gradients(&graph.tape, &grads);
            self.adam.step(&mut self.projection.params, &proj_grads, &mut self.opt_projection)?;
        }
        self.last_phases.push("optimizer");

        if self.use_mu {
            let tau = F::from_f64c(self.config.train.momentum_tau);
            self.decoders[ti].params =
                momentum_update(&self.decoders[ti].params, &self.decoders[si].params, tau)?;
            self.last_phases.push("momentum");
        }

        if self.use_sl {
            self.maybe_swap(i, self.config.train.swap_interval);
        }

        // Divergence canary: a blown-up update is a numerical abort, caught
        // here while the previous checkpoint is still representative.
        if !(self.encoder.params.all_finite()
            && self.decoders[0].params.all_finite()
            && self.decoders[1].params.all_finite()
            && self.projection.params.all_finite())
        {
            return Err(Error::NumericalAbort(format!(
                "non-finite parameters after step {i}"
            )));
        }

        self.step = i + 1;
        Ok(StepOutcome::Applied(graph.breakdown))
    }

    /// Swap the teacher/student roles when `(i + 1) mod k == 0`. Returns
    /// whether a swap fired.
    pub fn maybe_swap(&mut self, step_index: u64, k: u64) -> bool {
        if k == 0 || (step_index + 1) % k != 0 {
            return false;
        }
        self.teacher_index = 1 - self.teacher_index;
        self.decoders[self.teacher_index].role = Role::Teacher;
        self.decoders[1 - self.teacher_index].role = Role::Student;
        self.last_phases.push("swap");
        true
    }

    pub fn to_checkpoint(&self) -> Checkpoint<F> {
        Checkpoint::new(
            self.config.clone(),
            self.step,
            &self.encoder,
            &self.decoders,
            self.teacher_index,
            &self.projection,
        )
    }
}

/// Events surfaced to the caller during a training run.
pub enum TrainEvent<'a, F: Scalar> {
    Step { step: u64, loss: &'a LossBreakdown },
    SkippedBatch { step: u64, reason: &'a str },
    Eval { eval: &'a HoldoutEval },
    /// Periodic or diagnostic checkpoint (the final one is returned).
    Checkpoint { step: u64, checkpoint: &'a Checkpoint<F>, diagnostic: bool },
    /// Baseline stage boundary (two-stage training).
    StageBoundary { step: u64, checkpoint: &'a Checkpoint<F> },
}

/// Held-out metrics snapshot taken during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldoutEval {
    pub step: u64,
    pub clean_acc: f64,
    /// PSNR between cover and watermarked; `None` means identical images.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    /// Mean extraction accuracy under each suite distortion.
    pub per_distortion: Vec<(String, f64)>,
}

/// Run the configured strategy end to end. Deterministic for a fixed
/// config and seed.
pub fn train_loop<F: Scalar>(
    config: &RunConfig,
    dataset: &Dataset<F>,
    observer: &mut dyn FnMut(TrainEvent<'_, F>),
) -> Result<Checkpoint<F>> {
    config.validate()?;
    validate_strategy(config)?;
    match config.strategy.variant()? {
        StrategyVariant::End2 { .. } => end2_loop(config, dataset, observer),
        StrategyVariant::VanillaEnd | StrategyVariant::ForwardAsl => {
            baselines::single_decoder_loop(config, dataset, observer)
        }
        StrategyVariant::Tdsl { .. } => baselines::tdsl_loop(config, dataset, observer),
    }
}

/// Strategy/suite compatibility: the single-decoder differentiable baseline
/// cannot train through codec or black-box distortions.
pub fn validate_strategy(config: &RunConfig) -> Result<()> {
    let variant = config.strategy.variant()?;
    if matches!(variant, StrategyVariant::VanillaEnd) {
        let suite = DistortionSuite::from_config(&config.distortions)?;
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
    Ok(())
}

fn end2_loop<F: Scalar>(
    config: &RunConfig,
    dataset: &Dataset<F>,
    observer: &mut dyn FnMut(TrainEvent<'_, F>),
) -> Result<Checkpoint<F>> {
    let mut state = TrainerState::<F>::new(config)?;
    let hw = config.image_hw();
    let batch = config.train.batch_size;
    let n = config.model.message_length;

    for step in 0..config.train.steps {
        let x = dataset.train_batch(batch, hw, config.seed, step)?;
        let msgs = batch_messages(config.seed, step, batch, n);
        match state.train_step(&x, &msgs) {
            Ok(StepOutcome::Applied(loss)) => {
                observer(TrainEvent::Step { step, loss: &loss });
            }
            Ok(StepOutcome::SkippedDegenerate { reason }) => {
                observer(TrainEvent::SkippedBatch { step, reason: &reason });
            }
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
    Ok(state.to_checkpoint())
}

/// Embed-distort-extract over the holdout with the exported decoder.
pub fn evaluate_holdout<F: Scalar>(
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    step: u64,
) -> Result<HoldoutEval> {
    let config = &checkpoint.config;
    let hw = config.image_hw();
    let count = config.data.holdout.max(1).min(64);
    let x = dataset.holdout_batch(count, hw, config.seed)?;
    let b = x.batch_size();
    let msgs: Vec<BitMessage> = (0..b)
        .map(|i| {
            make_message(derive_seed(config.seed, "holdout_message", i as u64), config.model.message_length)
                .expect("valid n")
        })
        .collect();

    let encoder = checkpoint.encoder_model();
    let extractor = checkpoint.extraction_decoder()?;
    let xhat = encode_batch(&encoder, &x, &msgs)?;

    let psnr_db = match crate::evaluation::psnr(&x, &xhat)? {
        crate::evaluation::PsnrValue::Identical => None,
        crate::evaluation::PsnrValue::Db(v) => Some(v),
    };
    let ssim = crate::evaluation::ssim(&x, &xhat)?;

    let clean_scores = crate::models::extract_features(&extractor, &xhat)
        .and_then(|z| crate::models::predict_message(&extractor, &z))?;
    let clean_acc = crate::evaluation::mean_bit_accuracy(&clean_scores, &msgs)?;

    let suite = DistortionSuite::from_config(&config.distortions)?;
    let mut per_distortion = Vec::new();
    for (di, d) in suite.entries().enumerate() {
        let seed = derive_seed(config.seed, "holdout_distortion", di as u64);
        let x_tilde = d.apply(&xhat, Some(&x), seed)?;
        let scores = crate::models::extract_features(&extractor, &x_tilde)
            .and_then(|z| crate::models::predict_message(&extractor, &z))?;
        let acc = crate::evaluation::mean_bit_accuracy(&scores, &msgs)?;
        per_distortion.push((d.name(), acc));
    }

    Ok(HoldoutEval { step, clean_acc, psnr_db, ssim, per_distortion })
}

/// Encode with one message per batch element.
pub fn encode_batch<F: Scalar>(
    encoder: &EncoderModel<F>,
    x: &ImageBatch<F>,
    messages: &[BitMessage],
) -> Result<ImageBatch<F>> {
    if messages.len() != x.batch_size() {
        return Err(Error::Shape("one message per batch element required".into()));
    }
    if messages.iter().any(|m| m.len() != encoder.config.message_length) {
        return Err(Error::InvalidConfig("message length mismatch".into()));
    }
    let tape = Tape::<F>::new();
    let p = BoundParams::bind(&tape, &encoder.params, false);
    let xv = tape.constant(x.data().clone().into_dyn());
    let mv = tape.constant(messages_to_array::<F>(messages).into_dyn());
    let out = encoder.forward(&tape, &p, xv, mv);
    ImageBatch::from_dyn(tape.value(out).as_ref().clone())
}

//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. The desk-scale trained model is built once and
//! shared by every test that needs it.

use std::sync::OnceLock;
use std::time::Instant;

use duomark_cli::{cmd_train, TrainArgs};
use duomark_core::autodiff::Tape;
use duomark_core::config::{combined_suite, DistortionSpec, RunConfig, StrategyVariant};
use duomark_core::data::Dataset;
use duomark_core::distortions::{Distortion, DistortionSuite, SuiteMode};
use duomark_core::error::Error;
use duomark_core::evaluation::{self, mean_bit_accuracy, psnr, ssim, PsnrValue};
use duomark_core::image::ImageBatch;
use duomark_core::losses;
use duomark_core::message::{make_message, BitMessage};
use duomark_core::models::{init_models, BoundParams, Checkpoint};
use duomark_core::params::ParameterSet;
use duomark_core::rng::{derive_seed, seeded_rng};
use duomark_core::training::{
    self, batch_messages, encode_batch, momentum_update, train_loop, TrainerState,
};
use ndarray::Array2;
use rand::Rng;

const FIXTURE_STEPS: u64 = 6000;
const FIXTURE_SEED: u64 = 7;

/// The acceptance training protocol: desk scale, gradient-blocked suite
/// {identity, gaussian_noise(0.01), jpeg_real(50)}, >= 2000 steps. The loss
/// balance leans harder on quality than the paper-scale default because the
/// eight-bit payload leaves large accuracy margin at this scale.
fn fixture_config() -> RunConfig {
    let mut c = RunConfig::preset("desk").unwrap();
    c.seed = FIXTURE_SEED;
    c.train.steps = FIXTURE_STEPS;
    c.train.eval_interval = 0;
    c.train.learning_rate = 5e-4;
    c.loss.lambda_quality = 15.0;
    c
}

struct DeskFixture {
    config: RunConfig,
    dataset: Dataset<f32>,
    checkpoint: Checkpoint<f32>,
    train_seconds: f64,
}

static FIXTURE: OnceLock<DeskFixture> = OnceLock::new();

fn fixture() -> &'static DeskFixture {
    FIXTURE.get_or_init(|| {
        let config = fixture_config();
        let dataset = Dataset::<f32>::load(&config.data, config.image_hw(), config.seed)
            .expect("fixture dataset");
        let start = Instant::now();
        let checkpoint =
            train_loop::<f32>(&config, &dataset, &mut |_| {}).expect("fixture training");
        DeskFixture { config, dataset, checkpoint, train_seconds: start.elapsed().as_secs_f64() }
    })
}

/// Mean accuracy on fresh held-out covers under one distortion.
fn holdout_acc(
    fx: &DeskFixture,
    distortion: &Distortion,
    samples: usize,
    seed: u64,
) -> (f64, ImageBatch<f32>, ImageBatch<f32>) {
    let config = &fx.checkpoint.config;
    let x = fx.dataset.holdout_batch(samples, config.image_hw(), config.seed).unwrap();
    let msgs: Vec<BitMessage> = (0..x.batch_size())
        .map(|i| {
            make_message(derive_seed(seed, "acc_msg", i as u64), config.model.message_length)
                .unwrap()
        })
        .collect();
    let encoder = fx.checkpoint.encoder_model();
    let xhat = encode_batch(&encoder, &x, &msgs).unwrap();
    let xt = distortion.apply(&xhat, Some(&x), derive_seed(seed, "acc_dist", 0)).unwrap();
    let dec = fx.checkpoint.extraction_decoder().unwrap();
    let scores = duomark_core::models::extract_features(&dec, &xt)
        .and_then(|z| duomark_core::models::predict_message(&dec, &z))
        .unwrap();
    (mean_bit_accuracy(&scores, &msgs).unwrap(), x, xhat)
}

fn random_unit_rows(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded_rng(seed);
    let mut arr = Array2::<f64>::zeros((rows, dim));
    for mut row in arr.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-3 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
                break;
            }
        }
    }
    arr
}

#[test]
fn criterion_01_cosine_identity_on_the_hypersphere() {
    let start = Instant::now();
    let dim = 256;
    let mut max_dev = 0.0f64;
    for i in 0..1000u64 {
        let a = random_unit_rows(1, dim, 1000 + i);
        let b = random_unit_rows(1, dim, 5000 + i);
        let cos_form = losses::feature_alignment_value(&a, &b).unwrap();
        let sq_dist: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        max_dev = max_dev.max((cos_form - sq_dist).abs());
    }
    let elapsed = start.elapsed();
    assert!(max_dev < 1e-6, "max |2-2cos - ||a-b||^2| = {max_dev}");
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 1 eq7-identity: PASS (max deviation {max_dev:.2e} over 1000 pairs in {elapsed:?})"
    );
}

#[test]
fn criterion_02_gradient_barrier_routing() {
    let start = Instant::now();
    // Desk-size model in f64 for tight tolerances.
    let mut config = fixture_config();
    config.train.batch_size = 8;
    let mut state = TrainerState::<f64>::new(&config).unwrap();
    let dataset = Dataset::<f64>::load(&config.data, config.image_hw(), config.seed).unwrap();
    let x = dataset.train_batch(8, config.image_hw(), config.seed, 0).unwrap();
    let msgs = batch_messages(config.seed, 0, 8, config.model.message_length);

    let full = state.build_step_graph(&x, &msgs, true).unwrap();
    let full_grads = full.tape.backward(full.total);
    let enc_full = full.enc_params.gradients(&full.tape, &full_grads);

    let excised = state.build_step_graph(&x, &msgs, false).unwrap();
    let excised_grads = excised.tape.backward(excised.total);
    let enc_excised = excised.enc_params.gradients(&excised.tape, &excised_grads);

    let mut max_rel = 0.0f64;
    for (name, a) in enc_full.iter() {
        let b = enc_excised.get(name).unwrap();
        for (&av, &bv) in a.iter().zip(b.iter()) {
            max_rel = max_rel.max((av - bv).abs() / (1.0 + bv.abs()));
        }
    }
    assert!(max_rel < 1e-6, "encoder gradient deviates: {max_rel}");

    // Teacher-side features receive exactly zero gradient from the
    // alignment loss (the stop-gradient of its definition).
    let tape = Tape::<f64>::new();
    let (_, _, proj) = init_models::<f64>(&config, 3);
    let p = BoundParams::bind(&tape, &proj.params, false);
    let z_t = tape.leaf(
        Array2::from_shape_fn((4, config.model.latent_dim), |(i, j)| {
            ((i * 31 + j * 7) % 13) as f64 / 13.0 - 0.4
        })
        .into_dyn(),
        true,
    );
    let z_s = tape.leaf(
        Array2::from_shape_fn((4, config.model.latent_dim), |(i, j)| {
            ((i * 17 + j * 11) % 19) as f64 / 19.0 - 0.6
        })
        .into_dyn(),
        true,
    );
    let zbar_t = proj.project(&tape, &p, z_t).unwrap();
    let zbar_s = proj.project(&tape, &p, z_s).unwrap();
    let align = losses::feature_alignment_node(&tape, zbar_s, zbar_t).unwrap();
    let grads = tape.backward(align);
    assert!(grads.get(z_s).is_some(), "student side must receive gradient");
    assert!(grads.get(z_t).is_none(), "teacher side gradient must be exactly zero");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 2 gradient-barrier: PASS (max rel deviation {max_rel:.2e}; teacher-side grad exactly zero; {elapsed:?})"
    );
}

#[test]
fn criterion_03_momentum_update_exactness() {
    let config = fixture_config();
    let (_, decoders, _) = init_models::<f64>(&config, 42);
    let teacher = &decoders[0].params;
    let student = &decoders[1].params;
    for tau in [0.0f64, 0.5, 0.999, 1.0] {
        let updated = momentum_update(teacher, student, tau).unwrap();
        // Independent elementwise recomputation.
        for (name, got) in updated.iter() {
            let t = teacher.get(name).unwrap();
            let s = student.get(name).unwrap();
            for ((&g, &tv), &sv) in got.iter().zip(t.iter()).zip(s.iter()) {
                let expect = if tau == 1.0 {
                    tv
                } else if tau == 0.0 {
                    sv
                } else {
                    tau * tv + (1.0 - tau) * sv
                };
                assert_eq!(g, expect, "tau={tau} {name}");
            }
        }
    }
    // Endpoints are bit-exact whole-set copies.
    assert_eq!(&momentum_update(teacher, student, 1.0).unwrap(), teacher);
    assert_eq!(&momentum_update(teacher, student, 0.0).unwrap(), student);
    println!("ACCEPTANCE 3 momentum-exactness: PASS (tau in {{0, 0.5, 0.999, 1}}, element-wise exact)");
}

#[test]
fn criterion_04_swap_schedule_and_conservation() {
    let mut config = fixture_config();
    config.model.image_size = [16, 16];
    config.model.enc_channels = 4;
    config.model.enc_blocks = 1;
    config.model.dec_channels = 4;
    config.model.dec_blocks = 2;
    config.model.latent_dim = 8;
    config.model.projection_dim = 8;
    config.model.message_length = 4;
    config.train.batch_size = 2;
    config.train.swap_interval = 3;
    config.data.synthetic_size = 8;
    config.data.holdout = 2;
    let mut state = TrainerState::<f64>::new(&config).unwrap();
    let dataset = Dataset::<f64>::load(&config.data, config.image_hw(), config.seed).unwrap();

    let mut swaps = Vec::new();
    for step in 0..6u64 {
        let x = dataset.train_batch(2, config.image_hw(), config.seed, step).unwrap();
        let msgs = batch_messages(config.seed, step, 2, 4);
        state.train_step(&x, &msgs).unwrap();
        if state.last_phases.contains(&"swap") {
            swaps.push(step);
        }
    }
    assert_eq!(swaps, vec![2, 5], "swaps must fire after steps 2 and 5");

    // Conservation: swapping exchanges roles, leaving the union of
    // parameter values untouched.
    let union_before = {
        let mut v = state.decoders[0].params.sorted_values();
        v.extend(state.decoders[1].params.sorted_values());
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };
    let ti = state.teacher_index;
    let (d0, d1) = (state.decoders[0].params.clone(), state.decoders[1].params.clone());
    assert!(state.maybe_swap(8, 3));
    let union_after = {
        let mut v = state.decoders[0].params.sorted_values();
        v.extend(state.decoders[1].params.sorted_values());
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };
    assert_eq!(union_before, union_after, "value multiset must be conserved");
    assert_eq!(state.decoders[0].params, d0);
    assert_eq!(state.decoders[1].params, d1);
    assert_eq!(state.teacher_index, 1 - ti);
    assert!(state.maybe_swap(11, 3));
    assert_eq!(state.teacher_index, ti, "double swap is the identity");
    println!("ACCEPTANCE 4 swap-correctness: PASS (k=3 fires after steps 2 and 5; multiset conserved; double swap = identity)");
}

#[test]
fn criterion_05_desk_scale_training_reaches_thresholds() {
    let fx = fixture();
    let (clean_acc, x, xhat) = holdout_acc(fx, &Distortion::identity(), 32, 501);
    let (gauss_acc, _, _) = holdout_acc(
        fx,
        &Distortion::gaussian_noise(0.01).unwrap(),
        32,
        502,
    );
    let psnr_db = match psnr(&x, &xhat).unwrap() {
        PsnrValue::Identical => f64::INFINITY,
        PsnrValue::Db(v) => v,
    };
    assert!(clean_acc >= 0.95, "clean acc {clean_acc}");
    assert!(gauss_acc >= 0.90, "gaussian-noise acc {gauss_acc}");
    assert!(psnr_db >= 30.0, "psnr {psnr_db}");
    assert!(fx.train_seconds <= 6.0 * 3600.0, "training took {}s", fx.train_seconds);
    println!(
        "ACCEPTANCE 5 desk-training: PASS (clean acc {clean_acc:.4}, gaussian acc {gauss_acc:.4}, psnr {psnr_db:.2} dB, {} steps in {:.0}s)",
        fx.checkpoint.step, fx.train_seconds
    );
}

const DIRECTIONAL_SEEDS: [u64; 3] = [11, 12, 13];
/// Both arms of each directional comparison are evaluated at matched
/// embedding quality (the published protocol fixes PSNR by adjusting the
/// embedding strength); this is the common target.
const MATCHED_PSNR_DB: f64 = 33.0;

fn directional_config(seed: u64, steps: u64, entries: Vec<DistortionSpec>) -> RunConfig {
    let mut c = fixture_config();
    c.seed = seed;
    c.train.steps = steps;
    c.distortions.entries = entries;
    c
}

fn train_checkpoint(config: &RunConfig) -> Checkpoint<f32> {
    let dataset =
        Dataset::<f32>::load(&config.data, config.image_hw(), config.seed).unwrap();
    train_loop::<f32>(config, &dataset, &mut |_| {}).unwrap()
}

/// Rescale the checkpoint's residual so its embedding PSNR matches the
/// common target, then return it with the calibrated strength applied.
fn at_matched_quality(ckpt: &Checkpoint<f32>) -> Checkpoint<f32> {
    let dataset =
        Dataset::<f32>::load(&ckpt.config.data, ckpt.config.image_hw(), ckpt.config.seed)
            .unwrap();
    let opts = evaluation::BenchOptions { samples: 32, seed: 777, batch: 16 };
    let s = evaluation::calibrate_strength(ckpt, &dataset, MATCHED_PSNR_DB, opts).unwrap();
    evaluation::at_strength(ckpt, s)
}

fn acc_under(ckpt: &Checkpoint<f32>, d: &Distortion, samples: usize, seed: u64) -> f64 {
    let config = &ckpt.config;
    let dataset = Dataset::<f32>::load(&config.data, config.image_hw(), config.seed).unwrap();
    let x = dataset.holdout_batch(samples, config.image_hw(), config.seed).unwrap();
    let msgs: Vec<BitMessage> = (0..x.batch_size())
        .map(|i| {
            make_message(derive_seed(seed, "dir_msg", i as u64), config.model.message_length)
                .unwrap()
        })
        .collect();
    let encoder = ckpt.encoder_model();
    let xhat = encode_batch(&encoder, &x, &msgs).unwrap();
    let xt = d.apply(&xhat, Some(&x), derive_seed(seed, "dir_dist", 0)).unwrap();
    let dec = ckpt.extraction_decoder().unwrap();
    let scores = duomark_core::models::extract_features(&dec, &xt)
        .and_then(|z| duomark_core::models::predict_message(&dec, &z))
        .unwrap();
    mean_bit_accuracy(&scores, &msgs).unwrap()
}

#[test]
fn criterion_06_real_jpeg_training_advantage() {
    let steps = 4000;
    let jpeg50 = Distortion::jpeg_real(50).unwrap();
    let mut gaps = Vec::new();
    for &seed in &DIRECTIONAL_SEEDS {
        let jpeg_model = train_checkpoint(&directional_config(
            seed,
            steps,
            vec![DistortionSpec::named("jpeg_real", &[("quality", 50.0)])],
        ));
        let clean_model = train_checkpoint(&directional_config(
            seed,
            steps,
            vec![DistortionSpec::named("identity", &[])],
        ));
        let a = acc_under(&at_matched_quality(&jpeg_model), &jpeg50, 32, 601);
        let b = acc_under(&at_matched_quality(&clean_model), &jpeg50, 32, 601);
        gaps.push((seed, a, b, a - b));
    }
    let mean_gap = gaps.iter().map(|(_, _, _, g)| g).sum::<f64>() / gaps.len() as f64;
    assert!(
        mean_gap >= 0.15,
        "mean accuracy gap {mean_gap:.4} ( per-seed: {gaps:?} )"
    );
    println!(
        "ACCEPTANCE 6 real-jpeg-advantage: PASS (mean gap {:.1} points at {MATCHED_PSNR_DB} dB; per-seed {:?})",
        mean_gap * 100.0,
        gaps.iter().map(|(s, a, b, g)| format!("seed {s}: {a:.3} vs {b:.3} (+{g:.3})")).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_07_ablation_ordering_under_combined_suite() {
    let steps = 6000;
    let mut gaps = Vec::new();
    for &seed in &DIRECTIONAL_SEEDS {
        let full_cfg = directional_config(seed, steps, combined_suite());
        let mut none_cfg = full_cfg.clone();
        none_cfg.strategy =
            duomark_core::config::StrategyConfig::from_variant(StrategyVariant::end2_none());

        let full_model = at_matched_quality(&train_checkpoint(&full_cfg));
        let none_model = at_matched_quality(&train_checkpoint(&none_cfg));

        let mut full_acc = 0.0;
        let mut none_acc = 0.0;
        let specs = combined_suite();
        for spec in &specs {
            let d = Distortion::from_spec(spec).unwrap();
            full_acc += acc_under(&full_model, &d, 32, 701);
            none_acc += acc_under(&none_model, &d, 32, 701);
        }
        full_acc /= specs.len() as f64;
        none_acc /= specs.len() as f64;
        gaps.push((seed, full_acc, none_acc, full_acc - none_acc));
    }
    let mean_gap = gaps.iter().map(|(_, _, _, g)| g).sum::<f64>() / gaps.len() as f64;
    assert!(
        mean_gap >= 0.05,
        "mean accuracy gap {mean_gap:.4} ( per-seed: {gaps:?} )"
    );
    println!(
        "ACCEPTANCE 7 ablation-ordering: PASS (fa+mu+sl beats none by {:.1} points mean at {MATCHED_PSNR_DB} dB; per-seed {:?})",
        mean_gap * 100.0,
        gaps.iter().map(|(s, a, b, g)| format!("seed {s}: {a:.3} vs {b:.3} (+{g:.3})")).collect::<Vec<_>>()
    );
}

/// Direct windowed SSIM, the independent oracle: explicit 11x11 Gaussian
/// window, no separable filtering, recomputed per window position.
fn ssim_reference(a: &ImageBatch<f32>, b: &ImageBatch<f32>) -> f64 {
    let (h, w) = a.spatial();
    let size = 11usize;
    let sigma = 1.5f64;
    let half = (size as f64 - 1.0) / 2.0;
    let mut window = vec![0.0f64; size * size];
    let mut total = 0.0;
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - half;
            let dx = j as f64 - half;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            window[i * size + j] = v;
            total += v;
        }
    }
    for v in &mut window {
        *v /= total;
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);

    let mut acc = 0.0;
    let mut count = 0usize;
    for bi in 0..a.batch_size() {
        for c in 0..3 {
            for y0 in 0..=(h - size) {
                for x0 in 0..=(w - size) {
                    let (mut ma, mut mb) = (0.0f64, 0.0f64);
                    for i in 0..size {
                        for j in 0..size {
                            let wgt = window[i * size + j];
                            ma += wgt * f64::from(a.data()[(bi, c, y0 + i, x0 + j)]);
                            mb += wgt * f64::from(b.data()[(bi, c, y0 + i, x0 + j)]);
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0f64, 0.0, 0.0);
                    for i in 0..size {
                        for j in 0..size {
                            let wgt = window[i * size + j];
                            let da = f64::from(a.data()[(bi, c, y0 + i, x0 + j)]) - ma;
                            let db = f64::from(b.data()[(bi, c, y0 + i, x0 + j)]) - mb;
                            va += wgt * da * da;
                            vb += wgt * db * db;
                            cov += wgt * da * db;
                        }
                    }
                    acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    acc / count as f64
}

#[test]
fn criterion_08_metric_oracles() {
    // PSNR: constant 0.1 offset is exactly 20 dB.
    let a = ImageBatch::<f64>::splat(1, 32, 32, 0.4).unwrap();
    let b = ImageBatch::<f64>::splat(1, 32, 32, 0.5).unwrap();
    let v = psnr(&a, &b).unwrap().db().unwrap();
    assert!((v - 20.0).abs() <= 0.01, "psnr {v}");

    // SSIM of identical images is exactly 1.
    let img = synthetic_batch(2, 9);
    let s = ssim(&img, &img).unwrap();
    assert_eq!(s, 1.0, "ssim(a,a) = {s}");

    // Chance level over 10^4 random bits.
    let mut rng = seeded_rng(4242);
    let mut total_hits = 0usize;
    let n_bits = 10_000usize;
    for i in 0..(n_bits / 10) {
        let m = make_message(90_000 + i as u64, 10).unwrap();
        let scores: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
        total_hits += scores
            .iter()
            .zip(m.bits())
            .filter(|(&s, &b)| u8::from(s > 0.5) == b)
            .count();
    }
    let chance = total_hits as f64 / n_bits as f64;
    assert!((chance - 0.5).abs() <= 0.01, "chance level {chance}");

    // SSIM matches the independent direct-window implementation on 10 pairs.
    let mut max_ssim_dev = 0.0f64;
    for i in 0..10u64 {
        let x = synthetic_batch(1, 100 + i);
        let y = match i % 3 {
            0 => Distortion::gaussian_noise(0.05).unwrap().apply(&x, None, i).unwrap(),
            1 => Distortion::jpeg_real(40).unwrap().apply(&x, None, i).unwrap(),
            _ => Distortion::from_spec(&DistortionSpec::named("gaussian_filter", &[("sigma", 1.0)]))
                .unwrap()
                .apply(&x, None, i)
                .unwrap(),
        };
        let fast = ssim(&x, &y).unwrap();
        let reference = ssim_reference(&x, &y);
        max_ssim_dev = max_ssim_dev.max((fast - reference).abs());
    }
    assert!(max_ssim_dev < 1e-4, "ssim deviation {max_ssim_dev}");

    println!(
        "ACCEPTANCE 8 metric-oracles: PASS (psnr offset {v:.4} dB, ssim(a,a)=1, chance {chance:.4}, ssim cross-check dev {max_ssim_dev:.2e})"
    );
}

fn synthetic_batch(batch: usize, seed: u64) -> ImageBatch<f32> {
    let mut data = ndarray::Array4::<f32>::zeros((batch, 3, 32, 32));
    for bi in 0..batch {
        let img = duomark_core::data::synthetic_image::<f32>(32, 32, seed, bi as u64);
        data.index_axis_mut(ndarray::Axis(0), bi).assign(&img);
    }
    ImageBatch::new(data).unwrap()
}

#[test]
fn criterion_09_baseline_contracts() {
    // TDSL: stage two leaves the encoder bit-identical.
    let mut tdsl_cfg = RunConfig::preset("desk").unwrap();
    tdsl_cfg.model.image_size = [16, 16];
    tdsl_cfg.model.message_length = 4;
    tdsl_cfg.model.latent_dim = 8;
    tdsl_cfg.model.projection_dim = 8;
    tdsl_cfg.model.enc_channels = 4;
    tdsl_cfg.model.enc_blocks = 1;
    tdsl_cfg.model.dec_channels = 4;
    tdsl_cfg.model.dec_blocks = 2;
    tdsl_cfg.train.batch_size = 2;
    tdsl_cfg.train.steps = 6;
    tdsl_cfg.train.eval_interval = 0;
    tdsl_cfg.data.synthetic_size = 8;
    tdsl_cfg.data.holdout = 2;
    tdsl_cfg.strategy = duomark_core::config::StrategyConfig::from_variant(
        StrategyVariant::Tdsl { stage1_fraction: 0.5 },
    );
    tdsl_cfg.distortions.entries =
        vec![DistortionSpec::named("jpeg_real", &[("quality", 50.0)])];
    let dataset =
        Dataset::<f32>::load(&tdsl_cfg.data, tdsl_cfg.image_hw(), tdsl_cfg.seed).unwrap();
    let mut boundary: Option<ParameterSet<f32>> = None;
    let final_ckpt = train_loop::<f32>(&tdsl_cfg, &dataset, &mut |e| {
        if let training::TrainEvent::StageBoundary { checkpoint, .. } = e {
            boundary = Some(checkpoint.encoder.clone());
        }
    })
    .unwrap();
    assert_eq!(final_ckpt.encoder, boundary.expect("stage boundary"), "encoder must stay frozen");

    // Forward ASL: the decoder's forward input IS the distorted image.
    let mut asl_cfg = tdsl_cfg.clone();
    asl_cfg.strategy =
        duomark_core::config::StrategyConfig::from_variant(StrategyVariant::ForwardAsl);
    let (enc, decs, _) = init_models::<f32>(&asl_cfg, asl_cfg.seed);
    let x = dataset.train_batch(2, asl_cfg.image_hw(), asl_cfg.seed, 0).unwrap();
    let msgs = batch_messages(asl_cfg.seed, 0, 2, 4);
    let tape = Tape::<f32>::new();
    let enc_p = BoundParams::bind(&tape, &enc.params, true);
    let dec_p = BoundParams::bind(&tape, &decs[0].params, true);
    let xv = tape.constant(x.data().clone().into_dyn());
    let msg_arr = {
        let mut arr = Array2::<f32>::zeros((2, 4));
        for (bi, m) in msgs.iter().enumerate() {
            for (ni, &v) in m.as_scalars::<f32>().iter().enumerate() {
                arr[(bi, ni)] = v;
            }
        }
        arr
    };
    let mv = tape.constant(msg_arr.into_dyn());
    let xhat = enc.forward(&tape, &enc_p, xv, mv);
    let xhat_value = ImageBatch::from_dyn(tape.value(xhat).as_ref().clone()).unwrap();
    let d = Distortion::jpeg_real(50).unwrap();
    let distorted = d.apply(&xhat_value, Some(&x), 77).unwrap();
    let bypass = tape.bypass(xhat, distorted.data().clone().into_dyn());
    let graph_scores = decs[0].decode(&tape, &dec_p, bypass);
    let graph_out = tape.value(graph_scores);
    let student_scores = duomark_core::models::extract_features(&decs[0], &distorted)
        .and_then(|z| duomark_core::models::predict_message(&decs[0], &z))
        .unwrap();
    for (a, b) in graph_out.iter().zip(student_scores.iter()) {
        assert_eq!(a, b, "forward outputs must match bit-for-bit");
    }

    // Vanilla END rejects gradient-blocked-only distortions at config time.
    let mut vanilla_cfg = tdsl_cfg.clone();
    vanilla_cfg.strategy =
        duomark_core::config::StrategyConfig::from_variant(StrategyVariant::VanillaEnd);
    match train_loop::<f32>(&vanilla_cfg, &dataset, &mut |_| {}) {
        Err(Error::InvalidConfig(msg)) => assert!(msg.contains("jpeg_real"), "{msg}"),
        other => panic!("expected config rejection, got {other:?}"),
    }

    println!("ACCEPTANCE 9 baseline-contracts: PASS (tdsl encoder frozen; forward-asl forward equality; vanilla+jpeg rejected)");
}

#[test]
fn criterion_10_cmd_train_is_bit_reproducible() {
    let dir = std::env::temp_dir().join(format!("duomark-acc10-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config_path = dir.join("repro.toml");
    std::fs::write(
        &config_path,
        "seed = 21\n[train]\nsteps = 40\neval_interval = 0\n[data]\nsynthetic_size = 32\nholdout = 4\n",
    )
    .unwrap();
    let run = |name: &str| {
        cmd_train(&TrainArgs {
            config: Some(config_path.clone()),
            preset: "desk".into(),
            seed: None,
            deterministic: true,
            out: dir.join(name),
        })
        .unwrap()
    };
    let a = run("a");
    let b = run("b");
    let bytes_a = std::fs::read(&a.final_checkpoint).unwrap();
    let bytes_b = std::fs::read(&b.final_checkpoint).unwrap();
    assert_eq!(bytes_a, bytes_b, "checkpoints must be bit-identical");
    println!(
        "ACCEPTANCE 10 determinism: PASS (two runs, {} identical checkpoint bytes)",
        bytes_a.len()
    );
    std::fs::remove_dir_all(&dir).ok();
}

// ---- Trained-model example checks (share the desk fixture) ----

#[test]
fn trained_fixture_examples() {
    let fx = fixture();

    // Clean extraction recovers at least 99% of bits.
    let (clean_acc, x, xhat) = holdout_acc(fx, &Distortion::identity(), 32, 801);
    assert!(clean_acc >= 0.99, "clean acc {clean_acc}");

    // Identity benchmark row reports the identical-distortion sentinel.
    let suite = DistortionSuite::new(vec![(Distortion::identity(), 1.0)], SuiteMode::Fixed)
        .unwrap();
    let report = evaluation::run_benchmark(
        &fx.checkpoint,
        &fx.dataset,
        &suite,
        evaluation::BenchOptions { samples: 16, seed: 31, batch: 16 },
    )
    .unwrap();
    assert!(report.rows[0].acc >= 0.99, "identity row acc {}", report.rows[0].acc);
    assert_eq!(report.rows[0].distortion_psnr, None, "identity leaves pixels untouched");

    // Extraction scores on never-watermarked covers hover near one half.
    let covers = fx.dataset.holdout_batch(32, fx.config.image_hw(), 8_881).unwrap();
    let dec = fx.checkpoint.extraction_decoder().unwrap();
    let scores = duomark_core::models::extract_features(&dec, &covers)
        .and_then(|z| duomark_core::models::predict_message(&dec, &z))
        .unwrap();
    let mean_score: f64 =
        scores.iter().map(|&v| f64::from(v)).sum::<f64>() / scores.len() as f64;
    assert!(
        (mean_score - 0.5).abs() < 0.2,
        "no-payload mean score {mean_score} strays far from chance"
    );

    // Real-JPEG sweep: accuracy must not increase as quality drops
    // (2-point slack), and q=100 is at least as good as the training q=50.
    let qs = [100i64, 50, 40, 30, 20, 10];
    let (sweep, _) = evaluation::run_jpeg_sweep(
        &fx.checkpoint,
        &fx.dataset,
        &qs,
        evaluation::BenchOptions { samples: 32, seed: 33, batch: 16 },
    )
    .unwrap();
    let accs: Vec<f64> = sweep.rows.iter().map(|r| r.acc).collect();
    for w in accs.windows(2) {
        assert!(w[1] <= w[0] + 0.02, "sweep not non-increasing: {accs:?}");
    }
    assert!(accs[0] + 0.02 >= accs[1], "q=100 acc {} vs q=50 acc {}", accs[0], accs[1]);

    let _ = (x, xhat);
    println!(
        "trained-model examples: PASS (clean {clean_acc:.4}, no-payload mean {mean_score:.3}, sweep {:?})",
        accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>()
    );
}

#[test]
fn embed_extract_round_trip_via_cli() {
    let fx = fixture();
    let dir = std::env::temp_dir().join(format!("duomark-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let ckpt_path = dir.join("fixture.ckpt");
    fx.checkpoint.save(&ckpt_path).unwrap();

    // Save one holdout cover as an 8-bit file.
    let covers = fx.dataset.holdout_batch(1, fx.config.image_hw(), 7_771).unwrap();
    let cover_path = dir.join("cover.png");
    duomark_cli::save_image_file(&covers, 0, &cover_path).unwrap();

    let message = "10110010";
    let wm_path = dir.join("wm.png");
    let embed = duomark_cli::cmd_embed(&duomark_cli::EmbedArgs {
        checkpoint: ckpt_path.clone(),
        image: cover_path,
        out: wm_path.clone(),
        message: Some(message.into()),
        message_seed: 0,
    })
    .unwrap();
    assert!(embed.psnr_db.unwrap() >= 25.0, "file-level psnr {:?}", embed.psnr_db);

    let extract = duomark_cli::cmd_extract(&duomark_cli::ExtractArgs {
        checkpoint: ckpt_path,
        image: wm_path,
    })
    .unwrap();
    assert_eq!(
        extract.bits.to_bit_string(),
        message,
        "round trip through 8-bit files must recover the payload"
    );
    println!("cli round trip: PASS (message {message} recovered, psnr {:?})", embed.psnr_db);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn external_command_matches_internal_codec() {
    let fx = fixture();
    // The external hook drives this binary's own `distort` subcommand — a
    // genuine image-file-to-image-file program — through a wrapper script
    // that adapts it to the `{in}` / `{out}` placeholder contract.
    let exe = env!("CARGO_BIN_EXE_duomark");
    let dir = std::env::temp_dir().join(format!("duomark-ext-cross-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let script = dir.join("jpeg50.sh");
    std::fs::write(
        &script,
        format!(
            "#!/bin/sh\nset -e\nd=$(mktemp -d)\n{exe} distort --name jpeg_real --param quality=50 --out \"$d\" \"$1\" >/dev/null\nmv \"$d/$(basename \"$1\")\" \"$2\"\nrm -rf \"$d\"\n"
        ),
    )
    .unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
    }
    let external = Distortion::from_spec(&DistortionSpec {
        name: "external".into(),
        weight: 1.0,
        params: Default::default(),
        command: Some(duomark_core::config::ExternalCommandSpec {
            program: script.to_string_lossy().into_owned(),
            args: vec!["{in}".into(), "{out}".into()],
            timeout_secs: 60,
        }),
    })
    .unwrap();

    let internal = Distortion::jpeg_real(50).unwrap();
    let acc_ext = acc_under(&fx.checkpoint, &external, 24, 901);
    let acc_int = acc_under(&fx.checkpoint, &internal, 24, 901);
    assert!(
        (acc_ext - acc_int).abs() <= 0.01,
        "external {acc_ext} vs internal {acc_int}"
    );
    println!(
        "external-codec cross-check: PASS (external {acc_ext:.4} vs internal {acc_int:.4})"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn external_command_identity_and_error_paths() {
    // `cp` is a pass-through: output equals input exactly for 8-bit data.
    let x8 = {
        // Quantized batch so the PNG round trip is lossless.
        let raw = synthetic_batch(2, 55);
        let mut q = raw.data().clone();
        q.mapv_inplace(|v| (v * 255.0).round() / 255.0);
        ImageBatch::new(q).unwrap()
    };
    let copy = Distortion::from_spec(&DistortionSpec {
        name: "external".into(),
        weight: 1.0,
        params: Default::default(),
        command: Some(duomark_core::config::ExternalCommandSpec {
            program: "cp".into(),
            args: vec!["{in}".into(), "{out}".into()],
            timeout_secs: 30,
        }),
    })
    .unwrap();
    let y = copy.apply(&x8, None, 5).unwrap();
    assert_eq!(y, x8, "copy-file external command must be the identity");

    // A command emitting wrong dimensions is a distortion failure naming
    // the distortion; so is a nonzero exit.
    let dir = std::env::temp_dir().join(format!("duomark-ext-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let tiny_png = dir.join("tiny.png");
    image::RgbImage::from_pixel(8, 8, image::Rgb([1u8, 2, 3])).save(&tiny_png).unwrap();
    let wrong_dims = dir.join("wrong_dims.sh");
    std::fs::write(
        &wrong_dims,
        format!("#!/bin/sh\ncp {} \"$2\"\n", tiny_png.display()),
    )
    .unwrap();
    let exits_badly = dir.join("exits_badly.sh");
    std::fs::write(&exits_badly, "#!/bin/sh\necho 'codec exploded' >&2\nexit 3\n").unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        for s in [&wrong_dims, &exits_badly] {
            std::fs::set_permissions(s, std::fs::Permissions::from_mode(0o755)).unwrap();
        }
    }
    for script in [&wrong_dims, &exits_badly] {
        let failing = Distortion::from_spec(&DistortionSpec {
            name: "external".into(),
            weight: 1.0,
            params: Default::default(),
            command: Some(duomark_core::config::ExternalCommandSpec {
                program: script.to_string_lossy().into_owned(),
                args: vec!["{in}".into(), "{out}".into()],
                timeout_secs: 30,
            }),
        })
        .unwrap();
        match failing.apply(&x8, None, 5) {
            Err(Error::DistortionFailed { name, .. }) => assert!(name.contains("external")),
            other => panic!("expected distortion failure, got {other:?}"),
        }
    }
    println!("external-command contracts: PASS (copy identity; wrong dims and bad exits surface)");
    std::fs::remove_dir_all(&dir).ok();
}

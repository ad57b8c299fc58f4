//! Benchmark harnesses: per-distortion robustness tables, codec-quality
//! sweeps, and strategy/alignment ablations, with CSV and SVG outputs.

mod metrics;
pub mod plot;

pub use metrics::{bit_accuracy, mean_bit_accuracy, psnr, ssim, PsnrValue};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{DistortionSpec, RunConfig, StrategyVariant};
use crate::data::Dataset;
use crate::distortions::{Distortion, DistortionSuite};
use crate::error::{Error, Result};
use crate::message::{make_message, BitMessage};
use crate::models::Checkpoint;
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::training::encode_batch;

/// One benchmark row: embed, distort, extract, aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub distortion: String,
    pub params: String,
    /// Mean extraction accuracy after this distortion.
    pub acc: f64,
    /// Embedding quality: PSNR between cover and watermarked (None = identical).
    pub psnr: Option<f64>,
    /// Embedding quality: SSIM between cover and watermarked.
    pub ssim: f64,
    /// Distortion strength: PSNR between watermarked and distorted
    /// (None = identical, i.e. the identity distortion).
    pub distortion_psnr: Option<f64>,
    pub n_samples: usize,
    /// Distortion failures are recorded per row, not fatal.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub checkpoint_step: u64,
    pub seed: u64,
    pub dataset_label: String,
}

impl EvalReport {
    /// The pinned CSV schema. `psnr` is the cover-vs-watermarked figure;
    /// identical images print the `identical` sentinel.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("distortion,params,acc,psnr,ssim,n_samples\n");
        for r in &self.rows {
            let psnr = match r.psnr {
                Some(v) => format!("{v:.4}"),
                None => "identical".into(),
            };
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{:.6},{}",
                r.distortion, r.params, r.acc, psnr, r.ssim, r.n_samples
            );
        }
        out
    }
}

/// Evaluation protocol knobs.
#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    /// Number of evaluation crops.
    pub samples: usize,
    /// Seed for messages, crops, and distortion draws.
    pub seed: u64,
    /// Processing batch size.
    pub batch: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { samples: 64, seed: 97, batch: 16 }
    }
}

/// Run the embed-distort-extract protocol for every suite entry.
pub fn run_benchmark<F: Scalar>(
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    suite: &DistortionSuite,
    opts: BenchOptions,
) -> Result<EvalReport> {
    if suite.is_empty() {
        return Err(Error::InvalidConfig("benchmark suite is empty".into()));
    }
    let rows = suite
        .entries()
        .map(|d| benchmark_row(checkpoint, dataset, d, opts))
        .collect::<Vec<_>>();
    Ok(EvalReport {
        rows,
        checkpoint_step: checkpoint.step,
        seed: opts.seed,
        dataset_label: checkpoint.config.data.source.clone(),
    })
}

fn benchmark_row<F: Scalar>(
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    distortion: &Distortion,
    opts: BenchOptions,
) -> EvalRow {
    match try_benchmark_row(checkpoint, dataset, distortion, opts) {
        Ok(row) => row,
        Err(e) => EvalRow {
            distortion: distortion.name(),
            params: distortion.params_label(),
            acc: f64::NAN,
            psnr: None,
            ssim: f64::NAN,
            distortion_psnr: None,
            n_samples: 0,
            error: Some(e.to_string()),
        },
    }
}

fn try_benchmark_row<F: Scalar>(
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    distortion: &Distortion,
    opts: BenchOptions,
) -> Result<EvalRow> {
    let config = &checkpoint.config;
    let hw = config.image_hw();
    let n = config.model.message_length;
    let encoder = checkpoint.encoder_model();
    let extractor = checkpoint.extraction_decoder()?;

    let mut acc_sum = 0.0;
    let mut mse_embed_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut mse_distort_sum = 0.0;
    let mut batches = 0usize;
    let mut done = 0usize;
    while done < opts.samples {
        let count = opts.batch.min(opts.samples - done);
        let seed = derive_seed(opts.seed, "bench_batch", (done / opts.batch.max(1)) as u64);
        let x = dataset.eval_batch(count, hw, seed)?;
        let msgs: Vec<BitMessage> = (0..count)
            .map(|i| {
                make_message(derive_seed(opts.seed, "bench_message", (done + i) as u64), n)
                    .expect("valid n")
            })
            .collect();
        let xhat = encode_batch(&encoder, &x, &msgs)?;
        let x_tilde =
            distortion.apply(&xhat, Some(&x), derive_seed(opts.seed, "bench_distort", batches as u64))?;
        let scores = crate::models::extract_features(&extractor, &x_tilde)
            .and_then(|z| crate::models::predict_message(&extractor, &z))?;
        acc_sum += mean_bit_accuracy(&scores, &msgs)?;
        mse_embed_sum += x.mse(&xhat)?;
        ssim_sum += ssim(&x, &xhat)?;
        mse_distort_sum += xhat.mse(&x_tilde)?;
        batches += 1;
        done += count;
    }
    let nb = batches as f64;
    let mse_to_psnr = |mse: f64| {
        if mse == 0.0 {
            None
        } else {
            Some(10.0 * (1.0 / mse).log10())
        }
    };
    Ok(EvalRow {
        distortion: distortion.name(),
        params: distortion.params_label(),
        acc: acc_sum / nb,
        psnr: mse_to_psnr(mse_embed_sum / nb),
        ssim: ssim_sum / nb,
        distortion_psnr: mse_to_psnr(mse_distort_sum / nb),
        n_samples: done,
        error: None,
    })
}

/// Codec-quality sweep: one row per quality factor. Duplicate factors are
/// deduplicated; the returned warnings note them.
pub fn run_jpeg_sweep<F: Scalar>(
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    q_list: &[i64],
    opts: BenchOptions,
) -> Result<(EvalReport, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut seen = Vec::new();
    for &q in q_list {
        if seen.contains(&q) {
            warnings.push(format!("duplicate quality {q} ignored"));
        } else {
            seen.push(q);
        }
    }
    let entries = seen
        .iter()
        .map(|&q| Ok((Distortion::jpeg_real(q)?, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let suite = DistortionSuite::new(entries, crate::distortions::SuiteMode::Fixed)?;
    let report = run_benchmark(checkpoint, dataset, &suite, opts)?;
    Ok((report, warnings))
}

/// One ablation cell: a label and the full config to train.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    pub config: RunConfig,
}

/// The five structure rows: none, alignment only, alignment+momentum,
/// alignment+swapping, all three.
pub fn structure_cells(base: &RunConfig) -> Vec<AblationCell> {
    let combos = [
        ("none", false, false, false),
        ("fa", true, false, false),
        ("fa+mu", true, true, false),
        ("fa+sl", true, false, true),
        ("fa+mu+sl", true, true, true),
    ];
    combos
        .iter()
        .map(|(label, fa, mu, sl)| {
            let mut config = base.clone();
            config.strategy = crate::config::StrategyConfig::from_variant(StrategyVariant::End2 {
                use_fa: *fa,
                use_mu: *mu,
                use_sl: *sl,
            });
            AblationCell { label: (*label).into(), config }
        })
        .collect()
}

/// Alignment-loss variants on the full strategy.
pub fn alignment_cells(base: &RunConfig) -> Vec<AblationCell> {
    use crate::config::AlignmentKind;
    [
        ("cosine", AlignmentKind::Cosine),
        ("mse", AlignmentKind::Mse),
        ("dino", AlignmentKind::Dino),
    ]
    .iter()
    .map(|(label, kind)| {
        let mut config = base.clone();
        config.strategy = crate::config::StrategyConfig::from_variant(StrategyVariant::end2());
        config.loss.alignment = *kind;
        AblationCell { label: (*label).into(), config }
    })
    .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    /// Accuracy on clean watermarked images.
    pub clean_acc: f64,
    /// Mean accuracy across the config's distortion suite.
    pub suite_acc: f64,
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seed: u64,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,clean_acc,suite_acc,psnr,ssim\n");
        for r in &self.rows {
            let psnr = match r.psnr {
                Some(v) => format!("{v:.4}"),
                None => "identical".into(),
            };
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{:.6}",
                r.label, r.clean_acc, r.suite_acc, psnr, r.ssim
            );
        }
        out
    }
}

/// Train every cell with a shared seed and evaluate side by side. Per-cell
/// failures are isolated into their row.
pub fn run_ablation<F: Scalar>(
    cells: &[AblationCell],
    dataset: &Dataset<F>,
    opts: BenchOptions,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        match ablation_row::<F>(cell, dataset, opts) {
            Ok(row) => rows.push(row),
            Err(e) => rows.push(AblationRow {
                label: cell.label.clone(),
                clean_acc: f64::NAN,
                suite_acc: f64::NAN,
                psnr: None,
                ssim: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(AblationReport { rows, seed: cells.first().map(|c| c.config.seed).unwrap_or(0) })
}

fn ablation_row<F: Scalar>(
    cell: &AblationCell,
    dataset: &Dataset<F>,
    opts: BenchOptions,
) -> Result<AblationRow> {
    let checkpoint = crate::training::train_loop::<F>(&cell.config, dataset, &mut |_| {})?;
    summarize_cell(&cell.label, &checkpoint, dataset, opts)
}

/// Clean accuracy plus mean suite accuracy for a trained checkpoint.
pub fn summarize_cell<F: Scalar>(
    label: &str,
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    opts: BenchOptions,
) -> Result<AblationRow> {
    let suite = DistortionSuite::from_config(&checkpoint.config.distortions)?;
    let mut entries: Vec<(Distortion, f64)> = vec![(Distortion::identity(), 1.0)];
    for d in suite.entries() {
        entries.push((d.clone(), 1.0));
    }
    let eval_suite = DistortionSuite::new(entries, crate::distortions::SuiteMode::Fixed)?;
    let report = run_benchmark(checkpoint, dataset, &eval_suite, opts)?;
    let clean = &report.rows[0];
    let rest = &report.rows[1..];
    let suite_acc = rest.iter().map(|r| r.acc).sum::<f64>() / rest.len() as f64;
    Ok(AblationRow {
        label: label.into(),
        clean_acc: clean.acc,
        suite_acc,
        psnr: clean.psnr,
        ssim: clean.ssim,
        error: None,
    })
}

/// A checkpoint with its residual strength overridden (the
/// visibility/robustness knob: `x_hat = x + s * residual`).
pub fn at_strength<F: Scalar>(checkpoint: &Checkpoint<F>, strength: f64) -> Checkpoint<F> {
    let mut scaled = checkpoint.clone();
    scaled.config.model.embed_strength = strength;
    scaled
}

/// Mean embedding PSNR over seeded eval crops at a given residual strength.
pub fn embedding_psnr_at_strength<F: Scalar>(
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    strength: f64,
    opts: BenchOptions,
) -> Result<f64> {
    let scaled = at_strength(checkpoint, strength);
    let config = &scaled.config;
    let x = dataset.eval_batch(opts.samples, config.image_hw(), opts.seed)?;
    let msgs: Vec<BitMessage> = (0..x.batch_size())
        .map(|i| {
            make_message(
                derive_seed(opts.seed, "strength_msg", i as u64),
                config.model.message_length,
            )
            .expect("valid n")
        })
        .collect();
    let xhat = encode_batch(&scaled.encoder_model(), &x, &msgs)?;
    let mse = x.mse(&xhat)?;
    if mse == 0.0 {
        return Err(Error::InvalidConfig("embedding left the image untouched".into()));
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Bisect the residual strength until the embedding PSNR matches
/// `target_db`. PSNR decreases monotonically in strength on this range.
pub fn calibrate_strength<F: Scalar>(
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    target_db: f64,
    opts: BenchOptions,
) -> Result<f64> {
    let (mut lo, mut hi) = (1e-4f64, 8.0f64);
    for _ in 0..32 {
        let mid = 0.5 * (lo + hi);
        let p = embedding_psnr_at_strength(checkpoint, dataset, mid, opts)?;
        if p > target_db {
            lo = mid; // too faint; push harder
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Embedding-strength sweep: rescale the encoder residual and trace the
/// accuracy/quality trade-off (accuracy vs PSNR axes).
pub fn run_strength_sweep<F: Scalar>(
    checkpoint: &Checkpoint<F>,
    dataset: &Dataset<F>,
    strengths: &[f64],
    suite: &DistortionSuite,
    opts: BenchOptions,
) -> Result<Vec<(f64, EvalReport)>> {
    let mut out = Vec::new();
    for &s in strengths {
        if s <= 0.0 {
            return Err(Error::InvalidConfig("strength must be > 0".into()));
        }
        let report = run_benchmark(&at_strength(checkpoint, s), dataset, suite, opts)?;
        out.push((s, report));
    }
    Ok(out)
}

/// Build the nine-row robustness suite from the preset spec list.
pub fn benchmark_suite_from_specs(specs: &[DistortionSpec]) -> Result<DistortionSuite> {
    let entries = specs
        .iter()
        .map(|s| Ok((Distortion::from_spec(s)?, s.weight)))
        .collect::<Result<Vec<_>>>()?;
    DistortionSuite::new(entries, crate::distortions::SuiteMode::Fixed)
}

//! Command implementations behind the `duomark` binary.
//!
//! Each command is an ordinary function so integration tests drive them
//! directly; `main` only parses arguments and maps errors to exit codes.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use duomark_core::config::{benchmark_suite, DistortionSpec, RunConfig};
use duomark_core::data::Dataset;
use duomark_core::distortions::{Distortion, DistortionSuite};
use duomark_core::error::{Error, Result};
use duomark_core::evaluation::{
    self, plot, AblationReport, BenchOptions, EvalReport, PsnrValue,
};
use duomark_core::image::ImageBatch;
use duomark_core::message::{make_message, BitMessage};
use duomark_core::models::Checkpoint;
use duomark_core::training::{self, HoldoutEval, TrainEvent};

/// JPEG codec provenance recorded with every run.
pub const CODEC_DESCRIPTION: &str = "image-rs 0.25 baseline JPEG encode/decode round-trip";
/// The L2 terms are realized as mean squared error.
pub const LOSS_CONVENTION: &str = "mean-squared";

/// A run directory is self-describing: resolved config, metadata,
/// line-delimited logs, checkpoints, reports, and plots.
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("reports"))?;
        std::fs::create_dir_all(root.join("plots"))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }

    pub fn metadata_path(&self) -> PathBuf {
        self.root.join("metadata.json")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn eval_log_path(&self) -> PathBuf {
        self.root.join("eval_log.jsonl")
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn plot_path(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }
}

#[derive(serde::Serialize)]
struct RunMetadata<'a> {
    crate_version: &'a str,
    scalar_type: &'a str,
    codec: &'a str,
    loss_convention: &'a str,
    seed: u64,
    deterministic: bool,
    strategy: String,
    steps: u64,
}

// ---- train ----

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub preset: String,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub last_eval: Option<HoldoutEval>,
    pub steps: u64,
}

/// Resolve the config for a train-like command: preset base, optional file
/// overlay, then CLI overrides.
pub fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let base = RunConfig::preset(&args.preset)?;
    let mut config = match &args.config {
        Some(path) => RunConfig::load_over(base, path)?,
        None => base,
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.deterministic {
        config.deterministic = true;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let config = resolve_config(args)?;
    training::validate_strategy(&config)?;
    // Fail on data problems before creating any run directory.
    let dataset = Dataset::<f32>::load(&config.data, config.image_hw(), config.seed)?;

    let dir = RunDirectory::create(&args.out)?;
    std::fs::write(dir.config_path(), config.to_toml_string()?)?;
    let metadata = RunMetadata {
        crate_version: env!("CARGO_PKG_VERSION"),
        scalar_type: "f32",
        codec: CODEC_DESCRIPTION,
        loss_convention: LOSS_CONVENTION,
        seed: config.seed,
        deterministic: config.deterministic,
        strategy: config.strategy.variant()?.label(),
        steps: config.train.steps,
    };
    std::fs::write(
        dir.metadata_path(),
        serde_json::to_string_pretty(&metadata).map_err(|e| Error::Serialization(e.to_string()))?,
    )?;

    let mut train_log = std::io::BufWriter::new(std::fs::File::create(dir.train_log_path())?);
    let mut eval_log = std::io::BufWriter::new(std::fs::File::create(dir.eval_log_path())?);
    let mut events = std::io::BufWriter::new(std::fs::File::create(dir.events_path())?);
    let mut last_eval: Option<HoldoutEval> = None;
    let mut io_error: Option<std::io::Error> = None;

    let result = training::train_loop::<f32>(&config, &dataset, &mut |event| {
        let r = match event {
            TrainEvent::Step { step, loss } => writeln!(
                train_log,
                "{{\"step\":{step},\"l_align\":{},\"l_msg\":{},\"l_quality\":{},\"total\":{}}}",
                loss.l_align, loss.l_msg, loss.l_quality, loss.total
            ),
            TrainEvent::SkippedBatch { step, reason } => {
                writeln!(events, "{{\"step\":{step},\"event\":\"skipped_batch\",\"reason\":{:?}}}", reason)
            }
            TrainEvent::Eval { eval } => {
                last_eval = Some(eval.clone());
                serde_json::to_string(eval)
                    .map_err(std::io::Error::other)
                    .and_then(|line| writeln!(eval_log, "{line}"))
                    .and_then(|()| eval_log.flush()) // rare; keep tailable
            }
            TrainEvent::Checkpoint { step, checkpoint, diagnostic } => {
                let name = if diagnostic {
                    format!("diagnostic_step_{step}.ckpt")
                } else {
                    format!("step_{step}.ckpt")
                };
                checkpoint
                    .save(&dir.checkpoint_path(&name))
                    .map_err(|e| std::io::Error::other(e.to_string()))
            }
            TrainEvent::StageBoundary { step, checkpoint } => checkpoint
                .save(&dir.checkpoint_path(&format!("stage_boundary_{step}.ckpt")))
                .map_err(|e| std::io::Error::other(e.to_string())),
        };
        if let (Err(e), None) = (r, &io_error) {
            io_error = Some(e);
        }
    });

    train_log.flush()?;
    eval_log.flush()?;
    events.flush()?;
    if let Some(e) = io_error {
        return Err(Error::Io(e));
    }
    let checkpoint = result?;

    let final_path = dir.checkpoint_path("final.ckpt");
    checkpoint.save(&final_path)?;
    Ok(TrainSummary {
        run_dir: dir.root().to_path_buf(),
        final_checkpoint: final_path,
        last_eval,
        steps: checkpoint.step,
    })
}

// ---- embed / extract ----

pub struct EmbedArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub message: Option<String>,
    pub message_seed: u64,
}

#[derive(Debug)]
pub struct EmbedSummary {
    pub message: BitMessage,
    pub psnr_db: Option<f64>,
    pub warning: Option<String>,
}

/// Load one image file into a single-element batch, dividing by 255.
pub fn load_image_file(path: &Path) -> Result<ImageBatch<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::CorruptData(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageBatch::from_rgb8(&img.into_raw(), h, w)
}

/// Save image `index` of the batch, 8-bit, format chosen by extension.
pub fn save_image_file(batch: &ImageBatch<f32>, index: usize, path: &Path) -> Result<()> {
    let (h, w) = batch.spatial();
    let img = image::RgbImage::from_raw(w as u32, h as u32, batch.to_rgb8(index))
        .ok_or_else(|| Error::Shape("pixel buffer mismatch".into()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    img.save(path).map_err(|e| Error::Serialization(format!("image save: {e}")))
}

/// Center-crop or zero-pad a single-image batch to the target size.
pub fn fit_to(batch: &ImageBatch<f32>, target: (usize, usize)) -> Result<(ImageBatch<f32>, Option<String>)> {
    let (h, w) = batch.spatial();
    let (th, tw) = target;
    if (h, w) == (th, tw) {
        return Ok((batch.clone(), None));
    }
    let mut out = ndarray::Array4::<f32>::zeros((1, 3, th, tw));
    // Copy the centered intersection.
    let copy_h = h.min(th);
    let copy_w = w.min(tw);
    let src_y = (h - copy_h) / 2;
    let src_x = (w - copy_w) / 2;
    let dst_y = (th - copy_h) / 2;
    let dst_x = (tw - copy_w) / 2;
    let data = batch.data();
    for c in 0..3 {
        for y in 0..copy_h {
            for x in 0..copy_w {
                out[(0, c, dst_y + y, dst_x + x)] = data[(0, c, src_y + y, src_x + x)];
            }
        }
    }
    let action = if h > th || w > tw { "center-cropped" } else { "zero-padded" };
    let warning = format!("image {h}x{w} {action} to {th}x{tw}");
    Ok((ImageBatch::new(out)?, Some(warning)))
}

pub fn cmd_embed(args: &EmbedArgs) -> Result<EmbedSummary> {
    let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
    let n = ckpt.config.model.message_length;
    let message = match &args.message {
        Some(bits) => {
            let m = BitMessage::from_bit_string(bits)?;
            if m.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "message has {} bits, checkpoint expects {n}",
                    m.len()
                )));
            }
            m
        }
        None => make_message(args.message_seed, n)?,
    };
    let raw = load_image_file(&args.image)?;
    let (x, warning) = fit_to(&raw, ckpt.config.image_hw())?;
    let encoder = ckpt.encoder_model();
    let xhat = duomark_core::models::encode(&encoder, &x, &message)?;
    save_image_file(&xhat, 0, &args.out)?;
    let psnr_db = match evaluation::psnr(&x, &xhat)? {
        PsnrValue::Identical => None,
        PsnrValue::Db(v) => Some(v),
    };
    Ok(EmbedSummary { message, psnr_db, warning })
}

pub struct ExtractArgs {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
}

#[derive(Debug)]
pub struct ExtractSummary {
    pub bits: BitMessage,
    pub scores: Vec<f64>,
    pub warning: Option<String>,
}

pub fn cmd_extract(args: &ExtractArgs) -> Result<ExtractSummary> {
    let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
    let raw = load_image_file(&args.image)?;
    let (x, warning) = fit_to(&raw, ckpt.config.image_hw())?;
    let decoder = ckpt.extraction_decoder()?;
    let z = duomark_core::models::extract_features(&decoder, &x)?;
    let scores = duomark_core::models::predict_message(&decoder, &z)?;
    let score_row: Vec<f64> = scores.row(0).iter().map(|&v| f64::from(v)).collect();
    let bits = BitMessage::new(
        score_row.iter().map(|&s| u8::from(s > 0.5)).collect::<Vec<u8>>(),
    )?;
    Ok(ExtractSummary { bits, scores: score_row, warning })
}

// ---- bench ----

#[derive(Debug, Clone)]
pub enum BenchPreset {
    /// The nine-distortion robustness table.
    Robustness,
    /// Real JPEG sweep over Q in {50, 40, 30, 20, 10}, with an ACC-vs-Q plot.
    Jpeg,
    /// Embedding-strength sweep tracing ACC vs PSNR.
    Strength,
}

pub struct BenchArgs {
    pub checkpoint: PathBuf,
    /// `synthetic` or a directory path; defaults to the checkpoint's source.
    pub data: Option<String>,
    pub preset: BenchPreset,
    pub out: PathBuf,
    pub samples: usize,
    pub seed: u64,
}

pub struct BenchSummary {
    pub csv_path: PathBuf,
    pub plot_path: Option<PathBuf>,
    pub reports: Vec<EvalReport>,
    pub warnings: Vec<String>,
}

fn dataset_for(ckpt: &Checkpoint<f32>, data: &Option<String>) -> Result<Dataset<f32>> {
    let mut data_config = ckpt.config.data.clone();
    if let Some(spec) = data {
        if spec == "synthetic" {
            data_config = duomark_core::config::DataConfig::default();
        } else {
            data_config.source = "directory".into();
            data_config.path = Some(PathBuf::from(spec));
        }
    }
    Dataset::<f32>::load(&data_config, ckpt.config.image_hw(), ckpt.config.seed)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchSummary> {
    let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
    let dataset = dataset_for(&ckpt, &args.data)?;
    let dir = RunDirectory::create(&args.out)?;
    let opts = BenchOptions { samples: args.samples, seed: args.seed, batch: 16 };

    match args.preset {
        BenchPreset::Robustness => {
            let suite = evaluation::benchmark_suite_from_specs(&benchmark_suite())?;
            let report = evaluation::run_benchmark(&ckpt, &dataset, &suite, opts)?;
            let csv_path = dir.report_path("robustness.csv");
            std::fs::write(&csv_path, report.to_csv())?;
            Ok(BenchSummary { csv_path, plot_path: None, reports: vec![report], warnings: vec![] })
        }
        BenchPreset::Jpeg => {
            let qs = [50, 40, 30, 20, 10];
            let (report, warnings) = evaluation::run_jpeg_sweep(&ckpt, &dataset, &qs, opts)?;
            let csv_path = dir.report_path("jpeg_sweep.csv");
            std::fs::write(&csv_path, report.to_csv())?;
            let plot_path = dir.plot_path("jpeg_sweep.svg");
            let points: Vec<(f64, f64)> = report
                .rows
                .iter()
                .zip(qs.iter())
                .map(|(row, &q)| (q as f64, row.acc))
                .collect();
            plot::line_chart(
                &plot_path,
                "extraction accuracy vs JPEG quality",
                "quality factor",
                "bit accuracy",
                &[plot::Series { label: "acc".into(), points }],
            )?;
            Ok(BenchSummary { csv_path, plot_path: Some(plot_path), reports: vec![report], warnings })
        }
        BenchPreset::Strength => {
            let strengths = [0.5, 0.75, 1.0, 1.5, 2.0];
            let suite = DistortionSuite::from_config(&ckpt.config.distortions)?;
            let sweeps =
                evaluation::run_strength_sweep(&ckpt, &dataset, &strengths, &suite, opts)?;
            let mut csv = String::from("strength,psnr,mean_acc\n");
            let mut points = Vec::new();
            let mut reports = Vec::new();
            for (s, report) in sweeps {
                let mean_acc =
                    report.rows.iter().map(|r| r.acc).sum::<f64>() / report.rows.len() as f64;
                let psnr = report.rows.first().and_then(|r| r.psnr).unwrap_or(f64::NAN);
                let _ = writeln!(csv, "{s},{psnr:.4},{mean_acc:.6}");
                points.push((psnr, mean_acc));
                reports.push(report);
            }
            let csv_path = dir.report_path("strength_sweep.csv");
            std::fs::write(&csv_path, csv)?;
            let plot_path = dir.plot_path("strength_sweep.svg");
            plot::line_chart(
                &plot_path,
                "extraction accuracy vs embedding quality",
                "PSNR (dB)",
                "bit accuracy",
                &[plot::Series { label: "acc".into(), points }],
            )?;
            Ok(BenchSummary { csv_path, plot_path: Some(plot_path), reports, warnings: vec![] })
        }
    }
}

// ---- ablate ----

#[derive(Debug, Clone)]
pub enum AblateKind {
    /// None / FA / FA+MU / FA+SL / FA+MU+SL.
    Structures,
    /// Cosine / MSE / DINO alignment plugins.
    Alignment,
}

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub preset: String,
    pub kind: AblateKind,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub samples: usize,
}

pub struct AblateSummary {
    pub csv_path: PathBuf,
    pub report: AblationReport,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblateSummary> {
    let base = resolve_config(&TrainArgs {
        config: args.config.clone(),
        preset: args.preset.clone(),
        seed: args.seed,
        deterministic: true,
        out: args.out.clone(),
    })?;
    let dataset = Dataset::<f32>::load(&base.data, base.image_hw(), base.seed)?;
    let cells = match args.kind {
        AblateKind::Structures => evaluation::structure_cells(&base),
        AblateKind::Alignment => evaluation::alignment_cells(&base),
    };
    let dir = RunDirectory::create(&args.out)?;
    let opts = BenchOptions { samples: args.samples, seed: base.seed, batch: 16 };
    let report = evaluation::run_ablation::<f32>(&cells, &dataset, opts)?;
    let name = match args.kind {
        AblateKind::Structures => "ablation_structures.csv",
        AblateKind::Alignment => "ablation_alignment.csv",
    };
    let csv_path = dir.report_path(name);
    std::fs::write(&csv_path, report.to_csv())?;
    Ok(AblateSummary { csv_path, report })
}

// ---- distort ----

pub struct DistortArgs {
    pub name: String,
    pub params: Vec<(String, f64)>,
    pub seed: u64,
    pub out: PathBuf,
    pub inputs: Vec<PathBuf>,
    /// Cover images, required by mask distortions (dropout / cropout).
    pub covers: Vec<PathBuf>,
}

pub fn cmd_distort(args: &DistortArgs) -> Result<Vec<PathBuf>> {
    let mut spec = DistortionSpec::named(&args.name, &[]);
    for (k, v) in &args.params {
        spec.params.insert(k.clone(), *v);
    }
    let distortion = Distortion::from_spec(&spec)?;
    if distortion.requires_cover() && args.covers.len() != args.inputs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} needs one --cover per input",
            distortion.name()
        )));
    }
    std::fs::create_dir_all(&args.out)?;
    let mut written = Vec::new();
    for (i, input) in args.inputs.iter().enumerate() {
        let x = load_image_file(input)?;
        let cover = if distortion.requires_cover() {
            Some(load_image_file(&args.covers[i])?)
        } else {
            None
        };
        let seed = duomark_core::rng::derive_seed(args.seed, "cli_distort", i as u64);
        let y = distortion.apply(&x, cover.as_ref(), seed)?;
        let file_name = input
            .file_name()
            .ok_or_else(|| Error::InvalidConfig(format!("bad input path {}", input.display())))?;
        let out_path = args.out.join(file_name);
        save_image_file(&y, 0, &out_path)?;
        written.push(out_path);
    }
    Ok(written)
}

/// One-line-per-row rendering for terminal output.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    for r in &report.rows {
        let psnr = r.psnr.map(|v| format!("{v:.2} dB")).unwrap_or_else(|| "identical".into());
        let _ = writeln!(
            out,
            "{:<16} {:<12} acc {:.4}  psnr {psnr}  ssim {:.4}  n={}{}",
            r.distortion,
            r.params,
            r.acc,
            r.ssim,
            r.n_samples,
            r.error.as_deref().map(|e| format!("  ERROR: {e}")).unwrap_or_default(),
        );
    }
    out
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duomark_cli::*;

/// Blind image watermarking: dual-decoder training, embedding, extraction,
/// and robustness benchmarks.
#[derive(Parser)]
#[command(name = "duomark", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a self-describing run directory.
    Train(TrainCli),
    /// Embed a message into an image.
    Embed(EmbedCli),
    /// Extract the message from a watermarked image.
    Extract(ExtractCli),
    /// Run evaluation benchmarks against a checkpoint.
    Bench(BenchCli),
    /// Train and compare ablation configurations side by side.
    Ablate(AblateCli),
    /// Apply a named distortion to image files (corpus inspection).
    Distort(DistortCli),
}

#[derive(Args)]
struct TrainCli {
    /// TOML config overlay; unset fields take preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: `desk` (32x32, 8 bits) or `paper` (128x128, 30 bits).
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Force serial, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
    /// Run directory.
    #[arg(long, default_value = "runs/run")]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Explicit payload bits, e.g. `10110010`.
    #[arg(long)]
    message: Option<String>,
    /// Seed for a random payload when --message is not given.
    #[arg(long, default_value_t = 1)]
    message_seed: u64,
}

#[derive(Args)]
struct ExtractCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Args)]
struct BenchCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `synthetic` or an image directory; defaults to the checkpoint's source.
    #[arg(long)]
    data: Option<String>,
    /// `robustness` (nine-distortion table), `jpeg` (quality sweep + plot),
    /// or `strength` (embedding-strength sweep + plot).
    #[arg(long, default_value = "robustness")]
    preset: String,
    #[arg(long, default_value = "bench")]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 97)]
    seed: u64,
}

#[derive(Args)]
struct AblateCli {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// `structures` (five strategy rows) or `alignment` (three loss rows).
    #[arg(long, default_value = "structures")]
    kind: String,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Args)]
struct DistortCli {
    /// Registry name, e.g. `jpeg_real`, `gaussian_noise`, `rotate`.
    #[arg(long)]
    name: String,
    /// Distortion parameters as `key=value`, repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, f64)>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "distorted")]
    out: PathBuf,
    /// Cover image per input, for dropout/cropout.
    #[arg(long = "cover")]
    covers: Vec<PathBuf>,
    /// Input image files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let value: f64 = v.parse().map_err(|e| format!("bad value in '{s}': {e}"))?;
    Ok((k.to_string(), value))
}

fn run() -> duomark_core::error::Result<()> {
    match Cli::parse().command {
        Command::Train(a) => {
            let summary = cmd_train(&TrainArgs {
                config: a.config,
                preset: a.preset,
                seed: a.seed,
                deterministic: a.deterministic,
                out: a.out,
            })?;
            println!("run directory: {}", summary.run_dir.display());
            println!("final checkpoint: {}", summary.final_checkpoint.display());
            println!("steps: {}", summary.steps);
            if let Some(eval) = summary.last_eval {
                let psnr = eval
                    .psnr_db
                    .map(|v| format!("{v:.2} dB"))
                    .unwrap_or_else(|| "identical".into());
                println!(
                    "held-out: clean acc {:.4}, psnr {psnr}, ssim {:.4}",
                    eval.clean_acc, eval.ssim
                );
                for (name, acc) in eval.per_distortion {
                    println!("  {name}: acc {acc:.4}");
                }
            }
        }
        Command::Embed(a) => {
            let out = a.out.clone();
            let summary = cmd_embed(&EmbedArgs {
                checkpoint: a.checkpoint,
                image: a.image,
                out: a.out,
                message: a.message,
                message_seed: a.message_seed,
            })?;
            if let Some(w) = summary.warning {
                eprintln!("warning: {w}");
            }
            println!("message: {}", summary.message.to_bit_string());
            let psnr = summary
                .psnr_db
                .map(|v| format!("{v:.2} dB"))
                .unwrap_or_else(|| "identical".into());
            println!("psnr vs input: {psnr}");
            println!("wrote {}", out.display());
        }
        Command::Extract(a) => {
            let summary = cmd_extract(&ExtractArgs { checkpoint: a.checkpoint, image: a.image })?;
            if let Some(w) = summary.warning {
                eprintln!("warning: {w}");
            }
            println!("bits: {}", summary.bits.to_bit_string());
            let scores: Vec<String> = summary.scores.iter().map(|s| format!("{s:.3}")).collect();
            println!("scores: [{}]", scores.join(", "));
        }
        Command::Bench(a) => {
            let preset = match a.preset.as_str() {
                "robustness" => BenchPreset::Robustness,
                "jpeg" => BenchPreset::Jpeg,
                "strength" => BenchPreset::Strength,
                other => {
                    return Err(duomark_core::error::Error::InvalidConfig(format!(
                        "unknown bench preset '{other}'"
                    )))
                }
            };
            let summary = cmd_bench(&BenchArgs {
                checkpoint: a.checkpoint,
                data: a.data,
                preset,
                out: a.out,
                samples: a.samples,
                seed: a.seed,
            })?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            for report in &summary.reports {
                print!("{}", render_report(report));
            }
            println!("csv: {}", summary.csv_path.display());
            if let Some(p) = summary.plot_path {
                println!("plot: {}", p.display());
            }
        }
        Command::Ablate(a) => {
            let kind = match a.kind.as_str() {
                "structures" => AblateKind::Structures,
                "alignment" => AblateKind::Alignment,
                other => {
                    return Err(duomark_core::error::Error::InvalidConfig(format!(
                        "unknown ablation kind '{other}'"
                    )))
                }
            };
            let summary = cmd_ablate(&AblateArgs {
                config: a.config,
                preset: a.preset,
                kind,
                out: a.out,
                seed: a.seed,
                samples: a.samples,
            })?;
            for row in &summary.report.rows {
                let psnr =
                    row.psnr.map(|v| format!("{v:.2} dB")).unwrap_or_else(|| "identical".into());
                println!(
                    "{:<10} clean {:.4}  suite {:.4}  psnr {psnr}  ssim {:.4}{}",
                    row.label,
                    row.clean_acc,
                    row.suite_acc,
                    row.ssim,
                    row.error.as_deref().map(|e| format!("  ERROR: {e}")).unwrap_or_default(),
                );
            }
            println!("csv: {}", summary.csv_path.display());
        }
        Command::Distort(a) => {
            let written = cmd_distort(&DistortArgs {
                name: a.name,
                params: a.params,
                seed: a.seed,
                out: a.out,
                inputs: a.inputs,
                covers: a.covers,
            })?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

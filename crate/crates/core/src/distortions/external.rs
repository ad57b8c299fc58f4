//! Black-box distortions via external image-to-image programs.
//!
//! Batch elements are exchanged as 8-bit PNG files; the command template's
//! `{in}` / `{out}` placeholders are substituted per image. Nonzero exit,
//! timeout, malformed output, or a dimension change all surface as
//! distortion failures with captured diagnostics.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crate::config::ExternalCommandSpec;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::scalar::Scalar;

fn fail(name: &str, reason: impl Into<String>) -> Error {
    Error::DistortionFailed { name: name.to_string(), reason: reason.into() }
}

fn write_png<F: Scalar>(batch: &ImageBatch<F>, index: usize, path: &Path) -> Result<()> {
    let (h, w) = batch.spatial();
    let pixels = batch.to_rgb8(index);
    let img = image::RgbImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::Shape("pixel buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Serialization(format!("png write: {e}")))?;
    Ok(())
}

fn read_png<F: Scalar>(path: &Path, h: usize, w: usize, name: &str) -> Result<Vec<F>> {
    let img = image::open(path).map_err(|e| fail(name, format!("output not readable: {e}")))?;
    let rgb = img.to_rgb8();
    if rgb.width() as usize != w || rgb.height() as usize != h {
        return Err(fail(
            name,
            format!("output is {}x{}, expected {w}x{h}", rgb.width(), rgb.height()),
        ));
    }
    Ok(rgb.into_raw().into_iter().map(|v| F::from_f64c(f64::from(v) / 255.0)).collect())
}

fn run_with_timeout(mut cmd: Command, timeout: Duration, name: &str) -> Result<()> {
    cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
    let mut child = cmd.spawn().map_err(|e| fail(name, format!("spawn failed: {e}")))?;
    let start = Instant::now();
    loop {
        match child.try_wait().map_err(|e| fail(name, format!("wait failed: {e}")))? {
            Some(status) => {
                if status.success() {
                    return Ok(());
                }
                let out = child.wait_with_output().ok();
                let stderr = out
                    .map(|o| String::from_utf8_lossy(&o.stderr).trim().to_string())
                    .unwrap_or_default();
                return Err(fail(name, format!("exit status {status}: {stderr}")));
            }
            None => {
                if start.elapsed() > timeout {
                    child.kill().ok();
                    child.wait().ok();
                    return Err(fail(name, format!("timed out after {}s", timeout.as_secs())));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

fn scratch_dir(seed: u64) -> PathBuf {
    std::env::temp_dir().join(format!("duomark-ext-{}-{seed}", std::process::id()))
}

/// Run the external command over every batch element.
pub fn apply_external<F: Scalar>(
    name: &str,
    spec: &ExternalCommandSpec,
    batch: &ImageBatch<F>,
    seed: u64,
) -> Result<ImageBatch<F>> {
    let (h, w) = batch.spatial();
    let b = batch.batch_size();
    let dir = scratch_dir(seed);
    std::fs::create_dir_all(&dir)?;
    let timeout = Duration::from_secs(spec.timeout_secs.max(1));

    let mut out = ndarray::Array4::<F>::zeros((b, 3, h, w));
    let result = (|| -> Result<()> {
        for i in 0..b {
            let input = dir.join(format!("in-{i}.png"));
            let output = dir.join(format!("out-{i}.png"));
            write_png(batch, i, &input)?;
            let mut cmd = Command::new(&spec.program);
            for arg in &spec.args {
                let arg = arg
                    .replace("{in}", &input.to_string_lossy())
                    .replace("{out}", &output.to_string_lossy());
                cmd.arg(arg);
            }
            run_with_timeout(cmd, timeout, name)?;
            let pixels = read_png::<F>(&output, h, w, name)?;
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[(i, c, y, x)] = pixels[(y * w + x) * 3 + c];
                    }
                }
            }
        }
        Ok(())
    })();
    std::fs::remove_dir_all(&dir).ok();
    result?;
    ImageBatch::new(out)
}

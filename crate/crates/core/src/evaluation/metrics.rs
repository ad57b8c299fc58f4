//! Decoding-accuracy and visual-quality metrics.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::message::BitMessage;
use crate::scalar::Scalar;

/// PSNR with peak 1.0; identical inputs have no finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsnrValue {
    Identical,
    Db(f64),
}

impl PsnrValue {
    pub fn db(&self) -> Option<f64> {
        match self {
            PsnrValue::Identical => None,
            PsnrValue::Db(v) => Some(*v),
        }
    }
}

/// Fraction of positions where thresholding the squashed score at 0.5
/// recovers the message bit.
pub fn bit_accuracy<F: Scalar>(scores: &[F], message: &BitMessage) -> Result<f64> {
    if scores.len() != message.len() {
        return Err(Error::Shape(format!(
            "scores length {} vs message length {}",
            scores.len(),
            message.len()
        )));
    }
    let half = F::from_f64c(0.5);
    let hits = scores
        .iter()
        .zip(message.bits())
        .filter(|(&s, &b)| u8::from(s > half) == b)
        .count();
    Ok(hits as f64 / message.len() as f64)
}

/// Mean bit accuracy over a batch of score rows.
pub fn mean_bit_accuracy<F: Scalar>(
    scores: &Array2<F>,
    messages: &[BitMessage],
) -> Result<f64> {
    if scores.dim().0 != messages.len() {
        return Err(Error::Shape("one message per score row required".into()));
    }
    let mut acc = 0.0;
    for (row, m) in scores.rows().into_iter().zip(messages) {
        acc += bit_accuracy(row.as_slice().expect("contiguous row"), m)?;
    }
    Ok(acc / messages.len() as f64)
}

/// `10 log10(1 / mse)` over the whole batch, peak value 1.0.
pub fn psnr<F: Scalar>(a: &ImageBatch<F>, b: &ImageBatch<F>) -> Result<PsnrValue> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PsnrValue::Identical);
    }
    Ok(PsnrValue::Db(10.0 * (1.0 / mse).log10()))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean structural similarity over valid 11x11 Gaussian windows and
/// channels, with the standard stabilizers for peak 1.0.
///
/// Implemented with separable Gaussian filtering of the mean/second-moment
/// maps; the test-side oracle recomputes windows directly.
pub fn ssim<F: Scalar>(a: &ImageBatch<F>, b: &ImageBatch<F>) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::Shape("image batches differ in shape".into()));
    }
    let (h, w) = a.spatial();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidConfig(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let kernel = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let batch = a.batch_size();

    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..batch {
        for c in 0..3 {
            let pa = plane_f64(a, bi, c);
            let pb = plane_f64(b, bi, c);
            let mu_a = filter_valid(&pa, h, w, &kernel);
            let mu_b = filter_valid(&pb, h, w, &kernel);
            let aa = filter_valid(&elementwise_mul(&pa, &pa), h, w, &kernel);
            let bb = filter_valid(&elementwise_mul(&pb, &pb), h, w, &kernel);
            let ab = filter_valid(&elementwise_mul(&pa, &pb), h, w, &kernel);
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = aa[i] - ma * ma;
                let vb = bb[i] - mb * mb;
                let cov = ab[i] - ma * mb;
                let val = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += val;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn plane_f64<F: Scalar>(batch: &ImageBatch<F>, bi: usize, c: usize) -> Vec<f64> {
    let img = batch.image(bi);
    let plane = img.index_axis(ndarray::Axis(0), c);
    plane.iter().map(|v| v.to_f64c()).collect()
}

fn elementwise_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
}

/// Normalized Gaussian window weights (1D; the 2D window is separable).
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Separable windowed filtering on valid positions only: returns an
/// `(h - size + 1) * (w - size + 1)` map.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let size = kernel.len();
    let oh = h - size + 1;
    let ow = w - size + 1;
    // Horizontal pass over full rows.
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, &kj) in kernel.iter().enumerate() {
                acc += plane[y * w + x + j] * kj;
            }
            horiz[y * ow + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &ki) in kernel.iter().enumerate() {
                acc += horiz[(y + i) * ow + x] * ki;
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

//! Dataset ingestion and crop sampling.
//!
//! Two sources: a directory of common-format image files, or a procedural
//! synthetic corpus (smooth gradients, plaids, and blobs with mild texture
//! noise) so the framework trains and tests without external assets.
//! Training samples random crops of the configured size; a fixed tail of
//! the corpus is held out for periodic evaluation.

use std::sync::Mutex;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::stream_rng;
use crate::scalar::Scalar;

/// Full-size source images plus a held-out tail.
pub struct Dataset<F: Scalar> {
    train: Vec<Array3<F>>,
    holdout: Vec<Array3<F>>,
    epoch_cache: Mutex<Option<(u64, Vec<usize>)>>,
}

impl<F: Scalar> Dataset<F> {
    /// Load per the config. `crop_hw` is the training crop size; sources
    /// smaller than the crop are rejected (directory) or sized up
    /// (synthetic generates at twice the crop).
    pub fn load(config: &DataConfig, crop_hw: (usize, usize), master_seed: u64) -> Result<Self> {
        let images = match config.source.as_str() {
            "synthetic" => synthetic_corpus(config.synthetic_size, crop_hw, master_seed),
            "directory" => {
                let path = config
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("data.path is required".into()))?;
                load_directory(path, crop_hw)?
            }
            other => return Err(Error::InvalidConfig(format!("unknown data source '{other}'"))),
        };
        if images.is_empty() {
            return Err(Error::CorruptData("dataset is empty".into()));
        }
        let holdout_n = config.holdout.min(images.len() / 2).max(usize::from(images.len() > 1));
        let split = images.len() - holdout_n;
        let mut images = images;
        let holdout = images.split_off(split);
        Ok(Self { train: images, holdout, epoch_cache: Mutex::new(None) })
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn holdout_len(&self) -> usize {
        self.holdout.len()
    }

    /// Source image index for the `global_sample`-th draw: each epoch is one
    /// reshuffled pass over the corpus.
    fn train_index(&self, master_seed: u64, global_sample: u64) -> usize {
        let n = self.train.len() as u64;
        let epoch = global_sample / n;
        let pos = (global_sample % n) as usize;
        let mut cache = self.epoch_cache.lock().expect("epoch cache lock");
        let rebuild = !matches!(&*cache, Some((e, _)) if *e == epoch);
        if rebuild {
            let mut perm: Vec<usize> = (0..self.train.len()).collect();
            perm.shuffle(&mut stream_rng(master_seed, "epoch_shuffle", epoch));
            *cache = Some((epoch, perm));
        }
        cache.as_ref().expect("cache filled").1[pos]
    }

    /// Batch of random training crops for one step.
    pub fn train_batch(
        &self,
        batch: usize,
        crop_hw: (usize, usize),
        master_seed: u64,
        step: u64,
    ) -> Result<ImageBatch<F>> {
        let mut rng = stream_rng(master_seed, "crop", step);
        let mut out = Array4::<F>::zeros((batch, 3, crop_hw.0, crop_hw.1));
        for bi in 0..batch {
            let global = step * batch as u64 + bi as u64;
            let img = &self.train[self.train_index(master_seed, global)];
            copy_crop(img, &mut out, bi, crop_hw, &mut rng);
        }
        ImageBatch::new(out)
    }

    /// Deterministic evaluation crops drawn from the whole corpus (train and
    /// holdout), cycling images in order with seeded crop positions.
    pub fn eval_batch(
        &self,
        count: usize,
        crop_hw: (usize, usize),
        master_seed: u64,
    ) -> Result<ImageBatch<F>> {
        let mut rng = stream_rng(master_seed, "eval_crop", 0);
        let total = self.train.len() + self.holdout.len();
        let mut out = Array4::<F>::zeros((count, 3, crop_hw.0, crop_hw.1));
        for bi in 0..count {
            let idx = bi % total;
            let img = if idx < self.train.len() {
                &self.train[idx]
            } else {
                &self.holdout[idx - self.train.len()]
            };
            copy_crop(img, &mut out, bi, crop_hw, &mut rng);
        }
        ImageBatch::new(out)
    }

    /// Deterministic held-out crops (seeded positions, stable across calls).
    pub fn holdout_batch(
        &self,
        count: usize,
        crop_hw: (usize, usize),
        master_seed: u64,
    ) -> Result<ImageBatch<F>> {
        let mut rng = stream_rng(master_seed, "holdout_crop", 0);
        let n = count.min(self.holdout.len().max(1));
        let mut out = Array4::<F>::zeros((n, 3, crop_hw.0, crop_hw.1));
        for bi in 0..n {
            let img = &self.holdout[bi % self.holdout.len()];
            copy_crop(img, &mut out, bi, crop_hw, &mut rng);
        }
        ImageBatch::new(out)
    }
}

fn copy_crop<F: Scalar>(
    img: &Array3<F>,
    out: &mut Array4<F>,
    bi: usize,
    crop_hw: (usize, usize),
    rng: &mut impl Rng,
) {
    let (_, ih, iw) = img.dim();
    let top = if ih > crop_hw.0 { rng.gen_range(0..=ih - crop_hw.0) } else { 0 };
    let left = if iw > crop_hw.1 { rng.gen_range(0..=iw - crop_hw.1) } else { 0 };
    for c in 0..3 {
        for y in 0..crop_hw.0 {
            for x in 0..crop_hw.1 {
                out[(bi, c, y, x)] = img[(c, top + y, left + x)];
            }
        }
    }
}

/// Procedural corpus: random gradient + plaid + blobs + mild noise per image.
pub fn synthetic_corpus<F: Scalar>(
    count: usize,
    crop_hw: (usize, usize),
    master_seed: u64,
) -> Vec<Array3<F>> {
    let h = crop_hw.0 * 2;
    let w = crop_hw.1 * 2;
    (0..count).map(|i| synthetic_image(h, w, master_seed, i as u64)).collect()
}

pub fn synthetic_image<F: Scalar>(h: usize, w: usize, master_seed: u64, index: u64) -> Array3<F> {
    let mut rng = stream_rng(master_seed, "synthetic", index);
    let base: [f64; 3] = [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
    ];
    // Linear gradient direction and strength.
    let gtheta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let gstr: f64 = rng.gen_range(0.0..0.35);
    // Sinusoidal plaid.
    let fx: f64 = rng.gen_range(0.5..4.0);
    let fy: f64 = rng.gen_range(0.5..4.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let pstr: f64 = rng.gen_range(0.0..0.2);
    // Gaussian blobs.
    let n_blobs = rng.gen_range(1..4usize);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.05..0.3),
                rng.gen_range(-0.3..0.3),
            )
        })
        .collect();
    let noise_amp: f64 = rng.gen_range(0.01..0.05);
    let channel_tilt: [f64; 3] = [
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
    ];

    let (sin_t, cos_t) = gtheta.sin_cos();
    let mut img = Array3::<F>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w as f64;
            let v = y as f64 / h as f64;
            let grad = gstr * ((u - 0.5) * cos_t + (v - 0.5) * sin_t);
            let plaid = pstr
                * ((std::f64::consts::TAU * fx * u + phase).sin()
                    + (std::f64::consts::TAU * fy * v).sin())
                / 2.0;
            let mut blob_term = 0.0;
            for &(bx, by, sigma, amp) in &blobs {
                let d2 = (u - bx) * (u - bx) + (v - by) * (v - by);
                blob_term += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            let noise = noise_amp * (rng.gen::<f64>() - 0.5);
            for c in 0..3 {
                let val = base[c] + channel_tilt[c] * (u - v) + grad + plaid + blob_term + noise;
                img[(c, y, x)] = F::from_f64c(val.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn load_directory<F: Scalar>(
    path: &std::path::Path,
    crop_hw: (usize, usize),
) -> Result<Vec<Array3<F>>> {
    if !path.is_dir() {
        return Err(Error::InvalidConfig(format!(
            "dataset path '{}' is not a directory",
            path.display()
        )));
    }
    let mut files: Vec<_> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if ["png", "jpg", "jpeg", "bmp", "gif", "tiff", "tif"].contains(&e.as_str())
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::CorruptData(format!(
            "no image files found in '{}'",
            path.display()
        )));
    }
    let mut images = Vec::with_capacity(files.len());
    for file in &files {
        let img = image::open(file)
            .map_err(|e| Error::CorruptData(format!("{}: {e}", file.display())))?
            .to_rgb8();
        let (iw, ih) = (img.width() as usize, img.height() as usize);
        if ih < crop_hw.0 || iw < crop_hw.1 {
            continue; // smaller than one crop; unusable
        }
        let raw = img.into_raw();
        let mut arr = Array3::<F>::zeros((3, ih, iw));
        for y in 0..ih {
            for x in 0..iw {
                for c in 0..3 {
                    arr[(c, y, x)] = F::from_f64c(f64::from(raw[(y * iw + x) * 3 + c]) / 255.0);
                }
            }
        }
        images.push(arr);
    }
    if images.is_empty() {
        return Err(Error::CorruptData(
            "no dataset image is at least one crop in size".into(),
        ));
    }
    Ok(images)
}

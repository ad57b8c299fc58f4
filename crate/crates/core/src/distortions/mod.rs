//! The noise layer: parameterized image distortions and suites.
//!
//! During dual-decoder training every distortion is applied behind an
//! explicit gradient barrier ([`Distortion::apply_blocked_node`]): the
//! distorted batch re-enters the graph as a constant, so nothing upstream
//! receives gradient through it, whether or not the transform would have
//! been differentiable. A separate differentiable path
//! ([`Distortion::apply_differentiable_node`]) exists for the baseline
//! trainer that needs gradients to flow through the noise.
//!
//! Randomized distortions draw all randomness from an explicit seed, so an
//! application is a pure function of `(distortion, input, seed)`.

pub mod external;
pub mod geometry;

use std::io::Cursor;
use std::rc::Rc;

use ndarray::Array4;
use rand::Rng;

use crate::autodiff::ops::{Conv2dSpec, SparseTaps};
use crate::autodiff::{Tape, Var};
use crate::config::{DistortionSpec, ExternalCommandSpec, SuiteConfig};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::{seeded_rng, stream_rng};
use crate::scalar::Scalar;

/// A named, parameterized image transform. `apply` maps a valid batch to a
/// valid batch of the same shape (geometric transforms re-register onto the
/// original grid).
#[derive(Debug, Clone, PartialEq)]
pub struct Distortion {
    kind: Kind,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Identity,
    /// Additive Gaussian pixel noise, clamped back to `[0, 1]`.
    GaussianNoise { std: f64 },
    /// Gaussian blur, kernel radius `ceil(3 sigma)`, zero padding.
    GaussianFilter { sigma: f64 },
    /// Real codec round-trip: 8-bit quantize, JPEG encode at `quality`,
    /// decode, renormalize.
    JpegReal { quality: u8 },
    /// Rotation by an angle drawn uniformly from `[-deg, deg]` per image.
    Rotate { deg: f64 },
    /// Translation drawn uniformly from `[-dis*w, dis*w] x [-dis*h, dis*h]`.
    Translate { dis: f64 },
    /// Uniform center scaling by exactly `factor`, re-registered.
    Scale { factor: f64 },
    /// Horizontal shear by an angle drawn uniformly from `[-deg, deg]`.
    Shear { deg: f64 },
    /// Keep exactly `ceil(p*h*w)` pixels in a random rectangle, zero the rest.
    Crop { p: f64 },
    /// Replace a Bernoulli(`p`) pixel subset with cover pixels.
    Dropout { p: f64 },
    /// Replace one random rectangle (area fraction `p`) with cover pixels.
    Cropout { p: f64 },
    /// Per-image brightness/contrast/saturation factors drawn from `[lo, hi]`.
    ColorJitter { lo: f64, hi: f64 },
    /// Black-box external program.
    External { label: String, spec: ExternalCommandSpec },
}

fn param(spec: &DistortionSpec, key: &str) -> Option<f64> {
    spec.params.get(key).copied()
}

impl Distortion {
    pub fn identity() -> Self {
        Self { kind: Kind::Identity }
    }

    pub fn gaussian_noise(std: f64) -> Result<Self> {
        if !(std >= 0.0) {
            return Err(Error::InvalidConfig("gaussian_noise std must be >= 0".into()));
        }
        Ok(Self { kind: Kind::GaussianNoise { std } })
    }

    pub fn jpeg_real(quality: i64) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(Error::InvalidConfig(format!(
                "jpeg quality must be in [1, 100], got {quality}"
            )));
        }
        Ok(Self { kind: Kind::JpegReal { quality: quality as u8 } })
    }

    /// Build from a config entry, validating parameter ranges.
    pub fn from_spec(spec: &DistortionSpec) -> Result<Self> {
        let kind = match spec.name.as_str() {
            "identity" => Kind::Identity,
            "gaussian_noise" => {
                return Self::gaussian_noise(param(spec, "std").unwrap_or(0.01));
            }
            "gaussian_filter" => {
                let sigma = param(spec, "sigma").unwrap_or(2.0);
                if sigma <= 0.0 {
                    return Err(Error::InvalidConfig("gaussian_filter sigma must be > 0".into()));
                }
                Kind::GaussianFilter { sigma }
            }
            "jpeg_real" => {
                return Self::jpeg_real(param(spec, "quality").unwrap_or(50.0) as i64);
            }
            "rotate" => {
                let deg = param(spec, "deg").unwrap_or(10.0);
                if !(-45.0..=45.0).contains(&deg) {
                    return Err(Error::InvalidConfig("rotate deg must be in [-45, 45]".into()));
                }
                Kind::Rotate { deg: deg.abs() }
            }
            "translate" => {
                let dis = param(spec, "dis").unwrap_or(0.05);
                if !(0.0..=0.5).contains(&dis) {
                    return Err(Error::InvalidConfig("translate dis must be in [0, 0.5]".into()));
                }
                Kind::Translate { dis }
            }
            "scale" => {
                let factor = param(spec, "f").unwrap_or(0.65);
                if !(factor > 0.0 && factor <= 2.0) {
                    return Err(Error::InvalidConfig("scale f must be in (0, 2]".into()));
                }
                Kind::Scale { factor }
            }
            "shear" => {
                let deg = param(spec, "deg").unwrap_or(10.0);
                if !(-45.0..=45.0).contains(&deg) {
                    return Err(Error::InvalidConfig("shear deg must be in [-45, 45]".into()));
                }
                Kind::Shear { deg: deg.abs() }
            }
            "crop" => {
                let p = param(spec, "p").unwrap_or(0.1);
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidConfig("crop p must be in (0, 1]".into()));
                }
                Kind::Crop { p }
            }
            "dropout" => {
                let p = param(spec, "p").unwrap_or(0.5);
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidConfig("dropout p must be in (0, 1]".into()));
                }
                Kind::Dropout { p }
            }
            "cropout" => {
                let p = param(spec, "p").unwrap_or(0.3);
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::InvalidConfig("cropout p must be in (0, 1]".into()));
                }
                Kind::Cropout { p }
            }
            "color_jitter" => {
                let lo = param(spec, "min").unwrap_or(0.8);
                let hi = param(spec, "max").unwrap_or(1.2);
                if !(lo > 0.0 && hi >= lo) {
                    return Err(Error::InvalidConfig("color_jitter range invalid".into()));
                }
                Kind::ColorJitter { lo, hi }
            }
            "external" => {
                let spec_cmd = spec.command.clone().ok_or_else(|| {
                    Error::InvalidConfig("external distortion needs a command".into())
                })?;
                Kind::External { label: format!("external:{}", spec_cmd.program), spec: spec_cmd }
            }
            other => {
                return Err(Error::InvalidConfig(format!("unknown distortion '{other}'")));
            }
        };
        Ok(Self { kind })
    }

    pub fn name(&self) -> String {
        match &self.kind {
            Kind::Identity => "identity".into(),
            Kind::GaussianNoise { .. } => "gaussian_noise".into(),
            Kind::GaussianFilter { .. } => "gaussian_filter".into(),
            Kind::JpegReal { .. } => "jpeg_real".into(),
            Kind::Rotate { .. } => "rotate".into(),
            Kind::Translate { .. } => "translate".into(),
            Kind::Scale { .. } => "scale".into(),
            Kind::Shear { .. } => "shear".into(),
            Kind::Crop { .. } => "crop".into(),
            Kind::Dropout { .. } => "dropout".into(),
            Kind::Cropout { .. } => "cropout".into(),
            Kind::ColorJitter { .. } => "color_jitter".into(),
            Kind::External { label, .. } => label.clone(),
        }
    }

    pub fn params_label(&self) -> String {
        match &self.kind {
            Kind::Identity => String::new(),
            Kind::GaussianNoise { std } => format!("std={std}"),
            Kind::GaussianFilter { sigma } => format!("sigma={sigma}"),
            Kind::JpegReal { quality } => format!("q={quality}"),
            Kind::Rotate { deg } => format!("deg={deg}"),
            Kind::Translate { dis } => format!("dis={dis}"),
            Kind::Scale { factor } => format!("f={factor}"),
            Kind::Shear { deg } => format!("deg={deg}"),
            Kind::Crop { p } => format!("p={p}"),
            Kind::Dropout { p } => format!("p={p}"),
            Kind::Cropout { p } => format!("p={p}"),
            Kind::ColorJitter { lo, hi } => format!("range=[{lo},{hi}]"),
            Kind::External { spec, .. } => format!("timeout={}s", spec.timeout_secs),
        }
    }

    /// Metadata only: whether the underlying map is differentiable in
    /// principle. Dual-decoder training blocks gradients regardless.
    pub fn intrinsically_differentiable(&self) -> bool {
        !matches!(self.kind, Kind::JpegReal { .. } | Kind::External { .. })
    }

    /// Whether [`Distortion::apply_differentiable_node`] supports this
    /// distortion. Codec round-trips and external programs never do; color
    /// jitter is differentiable in principle but has no graph form here.
    pub fn supports_differentiable_application(&self) -> bool {
        !matches!(
            self.kind,
            Kind::JpegReal { .. } | Kind::External { .. } | Kind::ColorJitter { .. }
        )
    }

    /// Whether this distortion reads the cover batch (mask replacements do).
    pub fn requires_cover(&self) -> bool {
        matches!(self.kind, Kind::Dropout { .. } | Kind::Cropout { .. })
    }

    pub fn jpeg_quality(&self) -> Option<u8> {
        match self.kind {
            Kind::JpegReal { quality } => Some(quality),
            _ => None,
        }
    }

    fn cover_for<'a, F: Scalar>(
        &self,
        cover: Option<&'a ImageBatch<F>>,
    ) -> Result<Option<&'a ImageBatch<F>>> {
        if self.requires_cover() && cover.is_none() {
            return Err(Error::InvalidConfig(format!(
                "{} requires the cover image batch",
                self.name()
            )));
        }
        Ok(cover)
    }

    /// Apply as a pure value transform. Deterministic for a fixed seed.
    pub fn apply<F: Scalar>(
        &self,
        watermarked: &ImageBatch<F>,
        cover: Option<&ImageBatch<F>>,
        seed: u64,
    ) -> Result<ImageBatch<F>> {
        let cover = self.cover_for(cover)?;
        let (h, w) = watermarked.spatial();
        let b = watermarked.batch_size();
        match self.plan::<F>(b, h, w, seed)? {
            Plan::Identity => Ok(watermarked.clone()),
            Plan::AddNoise(noise) => ImageBatch::new(watermarked.data() + &noise),
            Plan::Filter { kernel } => {
                Ok(apply_filter_value(watermarked, &kernel))
            }
            Plan::Warp(plans) => {
                let mut out = Array4::<F>::zeros((b, 3, h, w));
                for bi in 0..b {
                    for c in 0..3 {
                        let item = watermarked.data().index_axis(ndarray::Axis(0), bi);
                        let plane = item.index_axis(ndarray::Axis(0), c);
                        let src = plane.as_slice().expect("contiguous plane");
                        let mut t = out.index_axis_mut(ndarray::Axis(0), bi);
                        let mut d = t.index_axis_mut(ndarray::Axis(0), c);
                        plans[bi].apply_plane(src, d.as_slice_mut().expect("contiguous plane"));
                    }
                }
                ImageBatch::new(out)
            }
            Plan::Mask { keep, use_cover } => {
                let mut out = watermarked.data().clone();
                for bi in 0..b {
                    let mask = &keep[bi];
                    for y in 0..h {
                        for x in 0..w {
                            if mask[y * w + x] == 0 {
                                for c in 0..3 {
                                    out[(bi, c, y, x)] = if use_cover {
                                        cover.expect("cover checked").data()[(bi, c, y, x)]
                                    } else {
                                        F::zero()
                                    };
                                }
                            }
                        }
                    }
                }
                ImageBatch::new(out)
            }
            Plan::Color(factors) => Ok(apply_color_value(watermarked, &factors)),
            Plan::Jpeg { quality } => jpeg_round_trip(watermarked, quality),
            Plan::External { label, spec } => {
                external::apply_external(&label, &spec, watermarked, seed)
            }
        }
    }

    /// Apply behind the gradient barrier: the result enters the tape as a
    /// constant leaf with no linkage to `watermarked`.
    pub fn apply_blocked_node<F: Scalar>(
        &self,
        tape: &Tape<F>,
        watermarked: Var,
        cover: Option<&ImageBatch<F>>,
        seed: u64,
    ) -> Result<Var> {
        let value = ImageBatch::from_dyn(tape.value(watermarked).as_ref().clone())?;
        let distorted = self.apply(&value, cover, seed)?;
        Ok(tape.constant(distorted.into_data().into_dyn()))
    }

    /// Apply inside the graph so gradients flow through the distortion.
    /// Only transforms with a tractable differentiable form support this;
    /// codec round-trips and external programs do not.
    pub fn apply_differentiable_node<F: Scalar>(
        &self,
        tape: &Tape<F>,
        watermarked: Var,
        cover: Option<&ImageBatch<F>>,
        seed: u64,
    ) -> Result<Var> {
        let cover = self.cover_for(cover)?;
        let shape = tape.value(watermarked).shape().to_vec();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        match self.plan::<F>(b, h, w, seed)? {
            Plan::Identity => Ok(watermarked),
            Plan::AddNoise(noise) => {
                let n = tape.constant(noise.into_dyn());
                Ok(tape.clamp01(tape.add(watermarked, n)))
            }
            Plan::Filter { kernel } => {
                let weight = tape.constant(filter_weight(&kernel).into_dyn());
                let radius = (kernel.len() - 1) / 2;
                Ok(tape.conv2d(watermarked, weight, None, Conv2dSpec { stride: 1, pad: radius }))
            }
            Plan::Warp(plans) => Ok(tape.warp(watermarked, plans)),
            Plan::Mask { keep, use_cover } => {
                let mut mask = Array4::<F>::zeros((b, 3, h, w));
                let mut filler = Array4::<F>::zeros((b, 3, h, w));
                for bi in 0..b {
                    for y in 0..h {
                        for x in 0..w {
                            if keep[bi][y * w + x] == 1 {
                                for c in 0..3 {
                                    mask[(bi, c, y, x)] = F::one();
                                }
                            } else if use_cover {
                                for c in 0..3 {
                                    filler[(bi, c, y, x)] =
                                        cover.expect("cover checked").data()[(bi, c, y, x)];
                                }
                            }
                        }
                    }
                }
                let m = tape.constant(mask.into_dyn());
                let f = tape.constant(filler.into_dyn());
                Ok(tape.add(tape.mul(watermarked, m), f))
            }
            Plan::Color(_) | Plan::Jpeg { .. } | Plan::External { .. } => {
                Err(Error::InvalidConfig(format!(
                    "distortion '{}' has no differentiable form; it can only be gradient-blocked",
                    self.name()
                )))
            }
        }
    }

    /// The sampled concrete transform for a batch, shared by the value and
    /// graph paths so both see the identical draw.
    fn plan<F: Scalar>(&self, b: usize, h: usize, w: usize, seed: u64) -> Result<Plan<F>> {
        let mut rng = seeded_rng(seed);
        Ok(match &self.kind {
            Kind::Identity => Plan::Identity,
            Kind::GaussianNoise { std } => {
                if *std == 0.0 {
                    return Ok(Plan::Identity);
                }
                let noise = Array4::from_shape_simple_fn((b, 3, h, w), || {
                    F::from_f64c(normal_draw(&mut rng) * std)
                });
                Plan::AddNoise(noise)
            }
            Kind::GaussianFilter { sigma } => Plan::Filter { kernel: gaussian_kernel(*sigma) },
            Kind::JpegReal { quality } => Plan::Jpeg { quality: *quality },
            Kind::Rotate { deg } => {
                let plans = (0..b)
                    .map(|_| {
                        let angle = sample_symmetric(&mut rng, *deg);
                        geometry::rotate_plan::<F>(h, w, angle)
                    })
                    .collect();
                Plan::Warp(Rc::new(plans))
            }
            Kind::Translate { dis } => {
                let plans = (0..b)
                    .map(|_| {
                        let dy = sample_symmetric(&mut rng, dis * h as f64);
                        let dx = sample_symmetric(&mut rng, dis * w as f64);
                        geometry::translate_plan::<F>(h, w, dy, dx)
                    })
                    .collect();
                Plan::Warp(Rc::new(plans))
            }
            Kind::Scale { factor } => {
                let plan = geometry::scale_plan::<F>(h, w, *factor);
                Plan::Warp(Rc::new(vec![plan; b]))
            }
            Kind::Shear { deg } => {
                let plans = (0..b)
                    .map(|_| {
                        let angle = sample_symmetric(&mut rng, *deg);
                        geometry::shear_plan::<F>(h, w, angle)
                    })
                    .collect();
                Plan::Warp(Rc::new(plans))
            }
            Kind::Crop { p } => {
                let keep = (0..b)
                    .map(|_| {
                        let target = ((p * (h * w) as f64).ceil() as usize).clamp(1, h * w);
                        let (rh, rw) = geometry::crop_rect_dims(h, w, target);
                        let top = rng.gen_range(0..=(h - rh));
                        let left = rng.gen_range(0..=(w - rw));
                        geometry::crop_mask(h, w, *p, top, left)
                    })
                    .collect();
                Plan::Mask { keep, use_cover: false }
            }
            Kind::Dropout { p } => {
                let keep = (0..b)
                    .map(|_| {
                        (0..h * w)
                            .map(|_| u8::from(!(rng.gen::<f64>() < *p)))
                            .collect::<Vec<u8>>()
                    })
                    .collect();
                Plan::Mask { keep, use_cover: true }
            }
            Kind::Cropout { p } => {
                let keep = (0..b)
                    .map(|_| {
                        let rh = ((p.sqrt() * h as f64).round() as usize).clamp(1, h);
                        let rw = ((p.sqrt() * w as f64).round() as usize).clamp(1, w);
                        let top = rng.gen_range(0..=(h - rh));
                        let left = rng.gen_range(0..=(w - rw));
                        let mut mask = vec![1u8; h * w];
                        for y in top..top + rh {
                            for x in left..left + rw {
                                mask[y * w + x] = 0;
                            }
                        }
                        mask
                    })
                    .collect();
                Plan::Mask { keep, use_cover: true }
            }
            Kind::ColorJitter { lo, hi } => {
                let factors = (0..b)
                    .map(|_| ColorFactors {
                        brightness: rng.gen_range(*lo..=*hi),
                        contrast: rng.gen_range(*lo..=*hi),
                        saturation: rng.gen_range(*lo..=*hi),
                    })
                    .collect();
                Plan::Color(factors)
            }
            Kind::External { label, spec } => {
                Plan::External { label: label.clone(), spec: spec.clone() }
            }
        })
    }
}

enum Plan<F: Scalar> {
    Identity,
    AddNoise(Array4<F>),
    Filter { kernel: Vec<f64> },
    Warp(Rc<Vec<SparseTaps<F>>>),
    Mask { keep: Vec<Vec<u8>>, use_cover: bool },
    Color(Vec<ColorFactors>),
    Jpeg { quality: u8 },
    External { label: String, spec: ExternalCommandSpec },
}

#[derive(Debug, Clone, Copy)]
struct ColorFactors {
    brightness: f64,
    contrast: f64,
    saturation: f64,
}

fn sample_symmetric(rng: &mut impl Rng, magnitude: f64) -> f64 {
    if magnitude == 0.0 {
        return 0.0;
    }
    rng.gen_range(-magnitude..=magnitude)
}

fn normal_draw(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Normalized 1D Gaussian kernel with radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> =
        (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    kernel
}

/// Full 2D blur weight `(3, 3, k, k)` as the outer product of the 1D kernel;
/// channels do not mix.
fn filter_weight<F: Scalar>(kernel: &[f64]) -> Array4<F> {
    let k = kernel.len();
    let mut weight = Array4::<F>::zeros((3, 3, k, k));
    for c in 0..3 {
        for (i, &ki) in kernel.iter().enumerate() {
            for (j, &kj) in kernel.iter().enumerate() {
                weight[(c, c, i, j)] = F::from_f64c(ki * kj);
            }
        }
    }
    weight
}

fn apply_filter_value<F: Scalar>(batch: &ImageBatch<F>, kernel: &[f64]) -> ImageBatch<F> {
    let (h, w) = batch.spatial();
    let b = batch.batch_size();
    let k = kernel.len();
    let radius = (k - 1) as i64 / 2;
    let kf: Vec<F> = kernel.iter().map(|&v| F::from_f64c(v)).collect();
    let data = batch.data();
    let mut out = Array4::<F>::zeros((b, 3, h, w));
    for bi in 0..b {
        for c in 0..3 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let mut acc = F::zero();
                    for (i, &ki) in kf.iter().enumerate() {
                        let sy = y + i as i64 - radius;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        for (j, &kj) in kf.iter().enumerate() {
                            let sx = x + j as i64 - radius;
                            if sx < 0 || sx >= w as i64 {
                                continue;
                            }
                            acc += data[(bi, c, sy as usize, sx as usize)] * ki * kj;
                        }
                    }
                    out[(bi, c, y as usize, x as usize)] = acc;
                }
            }
        }
    }
    ImageBatch::new(out).expect("filter output valid")
}

fn apply_color_value<F: Scalar>(batch: &ImageBatch<F>, factors: &[ColorFactors]) -> ImageBatch<F> {
    let (h, w) = batch.spatial();
    let b = batch.batch_size();
    let mut out = batch.data().clone();
    for (bi, f) in factors.iter().enumerate().take(b) {
        let brightness = F::from_f64c(f.brightness);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[(bi, c, y, x)] = out[(bi, c, y, x)] * brightness;
                }
            }
        }
        // Contrast pulls toward the image's mean intensity.
        let mut mean = F::zero();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    mean += out[(bi, c, y, x)];
                }
            }
        }
        mean = mean / F::from_f64c((3 * h * w) as f64);
        let contrast = F::from_f64c(f.contrast);
        let one_minus_c = F::one() - contrast;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[(bi, c, y, x)] = contrast * out[(bi, c, y, x)] + one_minus_c * mean;
                }
            }
        }
        // Saturation pulls each pixel toward its own gray value.
        let sat = F::from_f64c(f.saturation);
        let one_minus_s = F::one() - sat;
        let third = F::from_f64c(1.0 / 3.0);
        for y in 0..h {
            for x in 0..w {
                let gray =
                    (out[(bi, 0, y, x)] + out[(bi, 1, y, x)] + out[(bi, 2, y, x)]) * third;
                for c in 0..3 {
                    out[(bi, c, y, x)] = sat * out[(bi, c, y, x)] + one_minus_s * gray;
                }
            }
        }
    }
    ImageBatch::new(out).expect("color output valid")
}

/// Round-trip each image through a real baseline JPEG codec at `quality`.
pub fn jpeg_round_trip<F: Scalar>(batch: &ImageBatch<F>, quality: u8) -> Result<ImageBatch<F>> {
    let (h, w) = batch.spatial();
    let b = batch.batch_size();
    let mut out = Array4::<F>::zeros((b, 3, h, w));
    for i in 0..b {
        let pixels = batch.to_rgb8(i);
        let img = image::RgbImage::from_raw(w as u32, h as u32, pixels)
            .ok_or_else(|| Error::Shape("pixel buffer size mismatch".into()))?;
        let mut encoded = Vec::new();
        let encoder =
            image::codecs::jpeg::JpegEncoder::new_with_quality(Cursor::new(&mut encoded), quality);
        img.write_with_encoder(encoder).map_err(|e| Error::DistortionFailed {
            name: "jpeg_real".into(),
            reason: format!("encode: {e}"),
        })?;
        let decoded = image::load_from_memory(&encoded).map_err(|e| Error::DistortionFailed {
            name: "jpeg_real".into(),
            reason: format!("decode: {e}"),
        })?;
        let rgb = decoded.to_rgb8();
        if rgb.width() as usize != w || rgb.height() as usize != h {
            return Err(Error::DistortionFailed {
                name: "jpeg_real".into(),
                reason: "codec changed dimensions".into(),
            });
        }
        let raw = rgb.into_raw();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(i, c, y, x)] = F::from_f64c(f64::from(raw[(y * w + x) * 3 + c]) / 255.0);
                }
            }
        }
    }
    ImageBatch::new(out)
}

/// Convenience wrapper matching the registry call shape.
pub fn apply_blocked<F: Scalar>(
    d: &Distortion,
    watermarked: &ImageBatch<F>,
    cover: Option<&ImageBatch<F>>,
    seed: u64,
) -> Result<ImageBatch<F>> {
    d.apply(watermarked, cover, seed)
}

// ---- Suites ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteMode {
    /// Round-robin over entries in order, by step index.
    Fixed,
    /// Weight-proportional random choice per step.
    RandomOneOf,
}

/// An ordered, weighted collection of distortions with a sampling mode.
#[derive(Debug, Clone)]
pub struct DistortionSuite {
    entries: Vec<(Distortion, f64)>,
    mode: SuiteMode,
}

impl DistortionSuite {
    pub fn new(entries: Vec<(Distortion, f64)>, mode: SuiteMode) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidConfig("distortion suite must be non-empty".into()));
        }
        if entries.iter().any(|(_, w)| !(w > &0.0)) {
            return Err(Error::InvalidConfig("distortion weights must be > 0".into()));
        }
        Ok(Self { entries, mode })
    }

    pub fn from_config(cfg: &SuiteConfig) -> Result<Self> {
        let mode = match cfg.mode.as_str() {
            "fixed" => SuiteMode::Fixed,
            "random" => SuiteMode::RandomOneOf,
            other => return Err(Error::InvalidConfig(format!("unknown suite mode '{other}'"))),
        };
        let entries = cfg
            .entries
            .iter()
            .map(|spec| Ok((Distortion::from_spec(spec)?, spec.weight)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, mode)
    }

    pub fn entries(&self) -> impl Iterator<Item = &Distortion> {
        self.entries.iter().map(|(d, _)| d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mode(&self) -> SuiteMode {
        self.mode
    }

    /// Weight-proportional draw; a pure function of the seed.
    pub fn sample(&self, seed: u64) -> &Distortion {
        let total: f64 = self.entries.iter().map(|(_, w)| w).sum();
        let mut rng = seeded_rng(seed);
        let mut u = rng.gen_range(0.0..total);
        for (d, w) in &self.entries {
            if u < *w {
                return d;
            }
            u -= w;
        }
        &self.entries.last().expect("non-empty suite").0
    }

    /// The distortion used at a given training step, honoring the mode.
    pub fn pick(&self, step: u64, master_seed: u64) -> &Distortion {
        match self.mode {
            SuiteMode::Fixed => &self.entries[(step % self.entries.len() as u64) as usize].0,
            SuiteMode::RandomOneOf => {
                self.sample(crate::rng::derive_seed(master_seed, "suite_pick", step))
            }
        }
    }

    /// Seed for applying a distortion at a given step.
    pub fn application_seed(&self, step: u64, master_seed: u64) -> u64 {
        crate::rng::derive_seed(master_seed, "distortion_apply", step)
    }
}

/// Free-function form of the weighted draw.
pub fn sample_suite(suite: &DistortionSuite, seed: u64) -> &Distortion {
    suite.sample(seed)
}

/// Deterministic per-purpose rng seed helper for distortion application.
pub fn distortion_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut r = stream_rng(master, purpose, index);
    r.gen()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn gray_batch(b: usize, h: usize, w: usize, v: f64) -> ImageBatch<f64> {
        ImageBatch::splat(b, h, w, v).unwrap()
    }

    fn textured_batch(b: usize, h: usize, w: usize, seed: u64) -> ImageBatch<f64> {
        let mut rng = seeded_rng(seed);
        // Smooth gradient plus mild noise, kept away from the clamp edges.
        let data = Array4::from_shape_fn((b, 3, h, w), |(_, c, y, x)| {
            0.25 + 0.5 * ((x as f64 / w as f64) + (y as f64 / h as f64)) / 2.0
                + 0.05 * ((c as f64) - 1.0) / 3.0
                + rng.gen_range(-0.02..0.02)
        });
        ImageBatch::new(data).unwrap()
    }

    #[test]
    fn identity_is_elementwise_equal() {
        let x = textured_batch(2, 16, 16, 1);
        let d = Distortion::identity();
        let y = d.apply(&x, None, 0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn gaussian_noise_mean_abs_matches_half_normal() {
        // E|N(0, std)| = std * sqrt(2/pi) ~= 0.007979 for std = 0.01.
        let x = gray_batch(8, 64, 64, 0.5);
        let d = Distortion::gaussian_noise(0.01).unwrap();
        let y = d.apply(&x, None, 3).unwrap();
        let n = x.data().len() as f64;
        let mean_abs: f64 = x
            .data()
            .iter()
            .zip(y.data().iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let expected = 0.01 * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean_abs - expected).abs() < 0.1 * expected,
            "mean |diff| {mean_abs} vs {expected}"
        );
    }

    #[test]
    fn jpeg_round_trip_is_deterministic_and_lossy() {
        let x = textured_batch(1, 32, 32, 2);
        let d = Distortion::jpeg_real(50).unwrap();
        let a = d.apply(&x, None, 0).unwrap();
        let b = d.apply(&x, None, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
        let mse = a.mse(&x).unwrap();
        assert!(mse.is_finite() && mse > 0.0);
    }

    #[test]
    fn jpeg_quality_bounds_rejected() {
        assert!(matches!(Distortion::jpeg_real(0), Err(Error::InvalidConfig(_))));
        assert!(matches!(Distortion::jpeg_real(101), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn jpeg_q100_keeps_high_fidelity_on_desk_corpus() {
        // 16-image corpus; PSNR of the q=100 round-trip should stay >= 40 dB.
        let d = Distortion::jpeg_real(100).unwrap();
        for seed in 0..16 {
            let x = textured_batch(1, 32, 32, 100 + seed);
            let y = d.apply(&x, None, 0).unwrap();
            let mse = y.mse(&x).unwrap();
            let psnr = 10.0 * (1.0 / mse).log10();
            assert!(psnr >= 40.0, "seed {seed}: psnr {psnr}");
        }
    }

    #[test]
    fn zero_rotation_and_unit_scale_are_identity() {
        let x = textured_batch(2, 16, 16, 4);
        let rot = Distortion::from_spec(&DistortionSpec::named("rotate", &[("deg", 0.0)])).unwrap();
        let y = rot.apply(&x, None, 9).unwrap();
        let max_diff = x
            .data()
            .iter()
            .zip(y.data().iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "rotate(0) max diff {max_diff}");

        let sc = Distortion::from_spec(&DistortionSpec::named("scale", &[("f", 1.0)])).unwrap();
        let y = sc.apply(&x, None, 9).unwrap();
        let max_diff = x
            .data()
            .iter()
            .zip(y.data().iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "scale(1) max diff {max_diff}");
    }

    #[test]
    fn crop_keeps_exact_pixel_count() {
        // Strictly positive image, so retained pixels are exactly the nonzero ones.
        let x = gray_batch(1, 32, 32, 0.5);
        let d = Distortion::from_spec(&DistortionSpec::named("crop", &[("p", 0.1)])).unwrap();
        let y = d.apply(&x, None, 5).unwrap();
        let target = (0.1f64 * 32.0 * 32.0).ceil() as usize;
        let nonzero = y.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, target * 3, "per channel");
    }

    #[test]
    fn dropout_fraction_concentrates_and_full_replacement_yields_cover() {
        let x = gray_batch(1, 128, 128, 0.25);
        let cover = gray_batch(1, 128, 128, 0.75);
        let d = Distortion::from_spec(&DistortionSpec::named("dropout", &[("p", 0.5)])).unwrap();
        let y = d.apply(&x, Some(&cover), 6).unwrap();
        let total = 128 * 128;
        let replaced = y
            .data()
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .filter(|&&v| v == 0.75)
            .count();
        let frac = replaced as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.02, "replaced fraction {frac}");

        let full = Distortion::from_spec(&DistortionSpec::named("dropout", &[("p", 1.0)])).unwrap();
        let y = full.apply(&x, Some(&cover), 7).unwrap();
        assert_eq!(y, cover);
    }

    #[test]
    fn dropout_without_cover_is_config_error() {
        let x = gray_batch(1, 16, 16, 0.5);
        let d = Distortion::from_spec(&DistortionSpec::named("dropout", &[("p", 0.5)])).unwrap();
        assert!(matches!(d.apply(&x, None, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn cropout_mask_is_single_rectangle() {
        let x = gray_batch(1, 32, 32, 0.2);
        let cover = gray_batch(1, 32, 32, 0.9);
        let d = Distortion::from_spec(&DistortionSpec::named("cropout", &[("p", 0.3)])).unwrap();
        let y = d.apply(&x, Some(&cover), 8).unwrap();
        // Collect replaced coordinates; they must fill their bounding box.
        let plane = y.data().index_axis(ndarray::Axis(0), 0);
        let plane = plane.index_axis(ndarray::Axis(0), 0);
        let mut min_y = usize::MAX;
        let mut max_y = 0;
        let mut min_x = usize::MAX;
        let mut max_x = 0;
        let mut count = 0;
        for y_i in 0..32 {
            for x_i in 0..32 {
                if plane[(y_i, x_i)] == 0.9 {
                    min_y = min_y.min(y_i);
                    max_y = max_y.max(y_i);
                    min_x = min_x.min(x_i);
                    max_x = max_x.max(x_i);
                    count += 1;
                }
            }
        }
        assert!(count > 0);
        assert_eq!(count, (max_y - min_y + 1) * (max_x - min_x + 1));
    }

    #[test]
    fn every_output_pixel_is_watermarked_or_cover() {
        let x = textured_batch(1, 16, 16, 10);
        let cover = textured_batch(1, 16, 16, 11);
        for name in ["dropout", "cropout"] {
            let d = Distortion::from_spec(&DistortionSpec::named(name, &[("p", 0.4)])).unwrap();
            let y = d.apply(&x, Some(&cover), 12).unwrap();
            for ((a, b), o) in x.data().iter().zip(cover.data().iter()).zip(y.data().iter()) {
                assert!(o == a || o == b, "{name}: pixel neither source");
            }
        }
    }

    #[test]
    fn suite_sampling_is_weight_proportional() {
        let single = DistortionSuite::new(
            vec![(Distortion::identity(), 1.0)],
            SuiteMode::RandomOneOf,
        )
        .unwrap();
        for seed in 0..32 {
            assert_eq!(single.sample(seed).name(), "identity");
        }

        let even = DistortionSuite::new(
            vec![
                (Distortion::identity(), 1.0),
                (Distortion::gaussian_noise(0.01).unwrap(), 1.0),
            ],
            SuiteMode::RandomOneOf,
        )
        .unwrap();
        let mut first = 0usize;
        for seed in 0..10_000u64 {
            if even.sample(seed).name() == "identity" {
                first += 1;
            }
        }
        let frac = first as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "even weights frac {frac}");

        let skewed = DistortionSuite::new(
            vec![
                (Distortion::identity(), 3.0),
                (Distortion::gaussian_noise(0.01).unwrap(), 1.0),
            ],
            SuiteMode::RandomOneOf,
        )
        .unwrap();
        let mut first = 0usize;
        for seed in 0..10_000u64 {
            if skewed.sample(seed).name() == "identity" {
                first += 1;
            }
        }
        let frac = first as f64 / 10_000.0;
        assert!((frac - 0.75).abs() < 0.02, "3:1 weights frac {frac}");
    }

    #[test]
    fn empty_suite_rejected() {
        assert!(matches!(
            DistortionSuite::new(vec![], SuiteMode::Fixed),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn fixed_mode_cycles_in_order() {
        let suite = DistortionSuite::new(
            vec![
                (Distortion::identity(), 1.0),
                (Distortion::gaussian_noise(0.01).unwrap(), 1.0),
                (Distortion::jpeg_real(50).unwrap(), 1.0),
            ],
            SuiteMode::Fixed,
        )
        .unwrap();
        let names: Vec<String> = (0..6).map(|s| suite.pick(s, 0).name()).collect();
        assert_eq!(
            names,
            vec!["identity", "gaussian_noise", "jpeg_real", "identity", "gaussian_noise", "jpeg_real"]
        );
    }

    #[test]
    fn blocked_application_carries_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = textured_batch(1, 16, 16, 13);
        let xv = tape.leaf(x.data().clone().into_dyn(), true);
        let d = Distortion::gaussian_noise(0.05).unwrap();
        let blocked = d.apply_blocked_node(&tape, xv, None, 1).unwrap();
        let target = tape.constant(ndarray::ArrayD::zeros(tape.value(blocked).raw_dim()));
        let loss = tape.mse(blocked, target);
        let grads = tape.backward(loss);
        assert!(grads.get(xv).is_none(), "barrier leaked gradient");
    }

    #[test]
    fn differentiable_application_carries_gradient() {
        let tape = Tape::<f64>::new();
        let x = textured_batch(1, 16, 16, 14);
        let xv = tape.leaf(x.data().clone().into_dyn(), true);
        let d = Distortion::gaussian_noise(0.05).unwrap();
        let noisy = d.apply_differentiable_node(&tape, xv, None, 1).unwrap();
        let target = tape.constant(ndarray::ArrayD::zeros(tape.value(noisy).raw_dim()));
        let loss = tape.mse(noisy, target);
        let grads = tape.backward(loss);
        assert!(grads.get(xv).is_some());
    }

    #[test]
    fn differentiable_path_rejects_codec_distortions() {
        let tape = Tape::<f64>::new();
        let x = textured_batch(1, 16, 16, 15);
        let xv = tape.leaf(x.data().clone().into_dyn(), true);
        let d = Distortion::jpeg_real(50).unwrap();
        assert!(matches!(
            d.apply_differentiable_node(&tape, xv, None, 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn value_and_graph_paths_agree_for_shared_plans() {
        let x = textured_batch(2, 16, 16, 16);
        for spec in [
            DistortionSpec::named("rotate", &[("deg", 10.0)]),
            DistortionSpec::named("translate", &[("dis", 0.05)]),
            DistortionSpec::named("scale", &[("f", 0.65)]),
            DistortionSpec::named("shear", &[("deg", 10.0)]),
            DistortionSpec::named("crop", &[("p", 0.3)]),
        ] {
            let d = Distortion::from_spec(&spec).unwrap();
            let value = d.apply(&x, None, 21).unwrap();
            let tape = Tape::<f64>::new();
            let xv = tape.constant(x.data().clone().into_dyn());
            let node = d.apply_differentiable_node(&tape, xv, None, 21).unwrap();
            let graph_val = tape.value(node);
            for (a, b) in value.data().iter().zip(graph_val.iter()) {
                assert!((a - b).abs() < 1e-12, "{}: {a} vs {b}", d.name());
            }
        }
    }
}

//! Image batches: the carrier type for cover, watermarked, and distorted images.

use ndarray::{Array4, ArrayD, ArrayView3, Ix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MIN_SIDE: usize = 16;

/// A batch of RGB images, shape `(batch, 3, h, w)`, values in `[0, 1]`.
///
/// Values are clamped to `[0, 1]` at module boundaries; NaN/Inf are rejected.
/// 8-bit files convert by dividing by 255.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ImageBatch<F: Scalar> {
    data: Array4<F>,
    /// Whether this batch should be a gradient target when inserted into a graph.
    pub requires_gradient: bool,
}

impl<F: Scalar> ImageBatch<F> {
    /// Validate and clamp a raw tensor into an image batch.
    ///
    /// NaN/Inf anywhere is a corrupt-data error; out-of-range values are
    /// clamped to `[0, 1]`.
    pub fn new(data: Array4<F>) -> Result<Self> {
        let (_, c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Shape(format!(
                "image sides must be >= {MIN_SIDE}, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptData("image contains NaN or Inf".into()));
        }
        let zero = F::zero();
        let one = F::one();
        let data = data.mapv(|v| v.max(zero).min(one));
        Ok(Self { data, requires_gradient: false })
    }

    /// Like [`ImageBatch::new`] but from a dynamic-rank tensor; wrong rank is
    /// a shape error.
    pub fn from_dyn(data: ArrayD<F>) -> Result<Self> {
        let data = data
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Shape("image batch must have rank 4 (b, 3, h, w)".into()))?;
        Self::new(data)
    }

    pub fn zeros(batch: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(Array4::zeros((batch, 3, h, w)))
    }

    /// Constant-valued batch, mostly for tests.
    pub fn splat(batch: usize, h: usize, w: usize, value: f64) -> Result<Self> {
        Self::new(Array4::from_elem((batch, 3, h, w), F::from_f64c(value)))
    }

    pub fn data(&self) -> &Array4<F> {
        &self.data
    }

    pub fn into_data(self) -> Array4<F> {
        self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    /// `(h, w)`.
    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, F> {
        self.data.index_axis(ndarray::Axis(0), i)
    }

    /// Build from interleaved 8-bit RGB rows (one image), dividing by 255.
    pub fn from_rgb8(pixels: &[u8], h: usize, w: usize) -> Result<Self> {
        if pixels.len() != h * w * 3 {
            return Err(Error::Shape(format!(
                "expected {} rgb8 bytes, got {}",
                h * w * 3,
                pixels.len()
            )));
        }
        let mut data = Array4::zeros((1, 3, h, w));
        let scale = F::from_f64c(1.0 / 255.0);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = F::from_f64c(f64::from(pixels[(y * w + x) * 3 + c]));
                    data[(0, c, y, x)] = v * scale;
                }
            }
        }
        Self::new(data)
    }

    /// Interleaved 8-bit RGB bytes for image `i` (round to nearest).
    pub fn to_rgb8(&self, i: usize) -> Vec<u8> {
        let (h, w) = self.spatial();
        let img = self.image(i);
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = img[(c, y, x)].to_f64c();
                    out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Mean squared difference against another batch of the same shape.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        if self.data.dim() != other.data.dim() {
            return Err(Error::Shape("image batches differ in shape".into()));
        }
        let n = self.data.len() as f64;
        let sum = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64c();
                d * d
            })
            .sum::<f64>();
        Ok(sum / n)
    }

    pub fn with_gradient(mut self, requires: bool) -> Self {
        self.requires_gradient = requires;
        self
    }
}

/// Validate a batch: clamp to `[0, 1]`, reject NaN/Inf.
pub fn validate_image<F: Scalar>(x: ImageBatch<F>) -> Result<ImageBatch<F>> {
    let requires = x.requires_gradient;
    Ok(ImageBatch::new(x.data)?.with_gradient(requires))
}

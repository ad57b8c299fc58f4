//! Fixed-length binary payloads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use crate::scalar::Scalar;

/// A binary watermark payload of fixed length `n`.
///
/// Every element is exactly 0 or 1; the length is fixed by the run
/// configuration. Raw bits only, no error-correction coding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidConfig("message length must be >= 1".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::CorruptData("message bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Bits as scalars in {0.0, 1.0}, the regression target for the message loss.
    pub fn as_scalars<F: Scalar>(&self) -> Vec<F> {
        self.bits.iter().map(|&b| F::from_f64c(f64::from(b))).collect()
    }

    /// Compact text form, e.g. `10110010`.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::CorruptData(format!("invalid bit char '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }
}

/// Sample an `n`-bit message. Pure function of `(seed, n)`.
pub fn make_message(seed: u64, n: usize) -> Result<BitMessage> {
    if n == 0 {
        return Err(Error::InvalidConfig("message length must be >= 1".into()));
    }
    let mut rng = seeded_rng(seed);
    let bits = (0..n).map(|_| u8::from(rng.gen::<bool>())).collect();
    BitMessage::new(bits)
}

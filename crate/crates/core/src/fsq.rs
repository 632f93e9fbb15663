//! Finite scalar quantization and the implicit mixed-radix codebook.

use tvc_tensor::math;

use crate::error::{CodecError, Result};

/// Number of discrete token channels.
pub const CODE_CHANNELS: usize = 6;

/// Per-channel level counts. The codebook is their Cartesian product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FsqConfig {
    levels: Vec<u32>,
}

impl Default for FsqConfig {
    fn default() -> Self {
        Self {
            levels: vec![4; CODE_CHANNELS],
        }
    }
}

impl FsqConfig {
    pub fn new(levels: &[u32]) -> Result<Self> {
        if levels.is_empty() || levels.iter().any(|&l| l < 2) {
            return Err(CodecError::Invalid(format!(
                "FSQ levels must all be >= 2, got {levels:?}"
            )));
        }
        let vocab = levels.iter().try_fold(1usize, |acc, &l| acc.checked_mul(l as usize));
        if vocab.is_none() {
            return Err(CodecError::Invalid("FSQ vocabulary overflows".into()));
        }
        Ok(Self {
            levels: levels.to_vec(),
        })
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels.len()
    }

    pub fn max_level(&self) -> u32 {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    /// Codebook size `V = Π L_c`.
    pub fn vocab_size(&self) -> usize {
        self.levels.iter().map(|&l| l as usize).product()
    }

    /// Mixed-radix, little-endian: `idx = Σ q_c · Π_{c' < c} L_{c'}`.
    pub fn code_to_index(&self, codes: &[u32]) -> Result<usize> {
        if codes.len() != self.levels.len() {
            return Err(CodecError::Invalid(format!(
                "expected {} code channels, got {}",
                self.levels.len(),
                codes.len()
            )));
        }
        let mut idx = 0usize;
        let mut radix = 1usize;
        for (c, (&q, &l)) in codes.iter().zip(&self.levels).enumerate() {
            if q >= l {
                return Err(CodecError::Invalid(format!(
                    "level {q} out of range for channel {c} (L = {l})"
                )));
            }
            idx += q as usize * radix;
            radix *= l as usize;
        }
        Ok(idx)
    }

    pub fn index_to_code(&self, index: usize) -> Result<Vec<u32>> {
        if index >= self.vocab_size() {
            return Err(CodecError::Invalid(format!(
                "index {index} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        let mut rest = index;
        Ok(self
            .levels
            .iter()
            .map(|&l| {
                let q = (rest % l as usize) as u32;
                rest /= l as usize;
                q
            })
            .collect())
    }
}

/// Bounded value in `[-1, 1]` that the quantizer rounds.
pub fn fsq_bound(z: f32) -> f32 {
    math::tanh(z)
}

/// `round(((tanh(z) + 1) / 2) · (L − 1))` with ties away from zero.
pub fn fsq_quantize(z: f32, levels: u32) -> u32 {
    level_of_bounded(fsq_bound(z), levels)
}

pub fn level_of_bounded(b: f32, levels: u32) -> u32 {
    let scaled = (b + 1.0) * 0.5 * (levels - 1) as f32;
    let q = math::round_half_away(scaled);
    q.clamp(0.0, (levels - 1) as f32) as u32
}

/// Centroid of level `q` in `[-1, 1]`: `2q/(L−1) − 1`.
pub fn dequantize(q: u32, levels: u32) -> f32 {
    2.0 * q as f32 / (levels - 1) as f32 - 1.0
}

//! Raw RGB clip container (`.tvcr`).
//!
//! Layout: magic `TVCR`, width `u16`, height `u16`, frame count `u16`
//! (little-endian), channels `u8` = 3, five zero bytes; then 8-bit planar
//! RGB, frame-major: each frame holds its R, G and B planes in turn.

use std::path::Path;

use tvc_tensor::Tensor;

use crate::error::{CodecError, Result};
use crate::tokenizer::PIXEL_CHANNELS;

pub const MAGIC: &[u8; 4] = b"TVCR";
pub const HEADER_LEN: usize = 16;

/// Frames `[F, H, W, 3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pixels: Tensor,
}

impl Clip {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[3] != PIXEL_CHANNELS || s[..3].contains(&0) {
            return Err(CodecError::Shape(format!("clip must be [F, H, W, 3], got {s:?}")));
        }
        if s[..3].iter().any(|&e| e > u16::MAX as usize) {
            return Err(CodecError::Shape(format!("clip extents {s:?} exceed 65535")));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CodecError::Invalid("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Frames `start..start + count` as a new clip.
    pub fn frames_range(&self, start: usize, count: usize) -> Result<Clip> {
        if count == 0 || start + count > self.frames() {
            return Err(CodecError::Shape(format!(
                "frames {start}..{} outside a {}-frame clip",
                start + count,
                self.frames()
            )));
        }
        let per = self.height() * self.width() * PIXEL_CHANNELS;
        let data = self.pixels.data()[start * per..(start + count) * per].to_vec();
        Clip::new(Tensor::new(&[count, self.height(), self.width(), PIXEL_CHANNELS], data)?)
    }

    /// Pixel values rounded to the nearest 8-bit level.
    pub fn quantized(&self) -> Clip {
        Clip {
            pixels: self.pixels.map(|v| to_byte(v) as f32 / 255.0),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.numel());
        out.extend_from_slice(MAGIC);
        for e in [self.width(), self.height(), self.frames()] {
            out.extend_from_slice(&(e as u16).to_le_bytes());
        }
        out.push(PIXEL_CHANNELS as u8);
        out.extend_from_slice(&[0; 5]);
        let d = self.pixels.data();
        let plane = self.height() * self.width();
        for t in 0..self.frames() {
            for c in 0..PIXEL_CHANNELS {
                out.extend((0..plane).map(|i| to_byte(d[(t * plane + i) * PIXEL_CHANNELS + c])));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(CodecError::Format("not a TVCR clip".into()));
        }
        if bytes[10] as usize != PIXEL_CHANNELS {
            return Err(CodecError::Format(format!("TVCR clip has {} channels, expected 3", bytes[10])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let (w, h, f) = (u16_at(4), u16_at(6), u16_at(8));
        let n = f * h * w * PIXEL_CHANNELS;
        if n == 0 {
            return Err(CodecError::Format("empty clip".into()));
        }
        if bytes.len() != HEADER_LEN + n {
            return Err(CodecError::Format(format!(
                "TVCR payload is {} bytes, header implies {n}",
                bytes.len() - HEADER_LEN
            )));
        }
        let raw = &bytes[HEADER_LEN..];
        let plane = h * w;
        let mut data = vec![0.0; n];
        for t in 0..f {
            for c in 0..PIXEL_CHANNELS {
                let src = &raw[(t * PIXEL_CHANNELS + c) * plane..][..plane];
                for (i, &b) in src.iter().enumerate() {
                    data[(t * plane + i) * PIXEL_CHANNELS + c] = b as f32 / 255.0;
                }
            }
        }
        Clip::new(Tensor::new(&[f, h, w, PIXEL_CHANNELS], data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Every `.tvcr` file in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, Clip)>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "tvcr"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, Clip::load(&p)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let c = Clip::new(Tensor::from_fn(&[2, 3, 5, 3], |i| (i % 256) as f32 / 255.0)).unwrap();
        let b = c.to_bytes();
        assert_eq!(b.len(), 16 + 90);
        assert_eq!(&b[4..11], &[5, 0, 3, 0, 2, 0, 3]);
        // second byte of the R plane is pixel (0, 0, 1)
        assert_eq!(b[17], 3);
        assert_eq!(Clip::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn rejects_bad_magic_and_length() {
        let c = Clip::new(Tensor::zeros(&[1, 2, 2, 3])).unwrap();
        let mut b = c.to_bytes();
        b.pop();
        assert!(matches!(Clip::from_bytes(&b), Err(CodecError::Format(_))));
        let mut b = c.to_bytes();
        b[0] = b'X';
        assert!(matches!(Clip::from_bytes(&b), Err(CodecError::Format(_))));
    }
}

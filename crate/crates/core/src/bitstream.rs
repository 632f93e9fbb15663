//! The `.tvc` container.
//!
//! A 32-byte header, an optional 14-byte extension (flag bit 0), then one
//! record per GoP holding four sub-streams `z_C, y_C, z_D, y_D`, each a
//! little-endian `u32` length followed by that many bytes.

use crate::error::{CodecError, Result};
use crate::fsq::CODE_CHANNELS;

pub const MAGIC: &[u8; 4] = b"TVC1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
pub const EXTENSION_LEN: usize = 14;
pub const FLAG_EXTENSION: u8 = 1;
pub const SUBSTREAMS: [&str; 4] = ["z_C", "y_C", "z_D", "y_D"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TvcHeader {
    pub version: u8,
    pub flags: u8,
    pub width: u16,
    pub height: u16,
    /// Coded frames, a whole number of GoPs.
    pub frame_count: u16,
    pub gop_frames: u8,
    pub gop_count: u16,
    pub mask_interval: u8,
    pub n_visible: u8,
    pub fsq_levels: [u8; CODE_CHANNELS],
    pub cont_channels: u8,
    pub reserved: [u8; 8],
}

impl TvcHeader {
    pub fn has_extension(&self) -> bool {
        self.flags & FLAG_EXTENSION != 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != VERSION {
            return Err(CodecError::Format(format!("unsupported version {}", self.version)));
        }
        if self.gop_frames == 0 || self.frame_count as usize != self.gop_count as usize * self.gop_frames as usize {
            return Err(CodecError::Format(format!(
                "frame count {} is not {} GoPs of {} frames",
                self.frame_count, self.gop_count, self.gop_frames
            )));
        }
        if self.mask_interval == 0 || self.n_visible > self.mask_interval {
            return Err(CodecError::Format(format!(
                "n_visible {} exceeds mask interval {}",
                self.n_visible, self.mask_interval
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CodecError::Format("zero frame size".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4] = self.version;
        b[5] = self.flags;
        b[6..8].copy_from_slice(&self.width.to_le_bytes());
        b[8..10].copy_from_slice(&self.height.to_le_bytes());
        b[10..12].copy_from_slice(&self.frame_count.to_le_bytes());
        b[12] = self.gop_frames;
        b[13..15].copy_from_slice(&self.gop_count.to_le_bytes());
        b[15] = self.mask_interval;
        b[16] = self.n_visible;
        b[17..23].copy_from_slice(&self.fsq_levels);
        b[23] = self.cont_channels;
        b[24..32].copy_from_slice(&self.reserved);
        b
    }

    /// Parses and validates the first 32 bytes.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Format(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CodecError::Format("bad magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let mut fsq_levels = [0; CODE_CHANNELS];
        fsq_levels.copy_from_slice(&bytes[17..23]);
        let mut reserved = [0; 8];
        reserved.copy_from_slice(&bytes[24..32]);
        let h = Self {
            version: bytes[4],
            flags: bytes[5],
            width: u16_at(6),
            height: u16_at(8),
            frame_count: u16_at(10),
            gop_frames: bytes[12],
            gop_count: u16_at(13),
            mask_interval: bytes[15],
            n_visible: bytes[16],
            fsq_levels,
            cont_channels: bytes[23],
            reserved,
        };
        h.validate()?;
        Ok(h)
    }
}

/// Original clip extents before padding, and the identity of the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extension {
    pub original_frames: u16,
    pub original_width: u16,
    pub original_height: u16,
    pub weight_hash: u64,
}

impl Extension {
    pub fn to_bytes(&self) -> [u8; EXTENSION_LEN] {
        let mut b = [0u8; EXTENSION_LEN];
        b[..2].copy_from_slice(&self.original_frames.to_le_bytes());
        b[2..4].copy_from_slice(&self.original_width.to_le_bytes());
        b[4..6].copy_from_slice(&self.original_height.to_le_bytes());
        b[6..].copy_from_slice(&self.weight_hash.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < EXTENSION_LEN {
            return Err(CodecError::Format("truncated header extension".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let mut hash = [0u8; 8];
        hash.copy_from_slice(&bytes[6..14]);
        Ok(Self {
            original_frames: u16_at(0),
            original_width: u16_at(2),
            original_height: u16_at(4),
            weight_hash: u64::from_le_bytes(hash),
        })
    }
}

/// The four sub-streams of one GoP.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GopRecord {
    pub z_c: Vec<u8>,
    pub y_c: Vec<u8>,
    pub z_d: Vec<u8>,
    pub y_d: Vec<u8>,
}

impl GopRecord {
    pub fn streams(&self) -> [&[u8]; 4] {
        [&self.z_c, &self.y_c, &self.z_d, &self.y_d]
    }

    /// Serialized size including the length prefixes.
    pub fn byte_len(&self) -> usize {
        self.streams().iter().map(|s| 4 + s.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TvcBitstream {
    pub header: TvcHeader,
    pub extension: Option<Extension>,
    pub gops: Vec<GopRecord>,
}

impl TvcBitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.has_extension() != self.extension.is_some() {
            return Err(CodecError::Invalid("extension flag disagrees with the extension".into()));
        }
        if self.gops.len() != self.header.gop_count as usize {
            return Err(CodecError::Invalid(format!(
                "{} records for {} GoPs",
                self.gops.len(),
                self.header.gop_count
            )));
        }
        let mut out = self.header.to_bytes().to_vec();
        if let Some(e) = &self.extension {
            out.extend_from_slice(&e.to_bytes());
        }
        for g in &self.gops {
            for s in g.streams() {
                let len = u32::try_from(s.len()).map_err(|_| CodecError::Invalid("sub-stream over 4 GiB".into()))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(s);
            }
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let header = TvcHeader::parse(bytes)?;
        let mut at = HEADER_LEN;
        let extension = if header.has_extension() {
            let e = Extension::parse(&bytes[at..])?;
            at += EXTENSION_LEN;
            Some(e)
        } else {
            None
        };
        let mut gops = Vec::with_capacity(header.gop_count as usize);
        for gi in 0..header.gop_count {
            let mut take = || -> Result<Vec<u8>> {
                let end = at + 4;
                if end > bytes.len() {
                    return Err(CodecError::Format(format!("GoP {gi}: truncated length prefix")));
                }
                let len = u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
                let stop = end.checked_add(len).filter(|&s| s <= bytes.len());
                let Some(stop) = stop else {
                    return Err(CodecError::Format(format!("GoP {gi}: sub-stream of {len} bytes is truncated")));
                };
                at = stop;
                Ok(bytes[end..stop].to_vec())
            };
            gops.push(GopRecord {
                z_c: take()?,
                y_c: take()?,
                z_d: take()?,
                y_d: take()?,
            });
        }
        if at != bytes.len() {
            return Err(CodecError::Format(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Self {
            header,
            extension,
            gops,
        })
    }

    /// Bytes after the fixed header.
    pub fn payload_bytes(&self) -> usize {
        self.extension.map_or(0, |_| EXTENSION_LEN) + self.gops.iter().map(GopRecord::byte_len).sum::<usize>()
    }

    /// Payload bits over coded pixels (`frame_count·H·W` from the header).
    pub fn bpp(&self) -> f64 {
        bpp(self.payload_bytes() as u64 * 8, &self.header)
    }

    /// Header fields and per-GoP sub-stream sizes as text.
    pub fn describe(&self) -> String {
        let h = &self.header;
        let mut s = format!(
            "TVC v{} flags={:#04x}\n  coded {}x{} x {} frames ({} GoPs of {})\n  mask interval {} n_visible {}\n  fsq levels {:?} d_C {}\n",
            h.version,
            h.flags,
            h.width,
            h.height,
            h.frame_count,
            h.gop_count,
            h.gop_frames,
            h.mask_interval,
            h.n_visible,
            h.fsq_levels,
            h.cont_channels
        );
        if let Some(e) = &self.extension {
            s += &format!(
                "  original {}x{} x {} frames, weights {:016x}\n",
                e.original_width, e.original_height, e.original_frames, e.weight_hash
            );
        }
        s += &format!("  {:>4} {:>8} {:>8} {:>8} {:>8}\n", "gop", SUBSTREAMS[0], SUBSTREAMS[1], SUBSTREAMS[2], SUBSTREAMS[3]);
        for (i, g) in self.gops.iter().enumerate() {
            s += &format!(
                "  {i:>4} {:>8} {:>8} {:>8} {:>8}\n",
                g.z_c.len(),
                g.y_c.len(),
                g.z_d.len(),
                g.y_d.len()
            );
        }
        s += &format!("  payload {} bytes, {:.4} bpp\n", self.payload_bytes(), self.bpp());
        s
    }
}

pub fn bpp(payload_bits: u64, header: &TvcHeader) -> f64 {
    payload_bits as f64 / (header.frame_count as f64 * header.height as f64 * header.width as f64)
}

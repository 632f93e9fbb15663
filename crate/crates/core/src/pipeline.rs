//! End-to-end encode and decode of whole clips, and the rate-distortion sweep.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use tvc_tensor::Tensor;

use crate::bitstream::{self, Extension, GopRecord, TvcBitstream, TvcHeader, FLAG_EXTENSION, VERSION};
use crate::ccm::PartialCodeMap;
use crate::clip::Clip;
use crate::config::{ModelConfig, CONT_CHANNELS, SPACE_FACTOR, TIME_FACTOR};
use crate::error::{CodecError, Result};
use crate::eval;
use crate::fsq::CODE_CHANNELS;
use crate::masking::{fixed_mask, Mask3D, MaskMode, MaskSpec};
use crate::model::Model;
use crate::tokenizer::{CodeMap, GopTensor, PIXEL_CHANNELS};

/// Frames per GoP, `1 + T`.
pub const GOP_FRAMES: usize = 1 + TIME_FACTOR;
/// Coded width and height are padded to a multiple of this.
pub const SPATIAL_ALIGN: usize = 2 * SPACE_FACTOR;

/// Tokenizer output for one GoP, before any entropy coding.
#[derive(Clone, Debug)]
pub struct GopAnalysis {
    /// Unrounded continuous latent `[t, h, w, 16]`.
    pub latent: Tensor,
    pub codes: CodeMap,
}

/// Actual and model-estimated size of one sub-stream.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StreamBits {
    /// Payload bits, excluding the length prefix.
    pub actual: u64,
    /// Cross-entropy of the coded symbols under the model.
    pub estimated: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GopRate {
    /// In container order: `z_C, y_C, z_D, y_D`.
    pub streams: [StreamBits; 4],
    pub coded_tokens: usize,
}

/// Bits per GoP and sub-stream. The 32-byte header is a fixed cost and is
/// left out of `payload_bits` and `bpp`; the extension and length prefixes count.
#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub gops: Vec<GopRate>,
    pub header_bits: u64,
    pub payload_bits: u64,
    pub bpp: f64,
}

impl RateReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>4} {:>10} {:>10} {:>10} {:>10} {:>7}", "gop", "z_C", "y_C", "z_D", "y_D", "tokens");
        for (i, g) in self.gops.iter().enumerate() {
            let _ = write!(s, "{i:>4}");
            for b in &g.streams {
                let _ = write!(s, " {:>10}", b.actual);
            }
            let _ = writeln!(s, " {:>7}", g.coded_tokens);
        }
        let _ = writeln!(
            s,
            "payload {} bits (header {} bits excluded), {:.5} bpp",
            self.payload_bits, self.header_bits, self.bpp
        );
        s
    }
}

/// Tokens recovered from one GoP record.
#[derive(Clone, Debug)]
pub struct DecodedTokens {
    pub y_hat: Tensor,
    pub mask: Mask3D,
    pub partial: PartialCodeMap,
}

fn coded_extent(e: usize, align: usize) -> usize {
    e.div_ceil(align) * align
}

/// Splits a clip into GoPs, repeating the last frame and replicating the
/// right and bottom edges up to the coded extents.
pub fn split_gops(clip: &Clip) -> Result<Vec<GopTensor>> {
    let (f, h, w) = (clip.frames(), clip.height(), clip.width());
    let (hc, wc) = (coded_extent(h, SPATIAL_ALIGN), coded_extent(w, SPATIAL_ALIGN));
    let count = f.div_ceil(GOP_FRAMES);
    let src = clip.pixels().data();
    let mut out = Vec::with_capacity(count);
    for g in 0..count {
        let mut data = Vec::with_capacity(GOP_FRAMES * hc * wc * PIXEL_CHANNELS);
        for k in 0..GOP_FRAMES {
            let t = (g * GOP_FRAMES + k).min(f - 1);
            for y in 0..hc {
                let row = (t * h + y.min(h - 1)) * w;
                for x in 0..wc {
                    let i = (row + x.min(w - 1)) * PIXEL_CHANNELS;
                    data.extend_from_slice(&src[i..i + PIXEL_CHANNELS]);
                }
            }
        }
        out.push(GopTensor::new(Tensor::new(&[GOP_FRAMES, hc, wc, PIXEL_CHANNELS], data)?)?);
    }
    Ok(out)
}

/// Joins decoded GoPs and crops to the original extents.
pub fn join_gops(gops: &[GopTensor], frames: usize, height: usize, width: usize) -> Result<Clip> {
    let Some(first) = gops.first() else {
        return Err(CodecError::Invalid("no GoPs to join".into()));
    };
    let (hc, wc) = (first.height(), first.width());
    if frames > gops.len() * GOP_FRAMES || height > hc || width > wc || frames == 0 || height == 0 || width == 0 {
        return Err(CodecError::Shape(format!(
            "cannot crop {} GoPs of {hc}x{wc} to {frames} frames of {height}x{width}",
            gops.len()
        )));
    }
    let mut data = Vec::with_capacity(frames * height * width * PIXEL_CHANNELS);
    for t in 0..frames {
        let g = &gops[t / GOP_FRAMES];
        if g.height() != hc || g.width() != wc || g.frames() != GOP_FRAMES {
            return Err(CodecError::Shape("decoded GoPs disagree in size".into()));
        }
        let src = g.tensor().data();
        let k = t % GOP_FRAMES;
        for y in 0..height {
            let i = ((k * hc + y) * wc) * PIXEL_CHANNELS;
            data.extend_from_slice(&src[i..i + width * PIXEL_CHANNELS]);
        }
    }
    Clip::new(Tensor::new(&[frames, height, width, PIXEL_CHANNELS], data)?)
}

pub fn analyze_gop(model: &Model, gop: &GopTensor) -> Result<GopAnalysis> {
    Ok(GopAnalysis {
        latent: model.continuous_latent(gop)?,
        codes: model.discrete_codes(gop)?,
    })
}

/// Entropy-codes one analysed GoP under `mask`.
pub fn code_gop(model: &Model, a: &GopAnalysis, mask: &Mask3D) -> Result<(GopRecord, GopRate)> {
    let cont = model.ccm_cont.encode(&model.store, &a.latent)?;
    let mut rate = GopRate {
        coded_tokens: mask.visible_count(),
        ..GopRate::default()
    };
    rate.streams[0] = StreamBits {
        actual: cont.coded.z.len() as u64 * 8,
        estimated: cont.coded.z_bits,
    };
    rate.streams[1] = StreamBits {
        actual: cont.coded.y.len() as u64 * 8,
        estimated: cont.coded.y_bits,
    };
    let mut record = GopRecord {
        z_c: cont.coded.z,
        y_c: cont.coded.y,
        ..GopRecord::default()
    };
    // Nothing visible: the decoder never reads the discrete hyperprior.
    if mask.visible_count() > 0 {
        let disc = model.ccm_disc.encode(&model.store, &a.codes, mask, &cont.y_hat)?;
        rate.streams[2] = StreamBits {
            actual: disc.z.len() as u64 * 8,
            estimated: disc.z_bits,
        };
        rate.streams[3] = StreamBits {
            actual: disc.y.len() as u64 * 8,
            estimated: disc.y_bits,
        };
        record.z_d = disc.z;
        record.y_d = disc.y;
    }
    Ok((record, rate))
}

fn mask_spec(header: &TvcHeader) -> Result<MaskSpec> {
    MaskSpec::fixed(header.mask_interval as u32, header.n_visible as u32)
        .map_err(|e| CodecError::Format(e.to_string()))
}

fn grids(header: &TvcHeader) -> ([usize; 3], [usize; 3]) {
    let (f, h, w) = (header.gop_frames as usize, header.height as usize, header.width as usize);
    (
        ModelConfig::continuous_grid(f, h, w),
        ModelConfig::discrete_grid(f, h, w),
    )
}

/// Recovers `ŷ_C`, the mask and the visible tokens of one record.
pub fn decode_gop_tokens(model: &Model, header: &TvcHeader, record: &GopRecord) -> Result<DecodedTokens> {
    let (cgrid, dgrid) = grids(header);
    let cont = model.ccm_cont.decode(&model.store, cgrid, &record.z_c, &record.y_c)?;
    let mask = fixed_mask(&mask_spec(header)?, dgrid)?;
    let partial = if mask.visible_count() == 0 {
        PartialCodeMap {
            grid: dgrid,
            codes: vec![0; mask.len() * CODE_CHANNELS],
            set: vec![false; mask.len()],
        }
    } else {
        model
            .ccm_disc
            .decode(&model.store, &mask, &cont.y_hat, &record.z_d, &record.y_d)?
    };
    Ok(DecodedTokens {
        y_hat: cont.y_hat,
        mask,
        partial,
    })
}

/// Completes masked tokens and runs the fused decoder.
pub fn reconstruct_gop(model: &Model, tokens: &DecodedTokens) -> Result<GopTensor> {
    let codes = model.complete_codes(&tokens.partial, &tokens.mask, &tokens.y_hat)?;
    model.reconstruct(&codes, &tokens.y_hat)
}

fn check_model_header(model: &Model, header: &TvcHeader) -> Result<()> {
    let levels: Vec<u8> = model.cfg.fsq.levels().iter().map(|&l| l as u8).collect();
    if levels != header.fsq_levels || header.cont_channels as usize != CONT_CHANNELS {
        return Err(CodecError::ModelMismatch(format!(
            "stream codes FSQ {:?} with d_C {}, model has {:?} with d_C {CONT_CHANNELS}",
            header.fsq_levels, header.cont_channels, levels
        )));
    }
    Ok(())
}

fn header_for(model: &Model, spec: &MaskSpec, gop_count: usize, hc: usize, wc: usize) -> Result<TvcHeader> {
    if spec.mode != MaskMode::Fixed {
        return Err(CodecError::Invalid("streams carry fixed masks only".into()));
    }
    spec.validate()?;
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| CodecError::Shape(format!("{what} {v} does not fit the header")))
    };
    let mut fsq_levels = [0u8; CODE_CHANNELS];
    for (d, &l) in fsq_levels.iter_mut().zip(model.cfg.fsq.levels()) {
        *d = l as u8;
    }
    let h = TvcHeader {
        version: VERSION,
        flags: FLAG_EXTENSION,
        width: narrow(wc, "coded width")?,
        height: narrow(hc, "coded height")?,
        frame_count: narrow(gop_count * GOP_FRAMES, "coded frame count")?,
        gop_frames: GOP_FRAMES as u8,
        gop_count: narrow(gop_count, "GoP count")?,
        mask_interval: u8::try_from(spec.mask_interval)
            .map_err(|_| CodecError::Invalid(format!("mask interval {} exceeds 255", spec.mask_interval)))?,
        n_visible: spec.n_visible as u8,
        fsq_levels,
        cont_channels: CONT_CHANNELS as u8,
        reserved: [0; 8],
    };
    h.validate()?;
    Ok(h)
}

fn extension_for(clip: &Clip, weight_hash: u64) -> Extension {
    Extension {
        original_frames: clip.frames() as u16,
        original_width: clip.width() as u16,
        original_height: clip.height() as u16,
        weight_hash,
    }
}

/// Encodes a clip; a pure function of the clip, the weights and the spec.
pub fn encode_clip(model: &Model, clip: &Clip, spec: &MaskSpec) -> Result<(TvcBitstream, RateReport)> {
    let gops = split_gops(clip)?;
    let (hc, wc) = (gops[0].height(), gops[0].width());
    let header = header_for(model, spec, gops.len(), hc, wc)?;
    let extension = extension_for(clip, model.weight_hash()?);
    let (_, dgrid) = grids(&header);
    let mask = fixed_mask(spec, dgrid)?;
    let mut records = Vec::with_capacity(gops.len());
    let mut rates = Vec::with_capacity(gops.len());
    for g in &gops {
        let (r, rate) = code_gop(model, &analyze_gop(model, g)?, &mask)?;
        records.push(r);
        rates.push(rate);
    }
    let stream = TvcBitstream {
        header,
        extension: Some(extension),
        gops: records,
    };
    let payload_bits = stream.payload_bytes() as u64 * 8;
    let report = RateReport {
        gops: rates,
        header_bits: bitstream::HEADER_LEN as u64 * 8,
        payload_bits,
        bpp: stream.bpp(),
    };
    Ok((stream, report))
}

/// Checks the weight identity, decodes every GoP and crops to the original extents.
pub fn decode_stream(model: &Model, stream: &TvcBitstream) -> Result<Clip> {
    let h = &stream.header;
    check_model_header(model, h)?;
    if h.gop_frames as usize != GOP_FRAMES || h.width as usize % SPATIAL_ALIGN != 0 || h.height as usize % SPATIAL_ALIGN != 0 {
        return Err(CodecError::Format(format!(
            "unsupported coded geometry {}x{} with {}-frame GoPs",
            h.width, h.height, h.gop_frames
        )));
    }
    let (frames, height, width) = match &stream.extension {
        Some(e) => {
            let hash = model.weight_hash()?;
            if e.weight_hash != hash {
                return Err(CodecError::ModelMismatch(format!(
                    "stream was coded with weights {:016x}, loaded {hash:016x}",
                    e.weight_hash
                )));
            }
            (e.original_frames as usize, e.original_height as usize, e.original_width as usize)
        }
        None => (h.frame_count as usize, h.height as usize, h.width as usize),
    };
    let gops = stream
        .gops
        .iter()
        .map(|r| reconstruct_gop(model, &decode_gop_tokens(model, h, r)?))
        .collect::<Result<Vec<_>>>()?;
    join_gops(&gops, frames, height, width)
}

pub fn encode_video(input: &Path, weights: &Path, spec: &MaskSpec, out: &Path) -> Result<RateReport> {
    let clip = Clip::load(input)?;
    let model = Model::load(weights)?;
    let (stream, report) = encode_clip(&model, &clip, spec)?;
    std::fs::write(out, stream.to_bytes()?)?;
    Ok(report)
}

/// Returns the clip as written, rounded to 8 bits.
pub fn decode_video(input: &Path, weights: &Path, out: &Path) -> Result<Clip> {
    // Parse before touching the weights so a bad stream fails fast.
    let stream = TvcBitstream::parse(&std::fs::read(input)?)?;
    let model = Model::load(weights)?;
    let clip = decode_stream(&model, &stream)?.quantized();
    clip.save(out)?;
    Ok(clip)
}

/// One `(clip, n_visible)` point; aggregate rows use the clip name `mean`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub clip: String,
    pub n_visible: u32,
    pub bits_total: u64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub perc_proxy: f64,
}

pub const SWEEP_HEADER: &str = "clip,n_visible,bits_total,bpp,psnr_db,ssim,perc_proxy";
pub const AGGREGATE: &str = "mean";

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepRow>,
    /// Mean reconstruction L1 per aggregate row.
    pub mean_l1: Vec<f64>,
}

impl Sweep {
    /// `perc_proxy` is the gradient-difference proxy, not LPIPS.
    pub fn csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in self.rows.iter().chain(&self.aggregates) {
            // `{:?}` prints the shortest text that parses back to the same f64.
            let _ = writeln!(
                s,
                "{},{},{},{:?},{:?},{:?},{:?}",
                r.clip, r.n_visible, r.bits_total, r.bpp, r.psnr_db, r.ssim, r.perc_proxy
            );
        }
        s
    }
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(CodecError::Format("unexpected sweep CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(CodecError::Format(format!("sweep row has {} fields: {l}", f.len())));
            }
            let bad = |_| CodecError::Format(format!("bad number in sweep row: {l}"));
            Ok(SweepRow {
                clip: f[0].to_string(),
                n_visible: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                bits_total: f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                bpp: f[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                psnr_db: f[4].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                ssim: f[5].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                perc_proxy: f[6].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            })
        })
        .collect()
}

/// Encodes and decodes every clip at each `n_visible`; the tokenizer runs
/// once per GoP and only the coding and decoding repeat.
pub fn rd_sweep(model: &Model, clips: &[(String, Clip)], n_visible: RangeInclusive<u32>, mask_interval: u32) -> Result<Sweep> {
    if clips.is_empty() {
        return Err(CodecError::Invalid("rd sweep needs at least one clip".into()));
    }
    if n_visible.is_empty() {
        return Err(CodecError::Invalid("empty n_visible range".into()));
    }
    let hash = model.weight_hash()?;
    let mut per_setting: Vec<Vec<(SweepRow, f64)>> = vec![Vec::new(); n_visible.clone().count()];
    for (name, clip) in clips {
        let gops = split_gops(clip)?;
        let analyses = gops.iter().map(|g| analyze_gop(model, g)).collect::<Result<Vec<_>>>()?;
        let (hc, wc) = (gops[0].height(), gops[0].width());
        for (slot, nv) in n_visible.clone().enumerate() {
            let spec = MaskSpec::fixed(mask_interval, nv)?;
            let header = header_for(model, &spec, gops.len(), hc, wc)?;
            let mask = fixed_mask(&spec, grids(&header).1)?;
            let gops = analyses
                .iter()
                .map(|a| Ok(code_gop(model, a, &mask)?.0))
                .collect::<Result<Vec<_>>>()?;
            let stream = TvcBitstream {
                header,
                extension: Some(extension_for(clip, hash)),
                gops,
            };
            let decoded = stream
                .gops
                .iter()
                .map(|r| reconstruct_gop(model, &decode_gop_tokens(model, &stream.header, r)?))
                .collect::<Result<Vec<_>>>()?;
            let recon = join_gops(&decoded, clip.frames(), clip.height(), clip.width())?;
            let (a, b) = (clip.pixels(), recon.pixels());
            let bits = stream.payload_bytes() as u64 * 8;
            let row = SweepRow {
                clip: name.clone(),
                n_visible: nv,
                bits_total: bits,
                bpp: stream.bpp(),
                psnr_db: eval::psnr(a, b)?,
                ssim: eval::ssim(a, b)?,
                perc_proxy: eval::perceptual_proxy(a, b)?,
            };
            per_setting[slot].push((row, eval::l1(a, b)?));
        }
    }
    let mut sweep = Sweep {
        rows: Vec::new(),
        aggregates: Vec::new(),
        mean_l1: Vec::new(),
    };
    for (slot, nv) in n_visible.enumerate() {
        let pts = &per_setting[slot];
        let n = pts.len() as f64;
        let mean = |f: &dyn Fn(&SweepRow) -> f64| pts.iter().map(|(r, _)| f(r)).sum::<f64>() / n;
        sweep.aggregates.push(SweepRow {
            clip: AGGREGATE.into(),
            n_visible: nv,
            bits_total: pts.iter().map(|(r, _)| r.bits_total).sum::<u64>() / pts.len() as u64,
            bpp: mean(&|r| r.bpp),
            psnr_db: mean(&|r| r.psnr_db),
            ssim: mean(&|r| r.ssim),
            perc_proxy: mean(&|r| r.perc_proxy),
        });
        sweep.mean_l1.push(pts.iter().map(|(_, l)| l).sum::<f64>() / n);
    }
    // rows ordered clip-major, then by n_visible
    for c in 0..clips.len() {
        for pts in &per_setting {
            sweep.rows.push(pts[c].0.clone());
        }
    }
    Ok(sweep)
}

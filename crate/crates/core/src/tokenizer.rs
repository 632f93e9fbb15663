//! Dual-output causal tokenizer: continuous latent, FSQ code map, pixel decoders.
//!
//! All graph-level functions take batched `[B, F, H, W, C]` tensors.

use tvc_tensor::{Tensor, Var};

use crate::config::{ModelConfig, CONT_CHANNELS, SPACE_FACTOR, TIME_FACTOR};
use crate::error::{CodecError, Result};
use crate::fsq::{self, FsqConfig, CODE_CHANNELS};
use crate::nn::{self, Builder, Conv3d, Ctx, Padding};
use crate::wavelet::{self, packed_channels};
use tvc_tensor::math;

pub const PIXEL_CHANNELS: usize = 3;

/// A `(1+T) × H × W × 3` clip with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GopTensor {
    tensor: Tensor,
}

impl GopTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[3] != PIXEL_CHANNELS {
            return Err(CodecError::Shape(format!("GoP must be [1+T, H, W, 3], got {s:?}")));
        }
        check_extents(s[0], s[1], s[2], SPACE_FACTOR)?;
        if tensor.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CodecError::Invalid("GoP values must lie in [0, 1]".into()));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[frames, height, width, PIXEL_CHANNELS]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

pub fn check_extents(frames: usize, height: usize, width: usize, space: usize) -> Result<()> {
    if frames == 0 || (frames - 1) % TIME_FACTOR != 0 {
        return Err(CodecError::Shape(format!(
            "frame count {frames} is not 1 + a multiple of {TIME_FACTOR}"
        )));
    }
    if height == 0 || width == 0 || height % space != 0 || width % space != 0 {
        return Err(CodecError::Shape(format!(
            "{height}x{width} is not a positive multiple of {space}"
        )));
    }
    Ok(())
}

/// Integer FSQ levels on the discrete grid, `[t, h, w, 6]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMap {
    pub grid: [usize; 3],
    pub codes: Vec<u32>,
}

impl CodeMap {
    pub fn new(grid: [usize; 3], codes: Vec<u32>, fsq: &FsqConfig) -> Result<Self> {
        let n = grid.iter().product::<usize>() * CODE_CHANNELS;
        if codes.len() != n {
            return Err(CodecError::Shape(format!("code map {grid:?} needs {n} entries, got {}", codes.len())));
        }
        let levels = fsq.levels();
        for (i, &q) in codes.iter().enumerate() {
            if q >= levels[i % CODE_CHANNELS] {
                return Err(CodecError::Invalid(format!("code {q} at {i} exceeds its level bound")));
            }
        }
        Ok(Self { grid, codes })
    }

    pub fn positions(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn code(&self, pos: usize) -> &[u32] {
        &self.codes[pos * CODE_CHANNELS..(pos + 1) * CODE_CHANNELS]
    }

    /// FSQ centroids as a `[t, h, w, 6]` tensor.
    pub fn dequantize(&self, fsq: &FsqConfig) -> Tensor {
        let levels = fsq.levels();
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &q)| fsq::dequantize(q, levels[i % CODE_CHANNELS]))
            .collect();
        let g = self.grid;
        Tensor::new(&[g[0], g[1], g[2], CODE_CHANNELS], data).expect("shape matches")
    }

    /// Mixed-radix codebook index per position.
    pub fn indices(&self, fsq: &FsqConfig) -> Result<Vec<usize>> {
        (0..self.positions()).map(|p| fsq.code_to_index(self.code(p))).collect()
    }

    pub fn from_indices(grid: [usize; 3], indices: &[usize], fsq: &FsqConfig) -> Result<Self> {
        let mut codes = Vec::with_capacity(indices.len() * CODE_CHANNELS);
        for &i in indices {
            codes.extend(fsq.index_to_code(i)?);
        }
        Self::new(grid, codes, fsq)
    }
}

/// Round half away from zero to the integer grid (`Δ = 1`).
pub fn quantize_latent(y: &Tensor) -> Tensor {
    y.map(math::round_half_away)
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    spatial: Conv3d,
    temporal: Conv3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub branch: Branch,
    blocks: Vec<EncoderBlock>,
    head: Conv3d,
}

impl Encoder {
    pub fn new(b: &mut Builder, prefix: &str, branch: Branch, cfg: &ModelConfig) -> Self {
        let mut cin = packed_channels(PIXEL_CHANNELS);
        let mut blocks = Vec::new();
        for (i, (&w, st)) in cfg.enc_widths.iter().zip([1, 2, 2]).enumerate() {
            let spatial = Conv3d::new(b, &format!("{prefix}.b{i}.s"), [1, 3, 3], cin, w, [1, 2, 2], Padding::Causal);
            let temporal = Conv3d::new(b, &format!("{prefix}.b{i}.t"), [3, 1, 1], w, w, [st, 1, 1], Padding::Causal);
            blocks.push(EncoderBlock { spatial, temporal });
            cin = w;
        }
        let cout = match branch {
            Branch::Discrete => CODE_CHANNELS,
            Branch::Continuous => CONT_CHANNELS,
        };
        let head = Conv3d::new(b, &format!("{prefix}.head"), [1, 1, 1], cin, cout, [1, 1, 1], Padding::Causal);
        Self { branch, blocks, head }
    }

    /// Pixels `[B, F, H, W, 3]` → pre-quantization features.
    pub fn forward<'g>(&self, cx: Ctx<'g>, pixels: &Tensor) -> Result<Var<'g>> {
        let input = match self.branch {
            Branch::Discrete => pixels.clone(),
            Branch::Continuous => nn::avg_pool2(pixels)?,
        };
        let grid = wavelet::gop_analysis_batch(&input)?;
        let mut h = cx.constant(grid);
        for blk in &self.blocks {
            h = blk.spatial.forward(cx, &h)?.silu()?;
            h = blk.temporal.forward(cx, &h)?.silu()?;
        }
        self.head.forward(cx, &h)
    }

    pub fn convs(&self) -> Vec<&Conv3d> {
        let mut v: Vec<&Conv3d> = self.blocks.iter().flat_map(|b| [&b.spatial, &b.temporal]).collect();
        v.push(&self.head);
        v
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    temporal_up: bool,
    spatial: Conv3d,
    temporal: Conv3d,
}

/// Mirror of the encoder: three upsampling blocks then wavelet synthesis.
#[derive(Clone, Debug)]
pub struct Decoder {
    stem: Conv3d,
    up: Vec<UpBlock>,
    out: Conv3d,
    in_channels: usize,
}

/// Feature taps after the stem and the first two upsampling blocks.
pub const INJECTION_POINTS: usize = 3;

impl Decoder {
    pub fn new(b: &mut Builder, prefix: &str, in_channels: usize, cfg: &ModelConfig) -> Self {
        let w = cfg.dec_widths;
        let stem = Conv3d::new(b, &format!("{prefix}.stem"), [3, 3, 3], in_channels, w[0], [1, 1, 1], Padding::Causal);
        let mut up = Vec::new();
        let mut cin = w[0];
        for (i, (&cout, temporal_up)) in [w[1], w[2], w[2]].iter().zip([true, true, false]).enumerate() {
            let spatial = Conv3d::new(b, &format!("{prefix}.up{i}.s"), [1, 3, 3], cin, cout, [1, 1, 1], Padding::Causal);
            let temporal = Conv3d::new(b, &format!("{prefix}.up{i}.t"), [3, 1, 1], cout, cout, [1, 1, 1], Padding::Causal);
            up.push(UpBlock {
                temporal_up,
                spatial,
                temporal,
            });
            cin = cout;
        }
        let out = Conv3d::new(
            b,
            &format!("{prefix}.out"),
            [1, 1, 1],
            cin,
            packed_channels(PIXEL_CHANNELS),
            [1, 1, 1],
            Padding::Causal,
        );
        Self {
            stem,
            up,
            out,
            in_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Widths of the injection taps.
    pub fn tap_widths(&self) -> [usize; INJECTION_POINTS] {
        [self.stem.cout, self.up[0].spatial.cout, self.up[1].spatial.cout]
    }

    /// Runs the decoder; `inject[s]`, when present, is added to tap `s`.
    /// Returns the taps (after injection) and the unclamped pixels.
    pub fn forward<'g>(
        &self,
        cx: Ctx<'g>,
        latent: &Var<'g>,
        inject: Option<&[Var<'g>; INJECTION_POINTS]>,
    ) -> Result<(Vec<Var<'g>>, Var<'g>)> {
        let mut taps = Vec::with_capacity(INJECTION_POINTS);
        let mut h = self.stem.forward(cx, latent)?.silu()?;
        for (i, blk) in self.up.iter().enumerate() {
            if i < INJECTION_POINTS {
                if let Some(inj) = inject {
                    h = h.add(&inj[i])?;
                }
                taps.push(h);
            }
            h = nn::upsample(&h, blk.temporal_up, 2)?;
            h = blk.spatial.forward(cx, &h)?.silu()?;
            h = blk.temporal.forward(cx, &h)?.silu()?;
        }
        let grid = self.out.forward(cx, &h)?;
        let pixels = wavelet::gop_synthesis_var(&grid, PIXEL_CHANNELS)?;
        Ok((taps, pixels))
    }

    /// The injection taps alone, without running the remaining layers.
    pub fn taps<'g>(&self, cx: Ctx<'g>, latent: &Var<'g>) -> Result<Vec<Var<'g>>> {
        let mut taps = Vec::with_capacity(INJECTION_POINTS);
        let mut h = self.stem.forward(cx, latent)?.silu()?;
        taps.push(h);
        for blk in &self.up[..INJECTION_POINTS - 1] {
            h = nn::upsample(&h, blk.temporal_up, 2)?;
            h = blk.spatial.forward(cx, &h)?.silu()?;
            h = blk.temporal.forward(cx, &h)?.silu()?;
            taps.push(h);
        }
        Ok(taps)
    }

    /// `(t, h, w)` of each tap for a latent grid.
    pub fn tap_extents(latent: [usize; 3]) -> [[usize; 3]; INJECTION_POINTS] {
        let t1 = 1 + 2 * (latent[0] - 1);
        [
            latent,
            [t1, latent[1] * 2, latent[2] * 2],
            [1 + 2 * (t1 - 1), latent[1] * 4, latent[2] * 4],
        ]
    }

    /// Convs used by [`Self::taps`].
    pub fn tap_convs(&self) -> Vec<&Conv3d> {
        let mut v = vec![&self.stem];
        for b in &self.up[..INJECTION_POINTS - 1] {
            v.push(&b.spatial);
            v.push(&b.temporal);
        }
        v
    }

    pub fn convs(&self) -> Vec<&Conv3d> {
        let mut v = vec![&self.stem];
        for b in &self.up {
            v.push(&b.spatial);
            v.push(&b.temporal);
        }
        v.push(&self.out);
        v
    }

    /// `(t, h, w)` extents entering each conv, in [`Self::convs`] order.
    pub fn conv_inputs(&self, latent: [usize; 3]) -> Vec<[usize; 3]> {
        let mut ext = latent;
        let mut v = vec![ext];
        for b in &self.up {
            ext = [
                if b.temporal_up { 1 + 2 * (ext[0] - 1) } else { ext[0] },
                ext[1] * 2,
                ext[2] * 2,
            ];
            v.push(ext);
            v.push(ext);
        }
        v.push(ext);
        v
    }
}

/// Both tokenizer branches.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub fsq: FsqConfig,
    pub cont_bound: f32,
    pub disc_enc: Encoder,
    pub disc_dec: Decoder,
    pub cont_enc: Encoder,
    pub cont_dec: Decoder,
}

pub const TOKENIZER_PREFIX: &str = "tok.";
pub const DISC_DEC_PREFIX: &str = "tok.disc.dec";
pub const CONT_DEC_PREFIX: &str = "tok.cont.dec";

/// Outputs of a tokenizer pass that are needed for losses.
pub struct TokenizerOutputs<'g> {
    /// FSQ centroids with straight-through gradient.
    pub centroids: Var<'g>,
    pub codes: Vec<u32>,
    pub disc_grid: [usize; 3],
    /// Rounded continuous latent with straight-through gradient.
    pub latent: Var<'g>,
}

impl Tokenizer {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        Self {
            fsq: cfg.fsq.clone(),
            cont_bound: cfg.cont_bound,
            disc_enc: Encoder::new(b, "tok.disc.enc", Branch::Discrete, cfg),
            disc_dec: Decoder::new(b, DISC_DEC_PREFIX, CODE_CHANNELS, cfg),
            cont_enc: Encoder::new(b, "tok.cont.enc", Branch::Continuous, cfg),
            cont_dec: Decoder::new(b, CONT_DEC_PREFIX, CONT_CHANNELS, cfg),
        }
    }

    /// Continuous branch before rounding, `[B, t, h, w, 16]`.
    pub fn continuous_features<'g>(&self, cx: Ctx<'g>, pixels: &Tensor) -> Result<Var<'g>> {
        check_batch(pixels, 2 * SPACE_FACTOR)?;
        let h = self.cont_enc.forward(cx, pixels)?;
        let bound = self.cont_bound;
        Ok(h.scale(1.0 / bound).tanh()?.scale(bound))
    }

    /// Discrete branch: tanh-bounded values `[B, t, h, w, 6]`.
    pub fn discrete_features<'g>(&self, cx: Ctx<'g>, pixels: &Tensor) -> Result<Var<'g>> {
        check_batch(pixels, SPACE_FACTOR)?;
        self.disc_enc.forward(cx, pixels)?.tanh().map_err(Into::into)
    }

    /// FSQ levels of bounded features, channel-last.
    pub fn quantize_bounded(&self, bounded: &Tensor) -> Vec<u32> {
        let levels = self.fsq.levels();
        bounded
            .data()
            .iter()
            .enumerate()
            .map(|(i, &b)| fsq::level_of_bounded(b, levels[i % CODE_CHANNELS]))
            .collect()
    }

    /// Full differentiable pass used by training.
    pub fn forward<'g>(&self, cx: Ctx<'g>, pixels: &Tensor) -> Result<TokenizerOutputs<'g>> {
        let bounded = self.discrete_features(cx, pixels)?;
        let bv = bounded.value();
        let codes = self.quantize_bounded(&bv);
        let levels = self.fsq.levels();
        let cent = Tensor::new(
            bv.shape(),
            codes
                .iter()
                .enumerate()
                .map(|(i, &q)| fsq::dequantize(q, levels[i % CODE_CHANNELS]))
                .collect(),
        )?;
        let centroids = nn::straight_through(&bounded, cent)?;
        let y = self.continuous_features(cx, pixels)?;
        let rounded = quantize_latent(&y.value());
        let latent = nn::straight_through(&y, rounded)?;
        let s = bv.shape();
        Ok(TokenizerOutputs {
            centroids,
            codes,
            disc_grid: [s[1], s[2], s[3]],
            latent,
        })
    }

    /// Continuous latent of one clip, `[t, h, w, 16]`, before rounding.
    pub fn encode_continuous(&self, cx: Ctx<'_>, x: &GopTensor) -> Result<Tensor> {
        let batch = x.tensor().clone().reshape(&batched(x.tensor().shape()))?;
        let y = self.continuous_features(cx, &batch)?.value();
        let s = y.shape()[1..].to_vec();
        Ok(y.as_ref().clone().reshape(&s)?)
    }

    /// Code map and the pre-quantization (tanh-bounded) features of one clip.
    pub fn encode_discrete(&self, cx: Ctx<'_>, x: &GopTensor) -> Result<(CodeMap, Tensor)> {
        let batch = x.tensor().clone().reshape(&batched(x.tensor().shape()))?;
        let b = self.discrete_features(cx, &batch)?.value();
        let s = b.shape()[1..].to_vec();
        let bounded = b.as_ref().clone().reshape(&s)?;
        let codes = self.quantize_bounded(&bounded);
        Ok((CodeMap::new([s[0], s[1], s[2]], codes, &self.fsq)?, bounded))
    }

    /// Discrete-only reconstruction, clamped to `[0, 1]`.
    pub fn decode_pixels(&self, cx: Ctx<'_>, codes: &CodeMap) -> Result<GopTensor> {
        let c = codes.dequantize(&self.fsq);
        let latent = cx.constant(c.clone().reshape(&batched(c.shape()))?);
        let (_, pixels) = self.disc_dec.forward(cx, &latent, None)?;
        unbatch_pixels(&pixels.value())
    }

    /// Continuous-only reconstruction of the 2×-pooled clip, clamped.
    pub fn decode_continuous(&self, cx: Ctx<'_>, latent: &Tensor) -> Result<Tensor> {
        let l = cx.constant(latent.clone().reshape(&batched(latent.shape()))?);
        let (_, pixels) = self.cont_dec.forward(cx, &l, None)?;
        let p = pixels.value();
        let s = p.shape()[1..].to_vec();
        Ok(p.map(|v| v.clamp(0.0, 1.0)).reshape(&s)?)
    }
}

fn batched(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

fn check_batch(pixels: &Tensor, space: usize) -> Result<()> {
    let s = pixels.shape();
    if s.len() != 5 || s[4] != PIXEL_CHANNELS {
        return Err(CodecError::Shape(format!("expected [B, F, H, W, 3], got {s:?}")));
    }
    check_extents(s[1], s[2], s[3], space)
}

/// Clamp and drop the unit batch axis.
pub fn unbatch_pixels(p: &Tensor) -> Result<GopTensor> {
    let s = p.shape()[1..].to_vec();
    if !p.all_finite() {
        return Err(CodecError::Numeric("decoder produced non-finite pixels".into()));
    }
    GopTensor::new(p.map(|v| v.clamp(0.0, 1.0)).reshape(&s)?)
}

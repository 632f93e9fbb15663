//! Checkerboard context models for the continuous latent and the visible
//! discrete tokens.
//!
//! Anchors are positions with `h + w` even. Their distributions come from the
//! hyperprior alone; non-anchors additionally see the decoded anchors through
//! a masked 3D context convolution.

use std::rc::Rc;

use rand::Rng;
use tvc_tensor::{concat_last, math, Graph, ParamId, ParamStore, Tensor, Var};

use crate::config::{ModelConfig, CONT_CHANNELS};
use crate::entropy::{self, QuantizedCdf, SUPPORT};
use crate::error::{CodecError, Result};
use crate::fsq::{self, FsqConfig, CODE_CHANNELS};
use crate::likelihood::{self, Density};
use crate::masking::{fill_masked, Mask3D};
use crate::nn::{self, Builder, Conv3d, Ctx, Padding};
use crate::tokenizer::{quantize_latent, CodeMap};

/// Anchor positions as a mask (`true` = anchor).
pub fn checkerboard(grid: [usize; 3]) -> Mask3D {
    let mut v = Vec::with_capacity(grid.iter().product());
    for _ in 0..grid[0] {
        for h in 0..grid[1] {
            for w in 0..grid[2] {
                v.push((h + w) % 2 == 0);
            }
        }
    }
    Mask3D { grid, visible: v }
}

/// How latents are discretized in a forward pass.
pub enum Quantizer<'r, R: Rng> {
    /// Additive `U(−½, ½)` noise.
    Noise(&'r mut R),
    /// Round half away from zero.
    Round,
}

fn quantize<'g, R: Rng>(x: &Var<'g>, q: &mut Quantizer<'_, R>) -> Result<Var<'g>> {
    match q {
        Quantizer::Round => nn::straight_through(x, quantize_latent(&x.value())),
        Quantizer::Noise(rng) => {
            let noise = Tensor::from_fn(&x.shape(), |_| rng.gen_range(-0.5f32..0.5));
            Ok(x.add(&x.graph().constant(noise))?)
        }
    }
}

/// Repeat a `[C]` row over the leading axes of `shape`.
fn broadcast_row<'g>(row: &Var<'g>, shape: &[usize]) -> Result<Var<'g>> {
    let c = row.numel();
    let n: usize = shape.iter().product();
    Ok(row.gather(Rc::new((0..n).map(|i| i % c).collect()), shape)?)
}

fn zeros_like<'g>(g: &'g Graph, x: &Var<'g>) -> Var<'g> {
    g.constant(Tensor::zeros(&x.shape()))
}

/// 3D "same" convolution whose taps at even `|dh| + |dw|` are forced to zero.
#[derive(Clone, Debug)]
pub struct ContextConv {
    pub conv: Conv3d,
    tap_mask: Tensor,
}

impl ContextConv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        let kernel = [3, 5, 5];
        let conv = Conv3d::new(b, name, kernel, cin, cout, [1, 1, 1], Padding::Same);
        let mut tap_mask = Tensor::zeros(&[kernel[0], kernel[1], kernel[2], cin, cout]);
        let block = cin * cout;
        for t in 0..kernel[0] {
            for h in 0..kernel[1] {
                for w in 0..kernel[2] {
                    let (dh, dw) = (h.abs_diff(kernel[1] / 2), w.abs_diff(kernel[2] / 2));
                    if (dh + dw) % 2 == 1 {
                        let start = ((t * kernel[1] + h) * kernel[2] + w) * block;
                        tap_mask.data_mut()[start..start + block].fill(1.0);
                    }
                }
            }
        }
        Self { conv, tap_mask }
    }

    pub fn forward<'g>(&self, cx: Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let w = cx.param(self.conv.weight).mul(&cx.constant(self.tap_mask.clone()))?;
        self.conv.forward_with_weight(cx, x, &w)
    }

    /// Reads only anchors of `x` and writes only non-anchor positions.
    pub fn anchor_context<'g>(&self, cx: Ctx<'g>, x: &Var<'g>, anchors: &[&Mask3D]) -> Result<Var<'g>> {
        let zero_in = zeros_like(cx.graph, x);
        let anchor_only = fill_masked(x, &zero_in, anchors)?;
        let ctx = self.forward(cx, &anchor_only)?;
        let zero_out = zeros_like(cx.graph, &ctx);
        fill_masked(&zero_out, &ctx, anchors)
    }
}

/// Hyper-analysis, hyper-synthesis and the factorized logistic prior.
#[derive(Clone, Debug)]
pub struct HyperPrior {
    enc: [Conv3d; 2],
    dec: [Conv3d; 2],
    loc: ParamId,
    scale_raw: ParamId,
    pub channels: usize,
}

impl HyperPrior {
    pub fn new(b: &mut Builder, prefix: &str, cin: usize, width: usize, channels: usize) -> Self {
        let enc = [
            Conv3d::new(b, &format!("{prefix}.ha0"), [1, 3, 3], cin, width, [1, 1, 1], Padding::Causal),
            Conv3d::new(b, &format!("{prefix}.ha1"), [1, 3, 3], width, channels, [1, 2, 2], Padding::Causal),
        ];
        let dec = [
            Conv3d::new(b, &format!("{prefix}.hs0"), [1, 3, 3], channels, width, [1, 1, 1], Padding::Causal),
            Conv3d::new(b, &format!("{prefix}.hs1"), [1, 1, 1], width, width, [1, 1, 1], Padding::Causal),
        ];
        let loc = b.zeros(&format!("{prefix}.prior.loc"), &[channels]);
        // softplus(raw) = 1
        let raw = libm::logf(libm::expf(1.0) - 1.0);
        let scale_raw = b.full(&format!("{prefix}.prior.scale"), &[channels], raw);
        Self {
            enc,
            dec,
            loc,
            scale_raw,
            channels,
        }
    }

    pub fn width(&self) -> usize {
        self.dec[1].cout
    }

    pub fn analysis<'g>(&self, cx: Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.enc[0].forward(cx, x)?.silu()?;
        self.enc[1].forward(cx, &h)
    }

    /// Hyper features on the `extents` grid.
    pub fn synthesis<'g>(&self, cx: Ctx<'g>, z: &Var<'g>, extents: [usize; 3]) -> Result<Var<'g>> {
        let up = nn::crop(&nn::upsample(z, false, 2)?, extents)?;
        let h = self.dec[0].forward(cx, &up)?.silu()?;
        self.dec[1].forward(cx, &h)
    }

    fn prior_rows<'g>(&self, cx: Ctx<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let loc = cx.param(self.loc);
        let scale = cx.param(self.scale_raw).softplus()?.shift(entropy::SIGMA_MIN as f32);
        Ok((loc, scale))
    }

    /// Elementwise bits of hyper symbols `z`.
    pub fn bits<'g>(&self, cx: Ctx<'g>, z: &Var<'g>) -> Result<Var<'g>> {
        let (loc, scale) = self.prior_rows(cx)?;
        let shape = z.shape();
        likelihood::bits(
            Density::Logistic,
            z,
            &broadcast_row(&loc, &shape)?,
            &broadcast_row(&scale, &shape)?,
        )
    }

    /// `(loc, scale)` per channel, as used by the coder.
    pub fn prior_params(&self, ps: &ParamStore) -> Vec<(f32, f32)> {
        let loc = ps.value(self.loc).data();
        let raw = ps.value(self.scale_raw).data();
        loc.iter()
            .zip(raw)
            .map(|(&l, &r)| (l, math::softplus(r) + entropy::SIGMA_MIN as f32))
            .collect()
    }

    pub fn cdfs(&self, ps: &ParamStore) -> Result<Vec<QuantizedCdf>> {
        self.prior_params(ps)
            .into_iter()
            .map(|(l, s)| entropy::factorized_prior_cdf(l as f64, s as f64, SUPPORT))
            .collect()
    }

    /// Hyper grid for a latent grid.
    pub fn grid(extents: [usize; 3]) -> [usize; 3] {
        [extents[0], extents[1].div_ceil(2), extents[2].div_ceil(2)]
    }

    pub fn convs(&self) -> Vec<&Conv3d> {
        vec![&self.enc[0], &self.enc[1], &self.dec[0], &self.dec[1]]
    }

    /// Codes integer hyper symbols channel-innermost in raster order.
    fn encode_symbols(&self, ps: &ParamStore, z: &Tensor) -> Result<(Vec<u8>, f64)> {
        let cdfs = self.cdfs(ps)?;
        let prior = self.prior_params(ps);
        let mut enc = entropy::RangeEncoder::new();
        let mut est = 0.0;
        for (i, &v) in z.data().iter().enumerate() {
            let c = i % self.channels;
            enc.encode(entropy::symbol_of(v as i32)?, &cdfs[c])?;
            est += likelihood::bin_bits(Density::Logistic, v as f64, prior[c].0 as f64, prior[c].1 as f64);
        }
        Ok((enc.finish(), est))
    }

    fn decode_symbols(&self, ps: &ParamStore, bytes: &[u8], grid: [usize; 3]) -> Result<Tensor> {
        let cdfs = self.cdfs(ps)?;
        let n = grid.iter().product::<usize>() * self.channels;
        let order: Vec<QuantizedCdf> = (0..n).map(|i| cdfs[i % self.channels].clone()).collect();
        let syms = entropy::decode_symbols(bytes, &order)?;
        let data = syms.into_iter().map(|s| entropy::value_of(s) as f32).collect();
        Ok(Tensor::new(&[1, grid[0], grid[1], grid[2], self.channels], data)?)
    }
}

/// Sub-streams and accounting produced by one context-model encode.
#[derive(Clone, Debug, Default)]
pub struct CodedPair {
    pub z: Vec<u8>,
    pub y: Vec<u8>,
    /// Cross-entropy of the coded symbols under the model, in bits.
    pub z_bits: f64,
    pub y_bits: f64,
    pub coded_symbols: usize,
}

/// Distribution parameters of the continuous symbols, `[t, h, w, 16]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

pub struct ContinuousEncoded {
    pub coded: CodedPair,
    /// Integer latent `[t, h, w, 16]`.
    pub y_hat: Tensor,
    pub params: GaussianParams,
}

pub struct ContinuousDecoded {
    pub y_hat: Tensor,
    /// Parameters of the anchor pass and of the non-anchor pass.
    pub anchor_params: GaussianParams,
    pub nonanchor_params: GaussianParams,
}

/// Differentiable rate terms of one forward pass, in bits (sums over the batch).
pub struct Rate<'g> {
    pub z_bits: Var<'g>,
    pub y_bits: Var<'g>,
}

impl<'g> Rate<'g> {
    pub fn total(&self) -> Result<Var<'g>> {
        Ok(self.z_bits.add(&self.y_bits)?)
    }
}

#[derive(Clone, Debug)]
pub struct ContinuousCcm {
    pub hyper: HyperPrior,
    pub ctx: ContextConv,
    p1: Conv3d,
    p2: Conv3d,
}

impl ContinuousCcm {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let feat = cfg.ccm_width / 2;
        let hyper = HyperPrior::new(b, "ccm.cont", CONT_CHANNELS, feat, cfg.hyper_channels);
        let ctx = ContextConv::new(b, "ccm.cont.ctx", CONT_CHANNELS, feat);
        let p1 = Conv3d::new(b, "ccm.cont.p1", [1, 1, 1], 2 * feat, cfg.ccm_width, [1, 1, 1], Padding::Causal);
        let p2 = Conv3d::new(b, "ccm.cont.p2", [1, 1, 1], cfg.ccm_width, 2 * CONT_CHANNELS, [1, 1, 1], Padding::Causal);
        Self { hyper, ctx, p1, p2 }
    }

    /// `(μ, σ)` for every position given hyper features and the current latent.
    pub fn params<'g>(
        &self,
        cx: Ctx<'g>,
        hyper: &Var<'g>,
        y_hat: &Var<'g>,
        anchors: &[&Mask3D],
    ) -> Result<(Var<'g>, Var<'g>)> {
        let ctx = self.ctx.anchor_context(cx, y_hat, anchors)?;
        let h = concat_last(&[*hyper, ctx])?;
        let h = self.p1.forward(cx, &h)?.silu()?;
        let out = self.p2.forward(cx, &h)?;
        let mu = out.narrow_last(0, CONT_CHANNELS)?;
        let sigma = out
            .narrow_last(CONT_CHANNELS, CONT_CHANNELS)?
            .softplus()?
            .shift(entropy::SIGMA_MIN as f32);
        Ok((mu, sigma))
    }

    /// Rate of a batch of latents `y[B, t, h, w, 16]`.
    pub fn rate<'g, R: Rng>(&self, cx: Ctx<'g>, y: &Var<'g>, q: &mut Quantizer<'_, R>) -> Result<(Rate<'g>, Var<'g>)> {
        let s = y.shape();
        let grid = [s[1], s[2], s[3]];
        let board = checkerboard(grid);
        let anchors = vec![&board; s[0]];
        let y_q = quantize(y, q)?;
        let z = self.hyper.analysis(cx, y)?;
        let z_q = quantize(&z, q)?;
        let hyper = self.hyper.synthesis(cx, &z_q, grid)?;
        let (mu, sigma) = self.params(cx, &hyper, &y_q, &anchors)?;
        let y_bits = likelihood::bits(Density::Gaussian, &y_q, &mu, &sigma)?.sum();
        let z_bits = self.hyper.bits(cx, &z_q)?.sum();
        Ok((Rate { z_bits, y_bits }, y_q))
    }

    /// Codes one latent `[t, h, w, 16]`.
    pub fn encode(&self, ps: &ParamStore, y: &Tensor) -> Result<ContinuousEncoded> {
        let s = y.shape();
        if s.len() != 4 || s[3] != CONT_CHANNELS {
            return Err(CodecError::Shape(format!("continuous latent must be [t, h, w, 16], got {s:?}")));
        }
        if !y.all_finite() {
            return Err(CodecError::Numeric("non-finite continuous latent".into()));
        }
        let grid = [s[0], s[1], s[2]];
        let g = Graph::new();
        let cx = Ctx::new(&g, ps);
        let y_hat = quantize_latent(y);
        let y_var = g.constant(y.clone().reshape(&batched(s))?);
        let z = self.hyper.analysis(cx, &y_var)?.value();
        let z_hat = quantize_latent(&z);
        let (z_stream, z_bits) = self.hyper.encode_symbols(ps, &z_hat)?;
        let hyper = self.hyper.synthesis(cx, &g.constant(z_hat), grid)?;
        let board = checkerboard(grid);
        let yq = g.constant(y_hat.clone().reshape(&batched(s))?);
        let (mu, sigma) = self.params(cx, &hyper, &yq, &[&board])?;
        let params = GaussianParams {
            mu: unbatch(&mu.value())?,
            sigma: unbatch(&sigma.value())?,
        };
        let mut enc = entropy::RangeEncoder::new();
        let mut y_bits = 0.0;
        let mut count = 0;
        for pass in [true, false] {
            for p in (0..board.len()).filter(|&p| board.visible[p] == pass) {
                for c in 0..CONT_CHANNELS {
                    let i = p * CONT_CHANNELS + c;
                    let v = y_hat.data()[i];
                    let (m, sd) = (params.mu.data()[i] as f64, params.sigma.data()[i] as f64);
                    let cdf = entropy::gaussian_cdf(m, sd, SUPPORT, 1.0)?;
                    enc.encode(entropy::symbol_of(v as i32)?, &cdf)?;
                    y_bits += likelihood::bin_bits(Density::Gaussian, v as f64, m, sd);
                    count += 1;
                }
            }
        }
        Ok(ContinuousEncoded {
            coded: CodedPair {
                z: z_stream,
                y: enc.finish(),
                z_bits,
                y_bits,
                coded_symbols: count,
            },
            y_hat,
            params,
        })
    }

    /// Recovers the integer latent on `grid` from its two sub-streams.
    pub fn decode(&self, ps: &ParamStore, grid: [usize; 3], z_stream: &[u8], y_stream: &[u8]) -> Result<ContinuousDecoded> {
        let g = Graph::new();
        let cx = Ctx::new(&g, ps);
        let z_hat = self.hyper.decode_symbols(ps, z_stream, HyperPrior::grid(grid))?;
        let hyper = self.hyper.synthesis(cx, &g.constant(z_hat), grid)?;
        let board = checkerboard(grid);
        let shape = [grid[0], grid[1], grid[2], CONT_CHANNELS];
        let mut y_hat = Tensor::zeros(&shape);
        let mut dec = if y_stream.is_empty() && board.is_empty() {
            None
        } else {
            Some(entropy::RangeDecoder::new(y_stream)?)
        };
        let mut pass_params = Vec::new();
        for pass in [true, false] {
            let yq = g.constant(y_hat.clone().reshape(&batched(&shape))?);
            let (mu, sigma) = self.params(cx, &hyper, &yq, &[&board])?;
            let params = GaussianParams {
                mu: unbatch(&mu.value())?,
                sigma: unbatch(&sigma.value())?,
            };
            for p in (0..board.len()).filter(|&p| board.visible[p] == pass) {
                for c in 0..CONT_CHANNELS {
                    let i = p * CONT_CHANNELS + c;
                    let cdf = entropy::gaussian_cdf(params.mu.data()[i] as f64, params.sigma.data()[i] as f64, SUPPORT, 1.0)?;
                    let d = dec.as_mut().expect("non-empty grid has a decoder");
                    y_hat.data_mut()[i] = entropy::value_of(d.decode(&cdf)?) as f32;
                }
            }
            pass_params.push(params);
        }
        let nonanchor_params = pass_params.pop().expect("two passes");
        let anchor_params = pass_params.pop().expect("two passes");
        Ok(ContinuousDecoded {
            y_hat,
            anchor_params,
            nonanchor_params,
        })
    }

    pub fn convs(&self) -> Vec<&Conv3d> {
        let mut v = self.hyper.convs();
        v.extend([&self.ctx.conv, &self.p1, &self.p2]);
        v
    }
}

/// Positions of a decoded discrete grid; masked positions stay unset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartialCodeMap {
    pub grid: [usize; 3],
    /// `[t, h, w, 6]`, zero where unset.
    pub codes: Vec<u32>,
    pub set: Vec<bool>,
}

impl PartialCodeMap {
    /// The visible part of a complete code map.
    pub fn from_codes(codes: &CodeMap, mask: &Mask3D) -> Result<Self> {
        if mask.grid != codes.grid {
            return Err(CodecError::Shape(format!("mask {:?} vs code grid {:?}", mask.grid, codes.grid)));
        }
        let mut out = codes.codes.clone();
        for (p, &v) in mask.visible.iter().enumerate() {
            if !v {
                out[p * CODE_CHANNELS..(p + 1) * CODE_CHANNELS].fill(0);
            }
        }
        Ok(Self {
            grid: codes.grid,
            codes: out,
            set: mask.visible.clone(),
        })
    }

    pub fn visible_codes(&self) -> Vec<&[u32]> {
        (0..self.set.len())
            .filter(|&p| self.set[p])
            .map(|p| &self.codes[p * CODE_CHANNELS..(p + 1) * CODE_CHANNELS])
            .collect()
    }

    /// FSQ centroids where set, zero elsewhere.
    pub fn centroids(&self, fsq: &FsqConfig) -> Tensor {
        let levels = fsq.levels();
        let g = self.grid;
        Tensor::from_fn(&[g[0], g[1], g[2], CODE_CHANNELS], |i| {
            if self.set[i / CODE_CHANNELS] {
                fsq::dequantize(self.codes[i], levels[i % CODE_CHANNELS])
            } else {
                0.0
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct DiscreteCcm {
    pub fsq: FsqConfig,
    pub hyper: HyperPrior,
    pub fill: Conv3d,
    pub ctx: ContextConv,
    p1: Conv3d,
    p2: Conv3d,
}

impl DiscreteCcm {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let feat = cfg.ccm_width / 2;
        let lmax = cfg.fsq.max_level() as usize;
        let hyper = HyperPrior::new(b, "ccm.disc", CODE_CHANNELS, feat, cfg.hyper_channels);
        let fill = Conv3d::new(b, "ccm.disc.fill", [1, 1, 1], CONT_CHANNELS, CODE_CHANNELS, [1, 1, 1], Padding::Causal);
        let ctx = ContextConv::new(b, "ccm.disc.ctx", CODE_CHANNELS, feat);
        let p1 = Conv3d::new(
            b,
            "ccm.disc.p1",
            [1, 1, 1],
            2 * feat + CONT_CHANNELS,
            cfg.ccm_width,
            [1, 1, 1],
            Padding::Causal,
        );
        let p2 = Conv3d::new(b, "ccm.disc.p2", [1, 1, 1], cfg.ccm_width, CODE_CHANNELS * lmax, [1, 1, 1], Padding::Causal);
        Self {
            fsq: cfg.fsq.clone(),
            hyper,
            fill,
            ctx,
            p1,
            p2,
        }
    }

    fn lmax(&self) -> usize {
        self.fsq.max_level() as usize
    }

    /// Continuous latent `[B, tc, hc, wc, 16]` upsampled onto the discrete grid.
    pub fn continuous_on_grid<'g>(&self, y_hat: &Var<'g>, grid: [usize; 3]) -> Result<Var<'g>> {
        let s = y_hat.shape();
        if s.len() != 5 || s[1] != grid[0] || 2 * s[2] < grid[1] || 2 * s[3] < grid[2] {
            return Err(CodecError::Shape(format!(
                "continuous grid {s:?} does not cover discrete grid {grid:?}"
            )));
        }
        nn::crop(&nn::upsample(y_hat, false, 2)?, grid)
    }

    /// Visible positions carry centroids, masked ones the projected continuous values.
    pub fn filled<'g>(&self, cx: Ctx<'g>, centroids: &Var<'g>, cont: &Var<'g>, masks: &[&Mask3D]) -> Result<Var<'g>> {
        let proj = self.fill.forward(cx, cont)?;
        fill_masked(centroids, &proj, masks)
    }

    /// Per-channel level logits `[B, t, h, w, 6·Lmax]`.
    pub fn logits<'g>(&self, cx: Ctx<'g>, hyper: &Var<'g>, cont: &Var<'g>, filled: &Var<'g>, anchors: &[&Mask3D]) -> Result<Var<'g>> {
        let ctx = self.ctx.anchor_context(cx, filled, anchors)?;
        let h = concat_last(&[*hyper, *cont, ctx])?;
        let h = self.p1.forward(cx, &h)?.silu()?;
        self.p2.forward(cx, &h)
    }

    /// Rate of a batch: `centroids[B, t, h, w, 6]`, rounded continuous latent
    /// `[B, tc, hc, wc, 16]`, true codes and masks per item.
    pub fn rate<'g, R: Rng>(
        &self,
        cx: Ctx<'g>,
        centroids: &Var<'g>,
        y_hat: &Var<'g>,
        codes: &[&CodeMap],
        masks: &[&Mask3D],
        q: &mut Quantizer<'_, R>,
    ) -> Result<Rate<'g>> {
        let s = centroids.shape();
        let grid = [s[1], s[2], s[3]];
        let cont = self.continuous_on_grid(y_hat, grid)?;
        let filled = self.filled(cx, centroids, &cont, masks)?;
        let z = self.hyper.analysis(cx, &filled)?;
        let z_q = quantize(&z, q)?;
        let hyper = self.hyper.synthesis(cx, &z_q, grid)?;
        let board = checkerboard(grid);
        let anchors = vec![&board; s[0]];
        let logits = self.logits(cx, &hyper, &cont, &filled, &anchors)?;
        let y_bits = self.token_bits(&logits, codes, masks)?;
        let z_bits = self.hyper.bits(cx, &z_q)?.sum();
        Ok(Rate { z_bits, y_bits })
    }

    /// Bits of the visible tokens under `logits`.
    pub fn token_bits<'g>(&self, logits: &Var<'g>, codes: &[&CodeMap], masks: &[&Mask3D]) -> Result<Var<'g>> {
        let lmax = self.lmax();
        let rows = logits.numel() / lmax;
        let flat = logits.reshape(&[rows, lmax])?;
        let levels = self.fsq.levels();
        let mut targets = Vec::with_capacity(rows);
        let mut valid = Vec::with_capacity(rows);
        let mut weights = Vec::with_capacity(rows);
        let inv_ln2 = std::f32::consts::LOG2_E;
        for (cm, m) in codes.iter().zip(masks) {
            for (i, &q) in cm.codes.iter().enumerate() {
                targets.push(q as usize);
                valid.push(levels[i % CODE_CHANNELS] as usize);
                weights.push(if m.visible[i / CODE_CHANNELS] { inv_ln2 } else { 0.0 });
            }
        }
        if targets.len() != rows {
            return Err(CodecError::Shape("codes do not match the logit grid".into()));
        }
        Ok(flat.cross_entropy(&targets, &valid, &weights)?)
    }

    /// Codes the visible tokens of one clip.
    pub fn encode(&self, ps: &ParamStore, codes: &CodeMap, mask: &Mask3D, y_hat: &Tensor) -> Result<CodedPair> {
        let grid = codes.grid;
        if mask.grid != grid {
            return Err(CodecError::Shape(format!("mask {:?} vs code grid {grid:?}", mask.grid)));
        }
        let g = Graph::new();
        let cx = Ctx::new(&g, ps);
        let cont = self.continuous_on_grid(&g.constant(y_hat.clone().reshape(&batched(y_hat.shape()))?), grid)?;
        let cent = codes.dequantize(&self.fsq);
        let cent = g.constant(cent.clone().reshape(&batched(cent.shape()))?);
        let filled = self.filled(cx, &cent, &cont, &[mask])?;
        let z = self.hyper.analysis(cx, &filled)?.value();
        let z_hat = quantize_latent(&z);
        let (z_stream, z_bits) = self.hyper.encode_symbols(ps, &z_hat)?;
        let hyper = self.hyper.synthesis(cx, &g.constant(z_hat), grid)?;
        let board = checkerboard(grid);
        let logits = self.logits(cx, &hyper, &cont, &filled, &[&board])?.value();
        let lmax = self.lmax();
        let levels = self.fsq.levels();
        let mut enc = entropy::RangeEncoder::new();
        let mut y_bits = 0.0;
        let mut count = 0;
        for pass in [true, false] {
            for p in (0..board.len()).filter(|&p| board.visible[p] == pass && mask.visible[p]) {
                for c in 0..CODE_CHANNELS {
                    let row = &logits.data()[(p * CODE_CHANNELS + c) * lmax..][..lmax];
                    let l = levels[c] as usize;
                    let q = codes.codes[p * CODE_CHANNELS + c] as usize;
                    enc.encode(q, &entropy::categorical_cdf(row, l)?)?;
                    let probs = entropy::categorical_probs(row, l)?;
                    y_bits -= probs[q].max(likelihood::P_MIN).log2();
                    count += 1;
                }
            }
        }
        Ok(CodedPair {
            z: z_stream,
            y: enc.finish(),
            z_bits,
            y_bits,
            coded_symbols: count,
        })
    }

    /// Decodes visible tokens; masked positions are left unset.
    pub fn decode(
        &self,
        ps: &ParamStore,
        mask: &Mask3D,
        y_hat: &Tensor,
        z_stream: &[u8],
        y_stream: &[u8],
    ) -> Result<PartialCodeMap> {
        let grid = mask.grid;
        let g = Graph::new();
        let cx = Ctx::new(&g, ps);
        let z_hat = self.hyper.decode_symbols(ps, z_stream, HyperPrior::grid(grid))?;
        let hyper = self.hyper.synthesis(cx, &g.constant(z_hat), grid)?;
        let cont = self.continuous_on_grid(&g.constant(y_hat.clone().reshape(&batched(y_hat.shape()))?), grid)?;
        let board = checkerboard(grid);
        let n = mask.len();
        let mut out = PartialCodeMap {
            grid,
            codes: vec![0; n * CODE_CHANNELS],
            set: vec![false; n],
        };
        let mut dec = if mask.visible_count() == 0 {
            None
        } else {
            Some(entropy::RangeDecoder::new(y_stream)?)
        };
        let lmax = self.lmax();
        let levels = self.fsq.levels();
        for pass in [true, false] {
            let cent = out.centroids(&self.fsq);
            let cent = g.constant(cent.clone().reshape(&batched(cent.shape()))?);
            let filled = self.filled(cx, &cent, &cont, &[mask])?;
            let logits = self.logits(cx, &hyper, &cont, &filled, &[&board])?.value();
            for p in (0..n).filter(|&p| board.visible[p] == pass && mask.visible[p]) {
                for c in 0..CODE_CHANNELS {
                    let row = &logits.data()[(p * CODE_CHANNELS + c) * lmax..][..lmax];
                    let cdf = entropy::categorical_cdf(row, levels[c] as usize)?;
                    let d = dec.as_mut().expect("visible tokens have a decoder");
                    out.codes[p * CODE_CHANNELS + c] = d.decode(&cdf)? as u32;
                }
                out.set[p] = true;
            }
        }
        Ok(out)
    }

    pub fn convs(&self) -> Vec<&Conv3d> {
        let mut v = self.hyper.convs();
        v.extend([&self.fill, &self.ctx.conv, &self.p1, &self.p2]);
        v
    }
}

pub(crate) fn batched(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

pub(crate) fn unbatch(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.first() != Some(&1) {
        return Err(CodecError::Shape(format!("expected a unit batch, got {s:?}")));
    }
    Ok(t.clone().reshape(&s[1..])?)
}

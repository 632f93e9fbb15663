//! Quality metrics and multiply-accumulate accounting.

use std::fmt::Write as _;

use tvc_tensor::{Graph, Tensor};

use crate::ccm::Quantizer;
use crate::config::{ModelConfig, CONT_CHANNELS};
use crate::error::{CodecError, Result};
use crate::fsq::CODE_CHANNELS;
use crate::masking::Mask3D;
use crate::model::Model;
use crate::nn::{Conv3d, Ctx};
use crate::tokenizer::{check_extents, CodeMap, Decoder, PIXEL_CHANNELS};
use crate::wavelet;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CodecError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(CodecError::Shape("empty clips".into()));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.numel() as f64)
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(1/MSE)`, capped at 99 dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn frames_hw(a: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(CodecError::Shape(format!("expected [F, H, W, C], got {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Mean single-scale SSIM over sliding 8×8 windows, channels and frames,
/// clamped to `[0, 1]`. Frames smaller than a window use one whole-frame window.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (f, h, w, c) = frames_hw(a)?;
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let at = |t: &Tensor, fi: usize, y: usize, x: usize, ch: usize| t.data()[((fi * h + y) * w + x) * c + ch] as f64;
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for fi in 0..f {
        for ch in 0..c {
            for y0 in 0..=h - wh {
                for x0 in 0..=w - ww {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for y in y0..y0 + wh {
                        for x in x0..x0 + ww {
                            let (p, q) = (at(a, fi, y, x, ch), at(b, fi, y, x, ch));
                            sa += p;
                            sb += q;
                            saa += p * p;
                            sbb += q * q;
                            sab += p * q;
                        }
                    }
                    let (ma, mb) = (sa / n, sb / n);
                    let va = saa / n - ma * ma;
                    let vb = sbb / n - mb * mb;
                    let cov = sab / n - ma * mb;
                    total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

/// `[F, H, W, C]` error image → its 2× average-pooled version.
fn pool_f64(e: &[f64], f: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; f * ho * wo * c];
    for fi in 0..f {
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| e[((fi * h + yy) * w + xx) * c + ch];
                    out[((fi * ho + y) * wo + x) * c + ch] =
                        0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1));
                }
            }
        }
    }
    out
}

/// Gradient-difference proxy between two clips: mean absolute difference of
/// horizontal and vertical finite differences, averaged over a 3-level pyramid.
/// Zero exactly when the spatial gradients agree. Not LPIPS.
pub fn perceptual_proxy(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (f, mut h, mut w, c) = frames_hw(a)?;
    let mut e: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 - y as f64).collect();
    let mut total = 0.0;
    for level in 0..crate::fusion::PYRAMID_LEVELS {
        if level > 0 {
            if h < 2 || w < 2 {
                break;
            }
            e = pool_f64(&e, f, h, w, c);
            h /= 2;
            w /= 2;
        }
        let at = |fi: usize, y: usize, x: usize, ch: usize| e[((fi * h + y) * w + x) * c + ch];
        if w > 1 {
            let mut s = 0.0;
            for fi in 0..f {
                for y in 0..h {
                    for x in 0..w - 1 {
                        for ch in 0..c {
                            s += (at(fi, y, x + 1, ch) - at(fi, y, x, ch)).abs();
                        }
                    }
                }
            }
            total += s / (f * h * (w - 1) * c) as f64;
        }
        if h > 1 {
            let mut s = 0.0;
            for fi in 0..f {
                for y in 0..h - 1 {
                    for x in 0..w {
                        for ch in 0..c {
                            s += (at(fi, y + 1, x, ch) - at(fi, y, x, ch)).abs();
                        }
                    }
                }
            }
            total += s / (f * (h - 1) * w * c) as f64;
        }
    }
    Ok(total / crate::fusion::PYRAMID_LEVELS as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Tokenizer,
    Checkerboard,
    Predictor,
    Fusion,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Tokenizer, Module::Checkerboard, Module::Predictor, Module::Fusion];

    pub fn label(self) -> &'static str {
        match self {
            Module::Tokenizer => "tokenizer",
            Module::Checkerboard => "checkerboard",
            Module::Predictor => "predictor",
            Module::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMacs {
    pub module: Module,
    pub layer: String,
    pub macs: u64,
}

/// Analytic multiply-accumulates of encoding plus decoding one GoP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerMacs>,
}

impl MacReport {
    pub fn module(&self, m: Module) -> u64 {
        self.layers.iter().filter(|l| l.module == m).map(|l| l.macs).sum()
    }

    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "MACs per GoP ({}x{}x{})", self.frames, self.height, self.width);
        for m in Module::ALL {
            let _ = writeln!(s, "{:<14}{:>16}", m.label(), self.module(m));
        }
        let _ = writeln!(s, "{:<14}{:>16}", "total", self.total());
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("module,layer,macs\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.module.label(), l.layer, l.macs);
        }
        for m in Module::ALL {
            let _ = writeln!(s, "{},total,{}", m.label(), self.module(m));
        }
        let _ = writeln!(s, "all,total,{}", self.total());
        s
    }
}

struct Counter<'m> {
    model: &'m Model,
    layers: Vec<LayerMacs>,
}

impl Counter<'_> {
    fn conv(&mut self, module: Module, conv: &Conv3d, input: [usize; 3]) -> Result<[usize; 3]> {
        self.layers.push(LayerMacs {
            module,
            layer: self.model.store.name(conv.weight).to_string(),
            macs: conv.macs(1, input)?,
        });
        conv.output_extents(input)
    }

    fn chain(&mut self, module: Module, convs: &[&Conv3d], mut input: [usize; 3]) -> Result<[usize; 3]> {
        for c in convs {
            input = self.conv(module, c, input)?;
        }
        Ok(input)
    }

    fn decoder(&mut self, module: Module, dec: &Decoder, latent: [usize; 3]) -> Result<()> {
        for (c, ext) in dec.convs().into_iter().zip(dec.conv_inputs(latent)) {
            self.conv(module, c, ext)?;
        }
        Ok(())
    }
}

/// Per-layer analytic counts for one `frames × height × width` GoP.
pub fn count_macs(model: &Model, frames: usize, height: usize, width: usize) -> Result<MacReport> {
    check_extents(frames, height, width, 2 * crate::config::SPACE_FACTOR)?;
    let mut k = Counter {
        model,
        layers: Vec::new(),
    };
    let extents = |h: usize, w: usize| {
        let s = wavelet::gop_grid_shape(frames, h, w, PIXEL_CHANNELS);
        [s[0], s[1], s[2]]
    };
    let disc_in = extents(height, width);
    let cont_in = extents(height / 2, width / 2);
    let disc = k.chain(Module::Tokenizer, &model.tok.disc_enc.convs(), disc_in)?;
    let cont = k.chain(Module::Tokenizer, &model.tok.cont_enc.convs(), cont_in)?;

    for (hyper, grid) in [(&model.ccm_cont.hyper, cont), (&model.ccm_disc.hyper, disc)] {
        let convs = hyper.convs();
        k.chain(Module::Checkerboard, &convs[..2], grid)?;
        k.chain(Module::Checkerboard, &convs[2..], grid)?;
    }
    let cc = model.ccm_cont.convs();
    let n = cc.len();
    k.chain(Module::Checkerboard, &cc[n - 3..n - 2], cont)?;
    k.chain(Module::Checkerboard, &cc[n - 2..], cont)?;
    let dc = model.ccm_disc.convs();
    let n = dc.len();
    for c in &dc[n - 4..] {
        k.conv(Module::Checkerboard, c, disc)?;
    }

    let pred = model.pred.macs(1, disc, cont)?;
    k.layers.push(LayerMacs {
        module: Module::Predictor,
        layer: "pred".into(),
        macs: pred,
    });

    k.decoder(Module::Fusion, &model.tok.disc_dec, disc)?;
    let ctrl = &model.fusion.control;
    for (c, ext) in ctrl.tap_convs().into_iter().zip(ctrl.conv_inputs(cont)) {
        k.conv(Module::Fusion, c, ext)?;
    }
    for (p, ext) in model.fusion.proj.iter().zip(Decoder::tap_extents(disc)) {
        k.conv(Module::Fusion, p, ext)?;
    }
    Ok(MacReport {
        frames,
        height,
        width,
        layers: k.layers,
    })
}

/// Counts by running every module once and reading the graph's own tally.
pub fn recount_macs(model: &Model, frames: usize, height: usize, width: usize) -> Result<[u64; 4]> {
    let x = Tensor::full(&[1, frames, height, width, PIXEL_CHANNELS], 0.5);
    let ps = &model.store;
    let measure = |f: &dyn Fn(Ctx<'_>) -> Result<()>| -> Result<u64> {
        let g = Graph::new();
        f(Ctx::new(&g, ps))?;
        Ok(g.macs())
    };
    let disc_grid = ModelConfig::discrete_grid(frames, height, width);
    let cont_grid = ModelConfig::continuous_grid(frames, height, width);
    let tok = measure(&|cx| {
        model.tok.discrete_features(cx, &x)?;
        model.tok.continuous_features(cx, &x)?;
        Ok(())
    })?;
    let cent = Tensor::zeros(&[1, disc_grid[0], disc_grid[1], disc_grid[2], CODE_CHANNELS]);
    let y = Tensor::zeros(&[1, cont_grid[0], cont_grid[1], cont_grid[2], CONT_CHANNELS]);
    let codes = CodeMap::new(
        disc_grid,
        vec![0; disc_grid.iter().product::<usize>() * CODE_CHANNELS],
        &model.cfg.fsq,
    )?;
    let mask = Mask3D::all(disc_grid, true);
    let ccm = measure(&|cx| {
        let mut q = Quantizer::<rand_chacha::ChaCha8Rng>::Round;
        model.ccm_cont.rate(cx, &cx.constant(y.clone()), &mut q)?;
        model
            .ccm_disc
            .rate(cx, &cx.constant(cent.clone()), &cx.constant(y.clone()), &[&codes], &[&mask], &mut q)?;
        Ok(())
    })?;
    let pred = measure(&|cx| {
        model
            .pred
            .predict(cx, &cx.constant(cent.clone()), &[&mask], &cx.constant(y.clone()))?;
        Ok(())
    })?;
    let fusion = measure(&|cx| {
        model
            .fusion
            .decode(cx, &model.tok, &cx.constant(cent.clone()), &cx.constant(y.clone()))?;
        Ok(())
    })?;
    Ok([tok, ccm, pred, fusion])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_reference_points() {
        let a = Tensor::zeros(&[1, 2, 2, 3]);
        let b = Tensor::ones(&[1, 2, 2, 3]);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&b, &b).unwrap(), 1.0);
    }
}

//! Multi-scale residual fusion of the continuous stream into the discrete
//! pixel decoder, and the pixel loss.

use std::rc::Rc;

use tvc_tensor::{Tensor, Var};

use crate::config::{ModelConfig, CONT_CHANNELS};
use crate::error::{CodecError, Result};
use crate::nn::{self, Builder, Conv3d, Ctx};
use crate::tokenizer::{Decoder, Tokenizer, INJECTION_POINTS};

pub const PREFIX: &str = "fusion.";
pub const CONTROL_PREFIX: &str = "fusion.ctrl";

pub const LAMBDA_L1: f32 = 1.0;
pub const LAMBDA_PERC: f32 = 4.0;
pub const PYRAMID_LEVELS: usize = 3;

#[derive(Clone, Debug)]
pub struct Fusion {
    pub control: Decoder,
    pub proj: Vec<Conv3d>,
}

impl Fusion {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, main: &Decoder) -> Self {
        let control = Decoder::new(b, CONTROL_PREFIX, CONT_CHANNELS, cfg);
        let proj = control
            .tap_widths()
            .iter()
            .zip(main.tap_widths())
            .enumerate()
            .map(|(i, (&cin, cout))| Conv3d::zeroed(b, &format!("fusion.zero{i}"), cin, cout))
            .collect();
        Self { control, proj }
    }

    /// Residuals added to the main path, one per injection point.
    pub fn injections<'g>(&self, cx: Ctx<'g>, y_hat: &Var<'g>, main_grid: [usize; 3]) -> Result<[Var<'g>; INJECTION_POINTS]> {
        let taps = self.control.taps(cx, y_hat)?;
        let main_ext = Decoder::tap_extents(main_grid);
        let mut out = Vec::with_capacity(INJECTION_POINTS);
        for ((tap, proj), ext) in taps.iter().zip(&self.proj).zip(main_ext) {
            let up = nn::upsample(tap, false, 2)?;
            let s = up.shape();
            if [s[1], s[2], s[3]] != ext {
                return Err(CodecError::Shape(format!(
                    "control feature {:?} does not align with main feature {ext:?}",
                    &s[1..4]
                )));
            }
            out.push(proj.forward(cx, &up)?);
        }
        Ok(out.try_into().map_err(|_| CodecError::Shape("injection count".into()))?)
    }

    /// Fused pixels (unclamped) from centroids `[B, t, h, w, 6]` and `y_hat[B, tc, hc, wc, 16]`.
    pub fn decode<'g>(&self, cx: Ctx<'g>, tok: &Tokenizer, centroids: &Var<'g>, y_hat: &Var<'g>) -> Result<Var<'g>> {
        let s = centroids.shape();
        let inj = self.injections(cx, y_hat, [s[1], s[2], s[3]])?;
        let (_, pixels) = tok.disc_dec.forward(cx, centroids, Some(&inj))?;
        Ok(pixels)
    }

    pub fn convs(&self) -> Vec<&Conv3d> {
        let mut v = self.control.tap_convs();
        v.extend(self.proj.iter());
        v
    }
}

fn pool2<'g>(x: &Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    let r = s.len();
    let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
    let lead: usize = s[..r - 3].iter().product();
    let (ho, wo) = (h / 2, w / 2);
    let mut out_shape = s.clone();
    out_shape[r - 3] = ho;
    out_shape[r - 2] = wo;
    let mut acc: Option<Var<'g>> = None;
    for (dh, dw) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut idx = Vec::with_capacity(lead * ho * wo * c);
        for l in 0..lead {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ((l * h + 2 * i + dh) * w + 2 * j + dw) * c;
                    idx.extend(base..base + c);
                }
            }
        }
        let g = x.gather(Rc::new(idx), &out_shape)?;
        acc = Some(match acc {
            None => g,
            Some(a) => a.add(&g)?,
        });
    }
    Ok(acc.expect("four taps").scale(0.25))
}

/// Forward differences along H (`axis = 0`) or W (`axis = 1`) of `[..., H, W, C]`.
fn diff<'g>(x: &Var<'g>, axis: usize) -> Result<Option<Var<'g>>> {
    let s = x.shape();
    let r = s.len();
    let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
    let lead: usize = s[..r - 3].iter().product();
    let (oh, ow) = if axis == 0 { (h.saturating_sub(1), w) } else { (h, w.saturating_sub(1)) };
    if oh == 0 || ow == 0 {
        return Ok(None);
    }
    let (sh, sw) = if axis == 0 { (1, 0) } else { (0, 1) };
    let mut a = Vec::with_capacity(lead * oh * ow * c);
    let mut b = Vec::with_capacity(lead * oh * ow * c);
    for l in 0..lead {
        for i in 0..oh {
            for j in 0..ow {
                let base = ((l * h + i) * w + j) * c;
                let next = ((l * h + i + sh) * w + j + sw) * c;
                a.extend(next..next + c);
                b.extend(base..base + c);
            }
        }
    }
    let mut shape = s.clone();
    shape[r - 3] = oh;
    shape[r - 2] = ow;
    Ok(Some(x.gather(Rc::new(a), &shape)?.sub(&x.gather(Rc::new(b), &shape)?)?))
}

/// Gradient-difference proxy of an error image `e = x̂ − x`, averaged over pyramid levels.
pub fn perceptual_proxy<'g>(e: &Var<'g>) -> Result<Var<'g>> {
    let mut level = *e;
    let mut total: Option<Var<'g>> = None;
    for l in 0..PYRAMID_LEVELS {
        if l > 0 {
            let s = level.shape();
            let r = s.len();
            if s[r - 3] < 2 || s[r - 2] < 2 {
                break;
            }
            level = pool2(&level)?;
        }
        for axis in 0..2 {
            if let Some(d) = diff(&level, axis)? {
                let term = d.abs()?.mean();
                total = Some(match total {
                    None => term,
                    Some(t) => t.add(&term)?,
                });
            }
        }
    }
    let total = total.unwrap_or_else(|| e.graph().constant(Tensor::scalar(0.0)));
    Ok(total.scale(1.0 / PYRAMID_LEVELS as f32))
}

/// `λ1·L1 + λ2·proxy` between a target clip and a reconstruction.
pub fn pixel_loss<'g>(target: &Tensor, recon: &Var<'g>) -> Result<Var<'g>> {
    if target.shape() != recon.shape().as_slice() {
        return Err(CodecError::Shape(format!(
            "pixel loss: target {:?} vs reconstruction {:?}",
            target.shape(),
            recon.shape()
        )));
    }
    let e = recon.sub(&recon.graph().constant(target.clone()))?;
    let l1 = e.abs()?.mean();
    let perc = perceptual_proxy(&e)?;
    Ok(l1.scale(LAMBDA_L1).add(&perc.scale(LAMBDA_PERC))?)
}

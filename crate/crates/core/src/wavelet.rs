//! Orthonormal Haar wavelet transform over `(t, h, w)`.
//!
//! [`WaveletStack`] works in place on a `[T, H, W, C]` tensor using the Mallat
//! layout: along every transformed axis the first half of the active region
//! holds the lowpass band and the second half the highpass band. Further
//! levels recurse into the all-lowpass corner.
//!
//! The GoP helpers pack one level into channels for the convolutional stack.
//! The leading frame of a `1 + T` clip only gets the spatial transform, so the
//! causal first frame stays on its own.

use std::f32::consts::FRAC_1_SQRT_2;
use std::rc::Rc;

use tvc_tensor::{CustomOp, Tensor, Var};

use crate::error::{CodecError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaveletStack {
    pub levels: usize,
    /// Which of `(t, h, w)` are transformed.
    pub axes: [bool; 3],
}

impl WaveletStack {
    pub fn new(levels: usize, axes: [bool; 3]) -> Self {
        Self { levels, axes }
    }

    pub fn spatial(levels: usize) -> Self {
        Self::new(levels, [false, true, true])
    }

    pub fn full(levels: usize) -> Self {
        Self::new(levels, [true, true, true])
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(CodecError::Shape(format!(
                "wavelet expects [T, H, W, C], got {shape:?}"
            )));
        }
        let unit = 1usize << self.levels;
        for ax in 0..3 {
            if self.axes[ax] && shape[ax] % unit != 0 {
                return Err(CodecError::Shape(format!(
                    "axis {ax} extent {} not divisible by 2^{}",
                    shape[ax], self.levels
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x.shape())?;
        let mut out = x.clone();
        let mut active = [x.shape()[0], x.shape()[1], x.shape()[2]];
        for _ in 0..self.levels {
            for ax in 0..3 {
                if self.axes[ax] {
                    haar_axis(out.shape().to_vec(), out.data_mut(), ax, active, false);
                }
            }
            for ax in 0..3 {
                if self.axes[ax] {
                    active[ax] /= 2;
                }
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, coeffs: &Tensor) -> Result<Tensor> {
        self.check(coeffs.shape())?;
        let mut out = coeffs.clone();
        let full = [coeffs.shape()[0], coeffs.shape()[1], coeffs.shape()[2]];
        for level in (0..self.levels).rev() {
            let mut active = full;
            for ax in 0..3 {
                if self.axes[ax] {
                    active[ax] >>= level;
                }
            }
            for ax in (0..3).rev() {
                if self.axes[ax] {
                    haar_axis(out.shape().to_vec(), out.data_mut(), ax, active, true);
                }
            }
        }
        Ok(out)
    }
}

/// One Haar step along `axis` over the leading `active` region.
fn haar_axis(shape: Vec<usize>, data: &mut [f32], axis: usize, active: [usize; 3], inverse: bool) {
    let c = shape[3];
    let strides = [shape[1] * shape[2] * c, shape[2] * c, c];
    let n = active[axis];
    let half = n / 2;
    let step = strides[axis];
    let mut line = vec![0.0f32; n];
    let mut ranges = [active[0], active[1], active[2]];
    ranges[axis] = 1;
    for i0 in 0..ranges[0] {
        for i1 in 0..ranges[1] {
            for i2 in 0..ranges[2] {
                for ch in 0..c {
                    let base = i0 * strides[0] + i1 * strides[1] + i2 * strides[2] + ch;
                    for (i, v) in line.iter_mut().enumerate() {
                        *v = data[base + i * step];
                    }
                    for i in 0..half {
                        let (a, b) = if inverse {
                            let (lo, hi) = (line[i], line[half + i]);
                            ((lo + hi) * FRAC_1_SQRT_2, (lo - hi) * FRAC_1_SQRT_2)
                        } else {
                            let (x0, x1) = (line[2 * i], line[2 * i + 1]);
                            ((x0 + x1) * FRAC_1_SQRT_2, (x0 - x1) * FRAC_1_SQRT_2)
                        };
                        if inverse {
                            data[base + 2 * i * step] = a;
                            data[base + (2 * i + 1) * step] = b;
                        } else {
                            data[base + i * step] = a;
                            data[base + (half + i) * step] = b;
                        }
                    }
                }
            }
        }
    }
}

/// Number of channels after packing one 3-axis level of `channels` inputs.
pub const fn packed_channels(channels: usize) -> usize {
    channels * 8
}

/// Move one-level Mallat subbands into channels:
/// `[T, H, W, C]` → `[T/tf, H/2, W/2, bands·C]`, band = 4·tb + 2·hb + wb.
fn pack(coeffs: &Tensor, temporal: bool, out_channels: usize, out: &mut [f32]) {
    let s = coeffs.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (tt, th, tw) = (if temporal { t / 2 } else { t }, h / 2, w / 2);
    let tbands = if temporal { 2 } else { 1 };
    let d = coeffs.data();
    for tb in 0..tbands {
        for hb in 0..2 {
            for wb in 0..2 {
                let band = 4 * tb + 2 * hb + wb;
                for t2 in 0..tt {
                    for h2 in 0..th {
                        for w2 in 0..tw {
                            let src = (((tb * tt + t2) * h + hb * th + h2) * w + wb * tw + w2) * c;
                            let dst = ((t2 * th + h2) * tw + w2) * out_channels + band * c;
                            out[dst..dst + c].copy_from_slice(&d[src..src + c]);
                        }
                    }
                }
            }
        }
    }
}

fn unpack(grid: &[f32], shape: [usize; 4], temporal: bool, grid_channels: usize) -> Tensor {
    let [t, h, w, c] = shape;
    let (tt, th, tw) = (if temporal { t / 2 } else { t }, h / 2, w / 2);
    let tbands = if temporal { 2 } else { 1 };
    let mut out = Tensor::zeros(&shape);
    let d = out.data_mut();
    for tb in 0..tbands {
        for hb in 0..2 {
            for wb in 0..2 {
                let band = 4 * tb + 2 * hb + wb;
                for t2 in 0..tt {
                    for h2 in 0..th {
                        for w2 in 0..tw {
                            let dst = (((tb * tt + t2) * h + hb * th + h2) * w + wb * tw + w2) * c;
                            let src = ((t2 * th + h2) * tw + w2) * grid_channels + band * c;
                            d[dst..dst + c].copy_from_slice(&grid[src..src + c]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output grid extents of [`gop_analysis`] for a `[1+T, H, W, C]` clip.
pub fn gop_grid_shape(frames: usize, height: usize, width: usize, channels: usize) -> [usize; 4] {
    [1 + (frames - 1) / 2, height / 2, width / 2, packed_channels(channels)]
}

/// One analysis level of a `[1+T, H, W, C]` GoP into a `[1+T/2, H/2, W/2, 8C]` grid.
///
/// Frame 0 is transformed spatially only and fills bands 0..4; its temporal
/// detail bands are zero.
pub fn gop_analysis(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || s[0] == 0 || (s[0] - 1) % 2 != 0 || s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(CodecError::Shape(format!(
            "GoP analysis needs [1+T, H, W, C] with even T, H, W, got {s:?}"
        )));
    }
    let (f, h, w, c) = (s[0], s[1], s[2], s[3]);
    let grid = gop_grid_shape(f, h, w, c);
    let oc = grid[3];
    let frame_len = h * w * c;
    let grid_frame = grid[1] * grid[2] * oc;
    let mut out = vec![0.0f32; grid.iter().product()];

    let lead = Tensor::new(&[1, h, w, c], x.data()[..frame_len].to_vec())?;
    let lead = WaveletStack::spatial(1).forward(&lead)?;
    pack(&lead, false, oc, &mut out[..grid_frame]);

    if f > 1 {
        let rest = Tensor::new(&[f - 1, h, w, c], x.data()[frame_len..].to_vec())?;
        let rest = WaveletStack::full(1).forward(&rest)?;
        pack(&rest, true, oc, &mut out[grid_frame..]);
    }
    Ok(Tensor::new(&grid, out)?)
}

/// Inverse of [`gop_analysis`]; the lead frame's temporal detail bands are ignored.
pub fn gop_synthesis(grid: &Tensor, channels: usize) -> Result<Tensor> {
    let s = grid.shape();
    if s.len() != 4 || s[3] != packed_channels(channels) || s[0] == 0 {
        return Err(CodecError::Shape(format!(
            "GoP synthesis grid {s:?} does not carry {channels} packed channels"
        )));
    }
    let (gt, gh, gw, oc) = (s[0], s[1], s[2], s[3]);
    let (h, w) = (gh * 2, gw * 2);
    let frames = 1 + 2 * (gt - 1);
    let grid_frame = gh * gw * oc;
    let frame_len = h * w * channels;
    let mut out = Vec::with_capacity(frames * frame_len);

    let lead = unpack(&grid.data()[..grid_frame], [1, h, w, channels], false, oc);
    out.extend_from_slice(WaveletStack::spatial(1).inverse(&lead)?.data());
    if gt > 1 {
        let rest = unpack(&grid.data()[grid_frame..], [frames - 1, h, w, channels], true, oc);
        out.extend_from_slice(WaveletStack::full(1).inverse(&rest)?.data());
    }
    Ok(Tensor::new(&[frames, h, w, channels], out)?)
}

fn per_batch(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    if x.rank() == 4 {
        return f(x);
    }
    let items: Vec<Tensor> = (0..x.shape()[0])
        .map(|b| f(&x.index_axis0(b)?))
        .collect::<Result<_>>()?;
    Ok(Tensor::stack(&items)?)
}

/// [`gop_analysis`] over an optional leading batch axis.
pub fn gop_analysis_batch(x: &Tensor) -> Result<Tensor> {
    per_batch(x, gop_analysis)
}

struct SynthesisOp;

impl CustomOp for SynthesisOp {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        // Synthesis is orthonormal on the bands it reads, so its adjoint is analysis.
        vec![Some(gop_analysis_batch(grad).expect("gradient has pixel shape"))]
    }
}

/// Differentiable [`gop_synthesis`] over `[B?, 1+T/2, H/2, W/2, 8C]`.
pub fn gop_synthesis_var<'g>(grid: &Var<'g>, channels: usize) -> Result<Var<'g>> {
    let value = per_batch(&grid.value(), |g| gop_synthesis(g, channels))?;
    Ok(grid.graph().custom(&[*grid], value, Rc::new(SynthesisOp)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f32::consts::SQRT_2;

    #[test]
    fn pair_definition() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![3.0, 1.0]).unwrap();
        let y = WaveletStack::new(1, [true, false, false]).forward(&x).unwrap();
        assert!((y.data()[0] - 4.0 / SQRT_2).abs() < 1e-6);
        assert!((y.data()[1] - 2.0 / SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = Tensor::zeros(&[3, 4, 4, 1]);
        assert!(WaveletStack::full(1).forward(&x).is_err());
        assert!(WaveletStack::spatial(1).forward(&x).is_ok());
        assert!(WaveletStack::spatial(3).forward(&x).is_err());
    }

    #[test]
    fn gop_grid_shape_matches_analysis() {
        let x = Tensor::from_fn(&[9, 8, 8, 3], |i| (i % 7) as f32 * 0.1);
        let g = gop_analysis(&x).unwrap();
        assert_eq!(g.shape(), &gop_grid_shape(9, 8, 8, 3));
        assert_eq!(g.shape(), &[5, 4, 4, 24]);
        let back = gop_synthesis(&g, 3).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn single_frame_gop() {
        let x = Tensor::from_fn(&[1, 4, 4, 3], |i| i as f32 * 0.01);
        let g = gop_analysis(&x).unwrap();
        assert_eq!(g.shape(), &[1, 2, 2, 24]);
        assert!(gop_synthesis(&g, 3).unwrap().max_abs_diff(&x) < 1e-6);
    }
}

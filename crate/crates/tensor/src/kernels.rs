//! Plain-loop numeric kernels.
//!
//! Every output element is accumulated in a fixed index order, so results are
//! bit-identical across runs and across targets (rustc never contracts
//! `a * b + c` into a fused multiply-add on its own).

use crate::error::{invalid, Result};

/// Register tile of `c`: rows `i..i+MR`, columns `j..j+NR`. Row `r` of `a`
/// at reduction index `p` lives at `a[(i + r) * rs + p * ps]`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile<const MR: usize, const NR: usize>(
    i: usize,
    j: usize,
    k: usize,
    m: usize,
    a: &[f32],
    rs: usize,
    ps: usize,
    b: &[f32],
    c: &mut [f32],
) {
    let mut acc = [[0.0f32; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * m + j..(i + r) * m + j + NR]);
    }
    for p in 0..k {
        let brow: &[f32; NR] = b[p * m + j..p * m + j + NR].try_into().expect("tile width");
        for (r, row) in acc.iter_mut().enumerate() {
            let s = a[(i + r) * rs + p * ps];
            for (x, &bv) in row.iter_mut().zip(brow) {
                *x += s * bv;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * m + j..(i + r) * m + j + NR].copy_from_slice(row);
    }
}

fn row_block<const MR: usize>(i: usize, k: usize, m: usize, a: &[f32], rs: usize, ps: usize, b: &[f32], c: &mut [f32]) {
    let mut j = 0;
    while j + 16 <= m {
        tile::<MR, 16>(i, j, k, m, a, rs, ps, b, c);
        j += 16;
    }
    while j + 4 <= m {
        tile::<MR, 4>(i, j, k, m, a, rs, ps, b, c);
        j += 4;
    }
    while j < m {
        tile::<MR, 1>(i, j, k, m, a, rs, ps, b, c);
        j += 1;
    }
}

/// Shared driver; each output accumulates over `p` in ascending order.
/// The reduction is split into ascending chunks, which keeps that order.
fn gemm_strided(n: usize, k: usize, m: usize, a: &[f32], rs: usize, ps: usize, b: &[f32], c: &mut [f32]) {
    // only the transposed operand benefits from blocking
    let kc_max = if ps == 1 { k.max(1) } else { 128 };
    let mut p0 = 0;
    while p0 < k {
        let kc = kc_max.min(k - p0);
        let (a, b) = (&a[p0 * ps..], &b[p0 * m..]);
        let mut i = 0;
        while i + 4 <= n {
            row_block::<4>(i, kc, m, a, rs, ps, b, c);
            i += 4;
        }
        while i < n {
            row_block::<1>(i, kc, m, a, rs, ps, b, c);
            i += 1;
        }
        p0 += kc;
    }
}

/// `c[n×m] += a[n×k] · b[k×m]`
pub fn gemm_nn(n: usize, k: usize, m: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    gemm_strided(n, k, m, a, k, 1, b, c);
}

/// `c[n×m] += a[k×n]ᵀ · b[k×m]`
pub fn gemm_tn(n: usize, k: usize, m: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    gemm_strided(n, k, m, a, 1, n, b, c);
}

/// `c[n×m] += a[n×k] · b[m×k]ᵀ`
pub fn gemm_nt(n: usize, k: usize, m: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let bt = transpose(m, k, b);
    gemm_nn(n, k, m, a, &bt, c);
}

/// Transpose a row-major `rows×cols` matrix.
pub fn transpose(rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Stride and zero padding of a 3D convolution over `(t, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub pad_before: [usize; 3],
    pub pad_after: [usize; 3],
}

impl Conv3dSpec {
    /// Left-only temporal padding, symmetric spatial padding.
    pub fn causal(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            stride,
            pad_before: [kernel[0] - 1, (kernel[1] - 1) / 2, (kernel[2] - 1) / 2],
            pad_after: [0, kernel[1] / 2, kernel[2] / 2],
        }
    }

    /// Symmetric padding on every axis.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1, 1, 1],
            pad_before: [(kernel[0] - 1) / 2, (kernel[1] - 1) / 2, (kernel[2] - 1) / 2],
            pad_after: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn output_extents(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for ax in 0..3 {
            if self.stride[ax] == 0 {
                return Err(invalid("conv3d", "stride must be positive"));
            }
            let padded = input[ax] + self.pad_before[ax] + self.pad_after[ax];
            if kernel[ax] == 0 || padded < kernel[ax] {
                return Err(invalid(
                    "conv3d",
                    format!("kernel {kernel:?} larger than padded input {input:?}"),
                ));
            }
            out[ax] = (padded - kernel[ax]) / self.stride[ax] + 1;
        }
        Ok(out)
    }
}

/// Geometry shared by im2col / col2im.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub cin: usize,
    pub spec: Conv3dSpec,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    pub fn output_positions(&self) -> usize {
        self.batch * self.output.iter().product::<usize>()
    }

    /// Visit every (row, patch offset, input offset) triple that touches a
    /// real (non-padding) input element.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ti, hi, wi] = self.input;
        let [to, ho, wo] = self.output;
        let [kt, kh, kw] = self.kernel;
        let cin = self.cin;
        let frame = hi * wi * cin;
        let row_stride = wi * cin;
        let mut row = 0;
        for b in 0..self.batch {
            let base_b = b * ti * frame;
            for ot in 0..to {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut patch = 0;
                        for dt in 0..kt {
                            let it = (ot * self.spec.stride[0] + dt) as isize
                                - self.spec.pad_before[0] as isize;
                            for dh in 0..kh {
                                let ih = (oh * self.spec.stride[1] + dh) as isize
                                    - self.spec.pad_before[1] as isize;
                                for dw in 0..kw {
                                    let iw = (ow * self.spec.stride[2] + dw) as isize
                                        - self.spec.pad_before[2] as isize;
                                    let inside = it >= 0
                                        && (it as usize) < ti
                                        && ih >= 0
                                        && (ih as usize) < hi
                                        && iw >= 0
                                        && (iw as usize) < wi;
                                    if inside {
                                        let src = base_b
                                            + it as usize * frame
                                            + ih as usize * row_stride
                                            + iw as usize * cin;
                                        f(row, patch, src);
                                    }
                                    patch += cin;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let p = self.patch_len();
        let cin = self.cin;
        let mut cols = vec![0.0; self.output_positions() * p];
        self.for_each_tap(|row, patch, src| {
            let dst = row * p + patch;
            cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
        });
        cols
    }

    pub fn col2im(&self, cols: &[f32], grad_input: &mut [f32]) {
        let p = self.patch_len();
        let cin = self.cin;
        self.for_each_tap(|row, patch, src| {
            let from = row * p + patch;
            for c in 0..cin {
                grad_input[src + c] += cols[from + c];
            }
        });
    }
}

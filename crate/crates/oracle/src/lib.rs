//! Naive `f64` reference implementations.
//!
//! Every function here is written as direct loops over the defining formula,
//! with no shared code with the production engine. Tests compare the engine
//! against these and differentiate them numerically.

/// Row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "element count");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Arr, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape);
        Self::new(
            &self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Self {
        Self::new(shape, self.data.clone())
    }
}

pub fn matmul(a: &Arr, b: &Arr) -> Arr {
    let k = a.cols();
    let n = a.data.len() / k;
    assert_eq!(b.shape, vec![k, b.shape[1]]);
    let m = b.shape[1];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data[i * k + p] * b.data[p * m + j];
            }
            out[i * m + j] = s;
        }
    }
    let mut shape = a.shape.clone();
    *shape.last_mut().unwrap() = m;
    Arr::new(&shape, out)
}

pub fn transpose2(a: &Arr) -> Arr {
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Arr::new(&[c, r], out)
}

pub fn add_row(a: &Arr, row: &[f64]) -> Arr {
    let c = a.cols();
    let mut out = a.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v += row[i % c];
    }
    out
}

/// Direct-sum 3D convolution of `[B, T, H, W, Cin]` (zero padding outside).
pub fn conv3d(
    x: &Arr,
    w: &Arr,
    stride: [usize; 3],
    pad_before: [usize; 3],
    pad_after: [usize; 3],
) -> Arr {
    let (b, t, h, wd, ci) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3], x.shape[4]);
    let (kt, kh, kw, wci, co) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3], w.shape[4]);
    assert_eq!(ci, wci);
    let ext = |n: usize, ax: usize, k: usize| (n + pad_before[ax] + pad_after[ax] - k) / stride[ax] + 1;
    let (to, ho, wo) = (ext(t, 0, kt), ext(h, 1, kh), ext(wd, 2, kw));
    let mut out = vec![0.0; b * to * ho * wo * co];
    for bb in 0..b {
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    for oc in 0..co {
                        let mut s = 0.0;
                        for dt in 0..kt {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let it = (ot * stride[0] + dt) as isize - pad_before[0] as isize;
                                    let ih = (oh * stride[1] + dh) as isize - pad_before[1] as isize;
                                    let iw = (ow * stride[2] + dw) as isize - pad_before[2] as isize;
                                    if it < 0 || ih < 0 || iw < 0 {
                                        continue;
                                    }
                                    let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                    if it >= t || ih >= h || iw >= wd {
                                        continue;
                                    }
                                    for c in 0..ci {
                                        let xv = x.data[(((bb * t + it) * h + ih) * wd + iw) * ci + c];
                                        let wv = w.data[(((dt * kh + dh) * kw + dw) * ci + c) * co + oc];
                                        s += xv * wv;
                                    }
                                }
                            }
                        }
                        out[(((bb * to + ot) * ho + oh) * wo + ow) * co + oc] = s;
                    }
                }
            }
        }
    }
    Arr::new(&[b, to, ho, wo, co], out)
}

pub fn softmax_rows(a: &Arr) -> Arr {
    let c = a.cols();
    let mut out = a.clone();
    for row in out.data.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn layer_norm_rows(a: &Arr, eps: f64) -> Arr {
    let c = a.cols();
    let mut out = a.clone();
    for row in out.data.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for v in row.iter_mut() {
            *v = (*v - mean) / (var + eps).sqrt();
        }
    }
    out
}

/// `softmax(q kᵀ / sqrt(d)) v`, computed element by element.
pub fn attention(q: &Arr, k: &Arr, v: &Arr) -> Arr {
    let (nq, d) = (q.shape[0], q.shape[1]);
    let nk = k.shape[0];
    let dv = v.shape[1];
    let mut out = vec![0.0; nq * dv];
    for i in 0..nq {
        let mut logits = vec![0.0; nk];
        for j in 0..nk {
            let mut s = 0.0;
            for c in 0..d {
                s += q.data[i * d + c] * k.data[j * d + c];
            }
            logits[j] = s / (d as f64).sqrt();
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..nk {
            let p = (logits[j] - m).exp() / z;
            for c in 0..dv {
                out[i * dv + c] += p * v.data[j * dv + c];
            }
        }
    }
    Arr::new(&[nq, dv], out)
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sum over rows of `weight * (-ln softmax(logits[..valid])[target])`.
pub fn cross_entropy(logits: &Arr, targets: &[usize], valid: &[usize], weights: &[f64]) -> f64 {
    let c = logits.cols();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data[r * c..r * c + valid[r]];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += weights[r] * (lse - row[t]);
    }
    total
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
///
/// The floor keeps entries that are zero up to rounding from dominating.
pub fn max_relative_error(actual: &[f64], expected: &[f64], floor: f64) -> f64 {
    assert_eq!(actual.len(), expected.len());
    actual
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Deterministic pseudo-random values in `[-1, 1)` (SplitMix64).
pub fn uniform_values(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0, 3.0], 1e-4);
        for (a, b) in g.iter().zip([2.0, 4.0, 6.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Arr::new(&[1, 2, 2, 2, 1], uniform_values(1, 8));
        let w = Arr::new(&[1, 1, 1, 1, 1], vec![1.0]);
        assert_eq!(conv3d(&x, &w, [1, 1, 1], [0; 3], [0; 3]), x);
    }
}

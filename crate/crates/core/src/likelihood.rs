//! Differentiable bit costs of integer symbols under discretized densities.

use std::rc::Rc;

use tvc_tensor::{math, CustomOp, Tensor, Var};

use crate::error::{CodecError, Result};

/// Smallest probability a coded symbol can have under a 16-bit CDF.
pub const P_MIN: f64 = 1.0 / 65536.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Density {
    Gaussian,
    Logistic,
}

impl Density {
    fn cdf(self, x: f64) -> f64 {
        match self {
            Density::Gaussian => math::normal_cdf(x),
            Density::Logistic => math::logistic(x),
        }
    }

    fn pdf(self, x: f64) -> f64 {
        match self {
            Density::Gaussian => math::normal_pdf(x),
            Density::Logistic => {
                let s = math::logistic(x);
                s * (1.0 - s)
            }
        }
    }
}

/// Mass of the unit bin centred on `y`, evaluated on the lower tail for accuracy.
pub fn bin_probability(density: Density, y: f64, loc: f64, scale: f64) -> f64 {
    let a = (y - loc).abs();
    density.cdf((0.5 - a) / scale) - density.cdf((-0.5 - a) / scale)
}

/// `−log2 max(p, P_MIN)`.
pub fn bin_bits(density: Density, y: f64, loc: f64, scale: f64) -> f64 {
    -bin_probability(density, y, loc, scale).max(P_MIN).log2()
}

struct BitsOp {
    density: Density,
}

impl CustomOp for BitsOp {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (y, loc, scale) = (inputs[0], inputs[1], inputs[2]);
        let n = y.numel();
        let (mut gy, mut gl, mut gs) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
        let ln2 = std::f64::consts::LN_2;
        for i in 0..n {
            let (yv, m, s) = (y.data()[i] as f64, loc.data()[i] as f64, scale.data()[i] as f64);
            let d = yv - m;
            let a = d.abs();
            let (u, l) = ((0.5 - a) / s, (-0.5 - a) / s);
            let p = (self.density.cdf(u) - self.density.cdf(l)).max(P_MIN);
            let (fu, fl) = (self.density.pdf(u), self.density.pdf(l));
            let dp_da = (fl - fu) / s;
            let dp_dd = if d > 0.0 {
                dp_da
            } else if d < 0.0 {
                -dp_da
            } else {
                0.0
            };
            let dp_ds = (l * fl - u * fu) / s;
            let db_dp = -1.0 / (p * ln2) * grad.data()[i] as f64;
            gy[i] = (db_dp * dp_dd) as f32;
            gl[i] = (-db_dp * dp_dd) as f32;
            gs[i] = (db_dp * dp_ds) as f32;
        }
        let shape = y.shape();
        vec![
            Some(Tensor::new(shape, gy).expect("shape")),
            Some(Tensor::new(shape, gl).expect("shape")),
            Some(Tensor::new(shape, gs).expect("shape")),
        ]
    }
}

/// Elementwise bits of `y` under the density centred at `loc` with `scale`.
pub fn bits<'g>(density: Density, y: &Var<'g>, loc: &Var<'g>, scale: &Var<'g>) -> Result<Var<'g>> {
    let shape = y.shape();
    if loc.shape() != shape || scale.shape() != shape {
        return Err(CodecError::Shape(format!(
            "bits: y {shape:?}, loc {:?}, scale {:?}",
            loc.shape(),
            scale.shape()
        )));
    }
    let (yv, lv, sv) = (y.value(), loc.value(), scale.value());
    let mut out = Vec::with_capacity(yv.numel());
    for i in 0..yv.numel() {
        let s = sv.data()[i] as f64;
        if !(s > 0.0) || !yv.data()[i].is_finite() || !lv.data()[i].is_finite() {
            return Err(CodecError::Numeric("invalid density parameters".into()));
        }
        out.push(bin_bits(density, yv.data()[i] as f64, lv.data()[i] as f64, s) as f32);
    }
    let value = Tensor::new(&shape, out)?;
    Ok(y.graph().custom(&[*y, *loc, *scale], value, Rc::new(BitsOp { density })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_bins() {
        let p = bin_probability(Density::Gaussian, 0.0, 0.0, 1.0);
        assert!((p - 0.382_924_922_548).abs() < 1e-9);
        let p = bin_probability(Density::Logistic, 0.0, 0.0, 1.0);
        assert!((p - 0.244_918_662_403).abs() < 1e-9);
        assert_eq!(bin_bits(Density::Gaussian, 40.0, 0.0, 0.1), 16.0);
    }

    #[test]
    fn symmetric_in_offset() {
        for d in [0.3, 1.0, 2.7] {
            let a = bin_probability(Density::Gaussian, d, 0.0, 0.8);
            let b = bin_probability(Density::Gaussian, -d, 0.0, 0.8);
            assert_eq!(a, b);
        }
    }
}

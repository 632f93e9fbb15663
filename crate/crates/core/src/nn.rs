//! Parameterized layers on top of the tensor graph.
//!
//! Layers only hold parameter ids and hyperparameters; values live in the
//! model's [`ParamStore`] and are pulled into a [`Graph`] through a [`Ctx`].

use std::rc::Rc;

use tvc_tensor::{Conv3dSpec, CustomOp, Graph, Initializer, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;

/// Graph plus the parameter values a forward pass reads.
#[derive(Clone, Copy)]
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    pub params: &'g ParamStore,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, params: &'g ParamStore) -> Self {
        Self { graph, params }
    }

    pub fn param(&self, id: ParamId) -> Var<'g> {
        self.graph.param(self.params, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }
}

/// Creates parameters with deterministic initial values.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub init: Initializer,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            init: Initializer::new(seed),
        }
    }

    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.init.fan_in(shape, fan_in);
        self.store.insert(name, t)
    }

    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.init.he(shape, fan_in);
        self.store.insert(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> ParamId {
        let t = self.init.uniform(shape, bound);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.insert(name, Tensor::full(shape, value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Left-only temporal padding.
    Causal,
    /// Symmetric on all axes (stride 1).
    Same,
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub padding: Padding,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        kernel: [usize; 3],
        cin: usize,
        cout: usize,
        stride: [usize; 3],
        padding: Padding,
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * cin;
        let weight = b.he(&format!("{name}.w"), &[kernel[0], kernel[1], kernel[2], cin, cout], fan_in);
        let bias = b.fan_in(&format!("{name}.b"), &[cout], fan_in);
        Self {
            weight,
            bias,
            kernel,
            stride,
            cin,
            cout,
            padding,
        }
    }

    /// Projection whose weight and bias start at exactly zero.
    pub fn zeroed(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        let weight = b.zeros(&format!("{name}.w"), &[1, 1, 1, cin, cout]);
        let bias = b.zeros(&format!("{name}.b"), &[cout]);
        Self {
            weight,
            bias,
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            cin,
            cout,
            padding: Padding::Same,
        }
    }

    pub fn spec(&self) -> Conv3dSpec {
        match self.padding {
            Padding::Causal => Conv3dSpec::causal(self.kernel, self.stride),
            Padding::Same => Conv3dSpec {
                stride: self.stride,
                ..Conv3dSpec::same(self.kernel)
            },
        }
    }

    pub fn forward<'g>(&self, cx: Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let w = cx.param(self.weight);
        self.forward_with_weight(cx, x, &w)
    }

    pub fn forward_with_weight<'g>(&self, cx: Ctx<'g>, x: &Var<'g>, w: &Var<'g>) -> Result<Var<'g>> {
        let y = x.conv3d(w, self.spec())?;
        Ok(y.add_row(&cx.param(self.bias))?)
    }

    /// Output `(t, h, w)` extents for an input of the given extents.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        Ok(self.spec().output_extents(input, self.kernel)?)
    }

    /// `Cout · Cin · kt · kh · kw · output positions`.
    pub fn macs(&self, batch: usize, input: [usize; 3]) -> Result<u64> {
        let out = self.output_extents(input)?;
        let positions = batch * out.iter().product::<usize>();
        Ok((self.cout * self.cin * self.kernel.iter().product::<usize>() * positions) as u64)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let weight = b.fan_in(&format!("{name}.w"), &[din, dout], din);
        let bias = bias.then(|| b.zeros(&format!("{name}.b"), &[dout]));
        Self {
            weight,
            bias,
            din,
            dout,
        }
    }

    pub fn forward<'g>(&self, cx: Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let y = x.linear(&cx.param(self.weight))?;
        match self.bias {
            Some(b) => Ok(y.add_row(&cx.param(b))?),
            None => Ok(y),
        }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.din * self.dout) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        Self {
            gamma: b.full(&format!("{name}.g"), &[dim], 1.0),
            beta: b.zeros(&format!("{name}.b"), &[dim]),
        }
    }

    pub fn forward<'g>(&self, cx: Ctx<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        let n = x.layer_norm(1e-5)?;
        Ok(n.mul_row(&cx.param(self.gamma))?.add_row(&cx.param(self.beta))?)
    }
}

struct StraightThrough;

impl CustomOp for StraightThrough {
    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone())]
    }
}

/// Forward `value`, backward identity into `x`.
pub fn straight_through<'g>(x: &Var<'g>, value: Tensor) -> Result<Var<'g>> {
    if value.shape() != x.shape().as_slice() {
        return Err(crate::error::CodecError::Shape(format!(
            "straight-through value {:?} vs input {:?}",
            value.shape(),
            x.shape()
        )));
    }
    Ok(x.graph().custom(&[*x], value, Rc::new(StraightThrough)))
}

/// Nearest-neighbour upsampling of `[B?, T, H, W, C]`.
///
/// With `causal_time`, frame 0 stays single and every later frame is doubled:
/// `T → 1 + 2(T − 1)`.
pub fn upsample<'g>(x: &Var<'g>, causal_time: bool, spatial: usize) -> Result<Var<'g>> {
    let shape = x.shape();
    let (index, out_shape) = upsample_index(&shape, causal_time, spatial)?;
    Ok(x.gather(Rc::new(index), &out_shape)?)
}

pub fn upsample_index(shape: &[usize], causal_time: bool, spatial: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (batch, dims) = match shape.len() {
        4 => (1, shape),
        5 => (shape[0], &shape[1..]),
        _ => {
            return Err(crate::error::CodecError::Shape(format!(
                "upsample expects rank 4 or 5, got {shape:?}"
            )))
        }
    };
    let (t, h, w, c) = (dims[0], dims[1], dims[2], dims[3]);
    let to = if causal_time && t > 0 { 1 + 2 * (t - 1) } else { t };
    let (ho, wo) = (h * spatial, w * spatial);
    let mut index = Vec::with_capacity(batch * to * ho * wo * c);
    for b in 0..batch {
        for ot in 0..to {
            let it = if causal_time { (ot + 1) / 2 } else { ot };
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = (((b * t + it) * h + oh / spatial) * w + ow / spatial) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let off = shape.len() - 4;
    out_shape[off] = to;
    out_shape[off + 1] = ho;
    out_shape[off + 2] = wo;
    Ok((index, out_shape))
}

/// Crop the leading `(t, h, w)` corner of `[B?, T, H, W, C]`.
pub fn crop<'g>(x: &Var<'g>, extents: [usize; 3]) -> Result<Var<'g>> {
    let shape = x.shape();
    let off = shape.len() - 4;
    let dims = &shape[off..];
    if [dims[0], dims[1], dims[2]] == extents {
        return Ok(*x);
    }
    if extents[0] > dims[0] || extents[1] > dims[1] || extents[2] > dims[2] {
        return Err(crate::error::CodecError::Shape(format!(
            "cannot crop {shape:?} to {extents:?}"
        )));
    }
    let batch = if off == 1 { shape[0] } else { 1 };
    let c = dims[3];
    let mut index = Vec::new();
    for b in 0..batch {
        for t in 0..extents[0] {
            for h in 0..extents[1] {
                for w in 0..extents[2] {
                    let base = (((b * dims[0] + t) * dims[1] + h) * dims[2] + w) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    let mut out_shape = shape.clone();
    out_shape[off] = extents[0];
    out_shape[off + 1] = extents[1];
    out_shape[off + 2] = extents[2];
    Ok(x.gather(Rc::new(index), &out_shape)?)
}

/// 2× spatial average pooling of `[..., H, W, C]` (no gradient).
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let r = s.len();
    if r < 3 || s[r - 3] % 2 != 0 || s[r - 2] % 2 != 0 {
        return Err(crate::error::CodecError::Shape(format!(
            "avg_pool2 needs [..., H, W, C] with even H, W, got {s:?}"
        )));
    }
    let (h, w, c) = (s[r - 3], s[r - 2], s[r - 1]);
    let lead: usize = s[..r - 3].iter().product();
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = vec![0.0; lead * ho * wo * c];
    for l in 0..lead {
        for oh in 0..ho {
            for ow in 0..wo {
                for ch in 0..c {
                    let at = |hh: usize, ww: usize| d[((l * h + hh) * w + ww) * c + ch];
                    let sum = at(2 * oh, 2 * ow) + at(2 * oh, 2 * ow + 1) + at(2 * oh + 1, 2 * ow) + at(2 * oh + 1, 2 * ow + 1);
                    out[((l * ho + oh) * wo + ow) * c + ch] = sum * 0.25;
                }
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 3] = ho;
    shape[r - 2] = wo;
    Ok(Tensor::new(&shape, out)?)
}

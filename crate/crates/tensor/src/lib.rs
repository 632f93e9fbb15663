//! Small dense-tensor engine with reverse-mode autodiff.
//!
//! Values are row-major `f32`. Kernels use fixed accumulation orders and
//! `libm` transcendental functions so that identical inputs give identical
//! bits on every run and every target.

pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod math;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{concat_last, permute_index, CustomOp, Gradients, Graph, Unary, Var};
pub use kernels::Conv3dSpec;
pub use params::{Initializer, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// `softmax(q·kᵀ/√d)·v` for unbatched `q[Nq,d]`, `k[Nk,d]`, `v[Nk,dv]`.
pub fn attention<'g>(q: &Var<'g>, k: &Var<'g>, v: &Var<'g>) -> Result<Var<'g>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    if ks[0] == 0 {
        return Err(error::invalid("attention", "need at least one key"));
    }
    let q3 = q.reshape(&[1, qs[0], qs[1]])?;
    let k3 = k.reshape(&[1, ks[0], ks[1]])?;
    let v3 = v.reshape(&[1, vs[0], vs[1]])?;
    let out = batched_attention(&q3, &k3, &v3)?;
    out.reshape(&[qs[0], vs[1]])
}

/// Attention over a leading batch axis: `q[B,Nq,d]`, `k[B,Nk,d]`, `v[B,Nk,dv]`.
pub fn batched_attention<'g>(q: &Var<'g>, k: &Var<'g>, v: &Var<'g>) -> Result<Var<'g>> {
    let d = *q.shape().last().ok_or_else(|| error::invalid("attention", "rank 0"))?;
    let scores = q.bmm(k, true)?.scale(1.0 / (d as f32).sqrt());
    scores.softmax()?.bmm(v, false)
}

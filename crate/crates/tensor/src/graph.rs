//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and returns the gradient of a scalar loss with respect
//! to every trainable parameter that was pulled into the graph.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{invalid, Result, TensorError};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, Conv3dSpec, ConvGeom};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Backward rule for operations defined outside this crate.
pub trait CustomOp {
    /// Gradients for each input given the upstream gradient. `None` means zero.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Gelu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
    Relu,
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    Shift(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Linear(usize, usize),
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Unary(usize, Unary),
    Clamp(usize, f32, f32),
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f32> },
    Sum(usize),
    Reshape(usize),
    Conv3d { x: usize, w: usize, geom: ConvGeom },
    Gather { x: usize, index: Rc<Vec<usize>> },
    Concat { parts: Vec<usize>, widths: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, valid: Vec<usize>, weights: Vec<f32>, probs: Vec<f32> },
    Custom { inputs: Vec<usize>, op: Rc<dyn CustomOp> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    macs: Cell<u64>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f32 {
        let mut s = 0.0f64;
        for g in self.by_param.values() {
            for &v in g.data() {
                s += (v as f64) * (v as f64);
            }
        }
        s.sqrt() as f32
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-accumulate operations executed by matmul and conv so far.
    pub fn macs(&self) -> u64 {
        self.macs.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that records its own gradient (for tests and probes).
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Pull a parameter into the graph. Frozen parameters become constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn param_named(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        Ok(self.param(store, store.id(name)?))
    }

    /// Register an externally computed value together with its backward rule.
    pub fn custom<'g>(&'g self, inputs: &[Var<'g>], output: Tensor, op: Rc<dyn CustomOp>) -> Var<'g> {
        let needs = inputs.iter().any(|v| self.needs(v.id));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                op,
            },
            needs,
        )
    }

    /// Gradient of a scalar `loss` with respect to every trainable parameter.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let grads = self.backward_all(loss)?;
        let nodes = self.nodes.borrow();
        let mut out = Gradients::default();
        for (id, g) in grads.into_iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&nodes[id].op, g) {
                let shape = nodes[id].value.shape().to_vec();
                match out.by_param.get_mut(pid) {
                    Some(existing) => add_into(existing.data_mut(), &g),
                    None => {
                        out.by_param.insert(*pid, Tensor::new(&shape, g)?);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to a leaf created by [`Graph::variable`].
    pub fn grad_of(&self, loss: Var<'_>, leaf: Var<'_>) -> Result<Tensor> {
        let mut grads = self.backward_all(loss)?;
        let shape = leaf.shape();
        let g = grads[leaf.id]
            .take()
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        Tensor::new(&shape, g)
    }

    fn backward_all(&self, loss: Var<'_>) -> Result<Vec<Option<Vec<f32>>>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.needs_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[id] = Some(g);
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads)?;
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: usize, delta: Vec<f32>) {
    match &mut grads[id] {
        Some(existing) => add_into(existing, &delta),
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(
    nodes: &[Node],
    grads: &mut [Option<Vec<f32>>],
    id: usize,
    f: impl FnOnce(&mut [f32]),
) {
    if !nodes[id].needs_grad {
        return;
    }
    let n = nodes[id].value.numel();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
    let val = |id: usize| nodes[id].value.clone();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            accumulate_with(nodes, grads, *a, |d| add_into(d, g));
            accumulate_with(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate_with(nodes, grads, *a, |d| add_into(d, g));
            accumulate_with(nodes, grads, *b, |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d -= g;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate_with(nodes, grads, *a, |d| {
                for ((d, g), b) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * b;
                }
            });
            accumulate_with(nodes, grads, *b, |d| {
                for ((d, g), a) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * a;
                }
            });
        }
        Op::Scale(a, s) => accumulate_with(nodes, grads, *a, |d| {
            for (d, g) in d.iter_mut().zip(g) {
                *d += s * g;
            }
        }),
        Op::Shift(a) => accumulate_with(nodes, grads, *a, |d| add_into(d, g)),
        Op::AddRow(x, b) => {
            accumulate_with(nodes, grads, *x, |d| add_into(d, g));
            let cols = val(*b).numel();
            accumulate_with(nodes, grads, *b, |d| {
                for row in g.chunks_exact(cols) {
                    add_into(d, row);
                }
            });
        }
        Op::MulRow(x, b) => {
            let (xv, bv) = (val(*x), val(*b));
            let cols = bv.numel();
            accumulate_with(nodes, grads, *x, |d| {
                for (drow, grow) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                    for j in 0..cols {
                        drow[j] += grow[j] * bv.data()[j];
                    }
                }
            });
            accumulate_with(nodes, grads, *b, |d| {
                for (grow, xrow) in g.chunks_exact(cols).zip(xv.data().chunks_exact(cols)) {
                    for j in 0..cols {
                        d[j] += grow[j] * xrow[j];
                    }
                }
            });
        }
        Op::Linear(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let (rows, k) = xv.rows_cols();
            let m = wv.shape()[1];
            accumulate_with(nodes, grads, *x, |d| gemm_nt(rows, m, k, g, wv.data(), d));
            accumulate_with(nodes, grads, *w, |d| gemm_tn(k, rows, m, xv.data(), g, d));
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let m = node.value.shape()[2];
            let (sa, sb, sg) = (n * k, k * m, n * m);
            accumulate_with(nodes, grads, *a, |d| {
                for i in 0..batch {
                    let gi = &g[i * sg..(i + 1) * sg];
                    let bi = &bv.data()[i * sb..(i + 1) * sb];
                    let di = &mut d[i * sa..(i + 1) * sa];
                    if *trans_b {
                        gemm_nn(n, m, k, gi, bi, di);
                    } else {
                        gemm_nt(n, m, k, gi, bi, di);
                    }
                }
            });
            accumulate_with(nodes, grads, *b, |d| {
                for i in 0..batch {
                    let gi = &g[i * sg..(i + 1) * sg];
                    let ai = &av.data()[i * sa..(i + 1) * sa];
                    let di = &mut d[i * sb..(i + 1) * sb];
                    if *trans_b {
                        gemm_tn(m, n, k, gi, ai, di);
                    } else {
                        gemm_tn(k, n, m, ai, gi, di);
                    }
                }
            });
        }
        Op::Unary(x, kind) => {
            let xv = val(*x);
            let y = node.value.clone();
            accumulate_with(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * math::unary_derivative(*kind, xv.data()[i], y.data()[i]);
                }
            });
        }
        Op::Clamp(x, lo, hi) => {
            let xv = val(*x);
            accumulate_with(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    let v = xv.data()[i];
                    if v >= *lo && v <= *hi {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let y = node.value.clone();
            let (_, cols) = y.rows_cols();
            accumulate_with(nodes, grads, *x, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(y.data().chunks_exact(cols))
                {
                    let mut dot = 0.0;
                    for j in 0..cols {
                        dot += grow[j] * yrow[j];
                    }
                    for j in 0..cols {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, inv_std } => {
            let y = node.value.clone();
            let (_, cols) = y.rows_cols();
            let n = cols as f32;
            accumulate_with(nodes, grads, *x, |d| {
                for (r, ((drow, grow), yrow)) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(y.data().chunks_exact(cols))
                    .enumerate()
                {
                    let mut mg = 0.0;
                    let mut mgy = 0.0;
                    for j in 0..cols {
                        mg += grow[j];
                        mgy += grow[j] * yrow[j];
                    }
                    mg /= n;
                    mgy /= n;
                    for j in 0..cols {
                        drow[j] += inv_std[r] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
            });
        }
        Op::Sum(x) => {
            let g0 = g[0];
            accumulate_with(nodes, grads, *x, |d| {
                for v in d.iter_mut() {
                    *v += g0;
                }
            });
        }
        Op::Reshape(x) => accumulate_with(nodes, grads, *x, |d| add_into(d, g)),
        Op::Conv3d { x, w, geom } => {
            let (xv, wv) = (val(*x), val(*w));
            let rows = geom.output_positions();
            let p = geom.patch_len();
            let cout = wv.shape()[4];
            let pointwise = geom.kernel == [1, 1, 1] && geom.spec == Conv3dSpec::same([1, 1, 1]);
            if nodes[*w].needs_grad {
                let cols;
                let cols_ref = if pointwise {
                    xv.data()
                } else {
                    cols = geom.im2col(xv.data());
                    &cols[..]
                };
                accumulate_with(nodes, grads, *w, |d| gemm_tn(p, rows, cout, cols_ref, g, d));
            }
            if nodes[*x].needs_grad {
                if pointwise {
                    accumulate_with(nodes, grads, *x, |d| gemm_nt(rows, cout, p, g, wv.data(), d));
                } else {
                    let mut dcols = vec![0.0; rows * p];
                    gemm_nt(rows, cout, p, g, wv.data(), &mut dcols);
                    accumulate_with(nodes, grads, *x, |d| geom.col2im(&dcols, d));
                }
            }
        }
        Op::Gather { x, index } => accumulate_with(nodes, grads, *x, |d| {
            for (i, &src) in index.iter().enumerate() {
                d[src] += g[i];
            }
        }),
        Op::Concat { parts, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&part, &w) in parts.iter().zip(widths) {
                accumulate_with(nodes, grads, part, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::CrossEntropy { logits, targets, valid, weights, probs } => {
            let cols = val(*logits).rows_cols().1;
            let g0 = g[0];
            accumulate_with(nodes, grads, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    let wgt = g0 * weights[r];
                    if wgt == 0.0 {
                        continue;
                    }
                    for c in 0..valid[r] {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        d[r * cols + c] += wgt * (probs[r * cols + c] - onehot);
                    }
                }
            });
        }
        Op::Custom { inputs, op } => {
            let vals: Vec<Rc<Tensor>> = inputs.iter().map(|&i| val(i)).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
            let gt = Tensor::new(node.value.shape(), g.to_vec())?;
            let ins = op.backward(&refs, &node.value, &gt);
            for (&id, gi) in inputs.iter().zip(ins) {
                if let Some(gi) = gi {
                    if nodes[id].needs_grad {
                        if gi.numel() != nodes[id].value.numel() {
                            return Err(invalid("custom backward", "gradient shape mismatch"));
                        }
                        accumulate(grads, id, gi.into_data());
                    }
                }
            }
        }
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn unary_push(&self, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.requires_grad();
        self.graph.push(value, op, needs)
    }

    fn binary_push(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let needs = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, needs)
    }

    fn zip_with(&self, other: &Var<'g>, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        Tensor::new(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.binary_push(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.binary_push(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.binary_push(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f32) -> Var<'g> {
        let v = self.value().map(|x| x * s);
        self.unary_push(v, Op::Scale(self.id, s))
    }

    pub fn shift(&self, s: f32) -> Var<'g> {
        let v = self.value().map(|x| x + s);
        self.unary_push(v, Op::Shift(self.id))
    }

    fn row_op(&self, row: &Var<'g>, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (x, b) = (self.value(), row.value());
        let cols = x.rows_cols().1;
        if b.rank() != 1 || b.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v = f(*v, bv);
            }
        }
        Ok(out)
    }

    /// Add a vector along the last axis of every row.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let v = self.row_op(row, "add_row", |a, b| a + b)?;
        Ok(self.binary_push(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Multiply every row elementwise by a vector.
    pub fn mul_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let v = self.row_op(row, "mul_row", |a, b| a * b)?;
        Ok(self.binary_push(row, v, Op::MulRow(self.id, row.id)))
    }

    /// `x[..., K] · w[K, M]` with all leading axes treated as rows.
    pub fn linear(&self, w: &Var<'g>) -> Result<Var<'g>> {
        let (xv, wv) = (self.value(), w.value());
        let (rows, k) = xv.rows_cols();
        if wv.rank() != 2 || wv.shape()[0] != k || xv.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let m = wv.shape()[1];
        let mut out = vec![0.0; rows * m];
        gemm_nn(rows, k, m, xv.data(), wv.data(), &mut out);
        self.graph.macs.set(self.graph.macs.get() + (rows * k * m) as u64);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let v = Tensor::new(&shape, out)?;
        Ok(self.binary_push(w, v, Op::Linear(self.id, w.id)))
    }

    /// Batched `a[B,N,K] · b[B,K,M]`, or `a · bᵀ` with `b[B,M,K]` when `trans_b`.
    pub fn bmm(&self, b: &Var<'g>, trans_b: bool) -> Result<Var<'g>> {
        let (av, bv) = (self.value(), b.value());
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: av.shape().to_vec(),
            rhs: bv.shape().to_vec(),
        };
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch());
        }
        let (batch, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, m) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * n * m];
        for i in 0..batch {
            let ai = &av.data()[i * n * k..(i + 1) * n * k];
            let bi = &bv.data()[i * k * m..(i + 1) * k * m];
            let oi = &mut out[i * n * m..(i + 1) * n * m];
            if trans_b {
                gemm_nt(n, k, m, ai, bi, oi);
            } else {
                gemm_nn(n, k, m, ai, bi, oi);
            }
        }
        self.graph
            .macs
            .set(self.graph.macs.get() + (batch * n * k * m) as u64);
        let v = Tensor::new(&[batch, n, m], out)?;
        Ok(self.binary_push(b, v, Op::BatchMatMul { a: self.id, b: b.id, trans_b }))
    }

    pub fn unary(&self, kind: Unary) -> Result<Var<'g>> {
        let x = self.value();
        let v = x.map(|v| math::unary(kind, v));
        if x.all_finite() && !v.all_finite() {
            return Err(TensorError::NonFinite("unary"));
        }
        Ok(self.unary_push(v, Op::Unary(self.id, kind)))
    }

    pub fn silu(&self) -> Result<Var<'g>> {
        self.unary(Unary::Silu)
    }

    pub fn gelu(&self) -> Result<Var<'g>> {
        self.unary(Unary::Gelu)
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(&self) -> Result<Var<'g>> {
        self.unary(Unary::Softplus)
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var<'g>> {
        self.unary(Unary::Log)
    }

    pub fn abs(&self) -> Result<Var<'g>> {
        self.unary(Unary::Abs)
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.unary(Unary::Square)
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary(Unary::Relu)
    }

    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&self, lo: f32, hi: f32) -> Var<'g> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary_push(v, Op::Clamp(self.id, lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let x = self.value();
        let (_, cols) = x.rows_cols();
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            math::softmax_in_place(row);
        }
        if !out.all_finite() {
            return Err(TensorError::NonFinite("softmax"));
        }
        Ok(self.unary_push(out, Op::Softmax(self.id)))
    }

    /// Normalize the last axis to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f32) -> Result<Var<'g>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let mut out = x.as_ref().clone();
        let mut inv_std = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_exact_mut(cols) {
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        Ok(self.unary_push(out, Op::LayerNorm { x: self.id, inv_std }))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary_push(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.numel().max(1) as f32;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = self.value().as_ref().clone().reshape(shape)?;
        Ok(self.unary_push(v, Op::Reshape(self.id)))
    }

    /// 3D convolution of `[B?, T, H, W, Cin]` with kernel `[kt, kh, kw, Cin, Cout]`.
    pub fn conv3d(&self, kernel: &Var<'g>, spec: Conv3dSpec) -> Result<Var<'g>> {
        let (xv, wv) = (self.value(), kernel.value());
        let batched = match xv.rank() {
            4 => false,
            5 => true,
            _ => {
                return Err(TensorError::Rank {
                    op: "conv3d",
                    expected: 5,
                    shape: xv.shape().to_vec(),
                })
            }
        };
        let s = xv.shape();
        let (batch, dims) = if batched {
            (s[0], &s[1..])
        } else {
            (1, s)
        };
        let ks = wv.shape();
        if ks.len() != 5 || ks[3] != dims[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: s.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let kernel_ext = [ks[0], ks[1], ks[2]];
        let out_ext = spec.output_extents([dims[0], dims[1], dims[2]], kernel_ext)?;
        let geom = ConvGeom {
            batch,
            input: [dims[0], dims[1], dims[2]],
            output: out_ext,
            kernel: kernel_ext,
            cin: dims[3],
            spec,
        };
        let rows = geom.output_positions();
        let p = geom.patch_len();
        let cout = ks[4];
        let mut out = vec![0.0; rows * cout];
        if kernel_ext == [1, 1, 1] && spec == Conv3dSpec::same([1, 1, 1]) {
            gemm_nn(rows, p, cout, xv.data(), wv.data(), &mut out);
        } else {
            let cols = geom.im2col(xv.data());
            gemm_nn(rows, p, cout, &cols, wv.data(), &mut out);
        }
        self.graph
            .macs
            .set(self.graph.macs.get() + (rows * p * cout) as u64);
        let mut shape = Vec::with_capacity(5);
        if batched {
            shape.push(batch);
        }
        shape.extend_from_slice(&[out_ext[0], out_ext[1], out_ext[2], cout]);
        let v = Tensor::new(&shape, out)?;
        Ok(self.binary_push(
            kernel,
            v,
            Op::Conv3d {
                x: self.id,
                w: kernel.id,
                geom,
            },
        ))
    }

    /// Causal 3D convolution: temporal padding on the left only.
    pub fn conv3d_causal(&self, kernel: &Var<'g>, stride: [usize; 3]) -> Result<Var<'g>> {
        let ks = kernel.shape();
        if ks.len() != 5 {
            return Err(TensorError::Rank {
                op: "conv3d_causal",
                expected: 5,
                shape: ks,
            });
        }
        self.conv3d(kernel, Conv3dSpec::causal([ks[0], ks[1], ks[2]], stride))
    }

    /// `out[i] = self[index[i]]` over the flattened data.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(TensorError::ElementCount {
                op: "gather",
                expected: n,
                got: index.len(),
            });
        }
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            out.push(
                *x.data()
                    .get(i)
                    .ok_or_else(|| invalid("gather", format!("index {i} out of bounds")))?,
            );
        }
        let v = Tensor::new(shape, out)?;
        Ok(self.unary_push(v, Op::Gather { x: self.id, index }))
    }

    /// Reorder axes.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let (index, out_shape) = permute_index(&shape, axes)?;
        self.gather(Rc::new(index), &out_shape)
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        let cols = *shape.last().ok_or_else(|| invalid("narrow_last", "rank 0"))?;
        if start + len > cols {
            return Err(invalid("narrow_last", format!("{start}+{len} > {cols}")));
        }
        let rows = self.numel() / cols.max(1);
        let mut index = Vec::with_capacity(rows * len);
        for r in 0..rows {
            index.extend((0..len).map(|j| r * cols + start + j));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        self.gather(Rc::new(index), &out_shape)
    }

    /// Cross-entropy (natural log) summed over rows with per-row weights.
    ///
    /// Row `r` only uses its first `valid[r]` logits as classes.
    pub fn cross_entropy(&self, targets: &[usize], valid: &[usize], weights: &[f32]) -> Result<Var<'g>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        if targets.len() != rows || valid.len() != rows || weights.len() != rows {
            return Err(invalid("cross_entropy", "targets/valid/weights must have one entry per row"));
        }
        if !x.all_finite() {
            return Err(TensorError::NonFinite("cross_entropy logits"));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0f32;
        for r in 0..rows {
            let v = valid[r];
            if v == 0 || v > cols || targets[r] >= v {
                return Err(invalid("cross_entropy", format!("row {r}: target {} / valid {v}", targets[r])));
            }
            let row = &x.data()[r * cols..r * cols + v];
            let p = &mut probs[r * cols..r * cols + v];
            p.copy_from_slice(row);
            math::softmax_in_place(p);
            let lse = math::log_sum_exp(row);
            total += weights[r] * (lse - row[targets[r]]);
        }
        let out = Tensor::scalar(total);
        Ok(self.unary_push(
            out,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }
}

/// Concatenate along the last axis; all leading extents must agree.
pub fn concat_last<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| invalid("concat_last", "no inputs"))?;
    let graph = first.graph;
    let lead = {
        let s = first.shape();
        s[..s.len() - 1].to_vec()
    };
    let mut widths = Vec::with_capacity(parts.len());
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    for v in &vals {
        let s = v.shape();
        if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_last",
                lhs: first.shape(),
                rhs: s.to_vec(),
            });
        }
        widths.push(*s.last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in vals.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead;
    shape.push(total);
    let needs = parts.iter().any(|p| p.requires_grad());
    Ok(graph.push(
        Tensor::new(&shape, out)?,
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            widths,
        },
        needs,
    ))
}

/// Flat source index for every element of `shape` permuted by `axes`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(invalid("permute", format!("bad axes {axes:?} for rank {rank}")));
    }
    let in_strides = crate::tensor::strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    for _ in 0..n {
        let mut src = 0;
        for (d, &a) in axes.iter().enumerate() {
            src += counter[d] * in_strides[a];
        }
        index.push(src);
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok((index, out_shape))
}

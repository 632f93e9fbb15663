//! Masked-token transformer: self-attention over the discrete grid,
//! cross-attention to the continuous tokens, full-vocabulary head.

use std::rc::Rc;

use tvc_tensor::{batched_attention, ParamId, Tensor, Var};

use crate::ccm::PartialCodeMap;
use crate::config::{ModelConfig, CONT_CHANNELS};
use crate::error::{CodecError, Result};
use crate::fsq::{FsqConfig, CODE_CHANNELS};
use crate::masking::Mask3D;
use crate::nn::{Builder, Conv3d, Ctx, LayerNorm, Linear, Padding};
use crate::tokenizer::CodeMap;

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(b, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(b, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(b, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(b, &format!("{name}.o"), dim, dim, true),
            heads,
        }
    }

    fn split<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / self.heads;
        Ok(x
            .reshape(&[b, n, self.heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * self.heads, n, dh])?)
    }

    /// `x[B, Nq, d]` attends to `kv[B, Nk, d]`.
    fn forward<'g>(&self, cx: Ctx<'g>, x: &Var<'g>, kv: &Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let q = self.split(&self.q.forward(cx, x)?)?;
        let k = self.split(&self.k.forward(cx, kv)?)?;
        let v = self.split(&self.v.forward(cx, kv)?)?;
        let a = batched_attention(&q, &k, &v)?;
        let merged = a
            .reshape(&[b, self.heads, n, d / self.heads])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, d])?;
        self.o.forward(cx, &merged)
    }

    fn macs(&self, b: usize, nq: usize, nk: usize) -> u64 {
        let d = self.q.dout;
        let proj = self.q.macs(b * nq) + self.k.macs(b * nk) + self.v.macs(b * nk) + self.o.macs(b * nq);
        // scores and weighted sum
        proj + 2 * (b * nq * nk * d) as u64
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub fsq: FsqConfig,
    pub dim: usize,
    pub max_grid: [usize; 3],
    embed: [Conv3d; 2],
    mask_embed: Linear,
    pos: (ParamId, ParamId),
    cont_in: Linear,
    cont_pos: (ParamId, ParamId),
    layers: Vec<Layer>,
    ln_f: LayerNorm,
    head: Linear,
}

pub const PREFIX: &str = "pred.";

impl Predictor {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let d = cfg.pred_dim;
        let [mt, mh, mw] = cfg.max_grid;
        let cont_grid = ModelConfig::continuous_of_discrete(cfg.max_grid);
        let embed = [
            Conv3d::new(b, "pred.embed0", [3, 3, 3], CODE_CHANNELS, d / 2, [1, 1, 1], Padding::Causal),
            Conv3d::new(b, "pred.embed1", [3, 3, 3], d / 2, d, [1, 1, 1], Padding::Causal),
        ];
        let mask_embed = Linear::new(b, "pred.mask", 1, d, false);
        let pos_t = b.uniform("pred.pos.t", &[mt, d], 0.02);
        let pos_s = b.uniform("pred.pos.s", &[mh * mw, d], 0.02);
        let cont_in = Linear::new(b, "pred.cont", CONT_CHANNELS, d, true);
        let cont_pos_t = b.uniform("pred.cpos.t", &[cont_grid[0], d], 0.02);
        let cont_pos_s = b.uniform("pred.cpos.s", &[cont_grid[1] * cont_grid[2], d], 0.02);
        let layers = (0..cfg.pred_layers)
            .map(|i| {
                let p = format!("pred.l{i}");
                Layer {
                    ln1: LayerNorm::new(b, &format!("{p}.ln1"), d),
                    self_attn: Attention::new(b, &format!("{p}.sa"), d, cfg.pred_heads),
                    ln2: LayerNorm::new(b, &format!("{p}.ln2"), d),
                    cross_attn: Attention::new(b, &format!("{p}.ca"), d, cfg.pred_heads),
                    ln3: LayerNorm::new(b, &format!("{p}.ln3"), d),
                    fc1: Linear::new(b, &format!("{p}.fc1"), d, cfg.pred_mlp, true),
                    fc2: Linear::new(b, &format!("{p}.fc2"), cfg.pred_mlp, d, true),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(b, "pred.lnf", d);
        let head = Linear::new(b, "pred.head", d, cfg.fsq.vocab_size(), true);
        Self {
            fsq: cfg.fsq.clone(),
            dim: d,
            max_grid: cfg.max_grid,
            embed,
            mask_embed,
            pos: (pos_t, pos_s),
            cont_in,
            cont_pos: (cont_pos_t, cont_pos_s),
            layers,
            ln_f,
            head,
        }
    }

    pub fn vocab(&self) -> usize {
        self.fsq.vocab_size()
    }

    fn positions<'g>(&self, cx: Ctx<'g>, batch: usize, grid: [usize; 3], tables: (ParamId, ParamId), width: usize) -> Result<Var<'g>> {
        let d = self.dim;
        let t_table = cx.param(tables.0);
        let s_table = cx.param(tables.1);
        let (tt, st) = (t_table.shape()[0], s_table.shape()[0]);
        if grid[0] > tt || grid[1] * width > st || grid[2] > width {
            return Err(CodecError::Shape(format!(
                "grid {grid:?} exceeds the positional tables ({tt} frames, {st} sites)"
            )));
        }
        let n = grid.iter().product::<usize>();
        let mut ti = Vec::with_capacity(batch * n * d);
        let mut si = Vec::with_capacity(batch * n * d);
        for _ in 0..batch {
            for t in 0..grid[0] {
                for h in 0..grid[1] {
                    for w in 0..grid[2] {
                        ti.extend(t * d..(t + 1) * d);
                        let s = h * width + w;
                        si.extend(s * d..(s + 1) * d);
                    }
                }
            }
        }
        let shape = [batch, n, d];
        Ok(t_table.gather(Rc::new(ti), &shape)?.add(&s_table.gather(Rc::new(si), &shape)?)?)
    }

    /// Token embeddings `[B, N, d]` for a filled grid `[B, t, h, w, 6]`.
    pub fn embed<'g>(&self, cx: Ctx<'g>, filled: &Var<'g>, masks: &[&Mask3D]) -> Result<Var<'g>> {
        let s = filled.shape();
        if s.len() != 5 || s[4] != CODE_CHANNELS || masks.len() != s[0] {
            return Err(CodecError::Shape(format!("filled grid {s:?} with {} masks", masks.len())));
        }
        let (b, grid) = (s[0], [s[1], s[2], s[3]]);
        let n = grid.iter().product::<usize>();
        if masks.iter().any(|m| m.grid != grid) {
            return Err(CodecError::Shape("mask grid differs from token grid".into()));
        }
        let h = self.embed[0].forward(cx, filled)?.silu()?;
        let h = self.embed[1].forward(cx, &h)?.reshape(&[b, n, self.dim])?;
        let indicator = Tensor::new(
            &[b, n, 1],
            masks
                .iter()
                .flat_map(|m| m.visible.iter().map(|&v| if v { 0.0 } else { 1.0 }))
                .collect(),
        )?;
        let m = self.mask_embed.forward(cx, &cx.constant(indicator))?;
        let pos = self.positions(cx, b, grid, self.pos, self.max_grid[2])?;
        Ok(h.add(&m)?.add(&pos)?)
    }

    /// Continuous tokens `[B, Nc, d]` from `y_hat[B, tc, hc, wc, 16]`.
    pub fn embed_continuous<'g>(&self, cx: Ctx<'g>, y_hat: &Var<'g>) -> Result<Var<'g>> {
        let s = y_hat.shape();
        if s.len() != 5 || s[4] != CONT_CHANNELS {
            return Err(CodecError::Shape(format!("continuous latent {s:?}")));
        }
        let (b, grid) = (s[0], [s[1], s[2], s[3]]);
        let n = grid.iter().product::<usize>();
        let x = self.cont_in.forward(cx, &y_hat.reshape(&[b, n, CONT_CHANNELS])?)?;
        let width = self.max_grid[2].div_ceil(2);
        let pos = self.positions(cx, b, grid, self.cont_pos, width)?;
        Ok(x.add(&pos)?)
    }

    /// Logits `[B, N, V]`.
    pub fn predict<'g>(&self, cx: Ctx<'g>, filled: &Var<'g>, masks: &[&Mask3D], y_hat: &Var<'g>) -> Result<Var<'g>> {
        let mut x = self.embed(cx, filled, masks)?;
        let kv = self.embed_continuous(cx, y_hat)?;
        for l in &self.layers {
            let h = l.ln1.forward(cx, &x)?;
            x = x.add(&l.self_attn.forward(cx, &h, &h)?)?;
            let h = l.ln2.forward(cx, &x)?;
            x = x.add(&l.cross_attn.forward(cx, &h, &kv)?)?;
            let h = l.ln3.forward(cx, &x)?;
            let h = l.fc2.forward(cx, &l.fc1.forward(cx, &h)?.gelu()?)?;
            x = x.add(&h)?;
        }
        let x = self.ln_f.forward(cx, &x)?;
        let logits = self.head.forward(cx, &x)?;
        if !logits.value().all_finite() {
            return Err(CodecError::Numeric("predictor produced non-finite logits".into()));
        }
        Ok(logits)
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self, batch: usize, grid: [usize; 3], cont_grid: [usize; 3]) -> Result<u64> {
        let n = grid.iter().product::<usize>();
        let nc = cont_grid.iter().product::<usize>();
        let mut total = self.embed[0].macs(batch, grid)? + self.embed[1].macs(batch, grid)?;
        total += self.mask_embed.macs(batch * n) + self.cont_in.macs(batch * nc);
        for l in &self.layers {
            total += l.self_attn.macs(batch, n, n) + l.cross_attn.macs(batch, n, nc);
            total += l.fc1.macs(batch * n) + l.fc2.macs(batch * n);
        }
        Ok(total + self.head.macs(batch * n))
    }
}

/// Mean negative log-likelihood (nats) of `truth` over masked positions.
///
/// `logits` is `[B, N, V]`; an empty masked set gives 0.
pub fn nll_masked<'g>(logits: &Var<'g>, truth: &[Vec<usize>], masks: &[&Mask3D]) -> Result<Var<'g>> {
    let s = logits.shape();
    let v = *s.last().unwrap_or(&0);
    let rows = logits.numel() / v.max(1);
    let masked: usize = masks.iter().map(|m| m.len() - m.visible_count()).sum();
    if masked == 0 {
        return Ok(logits.graph().constant(Tensor::scalar(0.0)));
    }
    let mut targets = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    for (t, m) in truth.iter().zip(masks) {
        if t.len() != m.len() {
            return Err(CodecError::Shape("truth and mask lengths differ".into()));
        }
        for (p, &idx) in t.iter().enumerate() {
            targets.push(idx);
            weights.push(if m.visible[p] { 0.0 } else { 1.0 / masked as f32 });
        }
    }
    if targets.len() != rows {
        return Err(CodecError::Shape("truth does not cover the logit rows".into()));
    }
    let flat = logits.reshape(&[rows, v])?;
    Ok(flat.cross_entropy(&targets, &vec![v; rows], &weights)?)
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked positions take the argmax codebook entry; visible ones are kept.
pub fn fill_predictions(decoded: &PartialCodeMap, logits: &Tensor, fsq: &FsqConfig) -> Result<CodeMap> {
    let v = fsq.vocab_size();
    let n = decoded.set.len();
    if logits.numel() != n * v {
        return Err(CodecError::Shape(format!(
            "logits hold {} values for {n} positions of vocabulary {v}",
            logits.numel()
        )));
    }
    let mut codes = decoded.codes.clone();
    for p in (0..n).filter(|&p| !decoded.set[p]) {
        let idx = argmax(&logits.data()[p * v..(p + 1) * v]);
        codes[p * CODE_CHANNELS..(p + 1) * CODE_CHANNELS].copy_from_slice(&fsq.index_to_code(idx)?);
    }
    CodeMap::new(decoded.grid, codes, fsq)
}

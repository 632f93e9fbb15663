//! Four-stage training: tokenizer, context models, token predictor, fusion.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvc_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::ccm::{PartialCodeMap, Quantizer};
use crate::config::KeyValues;
use crate::error::{CodecError, Result};
use crate::fusion;
use crate::masking::{self, Mask3D};
use crate::model::{fnv1a, Model};
use crate::nn::{self, Ctx};
use crate::predictor;
use crate::tokenizer::{CodeMap, GopTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            eps: 1e-8,
            warmup_epochs: 1,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0
            && self.clip_norm >= 0.0;
        if !ok {
            return Err(CodecError::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Linear warm-up to `base`, then a half cosine down to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> Result<f64> {
    if step > total {
        return Err(CodecError::Invalid(format!("step {step} beyond the {total}-step schedule")));
    }
    let warmup = warmup.min(total);
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(if step == total && total > 0 { 0.0 } else { base });
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok((base * 0.5 * (1.0 + libm::cos(PI * progress))).max(0.0))
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: BTreeMap<ParamId, Vec<f32>>,
    v: BTreeMap<ParamId, Vec<f32>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &tvc_tensor::Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = (1.0 - b1.powi(self.t)) as f32;
        let bc2 = (1.0 - b2.powi(self.t)) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        let (lr, wd, eps) = (lr as f32, self.cfg.weight_decay as f32, self.cfg.eps as f32);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                return Err(CodecError::Invalid(format!("gradient reached frozen parameter {}", store.name(id))));
            }
            let n = g.numel();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let p = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * wd * p[i];
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Tokenizer = 1,
    ContextModels = 2,
    Predictor = 3,
    Fusion = 4,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Tokenizer, Stage::ContextModels, Stage::Predictor, Stage::Fusion];

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            1 => Ok(Stage::Tokenizer),
            2 => Ok(Stage::ContextModels),
            3 => Ok(Stage::Predictor),
            4 => Ok(Stage::Fusion),
            _ => Err(CodecError::Config(format!("stage must be 1..4, got {id}"))),
        }
    }

    pub fn id(self) -> u32 {
        self as u32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stage 4 only: also train the main discrete decoder.
    pub unfreeze_main_decoder: bool,
}

impl StagePlan {
    pub fn new(stage: Stage, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            stage,
            epochs,
            batch_size,
            seed,
            unfreeze_main_decoder: false,
        }
    }

    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        match self.stage {
            Stage::Tokenizer => vec!["tok."],
            Stage::ContextModels => vec!["ccm."],
            Stage::Predictor => vec!["pred."],
            Stage::Fusion if self.unfreeze_main_decoder => vec!["fusion.", "tok.disc.dec"],
            Stage::Fusion => vec!["fusion."],
        }
    }

    /// Marks exactly this stage's parameters trainable.
    pub fn apply(&self, store: &mut ParamStore) {
        store.set_all_trainable(false);
        for p in self.trainable_prefixes() {
            store.set_trainable_prefix(p, true);
        }
    }
}

/// Hash over the names and values of every frozen parameter.
pub fn frozen_hash(store: &ParamStore) -> u64 {
    let mut bytes = Vec::new();
    for p in store.iter().filter(|p| !p.trainable) {
        bytes.extend_from_slice(p.name.as_bytes());
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fnv1a(&bytes)
}

/// Frozen-tokenizer outputs of one clip.
#[derive(Clone, Debug)]
pub struct TokenCache {
    pub codes: CodeMap,
    pub indices: Vec<usize>,
    /// `[t, h, w, 6]`.
    pub centroids: Tensor,
    /// Unrounded continuous latent `[tc, hc, wc, 16]`.
    pub y: Tensor,
    /// Rounded continuous latent.
    pub y_hat: Tensor,
}

impl TokenCache {
    pub fn new(model: &Model, clip: &GopTensor) -> Result<Self> {
        let codes = model.discrete_codes(clip)?;
        let y = model.continuous_latent(clip)?;
        Ok(Self {
            indices: codes.indices(&model.cfg.fsq)?,
            centroids: codes.dequantize(&model.cfg.fsq),
            y_hat: crate::tokenizer::quantize_latent(&y),
            codes,
            y,
        })
    }
}

/// One training batch with every random choice made up front.
pub struct Batch<'a> {
    /// `[B, F, H, W, 3]`.
    pub pixels: Tensor,
    pub tokens: Vec<&'a TokenCache>,
    pub masks: Vec<Mask3D>,
}

fn stack<'t>(items: impl Iterator<Item = &'t Tensor>) -> Result<Tensor> {
    let v: Vec<Tensor> = items.cloned().collect();
    Ok(Tensor::stack(&v)?)
}

/// Masked completion used as the Stage-4 decoder input.
fn completed_centroids(model: &Model, batch: &Batch) -> Result<Tensor> {
    let mut out = Vec::with_capacity(batch.tokens.len());
    for (tc, mask) in batch.tokens.iter().zip(&batch.masks) {
        let partial = PartialCodeMap::from_codes(&tc.codes, mask)?;
        out.push(model.complete_codes(&partial, mask, &tc.y_hat)?.dequantize(&model.cfg.fsq));
    }
    stack(out.iter())
}

/// The scalar a stage minimizes: Stage 1 mean L1 of both reconstructions,
/// Stage 2 bits per clip, Stage 3 mean masked NLL in nats, Stage 4 the pixel loss.
pub fn batch_loss<'g, R: Rng>(cx: Ctx<'g>, model: &Model, stage: Stage, batch: &Batch, rng: &mut R) -> Result<Var<'g>> {
    let g = cx.graph;
    let b = batch.pixels.shape()[0] as f32;
    let masks: Vec<&Mask3D> = batch.masks.iter().collect();
    match stage {
        Stage::Tokenizer => {
            let out = model.tok.forward(cx, &batch.pixels)?;
            let (_, disc) = model.tok.disc_dec.forward(cx, &out.centroids, None)?;
            let (_, cont) = model.tok.cont_dec.forward(cx, &out.latent, None)?;
            let pooled = nn::avg_pool2(&batch.pixels)?;
            let ld = disc.sub(&g.constant(batch.pixels.clone()))?.abs()?.mean();
            let lc = cont.sub(&g.constant(pooled))?.abs()?.mean();
            Ok(ld.add(&lc)?)
        }
        Stage::ContextModels => {
            let y = g.constant(stack(batch.tokens.iter().map(|t| &t.y))?);
            let (cont_rate, _) = model.ccm_cont.rate(cx, &y, &mut Quantizer::Noise(&mut *rng))?;
            let cent = g.constant(stack(batch.tokens.iter().map(|t| &t.centroids))?);
            let y_hat = g.constant(stack(batch.tokens.iter().map(|t| &t.y_hat))?);
            let codes: Vec<&CodeMap> = batch.tokens.iter().map(|t| &t.codes).collect();
            let disc_rate = model
                .ccm_disc
                .rate(cx, &cent, &y_hat, &codes, &masks, &mut Quantizer::Noise(&mut *rng))?;
            Ok(cont_rate.total()?.add(&disc_rate.total()?)?.scale(1.0 / b))
        }
        Stage::Predictor => {
            let y_hat = g.constant(stack(batch.tokens.iter().map(|t| &t.y_hat))?);
            let cent = g.constant(stack(batch.tokens.iter().map(|t| &t.centroids))?);
            let grid = batch.tokens[0].codes.grid;
            let cont = model.ccm_disc.continuous_on_grid(&y_hat, grid)?;
            let filled = model.ccm_disc.filled(cx, &cent, &cont, &masks)?;
            let logits = model.pred.predict(cx, &filled, &masks, &y_hat)?;
            let truth: Vec<Vec<usize>> = batch.tokens.iter().map(|t| t.indices.clone()).collect();
            predictor::nll_masked(&logits, &truth, &masks)
        }
        Stage::Fusion => {
            let cent = g.constant(completed_centroids(model, batch)?);
            let y_hat = g.constant(stack(batch.tokens.iter().map(|t| &t.y_hat))?);
            let pixels = model.fusion.decode(cx, &model.tok, &cent, &y_hat)?;
            fusion::pixel_loss(&batch.pixels, &pixels)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Mean loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub steps_per_epoch: usize,
    pub frozen_hash: u64,
}

impl StageReport {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("stage,epoch,step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{l}", self.stage.id(), i / self.steps_per_epoch.max(1), i);
        }
        s
    }
}

fn check_clips(clips: &[GopTensor]) -> Result<()> {
    let first = clips
        .first()
        .ok_or_else(|| CodecError::Config("training needs at least one clip".into()))?;
    if clips.iter().any(|c| c.tensor().shape() != first.tensor().shape()) {
        return Err(CodecError::Shape("training clips differ in shape".into()));
    }
    Ok(())
}

/// Precomputes the frozen tokenizer outputs for stages 2 to 4.
pub fn token_caches(model: &Model, clips: &[GopTensor]) -> Result<Vec<TokenCache>> {
    clips.iter().map(|c| TokenCache::new(model, c)).collect()
}

fn draw_masks(stage: Stage, grid: [usize; 3], n: usize, rng: &mut ChaCha8Rng) -> Vec<Mask3D> {
    (0..n)
        .map(|_| match stage {
            Stage::Tokenizer => Mask3D::all(grid, true),
            Stage::Fusion => {
                let rate = rng.gen_range(0.0..1.0);
                masking::random_mask_with_rate(rng, grid, rate)
            }
            _ => masking::random_mask(rng, grid),
        })
        .collect()
}

fn zero_projections(model: &Model) -> bool {
    model
        .store
        .iter()
        .filter(|p| p.name.starts_with("fusion.zero"))
        .all(|p| p.value.data().iter().all(|&v| v == 0.0))
}

/// Runs one stage in place and returns its loss history.
pub fn run_stage(model: &mut Model, plan: &StagePlan, opt: &OptimizerConfig, clips: &[GopTensor]) -> Result<StageReport> {
    opt.validate()?;
    check_clips(clips)?;
    if plan.batch_size == 0 {
        return Err(CodecError::Config("batch size must be positive".into()));
    }
    plan.apply(&mut model.store);
    if plan.stage == Stage::Fusion && plan.epochs > 0 && zero_projections(model) {
        model.init_control_from_continuous()?;
    }
    let hash_before = frozen_hash(&model.store);
    let caches = if plan.stage == Stage::Tokenizer || plan.epochs == 0 {
        Vec::new()
    } else {
        token_caches(model, clips)?
    };
    let n = clips.len();
    let spe = n.div_ceil(plan.batch_size);
    let total = spe * plan.epochs;
    let warmup = spe * opt.warmup_epochs;
    let mut adam = AdamW::new(opt.clone());
    let mut report = StageReport {
        stage: plan.stage,
        epoch_losses: Vec::with_capacity(plan.epochs),
        step_losses: Vec::with_capacity(total),
        steps_per_epoch: spe,
        frozen_hash: hash_before,
    };
    let mut step = 0;
    for epoch in 0..plan.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(plan.batch_size) {
            let pixels = stack(chunk.iter().map(|&i| clips[i].tensor()))?;
            let tokens: Vec<&TokenCache> = if caches.is_empty() {
                Vec::new()
            } else {
                chunk.iter().map(|&i| &caches[i]).collect()
            };
            let grid = tokens.first().map(|t| t.codes.grid).unwrap_or([1, 1, 1]);
            let masks = draw_masks(plan.stage, grid, chunk.len(), &mut rng);
            let batch = Batch { pixels, tokens, masks };
            let g = Graph::new();
            let cx = Ctx::new(&g, &model.store);
            let loss = batch_loss(cx, model, plan.stage, &batch, &mut rng)?;
            let value = loss.item() as f64;
            if !value.is_finite() {
                return Err(CodecError::Numeric(format!(
                    "stage {} epoch {epoch} step {step}: loss is {value}",
                    plan.stage.id()
                )));
            }
            let mut grads = g.backward(loss)?;
            if let Some((id, _)) = grads.iter().find(|(id, _)| !model.store.is_trainable(*id)) {
                return Err(CodecError::Invalid(format!("frozen parameter {} received a gradient", model.store.name(id))));
            }
            let norm = grads.global_norm() as f64;
            if !norm.is_finite() {
                return Err(CodecError::Numeric(format!(
                    "stage {} epoch {epoch} step {step}: gradient norm is {norm}",
                    plan.stage.id()
                )));
            }
            if opt.clip_norm > 0.0 && norm > opt.clip_norm {
                grads.scale((opt.clip_norm / norm) as f32);
            }
            drop(g);
            let lr = lr_at(step + 1, total, warmup, opt.lr)?;
            adam.step(&mut model.store, &grads, lr)?;
            report.step_losses.push(value);
            sum += value;
            step += 1;
        }
        report.epoch_losses.push(sum / spe as f64);
    }
    if frozen_hash(&model.store) != hash_before {
        return Err(CodecError::Invalid("frozen parameters changed during training".into()));
    }
    Ok(report)
}

/// Epochs, batch size and clip count of one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub clips: usize,
    /// Overrides the shared base learning rate.
    pub lr: Option<f64>,
}

/// Every knob of a training run, loadable from a key-value file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stages: [StageSchedule; 4],
    pub optimizer: OptimizerConfig,
    pub unfreeze_main_decoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = StageSchedule {
            epochs: 10,
            batch_size: 8,
            clips: 200,
            lr: None,
        };
        Self {
            seed: 0,
            frames: 9,
            height: 64,
            width: 64,
            stages: [s; 4],
            optimizer: OptimizerConfig::default(),
            unfreeze_main_decoder: false,
        }
    }
}

impl TrainConfig {
    /// Reads `seed`, `frames`, `height`, `width`, `lr`, `beta1`, `beta2`,
    /// `weight_decay`, `warmup_epochs`, `clip_norm`, `unfreeze_main_decoder`
    /// and `stageN.{epochs,batch_size,clips,lr}`; missing keys keep defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($key:expr, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        take!("seed", c.seed);
        take!("frames", c.frames);
        take!("height", c.height);
        take!("width", c.width);
        take!("lr", c.optimizer.lr);
        take!("beta1", c.optimizer.beta1);
        take!("beta2", c.optimizer.beta2);
        take!("weight_decay", c.optimizer.weight_decay);
        take!("warmup_epochs", c.optimizer.warmup_epochs);
        take!("clip_norm", c.optimizer.clip_norm);
        take!("unfreeze_main_decoder", c.unfreeze_main_decoder);
        for (i, s) in c.stages.iter_mut().enumerate() {
            take!(&format!("stage{}.epochs", i + 1), s.epochs);
            take!(&format!("stage{}.batch_size", i + 1), s.batch_size);
            take!(&format!("stage{}.clips", i + 1), s.clips);
            if let Some(lr) = kv.get(&format!("stage{}.lr", i + 1))? {
                s.lr = Some(lr);
            }
        }
        for stage in Stage::ALL {
            c.optimizer(stage).validate()?;
        }
        Ok(c)
    }

    /// Optimizer settings with the stage's learning-rate override applied.
    pub fn optimizer(&self, stage: Stage) -> OptimizerConfig {
        let mut o = self.optimizer.clone();
        if let Some(lr) = self.stages[stage.id() as usize - 1].lr {
            o.lr = lr;
        }
        o
    }

    pub fn plan(&self, stage: Stage) -> StagePlan {
        let s = self.stages[stage.id() as usize - 1];
        let mut p = StagePlan::new(stage, s.epochs, s.batch_size, self.seed.wrapping_add(stage.id() as u64));
        p.unfreeze_main_decoder = self.unfreeze_main_decoder;
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 5e-4).unwrap(), 0.0);
        assert_eq!(lr_at(10, 100, 10, 5e-4).unwrap(), 5e-4);
        assert!(lr_at(100, 100, 10, 5e-4).unwrap().abs() < 1e-9);
        assert!(lr_at(101, 100, 10, 5e-4).is_err());
    }
}

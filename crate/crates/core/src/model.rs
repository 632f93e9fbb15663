//! The full parameter bundle: tokenizer, both context models, the token
//! predictor and the fusion decoder, sharing one [`ParamStore`].

use std::path::Path;

use tvc_tensor::{checkpoint, Graph, ParamStore, Tensor};

use crate::ccm::{batched, unbatch, ContinuousCcm, DiscreteCcm, PartialCodeMap};
use crate::config::ModelConfig;
use crate::error::{CodecError, Result};
use crate::fusion::{self, Fusion};
use crate::masking::Mask3D;
use crate::nn::{Builder, Ctx};
use crate::predictor::{self, Predictor};
use crate::tokenizer::{unbatch_pixels, CodeMap, GopTensor, Tokenizer, CONT_DEC_PREFIX};

pub const ARCH_PARAM: &str = "meta.arch";

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub tok: Tokenizer,
    pub ccm_cont: ContinuousCcm,
    pub ccm_disc: DiscreteCcm,
    pub pred: Predictor,
    pub fusion: Fusion,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        store.insert(ARCH_PARAM, cfg.to_tensor());
        let mut b = Builder::new(&mut store, seed);
        let tok = Tokenizer::new(&mut b, &cfg);
        let ccm_cont = ContinuousCcm::new(&mut b, &cfg);
        let ccm_disc = DiscreteCcm::new(&mut b, &cfg);
        let pred = Predictor::new(&mut b, &cfg);
        let fusion = Fusion::new(&mut b, &cfg, &tok.disc_dec);
        store.set_trainable_prefix("meta.", false);
        Ok(Self {
            cfg,
            store,
            tok,
            ccm_cont,
            ccm_disc,
            pred,
            fusion,
        })
    }

    /// Rebuilds the module structure described by `meta.arch` and adopts the stored values.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let arch = store
            .get(ARCH_PARAM)
            .map_err(|_| CodecError::ModelMismatch(format!("checkpoint lacks {ARCH_PARAM}")))?;
        let cfg = ModelConfig::from_tensor(arch)?;
        let mut model = Self::new(cfg, 0)?;
        if store.len() != model.store.len() {
            return Err(CodecError::ModelMismatch(format!(
                "checkpoint has {} tensors, architecture needs {}",
                store.len(),
                model.store.len()
            )));
        }
        for p in store.iter() {
            let want = model
                .store
                .get(&p.name)
                .map_err(|_| CodecError::ModelMismatch(format!("unexpected tensor {}", p.name)))?;
            if want.shape() != p.value.shape() {
                return Err(CodecError::ModelMismatch(format!(
                    "{}: shape {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    want.shape()
                )));
            }
            if !p.value.all_finite() {
                return Err(CodecError::Numeric(format!("{} holds non-finite values", p.name)));
            }
        }
        for p in store.iter() {
            let id = model.store.id(&p.name)?;
            *model.store.value_mut(id) = p.value.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(checkpoint::to_bytes(&self.store)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let store = checkpoint::from_bytes(bytes).map_err(|e| CodecError::Format(e.to_string()))?;
        Self::from_store(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(&self.store, path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// FNV-1a over the serialized checkpoint.
    pub fn weight_hash(&self) -> Result<u64> {
        Ok(fnv1a(&self.to_bytes()?))
    }

    /// Copies the continuous decoder into the fusion control path.
    pub fn init_control_from_continuous(&mut self) -> Result<()> {
        let pairs: Vec<(String, Tensor)> = self
            .store
            .iter()
            .filter_map(|p| {
                p.name
                    .strip_prefix(CONT_DEC_PREFIX)
                    .map(|rest| (format!("{}{rest}", fusion::CONTROL_PREFIX), p.value.clone()))
            })
            .collect();
        for (name, value) in pairs {
            let id = self.store.id(&name)?;
            *self.store.value_mut(id) = value;
        }
        Ok(())
    }

    /// Continuous latent `[t, h, w, 16]` (unrounded).
    pub fn continuous_latent(&self, x: &GopTensor) -> Result<Tensor> {
        let g = Graph::new();
        self.tok.encode_continuous(Ctx::new(&g, &self.store), x)
    }

    pub fn discrete_codes(&self, x: &GopTensor) -> Result<CodeMap> {
        let g = Graph::new();
        Ok(self.tok.encode_discrete(Ctx::new(&g, &self.store), x)?.0)
    }

    /// Predictor logits `[N, V]` for a partially decoded grid.
    pub fn predict_logits(&self, partial: &PartialCodeMap, mask: &Mask3D, y_hat: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let cx = Ctx::new(&g, &self.store);
        let grid = partial.grid;
        let yv = g.constant(y_hat.clone().reshape(&batched(y_hat.shape()))?);
        let cont = self.ccm_disc.continuous_on_grid(&yv, grid)?;
        let cent = partial.centroids(&self.cfg.fsq);
        let cent = g.constant(cent.clone().reshape(&batched(cent.shape()))?);
        let filled = self.ccm_disc.filled(cx, &cent, &cont, &[mask])?;
        let logits = self.pred.predict(cx, &filled, &[mask], &yv)?.value();
        unbatch(&logits)
    }

    /// Completes a partially decoded grid with predicted tokens.
    pub fn complete_codes(&self, partial: &PartialCodeMap, mask: &Mask3D, y_hat: &Tensor) -> Result<CodeMap> {
        if partial.set.iter().all(|&s| s) {
            return CodeMap::new(partial.grid, partial.codes.clone(), &self.cfg.fsq);
        }
        let logits = self.predict_logits(partial, mask, y_hat)?;
        predictor::fill_predictions(partial, &logits, &self.cfg.fsq)
    }

    /// Fused reconstruction clamped to `[0, 1]`.
    pub fn reconstruct(&self, codes: &CodeMap, y_hat: &Tensor) -> Result<GopTensor> {
        let g = Graph::new();
        let cx = Ctx::new(&g, &self.store);
        let cent = codes.dequantize(&self.cfg.fsq);
        let cent = g.constant(cent.clone().reshape(&batched(cent.shape()))?);
        let yv = g.constant(y_hat.clone().reshape(&batched(y_hat.shape()))?);
        let pixels = self.fusion.decode(cx, &self.tok, &cent, &yv)?.value();
        unbatch_pixels(&pixels)
    }

    /// Discrete-only reconstruction clamped to `[0, 1]`.
    pub fn reconstruct_discrete(&self, codes: &CodeMap) -> Result<GopTensor> {
        let g = Graph::new();
        self.tok.decode_pixels(Ctx::new(&g, &self.store), codes)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
    }
}

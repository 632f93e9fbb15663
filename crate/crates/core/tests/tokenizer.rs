use proptest::prelude::*;
use tvc_core::config::ModelConfig;
use tvc_core::fsq::{dequantize, fsq_quantize, FsqConfig};
use tvc_core::model::Model;
use tvc_core::tokenizer::{CodeMap, GopTensor};
use tvc_tensor::Tensor;

fn noise_clip(seed: u64, frames: usize, h: usize, w: usize) -> GopTensor {
    let v = tvc_oracle::uniform_values(seed, frames * h * w * 3);
    GopTensor::new(Tensor::new(&[frames, h, w, 3], v.iter().map(|&x| (x as f32 + 1.0) * 0.5).collect()).unwrap()).unwrap()
}

fn slice(t: &Tensor, frame: usize) -> &[f32] {
    let per = t.numel() / t.shape()[0];
    &t.data()[frame * per..(frame + 1) * per]
}

#[test]
fn shape_law_for_valid_extents() {
    let m = Model::new(ModelConfig::default(), 5).unwrap();
    for (f, h, w) in [(1, 32, 32), (9, 64, 64), (17, 32, 64), (9, 96, 32)] {
        let x = noise_clip(f as u64 + h as u64, f, h, w);
        let t = 1 + (f - 1) / 8;
        let y = m.continuous_latent(&x).unwrap();
        assert_eq!(y.shape(), &[t, h / 32, w / 32, 16]);
        let codes = m.discrete_codes(&x).unwrap();
        assert_eq!(codes.grid, [t, h / 16, w / 16]);
        assert_eq!(codes.codes.len(), t * (h / 16) * (w / 16) * 6);
        let back = m.reconstruct_discrete(&codes).unwrap();
        assert_eq!(back.tensor().shape(), x.tensor().shape());
    }
}

#[test]
fn invalid_extents_rejected() {
    assert!(GopTensor::zeros(8, 32, 32).is_err());
    assert!(GopTensor::zeros(9, 24, 32).is_err());
    let m = Model::new(ModelConfig::default(), 5).unwrap();
    // discrete branch accepts multiples of 16, continuous needs 32
    let x = GopTensor::zeros(9, 48, 32).unwrap();
    assert!(m.discrete_codes(&x).is_ok());
    assert!(m.continuous_latent(&x).is_err());
}

#[test]
fn encoders_are_temporally_causal() {
    let m = Model::new(ModelConfig::default(), 6).unwrap();
    let x = noise_clip(1, 17, 32, 32);
    let mut data = x.tensor().data().to_vec();
    let per = 32 * 32 * 3;
    for v in &mut data[9 * per..] {
        *v = 1.0 - *v;
    }
    let y = GopTensor::new(Tensor::new(&[17, 32, 32, 3], data.clone()).unwrap()).unwrap();
    let (ya, yb) = (m.continuous_latent(&x).unwrap(), m.continuous_latent(&y).unwrap());
    let (ca, cb) = (m.discrete_codes(&x).unwrap(), m.discrete_codes(&y).unwrap());
    for t in 0..2 {
        assert_eq!(slice(&ya, t), slice(&yb, t), "continuous slice {t}");
    }
    assert_ne!(slice(&ya, 2), slice(&yb, 2));
    let n = 2 * 2 * 6;
    assert_eq!(ca.codes[..2 * n], cb.codes[..2 * n]);

    // frame 8 only reaches the second slice of a 9-frame GoP
    let x = noise_clip(2, 9, 32, 32);
    let mut data = x.tensor().data().to_vec();
    for v in &mut data[8 * per..] {
        *v = 0.0;
    }
    let y = GopTensor::new(Tensor::new(&[9, 32, 32, 3], data).unwrap()).unwrap();
    let (ya, yb) = (m.continuous_latent(&x).unwrap(), m.continuous_latent(&y).unwrap());
    assert_eq!(slice(&ya, 0), slice(&yb, 0));
}

#[test]
fn codes_in_range_and_deterministic() {
    let m = Model::new(ModelConfig::default(), 7).unwrap();
    let levels = m.cfg.fsq.levels().to_vec();
    for seed in 0..100 {
        let x = noise_clip(100 + seed, 9, 64, 64);
        let codes = m.discrete_codes(&x).unwrap();
        for (i, &q) in codes.codes.iter().enumerate() {
            assert!(q < levels[i % 6]);
        }
        if seed < 3 {
            assert_eq!(m.discrete_codes(&x).unwrap(), codes);
        }
    }
}

#[test]
fn zero_input_zero_bias_gives_zero_latent() {
    let mut m = Model::new(ModelConfig::default(), 8).unwrap();
    let biases: Vec<String> = m
        .store
        .iter()
        .filter(|p| p.name.starts_with("tok.cont.enc") && p.name.ends_with(".b"))
        .map(|p| p.name.clone())
        .collect();
    assert!(!biases.is_empty());
    for b in biases {
        let id = m.store.id(&b).unwrap();
        m.store.value_mut(id).data_mut().fill(0.0);
    }
    let y = m.continuous_latent(&GopTensor::zeros(9, 64, 64).unwrap()).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn decoded_pixels_stay_in_unit_range() {
    let m = Model::new(ModelConfig::default(), 9).unwrap();
    let fsq = &m.cfg.fsq;
    for seed in 0..5u64 {
        let idx: Vec<usize> = tvc_oracle::uniform_values(seed, 32)
            .iter()
            .map(|v| ((v + 1.0) * 2048.0) as usize % 4096)
            .collect();
        let codes = CodeMap::from_indices([2, 4, 4], &idx, fsq).unwrap();
        let out = m.reconstruct_discrete(&codes).unwrap();
        assert_eq!(out.tensor().shape(), &[9, 64, 64, 3]);
        assert!(out.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let y = Tensor::from_fn(&[2, 2, 2, 16], |i| (i % 7) as f32 - 3.0);
        let fused = m.reconstruct(&codes, &y).unwrap();
        assert!(fused.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn fsq_idempotent_for_small_levels() {
    for l in 2..=8u32 {
        for q in 0..l {
            let z = libm::atanhf(dequantize(q, l));
            assert_eq!(fsq_quantize(z, l), q, "L={l} q={q}");
        }
    }
    assert_eq!(fsq_quantize(0.0, 4), 2);
    assert_eq!(fsq_quantize(f32::NEG_INFINITY, 5), 0);
    assert_eq!(fsq_quantize(f32::INFINITY, 5), 4);
}

#[test]
fn default_vocabulary_is_a_bijection() {
    let fsq = FsqConfig::default();
    assert_eq!(fsq.vocab_size(), 4096);
    let mut seen = vec![false; 4096];
    for i in 0..4096 {
        let c = fsq.index_to_code(i).unwrap();
        assert_eq!(fsq.code_to_index(&c).unwrap(), i);
        seen[i] = true;
    }
    assert!(seen.iter().all(|&s| s));
    assert_eq!(fsq.code_to_index(&[1, 0, 0, 0, 0, 0]).unwrap(), 1);
    assert_eq!(fsq.code_to_index(&[0, 1, 0, 0, 0, 0]).unwrap(), 4);
    assert_eq!(fsq.code_to_index(&[3; 6]).unwrap(), 4095);
    assert!(fsq.code_to_index(&[4, 0, 0, 0, 0, 0]).is_err());
    assert!(fsq.index_to_code(4096).is_err());
}

proptest! {
    #[test]
    fn mixed_radix_matches_formula(levels in proptest::collection::vec(2u32..=5, 6)) {
        let fsq = FsqConfig::new(&levels).unwrap();
        let v = fsq.vocab_size();
        prop_assume!(v <= 4096);
        let mut codes_seen = std::collections::HashSet::new();
        for i in 0..v {
            let c = fsq.index_to_code(i).unwrap();
            let mut idx = 0usize;
            let mut radix = 1usize;
            for (q, l) in c.iter().zip(&levels) {
                prop_assert!(q < l);
                idx += *q as usize * radix;
                radix *= *l as usize;
            }
            prop_assert_eq!(idx, i);
            prop_assert!(codes_seen.insert(c));
        }
    }
}

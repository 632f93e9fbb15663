use std::collections::HashMap;

use tvc_core::ccm::PartialCodeMap;
use tvc_core::config::ModelConfig;
use tvc_core::fsq::FsqConfig;
use tvc_core::masking::Mask3D;
use tvc_core::model::Model;
use tvc_core::nn::Ctx;
use tvc_core::predictor::{self, fill_predictions, nll_masked};
use tvc_core::tokenizer::CodeMap;
use tvc_oracle::{self as oracle, Arr};
use tvc_tensor::{Graph, Tensor};

const GRID: [usize; 3] = [1, 2, 2];
const D: usize = 8;
const HEADS: usize = 2;
const MLP: usize = 16;

fn small_model() -> Model {
    let cfg = ModelConfig {
        fsq: FsqConfig::new(&[2; 6]).unwrap(),
        pred_layers: 1,
        pred_dim: D,
        pred_heads: HEADS,
        pred_mlp: MLP,
        max_grid: GRID,
        ..ModelConfig::default()
    };
    let mut m = Model::new(cfg, 17).unwrap();
    // move every predictor parameter off its structured init
    let names: Vec<_> = m.store.iter().filter(|p| p.name.starts_with("pred.")).map(|p| p.name.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let id = m.store.id(name).unwrap();
        let v = m.store.value_mut(id);
        let noise = oracle::uniform_values(500 + k as u64, v.numel());
        for (x, n) in v.data_mut().iter_mut().zip(noise) {
            *x += 0.3 * n as f32;
        }
    }
    m
}

struct Mirror<'a> {
    p: &'a HashMap<String, Arr>,
}

impl Mirror<'_> {
    fn get(&self, n: &str) -> &Arr {
        &self.p[n]
    }

    fn linear(&self, x: &Arr, name: &str) -> Arr {
        let y = oracle::matmul(x, self.get(&format!("{name}.w")));
        match self.p.get(&format!("{name}.b")) {
            Some(b) => oracle::add_row(&y, &b.data),
            None => y,
        }
    }

    fn ln(&self, x: &Arr, name: &str) -> Arr {
        let n = oracle::layer_norm_rows(x, 1e-5);
        let (g, b) = (self.get(&format!("{name}.g")), self.get(&format!("{name}.b")));
        let c = g.data.len();
        Arr::new(&n.shape, n.data.iter().enumerate().map(|(i, v)| v * g.data[i % c] + b.data[i % c]).collect())
    }

    fn attention(&self, x: &Arr, kv: &Arr, name: &str) -> Arr {
        let q = self.linear(x, &format!("{name}.q"));
        let k = self.linear(kv, &format!("{name}.k"));
        let v = self.linear(kv, &format!("{name}.v"));
        let dh = D / HEADS;
        let cols = |a: &Arr, h: usize| {
            let n = a.shape[0];
            Arr::new(&[n, dh], (0..n).flat_map(|r| a.data[r * D + h * dh..r * D + (h + 1) * dh].to_vec()).collect())
        };
        let nq = x.shape[0];
        let mut merged = vec![0.0; nq * D];
        for h in 0..HEADS {
            let o = oracle::attention(&cols(&q, h), &cols(&k, h), &cols(&v, h));
            for r in 0..nq {
                merged[r * D + h * dh..r * D + (h + 1) * dh].copy_from_slice(&o.data[r * dh..(r + 1) * dh]);
            }
        }
        self.linear(&Arr::new(&[nq, D], merged), &format!("{name}.o"))
    }

    fn conv(&self, x: &Arr, name: &str) -> Arr {
        let y = oracle::conv3d(x, self.get(&format!("{name}.w")), [1, 1, 1], [2, 1, 1], [0, 1, 1]);
        let b = &self.get(&format!("{name}.b")).data;
        let c = b.len();
        Arr::new(&y.shape, y.data.iter().enumerate().map(|(i, v)| v + b[i % c]).collect())
    }

    fn logits(&self, filled: &Arr, visible: &[bool], y_hat: &Arr) -> Arr {
        let n = visible.len();
        let h = self.conv(filled, "pred.embed0").map(oracle::silu);
        let h = self.conv(&h, "pred.embed1").reshape(&[n, D]);
        let ind = Arr::new(&[n, 1], visible.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect());
        let m = oracle::matmul(&ind, self.get("pred.mask.w"));
        let (pt, ps) = (self.get("pred.pos.t"), self.get("pred.pos.s"));
        let mut x = h.zip(&m, |a, b| a + b);
        for t in 0..GRID[0] {
            for hh in 0..GRID[1] {
                for w in 0..GRID[2] {
                    let r = (t * GRID[1] + hh) * GRID[2] + w;
                    let s = hh * GRID[2] + w;
                    for c in 0..D {
                        x.data[r * D + c] += pt.data[t * D + c] + ps.data[s * D + c];
                    }
                }
            }
        }
        let mut kv = self.linear(&y_hat.reshape(&[1, 16]), "pred.cont");
        for c in 0..D {
            kv.data[c] += self.get("pred.cpos.t").data[c] + self.get("pred.cpos.s").data[c];
        }
        let h = self.ln(&x, "pred.l0.ln1");
        x = x.zip(&self.attention(&h, &h, "pred.l0.sa"), |a, b| a + b);
        let h = self.ln(&x, "pred.l0.ln2");
        x = x.zip(&self.attention(&h, &kv, "pred.l0.ca"), |a, b| a + b);
        let h = self.ln(&x, "pred.l0.ln3");
        let f = self.linear(&self.linear(&h, "pred.l0.fc1").map(oracle::gelu), "pred.l0.fc2");
        x = x.zip(&f, |a, b| a + b);
        self.linear(&self.ln(&x, "pred.lnf"), "pred.head")
    }
}

fn masked_nll(logits: &Arr, truth: &[usize], visible: &[bool]) -> f64 {
    let masked = visible.iter().filter(|v| !**v).count() as f64;
    let w: Vec<f64> = visible.iter().map(|&v| if v { 0.0 } else { 1.0 / masked }).collect();
    let v = logits.shape[1];
    oracle::cross_entropy(logits, truth, &vec![v; truth.len()], &w)
}

#[test]
pub fn full_predictor_gradients_match_finite_differences() {
    let m = small_model();
    let visible = vec![true, false, false, true];
    let mask = Mask3D::from_flat(GRID, visible.clone()).unwrap();
    let truth = vec![5usize, 63, 17, 40];
    let filled = Tensor::new(&[1, 1, 2, 2, 6], oracle::uniform_values(3, 24).iter().map(|&v| v as f32).collect()).unwrap();
    let y_hat = Tensor::new(&[1, 1, 1, 1, 16], oracle::uniform_values(4, 16).iter().map(|&v| 2.0 * v as f32).collect()).unwrap();

    let g = Graph::new();
    let cx = Ctx::new(&g, &m.store);
    let fv = g.variable(filled.clone());
    let yv = g.variable(y_hat.clone());
    let logits = m.pred.predict(cx, &fv, &[&mask], &yv).unwrap();
    let loss = nll_masked(&logits, &[truth.clone()], &[&mask]).unwrap();
    let engine_loss = loss.item() as f64;
    let grads = g.backward(loss).unwrap();
    let g_filled = g.grad_of(loss, fv).unwrap();
    let g_y = g.grad_of(loss, yv).unwrap();

    let mut names = Vec::new();
    let mut params = HashMap::new();
    for p in m.store.iter().filter(|p| p.name.starts_with("pred.")) {
        names.push(p.name.clone());
        params.insert(p.name.clone(), Arr::from_f32(p.value.shape(), p.value.data()));
    }
    params.insert("@filled".into(), Arr::from_f32(filled.shape(), filled.data()));
    params.insert("@y".into(), Arr::from_f32(y_hat.shape(), y_hat.data()));
    let eval = |p: &HashMap<String, Arr>| {
        let mirror = Mirror { p };
        masked_nll(&mirror.logits(&p["@filled"], &visible, &p["@y"]), &truth, &visible)
    };
    let reference = eval(&params);
    assert!((reference - engine_loss).abs() < 1e-4 * reference.abs().max(1.0), "{reference} vs {engine_loss}");

    let mut worst = (0.0, String::new());
    let mut check = |key: &str, autodiff: &Tensor| {
        let base = params[key].clone();
        let numeric = oracle::central_difference(
            |x| {
                let mut p = params.clone();
                p.insert(key.to_string(), Arr::new(&base.shape, x.to_vec()));
                eval(&p)
            },
            &base.data,
            1e-5,
        );
        let ad: Vec<f64> = autodiff.data().iter().map(|&v| v as f64).collect();
        let e = oracle::max_relative_error(&ad, &numeric, 1e-3);
        if e > worst.0 {
            worst = (e, key.to_string());
        }
    };
    for n in &names {
        let id = m.store.id(n).unwrap();
        let grad = grads.get(id).unwrap_or_else(|| panic!("{n} has no gradient"));
        check(n, grad);
    }
    check("@filled", &g_filled);
    check("@y", &g_y);
    assert!(worst.0 < 1e-3, "max relative error {} at {}", worst.0, worst.1);
}

#[test]
fn nll_ignores_visible_positions() {
    let m = small_model();
    let mask = Mask3D::from_flat(GRID, vec![true, false, true, true]).unwrap();
    let g = Graph::new();
    let cx = Ctx::new(&g, &m.store);
    let filled = g.constant(Tensor::zeros(&[1, 1, 2, 2, 6]));
    let y = g.constant(Tensor::zeros(&[1, 1, 1, 1, 16]));
    let logits = m.pred.predict(cx, &filled, &[&mask], &y).unwrap();
    let a = nll_masked(&logits, &[vec![1, 2, 3, 4]], &[&mask]).unwrap().item();
    let b = nll_masked(&logits, &[vec![60, 2, 61, 62]], &[&mask]).unwrap().item();
    assert_eq!(a, b);
    let all = Mask3D::all(GRID, true);
    assert_eq!(nll_masked(&logits, &[vec![1, 2, 3, 4]], &[&all]).unwrap().item(), 0.0);
}

#[test]
fn untrained_nll_near_uniform_baseline() {
    let m = Model::new(ModelConfig::default(), 1).unwrap();
    let grid = [2, 4, 4];
    let mask = Mask3D::all(grid, false);
    let g = Graph::new();
    let cx = Ctx::new(&g, &m.store);
    let filled = g.constant(Tensor::zeros(&[1, 2, 4, 4, 6]));
    let y = g.constant(Tensor::zeros(&[1, 2, 2, 2, 16]));
    let logits = m.pred.predict(cx, &filled, &[&mask], &y).unwrap();
    let truth: Vec<usize> = (0..32).map(|i| i * 127 % 4096).collect();
    let bits = nll_masked(&logits, &[truth], &[&mask]).unwrap().item() as f64 / std::f64::consts::LN_2;
    assert!((bits - 12.0).abs() < 2.0, "{bits}");
}

#[test]
fn fill_keeps_decoded_and_takes_argmax_elsewhere() {
    let fsq = FsqConfig::default();
    let codes = CodeMap::from_indices(GRID, &[7, 8, 9, 10], &fsq).unwrap();
    let mask = Mask3D::from_flat(GRID, vec![true, false, true, false]).unwrap();
    let partial = PartialCodeMap::from_codes(&codes, &mask).unwrap();
    let mut logits = Tensor::zeros(&[4, 4096]);
    for (r, best) in [(0, 100), (1, 200), (2, 300), (3, 4095)] {
        logits.data_mut()[r * 4096 + best] = 5.0;
    }
    let out = fill_predictions(&partial, &logits, &fsq).unwrap();
    assert_eq!(out.indices(&fsq).unwrap(), vec![7, 200, 9, 4095]);
    assert_eq!(predictor::argmax(&[1.0, 3.0, 3.0]), 1);
}

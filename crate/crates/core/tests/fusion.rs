mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvc_core::config::ModelConfig;
use tvc_core::fusion::pixel_loss;
use tvc_core::model::Model;
use tvc_core::nn::Ctx;
use tvc_core::tokenizer::{CodeMap, Decoder};
use common::reference_loss;
use tvc_oracle::Arr;
use tvc_tensor::{Graph, Tensor};

fn random_codes(rng: &mut ChaCha8Rng, grid: [usize; 3]) -> CodeMap {
    let fsq = tvc_core::fsq::FsqConfig::default();
    let n: usize = grid.iter().product();
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4096)).collect();
    CodeMap::from_indices(grid, &idx, &fsq).unwrap()
}

#[test]
fn zero_projections_reproduce_discrete_decoder_bitwise() {
    let m = Model::new(ModelConfig::default(), 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (grid, cgrid) in [([2, 4, 4], [2, 2, 2]), ([3, 2, 4], [3, 1, 2]), ([1, 6, 2], [1, 3, 1])] {
        let codes = random_codes(&mut rng, grid);
        let y = Tensor::from_fn(&[cgrid[0], cgrid[1], cgrid[2], 16], |_| rng.gen_range(-6..=6) as f32);
        let fused = m.reconstruct(&codes, &y).unwrap();
        let plain = m.reconstruct_discrete(&codes).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(fused.tensor()), bits(plain.tensor()), "grid {grid:?}");
    }
}

#[test]
fn active_projections_change_output() {
    let mut m = Model::new(ModelConfig::default(), 42).unwrap();
    let names: Vec<String> = m.store.iter().filter(|p| p.name.starts_with("fusion.zero")).map(|p| p.name.clone()).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".w")).count(), 3);
    for (k, n) in names.iter().enumerate() {
        let id = m.store.id(n).unwrap();
        let v = m.store.value_mut(id);
        let noise = tvc_oracle::uniform_values(k as u64, v.numel());
        for (x, r) in v.data_mut().iter_mut().zip(noise) {
            *x = 0.2 * r as f32;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let codes = random_codes(&mut rng, [2, 4, 4]);
    let fused = m.reconstruct(&codes, &Tensor::zeros(&[2, 2, 2, 16])).unwrap();
    let plain = m.reconstruct_discrete(&codes).unwrap();
    assert_ne!(fused.tensor(), plain.tensor());
    assert_eq!(fused.tensor().shape(), &[9, 64, 64, 3]);
}

#[test]
fn injection_points_align_with_main_path() {
    let m = Model::new(ModelConfig::default(), 43).unwrap();
    let g = Graph::new();
    let cx = Ctx::new(&g, &m.store);
    for (grid, cgrid) in [([2, 4, 4], [2, 2, 2]), ([2, 2, 6], [2, 1, 3])] {
        let y = g.constant(Tensor::zeros(&[1, cgrid[0], cgrid[1], cgrid[2], 16]));
        let inj = m.fusion.injections(cx, &y, grid).unwrap();
        let ext = Decoder::tap_extents(grid);
        for (v, e) in inj.iter().zip(ext) {
            assert_eq!(&v.shape()[1..4], &e[..]);
        }
    }
}

#[test]
pub fn pixel_loss_matches_reference_and_gradients() {
    let shape = [2, 8, 8, 3];
    let n = 2 * 8 * 8 * 3;
    let xv: Vec<f64> = tvc_oracle::uniform_values(5, n).iter().map(|v| (v + 1.0) / 2.0).collect();
    let yv: Vec<f64> = tvc_oracle::uniform_values(6, n).iter().map(|v| (v + 1.0) / 2.0).collect();
    let x = Tensor::new(&shape, xv.iter().map(|&v| v as f32).collect()).unwrap();
    let y = Tensor::new(&shape, yv.iter().map(|&v| v as f32).collect()).unwrap();
    let g = Graph::new();
    let yvar = g.variable(y.clone());
    let loss = pixel_loss(&x, &yvar).unwrap();
    let want = reference_loss(&Arr::from_f32(&shape, x.data()), &Arr::from_f32(&shape, y.data()));
    assert!((loss.item() as f64 - want).abs() < 1e-5 * want, "{} vs {want}", loss.item());

    let grad = g.grad_of(loss, yvar).unwrap();
    let xa = Arr::from_f32(&shape, x.data());
    let numeric = tvc_oracle::central_difference(|p| reference_loss(&xa, &Arr::new(&shape, p.to_vec())), &Arr::from_f32(&shape, y.data()).data, 1e-6);
    let ad: Vec<f64> = grad.data().iter().map(|&v| v as f64).collect();
    assert!(tvc_oracle::max_relative_error(&ad, &numeric, 1e-3) < 1e-3);

    // symmetric L1 term, zero at equality, constant images
    let g = Graph::new();
    assert_eq!(pixel_loss(&x, &g.constant(x.clone())).unwrap().item(), 0.0);
    let a = pixel_loss(&x, &g.constant(y.clone())).unwrap().item();
    let b = pixel_loss(&y, &g.constant(x.clone())).unwrap().item();
    assert!((a - b).abs() < 1e-6);
    let zeros = Tensor::zeros(&shape);
    assert_eq!(pixel_loss(&zeros, &g.constant(Tensor::ones(&shape))).unwrap().item(), 1.0);
    assert!(pixel_loss(&zeros, &g.constant(Tensor::ones(&[2, 8, 4, 3]))).is_err());
}

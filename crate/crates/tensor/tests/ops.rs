use proptest::prelude::*;
use tvc_oracle::{self as oracle, Arr};
use tvc_tensor::{attention, Graph, Initializer, ParamStore, Tensor, TensorError};

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        oracle::uniform_values(seed, n).into_iter().map(|v| v as f32).collect(),
    )
    .unwrap()
}

#[test]
fn identity_kernel_is_identity() {
    let g = Graph::new();
    let x = g.constant(random(1, &[4, 5, 5, 3]));
    let mut k = Tensor::zeros(&[1, 1, 1, 3, 3]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let k = g.constant(k);
    let y = x.conv3d_causal(&k, [1, 1, 1]).unwrap();
    assert_eq!(*y.value(), *x.value());
}

#[test]
fn strided_conv_shape() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[9, 64, 64, 3]));
    let k = g.constant(Tensor::zeros(&[3, 3, 3, 3, 8]));
    let y = x.conv3d_causal(&k, [1, 2, 2]).unwrap();
    assert_eq!(y.shape(), vec![9, 32, 32, 8]);
}

#[test]
fn conv_errors() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 4, 4, 2]));
    let bad = g.constant(Tensor::zeros(&[3, 3, 3, 5, 1]));
    assert!(matches!(
        x.conv3d_causal(&bad, [1, 1, 1]),
        Err(TensorError::ShapeMismatch { .. })
    ));
    let k = g.constant(Tensor::zeros(&[3, 3, 3, 2, 1]));
    assert!(x.conv3d_causal(&k, [0, 1, 1]).is_err());
}

#[test]
fn causal_conv_ignores_future_frames() {
    let x = random(2, &[9, 8, 8, 3]);
    let k = random(3, &[3, 3, 3, 3, 4]);
    let run = |x: &Tensor| {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        xv.conv3d_causal(&kv, [1, 1, 1]).unwrap().value().as_ref().clone()
    };
    let base = run(&x);
    let mut perturbed = x.clone();
    let frame = 8 * 8 * 3;
    for v in &mut perturbed.data_mut()[8 * frame..] {
        *v += 10.0;
    }
    let out = run(&perturbed);
    let out_frame = 8 * 8 * 4;
    assert_eq!(&base.data()[..8 * out_frame], &out.data()[..8 * out_frame]);
    assert_ne!(&base.data()[8 * out_frame..], &out.data()[8 * out_frame..]);
}

#[test]
fn conv_matches_direct_sum() {
    let x = random(4, &[1, 5, 6, 6, 2]);
    let k = random(5, &[3, 3, 3, 2, 4]);
    let g = Graph::new();
    let y = g
        .constant(x.clone())
        .conv3d_causal(&g.constant(k.clone()), [2, 2, 2])
        .unwrap();
    let want = oracle::conv3d(
        &Arr::from_f32(x.shape(), x.data()),
        &Arr::from_f32(k.shape(), k.data()),
        [2, 2, 2],
        [2, 1, 1],
        [0, 1, 1],
    );
    assert_eq!(y.shape(), want.shape);
    for (a, b) in y.value().data().iter().zip(&want.data) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let g = Graph::new();
    let p = g.variable(random(6, &[2, 3, 4]));
    let gr = g.grad_of(p.sum(), p).unwrap();
    assert!(gr.data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares() {
    let g = Graph::new();
    let p = g.variable(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let gr = g.grad_of(p.square().unwrap().sum(), p).unwrap();
    assert_eq!(gr.data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_errors() {
    let g = Graph::new();
    let p = g.variable(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.backward(c.sum()), Err(TensorError::Detached)));
}

#[test]
fn unused_and_frozen_parameters_get_no_gradient() {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(0);
    let used = store.insert("used", init.fan_in(&[3], 3));
    let unused = store.insert("unused", init.fan_in(&[3], 3));
    let frozen = store.insert("frozen", init.fan_in(&[3], 3));
    store.set_trainable_prefix("frozen", false);
    let g = Graph::new();
    let a = g.param(&store, used);
    let _ = g.param(&store, unused);
    let f = g.param(&store, frozen);
    let loss = a.mul(&f).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(used).unwrap(), store.value(frozen));
    assert!(grads.get(unused).is_none());
    assert!(grads.get(frozen).is_none());
}

#[test]
fn parameter_used_twice_accumulates() {
    let mut store = ParamStore::new();
    let id = store.insert("p", Tensor::new(&[2], vec![1.0, -3.0]).unwrap());
    let g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    let loss = a.mul(&b).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(id).unwrap().data(), &[2.0, -6.0]);
}

#[test]
fn attention_single_key_broadcasts_value() {
    let g = Graph::new();
    let q = g.constant(random(7, &[3, 4]));
    let k = g.constant(random(8, &[1, 4]));
    let v = g.constant(random(9, &[1, 4]));
    let out = attention(&q, &k, &v).unwrap().value();
    for row in out.data().chunks(4) {
        assert_eq!(row, v.value().data());
    }
}

#[test]
fn attention_zero_logits_average_values() {
    let g = Graph::new();
    let q = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let k = g.constant(Tensor::new(&[3, 2], vec![0.0, 1.0, 0.0, -2.0, 0.0, 0.5]).unwrap());
    let v = g.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let out = attention(&q, &k, &v).unwrap().value();
    assert!((out.data()[0] - 3.0).abs() < 1e-6);
    assert!((out.data()[1] - 4.0).abs() < 1e-6);
}

#[test]
fn attention_matches_naive_loops() {
    let (q, k, v) = (random(10, &[4, 8]), random(11, &[4, 8]), random(12, &[4, 8]));
    let g = Graph::new();
    let out = attention(&g.constant(q.clone()), &g.constant(k.clone()), &g.constant(v.clone()))
        .unwrap()
        .value();
    let want = oracle::attention(
        &Arr::from_f32(q.shape(), q.data()),
        &Arr::from_f32(k.shape(), k.data()),
        &Arr::from_f32(v.shape(), v.data()),
    );
    for (a, b) in out.data().iter().zip(&want.data) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
    let g = Graph::new();
    let bad = g.constant(random(13, &[4, 7]));
    assert!(attention(&g.constant(q), &bad, &g.constant(v)).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let g = Graph::new();
    let p = g.constant(random(14, &[5, 7]).map(|v| v * 30.0)).softmax().unwrap().value();
    for row in p.data().chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn repeated_forward_is_bitwise_identical(seed in 0u64..1000, t in 1usize..5, hw in 2usize..7) {
        let x = random(seed, &[t, hw, hw, 2]);
        let k = random(seed + 1, &[3, 3, 3, 2, 3]);
        let run = || {
            let g = Graph::new();
            let y = g.constant(x.clone()).conv3d_causal(&g.constant(k.clone()), [1, 1, 1]).unwrap();
            let y = y.silu().unwrap().layer_norm(1e-5).unwrap();
            y.value().as_ref().clone()
        };
        let a = run();
        let b = run();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

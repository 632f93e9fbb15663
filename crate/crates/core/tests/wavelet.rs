use proptest::prelude::*;
use tvc_core::wavelet::{gop_analysis, gop_grid_shape, gop_synthesis, WaveletStack};
use tvc_tensor::Tensor;

fn tensor(shape: &[usize], values: &[f32]) -> Tensor {
    Tensor::new(shape, values[..shape.iter().product::<usize>()].to_vec()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn energy(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| v as f64 * v as f64).sum()
}

/// Random `[T, H, W, C]` shape compatible with `levels` on the chosen axes, plus values.
fn case() -> impl Strategy<Value = (WaveletStack, Vec<usize>, Vec<f32>)> {
    (1usize..=2, any::<[bool; 3]>(), 1usize..=3, 1usize..=2, 1usize..=2, 1usize..=3).prop_flat_map(|(levels, axes, t, h, w, c)| {
        let unit = 1 << levels;
        let ext = |on: bool, k: usize| if on { k * unit } else { k };
        let shape = vec![ext(axes[0], t), ext(axes[1], h), ext(axes[2], w), c];
        let n: usize = shape.iter().product();
        (
            Just(WaveletStack::new(levels, axes)),
            Just(shape),
            proptest::collection::vec(-1.0f32..1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn perfect_reconstruction((stack, shape, values) in case()) {
        let x = tensor(&shape, &values);
        let back = stack.inverse(&stack.forward(&x).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&back, &x) <= 1e-6, "{}", max_abs_diff(&back, &x));
    }

    #[test]
    fn parseval((stack, shape, values) in case()) {
        let x = tensor(&shape, &values);
        let y = stack.forward(&x).unwrap();
        let (ex, ey) = (energy(&x), energy(&y));
        prop_assert!((ex.sqrt() - ey.sqrt()).abs() <= 1e-5 * ex.sqrt().max(1.0), "{ex} vs {ey}");
    }

    #[test]
    fn linearity((stack, shape, values) in case(), alpha in -2.0f32..2.0, beta in -2.0f32..2.0) {
        let n: usize = shape.iter().product();
        let x = tensor(&shape, &values);
        let y = Tensor::from_fn(&shape, |i| values[(i * 7 + 3) % n] * 0.5 - 0.25);
        let mix = Tensor::from_fn(&shape, |i| alpha * x.data()[i] + beta * y.data()[i]);
        let lhs = stack.forward(&mix).unwrap();
        let (fx, fy) = (stack.forward(&x).unwrap(), stack.forward(&y).unwrap());
        let rhs = Tensor::from_fn(&shape, |i| alpha * fx.data()[i] + beta * fy.data()[i]);
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-6, "{}", max_abs_diff(&lhs, &rhs));
    }

    #[test]
    fn gop_pack_round_trips(t in 0usize..=2, h in 1usize..=3, w in 1usize..=3, seed in any::<u64>()) {
        let shape = [1 + 2 * t, 2 * h, 2 * w, 3];
        let n: usize = shape.iter().product();
        let vals = tvc_oracle::uniform_values(seed, n);
        let x = Tensor::new(&shape, vals.iter().map(|&v| v as f32).collect()).unwrap();
        let g = gop_analysis(&x).unwrap();
        prop_assert_eq!(g.shape(), &gop_grid_shape(shape[0], shape[1], shape[2], 3)[..]);
        prop_assert!((energy(&g) - energy(&x)).abs() < 1e-5 * energy(&x).max(1.0));
        let back = gop_synthesis(&g, 3).unwrap();
        prop_assert!(max_abs_diff(&back, &x) < 1e-6);
    }
}

/// One Haar level over all three axes of a `[2, 2, 2, 1]` block, from the definition.
fn haar_block(x: &[f64; 8]) -> [f64; 8] {
    let mut out = [0.0; 8];
    for (band, o) in out.iter_mut().enumerate() {
        let (bt, bh, bw) = (band >> 2 & 1, band >> 1 & 1, band & 1);
        for (i, &v) in x.iter().enumerate() {
            let (it, ih, iw) = (i >> 2 & 1, i >> 1 & 1, i & 1);
            let sign = |b: usize, k: usize| if b == 1 && k == 1 { -1.0 } else { 1.0 };
            *o += v * sign(bt, it) * sign(bh, ih) * sign(bw, iw);
        }
        *o /= 8f64.sqrt();
    }
    out
}

#[test]
fn matches_separable_definition() {
    let vals = tvc_oracle::uniform_values(9, 8);
    let x = Tensor::new(&[2, 2, 2, 1], vals.iter().map(|&v| v as f32).collect()).unwrap();
    let y = WaveletStack::full(1).forward(&x).unwrap();
    let want = haar_block(&vals.clone().try_into().unwrap());
    for (a, b) in y.data().iter().zip(want) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn constant_signal_has_no_detail() {
    let x = Tensor::full(&[4, 4, 4, 2], 0.7);
    let y = WaveletStack::full(1).forward(&x).unwrap();
    let approx = 0.7 * 2f32.sqrt().powi(3);
    for t in 0..4 {
        for h in 0..4 {
            for w in 0..4 {
                for c in 0..2 {
                    let v = y.data()[((t * 4 + h) * 4 + w) * 2 + c];
                    if t < 2 && h < 2 && w < 2 {
                        assert!((v - approx).abs() < 1e-6);
                    } else {
                        assert!(v.abs() < 1e-6);
                    }
                }
            }
        }
    }
}

#[test]
fn approximation_basis_vector() {
    let mut c = Tensor::zeros(&[2, 4, 4, 1]);
    c.data_mut()[0] = 1.0;
    let x = WaveletStack::spatial(1).inverse(&c).unwrap();
    for t in 0..2 {
        for h in 0..4 {
            for w in 0..4 {
                let v = x.data()[(t * 4 + h) * 4 + w];
                let want = if t == 0 && h < 2 && w < 2 { 0.5 } else { 0.0 };
                assert!((v - want).abs() < 1e-6);
            }
        }
    }
    let zero = WaveletStack::full(1).inverse(&Tensor::zeros(&[2, 2, 2, 3])).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn clip_sized_round_trip() {
    let vals = tvc_oracle::uniform_values(21, 8 * 16 * 16 * 3);
    let x = Tensor::new(&[8, 16, 16, 3], vals.iter().map(|&v| v as f32).collect()).unwrap();
    let stack = WaveletStack::full(1);
    assert!(max_abs_diff(&stack.inverse(&stack.forward(&x).unwrap()).unwrap(), &x) <= 1e-6);
}

#[test]
fn odd_extents_rejected() {
    assert!(WaveletStack::full(1).forward(&Tensor::zeros(&[2, 3, 4, 1])).is_err());
    assert!(gop_analysis(&Tensor::zeros(&[2, 4, 4, 3])).is_err());
}

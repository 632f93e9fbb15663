use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvc_core::masking::{fill_masked, fill_masked_tensor, fixed_mask, mask_for, random_mask, random_mask_with_rate, Mask3D, MaskMode, MaskSpec};
use tvc_tensor::{Graph, Tensor};

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

#[test]
pub fn rate_law_is_exact_for_every_interval_up_to_64() {
    for interval in 1..=64u32 {
        for n_visible in 0..=interval {
            let spec = MaskSpec::fixed(interval, n_visible).unwrap();
            let (num, den) = spec.mask_rate();
            // 1 − n/i reduced, computed independently
            let (a, b) = ((interval - n_visible) as u64, interval as u64);
            let g = gcd(a, b).max(1);
            let want = if a == 0 { (0, 1) } else { (a / g, b / g) };
            assert_eq!((num as u64, den as u64), want, "interval {interval} n_visible {n_visible}");
            for periods in [1usize, 3] {
                let n = interval as usize * periods;
                let mask = fixed_mask(&spec, [1, 1, n]).unwrap();
                let masked = (n - mask.visible_count()) as u64;
                // masked / n == num / den exactly
                assert_eq!(masked * den as u64, num as u64 * n as u64);
            }
        }
    }
}

#[test]
pub fn layout_reveals_leading_tokens_of_each_interval() {
    for interval in 1..=16u32 {
        for n_visible in 0..=interval {
            let spec = MaskSpec::fixed(interval, n_visible).unwrap();
            for grid in [[2, 4, 4], [1, 3, 5], [3, 2, 7]] {
                let mask = fixed_mask(&spec, grid).unwrap();
                let mut p = 0;
                for t in 0..grid[0] {
                    for h in 0..grid[1] {
                        for w in 0..grid[2] {
                            let start = p - p % interval as usize;
                            let want = p - start < n_visible as usize;
                            assert_eq!(mask.at(t, h, w), want);
                            p += 1;
                        }
                    }
                }
            }
        }
    }
    let four = fixed_mask(&MaskSpec::fixed(4, 1).unwrap(), [1, 2, 4]).unwrap();
    let vis: Vec<usize> = (0..8).filter(|&p| four.visible[p]).collect();
    assert_eq!(vis, vec![0, 4]);
    assert_eq!(MaskSpec::fixed(7, 1).unwrap().mask_rate(), (6, 7));
    assert_eq!(MaskSpec::fixed(7, 7).unwrap().mask_rate(), (0, 1));
    assert!(fixed_mask(&MaskSpec::fixed(7, 7).unwrap(), [2, 4, 4]).unwrap().visible.iter().all(|&v| v));
}

#[test]
fn out_of_range_visible_count_rejected() {
    assert!(MaskSpec::fixed(7, 8).is_err());
    assert!(MaskSpec::fixed(0, 0).is_err());
    let bad = MaskSpec { mask_interval: 3, n_visible: 4, mode: MaskMode::Fixed };
    assert!(fixed_mask(&bad, [1, 2, 2]).is_err());
}

#[test]
fn random_masks_hit_target_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = [2, 4, 4];
    let mut visible = 0usize;
    let draws = 10_000;
    for _ in 0..draws {
        visible += random_mask_with_rate(&mut rng, grid, 0.75).visible_count();
    }
    let frac = visible as f64 / (draws * 32) as f64;
    assert!((frac - 0.25).abs() <= 0.02, "{frac}");
    assert_eq!(random_mask_with_rate(&mut rng, grid, 1.0).visible_count(), 0);

    // the per-batch schedule masks between half and all positions
    for _ in 0..1000 {
        let m = random_mask(&mut rng, grid);
        assert!(m.visible_count() <= 16);
    }
    let spec = MaskSpec { mask_interval: 7, n_visible: 0, mode: MaskMode::Random { seed: 5 } };
    assert_eq!(mask_for(&spec, grid).unwrap(), mask_for(&spec, grid).unwrap());
}

fn reference_fill(cent: &[f32], fill: &[f32], visible: &[bool], c: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for (p, &v) in visible.iter().enumerate() {
        for k in 0..c {
            out.push(if v { cent[p * c + k] } else { fill[p * c + k] });
        }
    }
    out
}

proptest! {
    #[test]
    fn fill_matches_elementwise_reference(visible in proptest::collection::vec(any::<bool>(), 24), seed in any::<u64>()) {
        let grid = [2, 3, 4];
        let mask = Mask3D::from_flat(grid, visible.clone()).unwrap();
        let n = 24 * 6;
        let a: Vec<f32> = tvc_oracle::uniform_values(seed, n).iter().map(|&v| v as f32).collect();
        let b: Vec<f32> = tvc_oracle::uniform_values(seed ^ 1, n).iter().map(|&v| v as f32).collect();
        let want = reference_fill(&a, &b, &visible, 6);
        let ta = Tensor::new(&[2, 3, 4, 6], a.clone()).unwrap();
        let tb = Tensor::new(&[2, 3, 4, 6], b.clone()).unwrap();
        let plain = fill_masked_tensor(&ta, &tb, &mask).unwrap();
        prop_assert_eq!(plain.data(), &want[..]);

        let g = Graph::new();
        let (va, vb) = (g.variable(ta.clone().reshape(&[1, 2, 3, 4, 6]).unwrap()), g.variable(tb.reshape(&[1, 2, 3, 4, 6]).unwrap()));
        let out = fill_masked(&va, &vb, &[&mask]).unwrap();
        let value = out.value();
        prop_assert_eq!(value.data(), &want[..]);
        // gradient routes to exactly one source per element
        let loss = out.sum();
        let (ga, gb) = (g.grad_of(loss, va).unwrap(), g.grad_of(loss, vb).unwrap());
        for i in 0..n {
            prop_assert_eq!(ga.data()[i] + gb.data()[i], 1.0);
            prop_assert_eq!(ga.data()[i] == 1.0, visible[i / 6]);
        }
    }
}

#[test]
fn fill_extremes() {
    let grid = [1, 2, 2];
    let a = Tensor::from_fn(&[1, 2, 2, 6], |i| i as f32);
    let b = Tensor::from_fn(&[1, 2, 2, 6], |i| -(i as f32));
    assert_eq!(fill_masked_tensor(&a, &b, &Mask3D::all(grid, true)).unwrap(), a);
    assert_eq!(fill_masked_tensor(&a, &b, &Mask3D::all(grid, false)).unwrap(), b);
    let other = Tensor::full(&[1, 2, 2, 6], 9.0);
    assert_eq!(
        fill_masked_tensor(&other, &b, &Mask3D::all(grid, false)).unwrap(),
        fill_masked_tensor(&a, &b, &Mask3D::all(grid, false)).unwrap()
    );
    assert!(fill_masked_tensor(&a, &b, &Mask3D::all([1, 1, 2], true)).is_err());
}

use tvc_core::config::ModelConfig;
use tvc_core::eval::{self, Module};
use tvc_core::model::Model;
use tvc_core::nn::{Builder, Conv3d, Padding};
use tvc_core::synth::{generate_clip, Scene, SynthSpec};
use tvc_tensor::{ParamStore, Tensor};

#[test]
pub fn conv_mac_formula() {
    let mut store = ParamStore::new();
    let mut b = Builder::new(&mut store, 0);
    let c = Conv3d::new(&mut b, "c", [3, 3, 3], 3, 8, [1, 1, 1], Padding::Same);
    assert_eq!(c.macs(1, [9, 32, 32]).unwrap(), 5_971_968);
    assert_eq!(c.macs(1, [9, 32, 64]).unwrap(), 2 * 5_971_968);
}

#[test]
pub fn analytic_counts_match_recount() {
    let m = Model::new(ModelConfig::default(), 3).unwrap();
    for (f, h, w) in [(9, 64, 64), (9, 32, 64), (17, 32, 32)] {
        let r = eval::count_macs(&m, f, h, w).unwrap();
        let brute = eval::recount_macs(&m, f, h, w).unwrap();
        for (i, module) in Module::ALL.iter().enumerate() {
            assert_eq!(r.module(*module), brute[i], "{module:?} at {f}x{h}x{w}");
        }
        assert_eq!(r.total(), Module::ALL.iter().map(|&x| r.module(x)).sum::<u64>());
        assert!(Module::ALL.iter().all(|&x| r.module(x) > 0));
    }
}

#[test]
fn doubling_width_doubles_conv_stages() {
    let m = Model::new(ModelConfig::default(), 3).unwrap();
    let a = eval::count_macs(&m, 9, 64, 64).unwrap();
    let b = eval::count_macs(&m, 9, 64, 128).unwrap();
    for module in [Module::Tokenizer, Module::Fusion, Module::Checkerboard] {
        assert_eq!(2 * a.module(module), b.module(module), "{module:?}");
    }
}

fn clip() -> Tensor {
    generate_clip(&SynthSpec::random(5, 9, 32, 32)).unwrap().clip.into_pixels()
}

#[test]
fn metric_reference_points() {
    let x = clip();
    assert_eq!(eval::psnr(&x, &x).unwrap(), 99.0);
    assert_eq!(eval::ssim(&x, &x).unwrap(), 1.0);
    assert_eq!(eval::perceptual_proxy(&x, &x).unwrap(), 0.0);
    let zero = Tensor::zeros(x.shape());
    let one = Tensor::ones(x.shape());
    assert_eq!(eval::psnr(&zero, &one).unwrap(), 0.0);
    assert_eq!(eval::perceptual_proxy(&zero, &one).unwrap(), 0.0);
    assert!(eval::psnr(&x, &Tensor::zeros(&[1, 2, 2, 3])).is_err());
}

#[test]
fn ssim_symmetric() {
    let a = clip();
    let b = generate_clip(&SynthSpec::random(6, 9, 32, 32)).unwrap().clip.into_pixels();
    assert_eq!(eval::ssim(&a, &b).unwrap(), eval::ssim(&b, &a).unwrap());
}

#[test]
fn psnr_falls_with_noise() {
    use rand::{Rng, SeedableRng};
    let x = clip();
    let mut last = f64::INFINITY;
    for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let data = x.data().iter().map(|&v| v + amp * rng.gen_range(-1.0f32..1.0)).collect();
        let noisy = Tensor::new(x.shape(), data).unwrap();
        let p = eval::psnr(&x, &noisy).unwrap();
        assert!(p < last, "{amp}: {p} vs {last}");
        last = p;
    }
}

#[test]
fn proxy_zero_iff_gradients_match() {
    let x = clip();
    let shifted = x.map(|v| v + 0.25);
    assert!(eval::perceptual_proxy(&x, &shifted).unwrap() < 1e-7);
    let mut bumped = x.clone();
    bumped.data_mut()[100] += 0.1;
    assert!(eval::perceptual_proxy(&x, &bumped).unwrap() > 0.0);
}

#[test]
fn synthetic_rectangle_moves_at_declared_velocity() {
    let spec = SynthSpec {
        scene: Scene::MovingRectangles,
        objects: 1,
        velocity_x: (2, 2),
        velocity_y: (0, 0),
        seed: 11,
        frames: 5,
        height: 32,
        width: 48,
    };
    let s = generate_clip(&spec).unwrap();
    let o = &s.motion[0];
    assert_eq!(o.velocity, (2, 0));
    let p = s.clip.pixels();
    let at = |t: usize, y: i32, x: i32, c: usize| p.data()[((t * 32 + y as usize) * 48 + x as usize) * 3 + c];
    let mut checked = 0;
    for t in 0..4 {
        for oy in 0..o.size.1 {
            for ox in 0..o.size.0 {
                let (x0, y) = (o.origin.0 + 2 * t as i32 + ox, o.origin.1 + oy);
                let x1 = x0 + 2;
                if x0 < 0 || x1 >= 48 || y < 0 || y >= 32 {
                    continue;
                }
                for c in 0..3 {
                    assert_eq!(at(t, y, x0, c), at(t + 1, y, x1, c));
                }
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn synthetic_clips_are_seeded() {
    for scene in Scene::ALL {
        let mut spec = SynthSpec::random(3, 9, 32, 32);
        spec.scene = scene;
        let a = generate_clip(&spec).unwrap();
        let b = generate_clip(&spec).unwrap();
        assert_eq!(a.clip, b.clip);
        assert!(a.clip.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
        spec.velocity_x = (0, 0);
        spec.velocity_y = (0, 0);
        let still = generate_clip(&spec).unwrap().clip;
        let first = still.frames_range(0, 1).unwrap();
        for t in 1..9 {
            assert_eq!(still.frames_range(t, 1).unwrap(), first, "{scene:?}");
        }
    }
}

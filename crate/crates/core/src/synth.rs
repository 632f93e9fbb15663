//! Seeded synthetic video scenes with known motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvc_tensor::Tensor;

use crate::clip::Clip;
use crate::error::{CodecError, Result};
use crate::tokenizer::PIXEL_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scene {
    MovingRectangles,
    DriftingSinusoid,
    BouncingDisc,
}

impl Scene {
    pub const ALL: [Scene; 3] = [Scene::MovingRectangles, Scene::DriftingSinusoid, Scene::BouncingDisc];
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub scene: Scene,
    pub objects: usize,
    /// Inclusive ranges of the per-axis velocity, px/frame.
    pub velocity_x: (i32, i32),
    pub velocity_y: (i32, i32),
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl SynthSpec {
    /// A varied scene chosen from `seed`.
    pub fn random(seed: u64, frames: usize, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c11b);
        Self {
            scene: Scene::ALL[rng.gen_range(0..3)],
            objects: rng.gen_range(1..=3),
            velocity_x: (-3, 3),
            velocity_y: (-2, 2),
            seed,
            frames,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(CodecError::Config("synthetic clip extents must be positive".into()));
        }
        if self.velocity_x.0 > self.velocity_x.1 || self.velocity_y.0 > self.velocity_y.1 {
            return Err(CodecError::Config("velocity range is empty".into()));
        }
        Ok(())
    }
}

/// Ground-truth motion of one object: position at frame `t` is
/// `origin + velocity·t` (reflected at the borders for bouncing discs).
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMotion {
    pub origin: (i32, i32),
    pub velocity: (i32, i32),
    /// Width and height (rectangles), or radius twice (discs).
    pub size: (i32, i32),
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub clip: Clip,
    pub motion: Vec<ObjectMotion>,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn velocity(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> (i32, i32) {
    (
        rng.gen_range(spec.velocity_x.0..=spec.velocity_x.1),
        rng.gen_range(spec.velocity_y.0..=spec.velocity_y.1),
    )
}

/// Position on `[lo, hi]` after bouncing between the walls.
fn reflect(x: i32, lo: i32, hi: i32) -> i32 {
    let span = hi - lo;
    if span <= 0 {
        return lo;
    }
    let m = (x - lo).rem_euclid(2 * span);
    lo + if m <= span { m } else { 2 * span - m }
}

pub fn generate_clip(spec: &SynthSpec) -> Result<SynthClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let mut img = vec![0.0f32; f * h * w * PIXEL_CHANNELS];
    for t in 0..f {
        for y in 0..h {
            let a = y as f32 / h.max(2) as f32;
            for x in 0..w {
                let i = ((t * h + y) * w + x) * PIXEL_CHANNELS;
                for c in 0..PIXEL_CHANNELS {
                    img[i + c] = top[c] * (1.0 - a) + bottom[c] * a;
                }
            }
        }
    }
    let mut motion = Vec::new();
    match spec.scene {
        Scene::MovingRectangles => {
            for _ in 0..spec.objects {
                let size = (rng.gen_range(6..=w.max(7) as i32 / 2), rng.gen_range(6..=h.max(7) as i32 / 2));
                let origin = (rng.gen_range(0..w as i32), rng.gen_range(0..h as i32));
                let v = velocity(&mut rng, spec);
                let col = color(&mut rng);
                let period = rng.gen_range(3..7);
                for t in 0..f as i32 {
                    let (x0, y0) = (origin.0 + v.0 * t, origin.1 + v.1 * t);
                    for oy in 0..size.1 {
                        for ox in 0..size.0 {
                            let (x, y) = (x0 + ox, y0 + oy);
                            if x < 0 || y < 0 || x >= w as i32 || y >= h as i32 {
                                continue;
                            }
                            // texture fixed to the object
                            let shade = if ((ox / period) + (oy / period)) % 2 == 0 { 0.0 } else { 0.08 };
                            let i = ((t as usize * h + y as usize) * w + x as usize) * PIXEL_CHANNELS;
                            for c in 0..PIXEL_CHANNELS {
                                img[i + c] = (col[c] + shade).min(1.0);
                            }
                        }
                    }
                }
                motion.push(ObjectMotion { origin, velocity: v, size });
            }
        }
        Scene::DriftingSinusoid => {
            let mut layers = Vec::new();
            for _ in 0..spec.objects {
                let fx = rng.gen_range(1.0f32 / 32.0..1.0 / 8.0);
                let fy = rng.gen_range(1.0f32 / 32.0..1.0 / 8.0);
                let phase = [rng.gen_range(0.0..6.28f32), rng.gen_range(0.0..6.28f32), rng.gen_range(0.0..6.28f32)];
                let v = velocity(&mut rng, spec);
                layers.push((fx, fy, phase, v));
                motion.push(ObjectMotion {
                    origin: (0, 0),
                    velocity: v,
                    size: (w as i32, h as i32),
                });
            }
            let amp = 0.35 / spec.objects.max(1) as f32;
            for t in 0..f {
                for y in 0..h {
                    for x in 0..w {
                        let i = ((t * h + y) * w + x) * PIXEL_CHANNELS;
                        for c in 0..PIXEL_CHANNELS {
                            let mut v = 0.5;
                            for &(fx, fy, ph, vel) in &layers {
                                let u = fx * (x as f32 - (vel.0 * t as i32) as f32) + fy * (y as f32 - (vel.1 * t as i32) as f32);
                                v += amp * libm::sinf(std::f32::consts::TAU * u + ph[c]);
                            }
                            img[i + c] = 0.5 * img[i + c] + 0.5 * v;
                        }
                    }
                }
            }
        }
        Scene::BouncingDisc => {
            for _ in 0..spec.objects {
                let r = rng.gen_range(4..=(h.min(w) as i32 / 4).max(4));
                let origin = (rng.gen_range(r..=(w as i32 - r).max(r)), rng.gen_range(r..=(h as i32 - r).max(r)));
                let v = velocity(&mut rng, spec);
                let col = color(&mut rng);
                for t in 0..f as i32 {
                    let cx = reflect(origin.0 + v.0 * t, r, w as i32 - r);
                    let cy = reflect(origin.1 + v.1 * t, r, h as i32 - r);
                    for y in (cy - r).max(0)..(cy + r + 1).min(h as i32) {
                        for x in (cx - r).max(0)..(cx + r + 1).min(w as i32) {
                            let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                            if d2 > r * r {
                                continue;
                            }
                            let shade = 0.15 * (1.0 - d2 as f32 / (r * r) as f32);
                            let i = ((t as usize * h + y as usize) * w + x as usize) * PIXEL_CHANNELS;
                            for c in 0..PIXEL_CHANNELS {
                                img[i + c] = (col[c] + shade).min(1.0);
                            }
                        }
                    }
                }
                motion.push(ObjectMotion {
                    origin,
                    velocity: v,
                    size: (2 * r, 2 * r),
                });
            }
        }
    }
    let clip = Clip::new(Tensor::new(&[f, h, w, PIXEL_CHANNELS], img)?)?.quantized();
    Ok(SynthClip { clip, motion })
}

/// `count` varied clips with seeds `base_seed..base_seed + count`.
pub fn dataset(count: usize, base_seed: u64, frames: usize, height: usize, width: usize) -> Result<Vec<Clip>> {
    (0..count as u64)
        .map(|i| Ok(generate_clip(&SynthSpec::random(base_seed + i, frames, height, width))?.clip))
        .collect()
}

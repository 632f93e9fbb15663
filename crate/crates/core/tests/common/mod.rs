#![allow(dead_code)]

use tvc_oracle::Arr;

/// `L1 + 4 · mean over 3 pyramid levels of (mean |∂h e| + mean |∂w e|)` on `[F, H, W, C]`.
pub fn reference_loss(x: &Arr, y: &Arr) -> f64 {
    let e = y.zip(x, |a, b| a - b);
    let l1 = e.data.iter().map(|v| v.abs()).sum::<f64>() / e.data.len() as f64;
    let (f, mut h, mut w, c) = (e.shape[0], e.shape[1], e.shape[2], e.shape[3]);
    let mut level = e.data.clone();
    let mut perc = 0.0;
    for l in 0..3 {
        if l > 0 {
            let (ho, wo) = (h / 2, w / 2);
            let mut next = vec![0.0; f * ho * wo * c];
            for fi in 0..f {
                for i in 0..ho {
                    for j in 0..wo {
                        for k in 0..c {
                            let at = |a: usize, b: usize| level[((fi * h + a) * w + b) * c + k];
                            next[((fi * ho + i) * wo + j) * c + k] =
                                0.25 * (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1));
                        }
                    }
                }
            }
            level = next;
            h = ho;
            w = wo;
        }
        let at = |fi: usize, a: usize, b: usize, k: usize| level[((fi * h + a) * w + b) * c + k];
        let (mut sh, mut sw) = (0.0, 0.0);
        for fi in 0..f {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..c {
                        if i + 1 < h {
                            sh += (at(fi, i + 1, j, k) - at(fi, i, j, k)).abs();
                        }
                        if j + 1 < w {
                            sw += (at(fi, i, j + 1, k) - at(fi, i, j, k)).abs();
                        }
                    }
                }
            }
        }
        perc += sh / (f * (h - 1) * w * c) as f64 + sw / (f * h * (w - 1) * c) as f64;
    }
    l1 + 4.0 * perc / 3.0
}

/// A narrow model that trains in seconds.
pub fn small_config() -> tvc_core::config::ModelConfig {
    tvc_core::config::ModelConfig {
        enc_widths: [8, 12, 12],
        dec_widths: [12, 12, 8],
        hyper_channels: 4,
        ccm_width: 16,
        pred_layers: 1,
        pred_dim: 16,
        pred_heads: 2,
        pred_mlp: 32,
        ..Default::default()
    }
}

/// Synthetic GoPs of `frames × h × w`.
pub fn synthetic_gops(count: usize, seed: u64, frames: usize, h: usize, w: usize) -> Vec<tvc_core::tokenizer::GopTensor> {
    tvc_core::synth::dataset(count, seed, frames, h, w)
        .unwrap()
        .iter()
        .flat_map(|c| tvc_core::pipeline::split_gops(c).unwrap())
        .collect()
}

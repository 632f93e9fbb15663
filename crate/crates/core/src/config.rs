//! Model architecture knobs and the flat `key = value` config format.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use tvc_tensor::Tensor;

use crate::error::{CodecError, Result};
use crate::fsq::{FsqConfig, CODE_CHANNELS};

/// Channels of the continuous latent.
pub const CONT_CHANNELS: usize = 16;
/// Temporal downsampling of both token grids.
pub const TIME_FACTOR: usize = 8;
/// Spatial downsampling of the discrete grid.
pub const SPACE_FACTOR: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fsq: FsqConfig,
    pub enc_widths: [usize; 3],
    pub dec_widths: [usize; 3],
    /// `y = B·tanh(h/B)` bound on the continuous latent.
    pub cont_bound: f32,
    pub hyper_channels: usize,
    pub ccm_width: usize,
    pub pred_layers: usize,
    pub pred_dim: usize,
    pub pred_heads: usize,
    pub pred_mlp: usize,
    /// Largest discrete grid `(t, h, w)` the positional tables cover.
    pub max_grid: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fsq: FsqConfig::default(),
            enc_widths: [32, 64, 64],
            dec_widths: [64, 64, 32],
            cont_bound: 8.0,
            hyper_channels: 8,
            ccm_width: 64,
            pred_layers: 4,
            pred_dim: 128,
            pred_heads: 4,
            pred_mlp: 512,
            max_grid: [4, 8, 8],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fsq.channels() != CODE_CHANNELS {
            return Err(CodecError::Config(format!(
                "need {CODE_CHANNELS} FSQ channels, got {}",
                self.fsq.channels()
            )));
        }
        if self.fsq.max_level() > 255 {
            return Err(CodecError::Config("FSQ levels must fit in a byte".into()));
        }
        if self.pred_heads == 0 || self.pred_dim % self.pred_heads != 0 {
            return Err(CodecError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.pred_dim, self.pred_heads
            )));
        }
        if self.max_grid.iter().any(|&e| e == 0) || !(self.cont_bound > 0.0 && self.cont_bound <= 64.0) {
            return Err(CodecError::Config("invalid grid table or latent bound".into()));
        }
        Ok(())
    }

    /// Discrete grid extents for a `(1+T, H, W)` clip.
    pub fn discrete_grid(frames: usize, height: usize, width: usize) -> [usize; 3] {
        [1 + (frames - 1) / TIME_FACTOR, height / SPACE_FACTOR, width / SPACE_FACTOR]
    }

    /// Continuous grid extents for a `(1+T, H, W)` clip.
    pub fn continuous_grid(frames: usize, height: usize, width: usize) -> [usize; 3] {
        [
            1 + (frames - 1) / TIME_FACTOR,
            height / (2 * SPACE_FACTOR),
            width / (2 * SPACE_FACTOR),
        ]
    }

    /// Continuous grid covering a discrete grid after 2× nearest upsampling.
    pub fn continuous_of_discrete(grid: [usize; 3]) -> [usize; 3] {
        [grid[0], grid[1].div_ceil(2), grid[2].div_ceil(2)]
    }

    /// Integer knobs in a fixed order, stored next to the weights.
    pub fn to_tensor(&self) -> Tensor {
        let mut v: Vec<f32> = self.fsq.levels().iter().map(|&l| l as f32).collect();
        v.extend(self.enc_widths.iter().map(|&w| w as f32));
        v.extend(self.dec_widths.iter().map(|&w| w as f32));
        v.push(self.cont_bound);
        v.extend(
            [
                self.hyper_channels,
                self.ccm_width,
                self.pred_layers,
                self.pred_dim,
                self.pred_heads,
                self.pred_mlp,
            ]
            .iter()
            .map(|&x| x as f32),
        );
        v.extend(self.max_grid.iter().map(|&x| x as f32));
        let n = v.len();
        Tensor::new(&[n], v).expect("length matches")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.data();
        let expected = CODE_CHANNELS + 3 + 3 + 1 + 6 + 3;
        if d.len() != expected {
            return Err(CodecError::ModelMismatch(format!(
                "architecture record has {} entries, expected {expected}",
                d.len()
            )));
        }
        let int = |x: f32| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e7 {
                Ok(x as usize)
            } else {
                Err(CodecError::ModelMismatch(format!("bad architecture entry {x}")))
            }
        };
        let levels: Vec<u32> = d[..6].iter().map(|&x| int(x).map(|v| v as u32)).collect::<Result<_>>()?;
        let cfg = Self {
            fsq: FsqConfig::new(&levels)?,
            enc_widths: [int(d[6])?, int(d[7])?, int(d[8])?],
            dec_widths: [int(d[9])?, int(d[10])?, int(d[11])?],
            cont_bound: d[12],
            hyper_channels: int(d[13])?,
            ccm_width: int(d[14])?,
            pred_layers: int(d[15])?,
            pred_dim: int(d[16])?,
            pred_heads: int(d[17])?,
            pred_mlp: int(d[18])?,
            max_grid: [int(d[19])?, int(d[20])?, int(d[21])?],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parsed `key = value` file. Keys are case-sensitive; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CodecError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(CodecError::Config(format!("line {}: empty key", no + 1)));
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(CodecError::Config(format!("line {}: duplicate key `{key}`", no + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CodecError::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CodecError::Config(format!("`{key}`: cannot parse `{s}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Apply model-architecture keys on top of `cfg`.
    pub fn apply_model(&self, cfg: &mut ModelConfig) -> Result<()> {
        if let Some(l) = self.list::<u32>("fsq_levels")? {
            cfg.fsq = FsqConfig::new(&l)?;
        }
        let arr3 = |key: &str, dst: &mut [usize; 3]| -> Result<()> {
            if let Some(v) = self.list::<usize>(key)? {
                *dst = v
                    .try_into()
                    .map_err(|_| CodecError::Config(format!("`{key}` needs three values")))?;
            }
            Ok(())
        };
        arr3("enc_widths", &mut cfg.enc_widths)?;
        arr3("dec_widths", &mut cfg.dec_widths)?;
        arr3("max_grid", &mut cfg.max_grid)?;
        if let Some(v) = self.get("cont_bound")? {
            cfg.cont_bound = v;
        }
        for (key, dst) in [
            ("hyper_channels", &mut cfg.hyper_channels),
            ("ccm_width", &mut cfg.ccm_width),
            ("pred_layers", &mut cfg.pred_layers),
            ("pred_dim", &mut cfg.pred_dim),
            ("pred_heads", &mut cfg.pred_heads),
            ("pred_mlp", &mut cfg.pred_mlp),
        ] {
            if let Some(v) = self.get(key)? {
                *dst = v;
            }
        }
        cfg.validate()
    }
}

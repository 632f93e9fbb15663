//! Range coder over 16-bit quantized CDFs, and the discretized distributions
//! the context models feed it.

use tvc_tensor::math;

use crate::error::{CodecError, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION_BITS;
/// Lowest scale the Gaussian model accepts, in quantization steps.
pub const SIGMA_MIN: f64 = 1e-3;
/// Symbols of the integer latents live in `[-SUPPORT, SUPPORT]`.
pub const SUPPORT: i32 = 64;

const TOP: u32 = 1 << 24;

/// Cumulative frequencies `c_0 = 0 < c_1 < ... < c_S = 2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cum: Vec<u32>,
}

impl QuantizedCdf {
    /// Quantize a probability vector: each symbol gets `1 + floor(p·(2^16 − S))`
    /// and the leftover goes to the largest fractional parts, lowest index first on ties.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        let s = probs.len();
        if s == 0 || s > (TOTAL / 2) as usize {
            return Err(CodecError::Entropy(format!("cannot quantize {s} symbols")));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CodecError::Numeric("probabilities must be finite and non-negative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if sum <= 0.0 {
            return Err(CodecError::Numeric("probabilities sum to zero".into()));
        }
        let budget = (TOTAL as usize - s) as f64;
        let mut freq = Vec::with_capacity(s);
        let mut frac = Vec::with_capacity(s);
        let mut used = 0u64;
        for &p in probs {
            let x = p / sum * budget;
            let f = x.floor();
            freq.push(1 + f as u32);
            frac.push(x - f);
            used += 1 + f as u64;
        }
        let mut left = TOTAL as u64 - used.min(TOTAL as u64);
        if left > 0 {
            let mut order: Vec<usize> = (0..s).collect();
            order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));
            let mut k = 0;
            while left > 0 {
                freq[order[k % s]] += 1;
                left -= 1;
                k += 1;
            }
        }
        let mut over = used.saturating_sub(TOTAL as u64);
        while over > 0 {
            // Only reachable through float slop; take from the largest bin.
            let i = (0..s).max_by_key(|&i| (freq[i], std::cmp::Reverse(i))).unwrap();
            freq[i] -= 1;
            over -= 1;
        }
        Self::from_frequencies(&freq)
    }

    pub fn from_frequencies(freq: &[u32]) -> Result<Self> {
        let mut cum = Vec::with_capacity(freq.len() + 1);
        cum.push(0u32);
        let mut acc = 0u32;
        for &f in freq {
            if f == 0 {
                return Err(CodecError::Entropy("zero-frequency symbol".into()));
            }
            acc = acc
                .checked_add(f)
                .ok_or_else(|| CodecError::Entropy("frequency overflow".into()))?;
            cum.push(acc);
        }
        if acc != TOTAL {
            return Err(CodecError::Entropy(format!("frequencies total {acc}, expected {TOTAL}")));
        }
        Ok(Self { cum })
    }

    pub fn uniform(symbols: usize) -> Result<Self> {
        Self::from_probs(&vec![1.0; symbols])
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cumulative(&self) -> &[u32] {
        &self.cum
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    /// `−log2` of the quantized probability of `s`.
    pub fn bits(&self, s: usize) -> f64 {
        PRECISION_BITS as f64 - (self.freq(s) as f64).log2()
    }

    fn find(&self, target: u32) -> usize {
        // Largest s with cum[s] <= target.
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 0,
            started: false,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: usize, cdf: &QuantizedCdf) -> Result<()> {
        if symbol >= cdf.symbols() {
            return Err(CodecError::Entropy(format!(
                "symbol {symbol} outside a {}-symbol model",
                cdf.symbols()
            )));
        }
        let r = self.range >> PRECISION_BITS;
        self.low += cdf.cum[symbol] as u64 * r as u64;
        self.range = cdf.freq(symbol) * r;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            if self.started {
                self.out.push(self.cache.wrapping_add(carry));
            }
            for _ in 0..self.pending {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.pending = 0;
            self.cache = ((self.low >> 24) & 0xFF) as u8;
            self.started = true;
        } else {
            self.pending += 1;
        }
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    /// Flushes the coder. A stream with no symbols is empty.
    pub fn finish(mut self) -> Vec<u8> {
        if !self.started && self.low == 0 && self.range == u32::MAX {
            return Vec::new();
        }
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            data,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| CodecError::Entropy("truncated range-coded stream".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= TOTAL {
            return Err(CodecError::Entropy("corrupt range-coded stream".into()));
        }
        let s = cdf.find(target);
        self.code -= cdf.cum[s] * r;
        self.range = cdf.freq(s) * r;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(s)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

pub fn encode_symbols(symbols: &[usize], cdfs: &[QuantizedCdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(CodecError::Entropy("one cdf per symbol required".into()));
    }
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(bytes: &[u8], cdfs: &[QuantizedCdf]) -> Result<Vec<usize>> {
    if cdfs.is_empty() {
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(bytes)?;
    cdfs.iter().map(|c| dec.decode(c)).collect()
}

/// Map an integer in `[-SUPPORT, SUPPORT]` to a symbol index.
pub fn symbol_of(value: i32) -> Result<usize> {
    if !(-SUPPORT..=SUPPORT).contains(&value) {
        return Err(CodecError::Entropy(format!(
            "value {value} outside the coded support [-{SUPPORT}, {SUPPORT}]"
        )));
    }
    Ok((value + SUPPORT) as usize)
}

pub fn value_of(symbol: usize) -> i32 {
    symbol as i32 - SUPPORT
}

/// Discretized Gaussian over `[-support, support]` with tails folded into the end bins.
pub fn gaussian_pmf(mu: f64, sigma: f64, support: i32, delta: f64) -> Vec<f64> {
    interval_pmf(mu, sigma.max(SIGMA_MIN), support, delta, math::normal_cdf)
}

/// Discretized logistic with location `loc` and scale `scale`.
pub fn logistic_pmf(loc: f64, scale: f64, support: i32) -> Vec<f64> {
    interval_pmf(loc, scale.max(SIGMA_MIN), support, 1.0, math::logistic)
}

/// Bin masses of a symmetric unit density; bins right of the location are
/// evaluated through the mirrored lower tail.
fn interval_pmf(loc: f64, scale: f64, support: i32, delta: f64, cdf: fn(f64) -> f64) -> Vec<f64> {
    (-support..=support)
        .map(|k| {
            let c = k as f64 * delta - loc;
            let (near, far) = (c.abs() - 0.5 * delta, c.abs() + 0.5 * delta);
            let outer_edge = if c >= 0.0 { k == support } else { k == -support };
            let inner_edge = if c >= 0.0 { k == -support } else { k == support };
            // mass between distances `near` and `far` from the location, on one side
            let tail = |d: f64| cdf(-d / scale);
            let p = if inner_edge && outer_edge {
                1.0
            } else if outer_edge {
                tail(near)
            } else if inner_edge {
                1.0 - tail(far)
            } else if near < 0.0 {
                1.0 - tail(-near) - tail(far)
            } else {
                tail(near) - tail(far)
            };
            p.max(0.0)
        })
        .collect()
}

pub fn gaussian_cdf(mu: f64, sigma: f64, support: i32, delta: f64) -> Result<QuantizedCdf> {
    if !mu.is_finite() || !sigma.is_finite() {
        return Err(CodecError::Numeric(format!("non-finite Gaussian parameters ({mu}, {sigma})")));
    }
    QuantizedCdf::from_probs(&gaussian_pmf(mu, sigma, support, delta))
}

/// Factorized hyper-latent prior for one channel.
pub fn factorized_prior_cdf(loc: f64, scale: f64, support: i32) -> Result<QuantizedCdf> {
    if !loc.is_finite() || !scale.is_finite() {
        return Err(CodecError::Numeric(format!("non-finite prior parameters ({loc}, {scale})")));
    }
    QuantizedCdf::from_probs(&logistic_pmf(loc, scale, support))
}

/// Softmax over the first `levels` logits.
pub fn categorical_probs(logits: &[f32], levels: usize) -> Result<Vec<f64>> {
    if levels < 2 || logits.len() < levels {
        return Err(CodecError::Invalid(format!("categorical needs >= 2 of {} logits", logits.len())));
    }
    let row = &logits[..levels];
    if row.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::Numeric("non-finite logits".into()));
    }
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = row.iter().map(|&v| libm::exp(v as f64 - m)).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

pub fn categorical_cdf(logits: &[f32], levels: usize) -> Result<QuantizedCdf> {
    QuantizedCdf::from_probs(&categorical_probs(logits, levels)?)
}

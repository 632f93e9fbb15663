//! Token masks over the discrete grid and the masked-position fill.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvc_tensor::{concat_last, Tensor, Var};

use crate::error::{CodecError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Fixed,
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub mask_interval: u32,
    pub n_visible: u32,
    pub mode: MaskMode,
}

impl MaskSpec {
    pub fn fixed(mask_interval: u32, n_visible: u32) -> Result<Self> {
        let spec = Self {
            mask_interval,
            n_visible,
            mode: MaskMode::Fixed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_interval == 0 || self.n_visible > self.mask_interval {
            return Err(CodecError::Invalid(format!(
                "n_visible {} must lie in [0, {}] with a positive interval",
                self.n_visible, self.mask_interval
            )));
        }
        Ok(())
    }

    /// `1 − n_visible / interval` as a reduced fraction `(num, den)`.
    pub fn mask_rate(&self) -> (u32, u32) {
        let num = self.mask_interval - self.n_visible;
        let g = gcd(num, self.mask_interval);
        (num / g, self.mask_interval / g)
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Visibility per position of a `(t, h, w)` grid, row-major; `true` = visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask3D {
    pub grid: [usize; 3],
    pub visible: Vec<bool>,
}

impl Mask3D {
    pub fn from_flat(grid: [usize; 3], visible: Vec<bool>) -> Result<Self> {
        if visible.len() != grid.iter().product::<usize>() {
            return Err(CodecError::Shape(format!(
                "mask of {} entries does not fit grid {grid:?}",
                visible.len()
            )));
        }
        Ok(Self { grid, visible })
    }

    pub fn all(grid: [usize; 3], visible: bool) -> Self {
        Self {
            grid,
            visible: vec![visible; grid.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn at(&self, t: usize, h: usize, w: usize) -> bool {
        self.visible[(t * self.grid[1] + h) * self.grid[2] + w]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| !self.visible[p]).collect()
    }
}

/// Position `p` of the flattened grid is visible iff `p mod interval < n_visible`.
pub fn fixed_mask(spec: &MaskSpec, grid: [usize; 3]) -> Result<Mask3D> {
    spec.validate()?;
    let n = grid.iter().product::<usize>();
    if n == 0 {
        return Err(CodecError::Shape("empty token grid".into()));
    }
    let (interval, vis) = (spec.mask_interval as usize, spec.n_visible as usize);
    Mask3D::from_flat(grid, (0..n).map(|p| p % interval < vis).collect())
}

/// Mask for a spec: the fixed layout, or a seeded random draw.
pub fn mask_for(spec: &MaskSpec, grid: [usize; 3]) -> Result<Mask3D> {
    match spec.mode {
        MaskMode::Fixed => fixed_mask(spec, grid),
        MaskMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(random_mask(&mut rng, grid))
        }
    }
}

/// Draws a rate uniformly in `[0.5, 1)` and masks that share of positions.
pub fn random_mask<R: Rng>(rng: &mut R, grid: [usize; 3]) -> Mask3D {
    let rate = rng.gen_range(0.5..1.0);
    random_mask_with_rate(rng, grid, rate)
}

/// Masks `round(rate · n)` positions chosen by a uniform permutation.
pub fn random_mask_with_rate<R: Rng>(rng: &mut R, grid: [usize; 3], rate: f64) -> Mask3D {
    let n = grid.iter().product::<usize>();
    let masked = ((rate.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut visible = vec![true; n];
    for &p in &order[..masked] {
        visible[p] = false;
    }
    Mask3D { grid, visible }
}

/// Per-position selection: visible rows from `centroids`, masked rows from `fill`.
///
/// Both inputs are `[B?, t, h, w, C]`; `masks` holds one mask per batch item.
pub fn fill_masked<'g>(centroids: &Var<'g>, fill: &Var<'g>, masks: &[&Mask3D]) -> Result<Var<'g>> {
    let shape = centroids.shape();
    if fill.shape() != shape {
        return Err(CodecError::Shape(format!(
            "fill {:?} misaligned with grid {shape:?}",
            fill.shape()
        )));
    }
    let c = *shape.last().unwrap_or(&0);
    let positions: usize = shape[..shape.len() - 1].iter().product();
    let per_item: usize = masks.iter().map(|m| m.len()).sum();
    if per_item != positions || masks.iter().any(|m| m.len() != masks[0].len()) {
        return Err(CodecError::Shape(format!(
            "{} masks do not cover {positions} grid positions",
            masks.len()
        )));
    }
    let both = concat_last(&[*centroids, *fill])?;
    let mut index = Vec::with_capacity(positions * c);
    let flat = masks.iter().flat_map(|m| m.visible.iter());
    for (p, &vis) in flat.enumerate() {
        let base = p * 2 * c + if vis { 0 } else { c };
        index.extend(base..base + c);
    }
    Ok(both.gather(Rc::new(index), &shape)?)
}

/// Plain-tensor version of [`fill_masked`] for a single grid.
pub fn fill_masked_tensor(centroids: &Tensor, fill: &Tensor, mask: &Mask3D) -> Result<Tensor> {
    if centroids.shape() != fill.shape() {
        return Err(CodecError::Shape("fill misaligned with grid".into()));
    }
    let c = *centroids.shape().last().unwrap_or(&0);
    if mask.len() * c != centroids.numel() {
        return Err(CodecError::Shape("mask does not cover the grid".into()));
    }
    let mut out = centroids.clone();
    for (p, &vis) in mask.visible.iter().enumerate() {
        if !vis {
            out.data_mut()[p * c..(p + 1) * c].copy_from_slice(&fill.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_four_one_visible() {
        let spec = MaskSpec::fixed(4, 1).unwrap();
        let m = fixed_mask(&spec, [1, 2, 4]).unwrap();
        let vis: Vec<usize> = (0..8).filter(|&p| m.visible[p]).collect();
        assert_eq!(vis, vec![0, 4]);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(MaskSpec::fixed(7, 7).unwrap().mask_rate(), (0, 1));
        assert_eq!(MaskSpec::fixed(7, 1).unwrap().mask_rate(), (6, 7));
        assert!(MaskSpec::fixed(7, 8).is_err());
        assert!(MaskSpec::fixed(0, 0).is_err());
    }

    #[test]
    fn partial_interval_follows_rule() {
        let m = fixed_mask(&MaskSpec::fixed(7, 2).unwrap(), [1, 1, 10]).unwrap();
        assert_eq!(
            m.visible,
            vec![true, true, false, false, false, false, false, true, true, false]
        );
    }

    #[test]
    fn random_mask_extremes_and_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(random_mask(&mut a, [2, 4, 4]), random_mask(&mut b, [2, 4, 4]));
        let m = random_mask_with_rate(&mut a, [2, 4, 4], 1.0);
        assert_eq!(m.visible_count(), 0);
        for _ in 0..50 {
            let m = random_mask(&mut a, [2, 4, 4]);
            assert!(m.visible_count() <= 16);
        }
    }
}

//! Cartesian undersampling masks and the training-time undersampling augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctensor::{ComplexTensor, Domain, C64};
use crate::error::{Error, Result};

/// Per-phase-encode-line keep pattern: every `factor`-th row starting at row 0,
/// plus a contiguous fully sampled block of `acs_lines` rows at the center.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CartesianMask {
    height: usize,
    factor: usize,
    acs_lines: usize,
    keep: Vec<bool>,
}

impl CartesianMask {
    pub fn new(height: usize, factor: usize, acs_lines: usize) -> Result<Self> {
        if factor < 1 || factor > height {
            return Err(Error::Param(format!(
                "undersampling factor {factor} must lie in 1..={height}"
            )));
        }
        if acs_lines > height {
            return Err(Error::Param(format!(
                "acs_lines {acs_lines} exceeds height {height}"
            )));
        }
        let acs = Self::acs_range_for(height, acs_lines);
        let keep = (0..height)
            .map(|row| row % factor == 0 || acs.contains(&row))
            .collect();
        Ok(Self {
            height,
            factor,
            acs_lines,
            keep,
        })
    }

    fn acs_range_for(height: usize, acs_lines: usize) -> std::ops::Range<usize> {
        let start = (height - acs_lines).div_ceil(2);
        start..start + acs_lines
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn acs_lines(&self) -> usize {
        self.acs_lines
    }

    /// Rows of the centered ACS block.
    pub fn acs_range(&self) -> std::ops::Range<usize> {
        Self::acs_range_for(self.height, self.acs_lines)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, row: usize) -> bool {
        self.keep[row]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

pub fn make_mask(height: usize, factor: usize, acs_lines: usize) -> Result<CartesianMask> {
    CartesianMask::new(height, factor, acs_lines)
}

/// Zeroes every row the mask drops, across all averages, coils and columns.
pub fn apply_mask(k: &ComplexTensor, mask: &CartesianMask) -> Result<ComplexTensor> {
    k.require(Domain::KSpace)?;
    if mask.height() != k.height() {
        return Err(Error::Shape(format!(
            "mask height {} does not match tensor height {}",
            mask.height(),
            k.height()
        )));
    }
    let mut out = k.clone();
    let w = k.width();
    for plane in out.data_mut().chunks_exact_mut(k.plane_len()) {
        for (row, line) in plane.chunks_exact_mut(w).enumerate() {
            if !mask.is_kept(row) {
                line.fill(C64::new(0.0, 0.0));
            }
        }
    }
    Ok(out)
}

/// Powers of two up to and including `r_max` (`{1, 2, 4, ...}`).
pub fn power_of_two_factors(r_max: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |&r| r.checked_mul(2))
        .take_while(|&r| r <= r_max.max(1))
        .collect()
}

/// Seeded generator of random undersampling: draws a factor uniformly from a
/// configured set and masks the input with it.
#[derive(Debug, Clone)]
pub struct UndersampleAugmenter {
    factors: Vec<usize>,
    acs_lines: usize,
    rng: ChaCha8Rng,
}

impl UndersampleAugmenter {
    pub fn new(r_max: usize, acs_lines: usize, seed: u64) -> Result<Self> {
        if r_max < 1 {
            return Err(Error::Param("r_max must be at least 1".into()));
        }
        Self::with_factors(power_of_two_factors(r_max), acs_lines, seed)
    }

    pub fn with_factors(factors: Vec<usize>, acs_lines: usize, seed: u64) -> Result<Self> {
        if factors.is_empty() || factors.contains(&0) {
            return Err(Error::Param(
                "augmentation factor set must be non-empty and positive".into(),
            ));
        }
        Ok(Self {
            factors,
            acs_lines,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn draw_factor(&mut self) -> usize {
        draw_factor(&self.factors, &mut self.rng)
    }

    pub fn apply(&mut self, k: &ComplexTensor) -> Result<(ComplexTensor, CartesianMask)> {
        let factor = self.draw_factor().min(k.height());
        let mask = make_mask(k.height(), factor, self.acs_lines.min(k.height()))?;
        Ok((apply_mask(k, &mask)?, mask))
    }
}

/// Uniform draw from `factors` with a caller-owned generator.
pub fn draw_factor<R: Rng>(factors: &[usize], rng: &mut R) -> usize {
    factors[rng.random_range(0..factors.len())]
}

/// One-shot augmentation with a fresh generator seeded by `seed`.
pub fn undersample_augment(
    k: &ComplexTensor,
    r_max: usize,
    acs_lines: usize,
    seed: u64,
) -> Result<(ComplexTensor, CartesianMask)> {
    UndersampleAugmenter::new(r_max, acs_lines, seed)?.apply(k)
}

//! GRAPPA: per-coil linear interpolation of missing k-space lines from the
//! acquired multi-coil neighborhood, calibrated on a fully sampled ACS block.
//!
//! For a missing row `y` at offset `m = y mod R` the sources are the acquired
//! rows `y - m + R*j` for `ky_taps` consecutive values of `j` (for 4 taps:
//! `j = -1, 0, 1, 2`) and `kx_taps` columns centered on the target column.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctensor::{ComplexTensor, Domain, C64};
use crate::error::{Error, Result};
use crate::sampling::CartesianMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrappaConfig {
    pub ky_taps: usize,
    pub kx_taps: usize,
    /// Tikhonov weight relative to `trace(A^H A) / cols(A)`.
    pub lambda_rel: f64,
}

impl Default for GrappaConfig {
    fn default() -> Self {
        Self {
            ky_taps: 4,
            kx_taps: 5,
            lambda_rel: 1e-4,
        }
    }
}

impl GrappaConfig {
    fn validate(&self) -> Result<()> {
        if self.ky_taps < 1 || self.kx_taps < 1 {
            return Err(Error::Param("GRAPPA tap counts must be positive".into()));
        }
        if !(self.lambda_rel >= 0.0 && self.lambda_rel.is_finite()) {
            return Err(Error::Param(format!(
                "lambda_rel must be finite and non-negative, got {}",
                self.lambda_rel
            )));
        }
        Ok(())
    }

    fn ky_range(&self) -> (isize, isize) {
        let lo = -((self.ky_taps as isize - 1) / 2);
        (lo, lo + self.ky_taps as isize - 1)
    }

    fn kx_range(&self) -> (isize, isize) {
        let lo = -((self.kx_taps as isize - 1) / 2);
        (lo, lo + self.kx_taps as isize - 1)
    }
}

/// Smallest ACS block accepted by [`calibrate`]: at least `ky_taps * R` lines
/// and room to slide the source footprint to 8 positions.
pub fn min_acs_lines(factor: usize, cfg: &GrappaConfig) -> usize {
    if factor <= 1 {
        return 0;
    }
    (cfg.ky_taps * factor).max((cfg.ky_taps - 1) * factor + 8)
}

#[derive(Debug, Clone)]
pub struct GrappaKernel {
    factor: usize,
    n_coil: usize,
    config: GrappaConfig,
    /// One `(n_coil * ky_taps * kx_taps) x n_coil` matrix per missing offset `1..R`.
    /// Row index is `(source * ky_taps + ky) * kx_taps + kx`, column is the target coil.
    weights: Vec<DMatrix<C64>>,
    solves: usize,
}

impl GrappaKernel {
    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn n_coil(&self) -> usize {
        self.n_coil
    }

    pub fn config(&self) -> &GrappaConfig {
        &self.config
    }

    /// Number of regularized least-squares solves performed (one per offset and target coil).
    pub fn solve_count(&self) -> usize {
        self.solves
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// Weight for missing offset `offset` (1-based), target coil, source coil and tap.
    pub fn weight(&self, offset: usize, target: usize, source: usize, ky: usize, kx: usize) -> C64 {
        let row = (source * self.config.ky_taps + ky) * self.config.kx_taps + kx;
        self.weights[offset - 1][(row, target)]
    }

    /// Weights flattened as `[offset][target][source][ky][kx]`.
    pub fn flat_weights(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.weight_count());
        for w in &self.weights {
            for t in 0..self.n_coil {
                out.extend(w.column(t).iter().copied());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .all(|w| w.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }
}

/// Copies the rows of the mask's ACS block out of single-average k-space.
pub fn acs_block(k: &ComplexTensor, mask: &CartesianMask) -> Result<ComplexTensor> {
    k.require(Domain::KSpace)?;
    if mask.height() != k.height() {
        return Err(Error::Shape(format!(
            "mask height {} does not match k-space height {}",
            mask.height(),
            k.height()
        )));
    }
    let rows = mask.acs_range();
    let w = k.width();
    let mut data = Vec::with_capacity(k.n_avg() * k.n_coil() * rows.len() * w);
    for a in 0..k.n_avg() {
        for c in 0..k.n_coil() {
            data.extend_from_slice(&k.plane(a, c)[rows.start * w..rows.end * w]);
        }
    }
    if rows.len() < 2 {
        return Err(Error::Calibration(format!(
            "mask carries {} ACS lines; calibration needs an ACS block",
            rows.len()
        )));
    }
    ComplexTensor::new([k.n_avg(), k.n_coil(), rows.len(), w], data, Domain::KSpace)
}

/// `A^H A` and `A^H B` through real matrix products.
fn normal_equations(a: &DMatrix<C64>, b: &DMatrix<C64>) -> (DMatrix<C64>, DMatrix<C64>) {
    let ar = a.map(|z| z.re);
    let ai = a.map(|z| z.im);
    let br = b.map(|z| z.re);
    let bi = b.map(|z| z.im);
    let art = ar.transpose();
    let ait = ai.transpose();
    let g_re = &art * &ar + &ait * &ai;
    let g_im = &art * &ai - &ait * &ar;
    let r_re = &art * &br + &ait * &bi;
    let r_im = &art * &bi - &ait * &br;
    let g = g_re.zip_map(&g_im, C64::new);
    let r = r_re.zip_map(&r_im, C64::new);
    (g, r)
}

/// Fits interpolation weights on a fully sampled ACS block.
pub fn calibrate(acs: &ComplexTensor, factor: usize, cfg: &GrappaConfig) -> Result<GrappaKernel> {
    acs.require(Domain::KSpace)?;
    cfg.validate()?;
    if acs.n_avg() != 1 {
        return Err(Error::Param("calibrate needs a single average".into()));
    }
    if factor < 1 {
        return Err(Error::Param("undersampling factor must be at least 1".into()));
    }
    let n_coil = acs.n_coil();
    if factor == 1 {
        return Ok(GrappaKernel {
            factor,
            n_coil,
            config: *cfg,
            weights: Vec::new(),
            solves: 0,
        });
    }
    let (lines, w) = (acs.height(), acs.width());
    let need = min_acs_lines(factor, cfg);
    if lines < need {
        return Err(Error::Calibration(format!(
            "ACS block has {lines} lines; R={factor} with {} ky taps needs at least {need}",
            cfg.ky_taps
        )));
    }
    if cfg.kx_taps > w {
        return Err(Error::Calibration(format!(
            "{} kx taps do not fit in width {w}",
            cfg.kx_taps
        )));
    }
    let (j_lo, j_hi) = cfg.ky_range();
    let (dx_lo, dx_hi) = cfg.kx_range();
    let r = factor as isize;
    let cols = n_coil * cfg.ky_taps * cfg.kx_taps;
    let xs: Vec<isize> = (-dx_lo..w as isize - dx_hi).collect();

    let weights = (1..factor)
        .into_par_iter()
        .map(|m| -> Result<DMatrix<C64>> {
            let m = m as isize;
            let y_lo = (m - r * j_lo).max(0);
            let y_hi = (lines as isize - 1 + m - r * j_hi).min(lines as isize - 1);
            let ys: Vec<isize> = (y_lo..=y_hi).collect();
            let n_rows = ys.len() * xs.len();
            let mut a = DMatrix::<C64>::zeros(n_rows, cols);
            let mut b = DMatrix::<C64>::zeros(n_rows, n_coil);
            for (iy, &y) in ys.iter().enumerate() {
                for (ix, &x) in xs.iter().enumerate() {
                    let row = iy * xs.len() + ix;
                    let mut col = 0;
                    for s in 0..n_coil {
                        let plane = acs.plane(0, s);
                        for j in j_lo..=j_hi {
                            let sy = (y - m + r * j) as usize;
                            for dx in dx_lo..=dx_hi {
                                a[(row, col)] = plane[sy * w + (x + dx) as usize];
                                col += 1;
                            }
                        }
                    }
                    for t in 0..n_coil {
                        b[(row, t)] = acs.plane(0, t)[y as usize * w + x as usize];
                    }
                }
            }
            let (mut g, rhs) = normal_equations(&a, &b);
            let trace: f64 = (0..cols).map(|i| g[(i, i)].re).sum();
            let lambda = cfg.lambda_rel * trace / cols as f64;
            for i in 0..cols {
                g[(i, i)] += C64::new(lambda, 0.0);
            }
            let chol = Cholesky::new(g).ok_or_else(|| {
                Error::Numeric(format!(
                    "GRAPPA normal equations for offset {m} are not positive definite \
                     (lambda_rel = {}); increase lambda_rel",
                    cfg.lambda_rel
                ))
            })?;
            let sol = chol.solve(&rhs);
            if sol.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
                return Err(Error::Numeric(format!(
                    "non-finite GRAPPA weights for offset {m}"
                )));
            }
            Ok(sol)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(GrappaKernel {
        factor,
        n_coil,
        config: *cfg,
        weights,
        solves: (factor - 1) * n_coil,
    })
}

/// Fills every row the mask dropped; acquired rows (including the ACS block)
/// are copied unchanged. Neighbors outside the matrix count as zero.
pub fn reconstruct(
    k_us: &ComplexTensor,
    kernel: &GrappaKernel,
    mask: &CartesianMask,
) -> Result<ComplexTensor> {
    k_us.require(Domain::KSpace)?;
    if mask.factor() != kernel.factor {
        return Err(Error::Param(format!(
            "mask factor {} does not match kernel factor {}",
            mask.factor(),
            kernel.factor
        )));
    }
    if k_us.n_avg() != 1 || k_us.n_coil() != kernel.n_coil || mask.height() != k_us.height() {
        return Err(Error::Shape(format!(
            "k-space {:?} inconsistent with kernel ({} coils) or mask height {}",
            k_us.dims(),
            kernel.n_coil,
            mask.height()
        )));
    }
    let mut out = k_us.clone();
    if kernel.factor == 1 {
        return Ok(out);
    }
    let cfg = kernel.config;
    let (h, w, n_coil) = (k_us.height(), k_us.width(), k_us.n_coil());
    let (j_lo, j_hi) = cfg.ky_range();
    let (dx_lo, dx_hi) = cfg.kx_range();
    let r = kernel.factor as isize;
    let cols = n_coil * cfg.ky_taps * cfg.kx_taps;

    let missing: Vec<usize> = (0..h).filter(|&y| !mask.is_kept(y)).collect();
    let filled: Vec<(usize, DMatrix<C64>)> = missing
        .par_iter()
        .map(|&y| {
            let m = (y % kernel.factor) as isize;
            let mut nb = DMatrix::<C64>::zeros(w, cols);
            for x in 0..w as isize {
                let mut col = 0;
                for s in 0..n_coil {
                    let plane = k_us.plane(0, s);
                    for j in j_lo..=j_hi {
                        let sy = y as isize - m + r * j;
                        for dx in dx_lo..=dx_hi {
                            let sx = x + dx;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                nb[(x as usize, col)] = plane[sy as usize * w + sx as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
            (y, nb * &kernel.weights[m as usize - 1])
        })
        .collect();

    for (y, targets) in filled {
        for t in 0..n_coil {
            let row = &mut out.plane_mut(0, t)[y * w..(y + 1) * w];
            for (x, v) in row.iter_mut().enumerate() {
                *v = targets[(x, t)];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{apply_mask, make_mask};

    #[test]
    fn min_acs_rule() {
        let cfg = GrappaConfig::default();
        assert_eq!(min_acs_lines(1, &cfg), 0);
        assert_eq!(min_acs_lines(2, &cfg), 14);
        assert_eq!(min_acs_lines(4, &cfg), 20);
        assert_eq!(min_acs_lines(8, &cfg), 32);
    }

    #[test]
    fn constant_rows_single_coil() {
        let (h, w) = (32, 16);
        let row: Vec<C64> = (0..w)
            .map(|x| C64::new((x as f64 * 1.7).sin(), (x as f64 * 0.9 + 0.3).cos()))
            .collect();
        let data = row.repeat(h);
        let k = ComplexTensor::new([1, 1, h, w], data, Domain::KSpace).unwrap();
        let mask = make_mask(h, 2, 16).unwrap();
        let us = apply_mask(&k, &mask).unwrap();
        let kernel = calibrate(&acs_block(&k, &mask).unwrap(), 2, &GrappaConfig {
            lambda_rel: 1e-10,
            ..GrappaConfig::default()
        })
        .unwrap();
        assert_eq!(kernel.weight_count(), 20);
        let rec = reconstruct(&us, &kernel, &mask).unwrap();
        // Rows away from the zero-padded top/bottom edges are reproduced exactly.
        for y in 4..h - 4 {
            for x in 2..w - 2 {
                let d = rec.plane(0, 0)[y * w + x] - k.plane(0, 0)[y * w + x];
                assert!(d.norm() < 1e-6, "row {y} col {x}: {d}");
            }
        }
    }

    #[test]
    fn small_acs_is_rejected_with_minimum() {
        let k = ComplexTensor::zeros([1, 2, 12, 8], Domain::KSpace).unwrap();
        let err = calibrate(&k, 2, &GrappaConfig::default()).unwrap_err();
        match err {
            Error::Calibration(msg) => assert!(msg.contains("at least 14"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let k = ComplexTensor::new(
            [1, 2, 4, 4],
            (0..32).map(|i| C64::new(i as f64, -(i as f64))).collect(),
            Domain::KSpace,
        )
        .unwrap();
        let kernel = calibrate(&k, 1, &GrappaConfig::default()).unwrap();
        assert_eq!(kernel.solve_count(), 0);
        let mask = make_mask(4, 1, 0).unwrap();
        assert_eq!(reconstruct(&k, &kernel, &mask).unwrap(), k);
    }

    #[test]
    fn factor_mismatch_rejected() {
        let k = ComplexTensor::zeros([1, 1, 16, 8], Domain::KSpace).unwrap();
        let kernel = calibrate(&k, 1, &GrappaConfig::default()).unwrap();
        let mask = make_mask(16, 2, 0).unwrap();
        assert!(matches!(reconstruct(&k, &kernel, &mask), Err(Error::Param(_))));
    }
}

//! Complex multi-coil tensors and the centered, unitary 2-D Fourier transforms.
//!
//! Layout is `[average][coil][height][width]`, row-major. Both transform
//! directions keep the DC sample at `(height / 2, width / 2)` and scale by
//! `1 / sqrt(height * width)`, so `fft2_centered` and `ifft2_centered` are
//! exact inverses and preserve energy.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    KSpace,
    Image,
}

impl Domain {
    pub fn flipped(self) -> Domain {
        match self {
            Domain::KSpace => Domain::Image,
            Domain::Image => Domain::KSpace,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    dims: [usize; 4],
    data: Vec<C64>,
    domain: Domain,
}

fn check_dims(dims: [usize; 4]) -> Result<usize> {
    let [n_avg, n_coil, h, w] = dims;
    if n_avg == 0 || n_coil == 0 {
        return Err(Error::Shape(format!(
            "average and coil counts must be positive, got {dims:?}"
        )));
    }
    if h < 2 || w < 2 {
        return Err(Error::Shape(format!(
            "height and width must be at least 2, got {h}x{w}"
        )));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))
}

impl ComplexTensor {
    pub fn new(dims: [usize; 4], data: Vec<C64>, domain: Domain) -> Result<Self> {
        let len = check_dims(dims)?;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims:?} ({len})",
                data.len()
            )));
        }
        Ok(Self { dims, data, domain })
    }

    pub fn zeros(dims: [usize; 4], domain: Domain) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Self {
            dims,
            data: vec![C64::new(0.0, 0.0); len],
            domain,
        })
    }

    /// Single-average, single-coil tensor from one plane.
    pub fn from_plane(height: usize, width: usize, data: Vec<C64>, domain: Domain) -> Result<Self> {
        Self::new([1, 1, height, width], data, domain)
    }

    /// Recombines real and imaginary planes into a one-coil tensor.
    pub fn from_real_imag(real: &RealPlane, imag: &RealPlane, domain: Domain) -> Result<Self> {
        real.check_same_dims(imag)?;
        let data = real
            .data
            .iter()
            .zip(&imag.data)
            .map(|(&re, &im)| C64::new(re, im))
            .collect();
        Self::from_plane(real.height, real.width, data, domain)
    }

    /// Recombines magnitude and phase planes into a one-coil tensor.
    pub fn from_mag_phase(mag: &RealPlane, phase: &RealPlane, domain: Domain) -> Result<Self> {
        mag.check_same_dims(phase)?;
        let data = mag
            .data
            .iter()
            .zip(&phase.data)
            .map(|(&m, &p)| C64::from_polar(m, p))
            .collect();
        Self::from_plane(mag.height, mag.width, data, domain)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n_avg(&self) -> usize {
        self.dims[0]
    }

    pub fn n_coil(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    fn plane_offset(&self, avg: usize, coil: usize) -> usize {
        (avg * self.dims[1] + coil) * self.plane_len()
    }

    pub fn plane(&self, avg: usize, coil: usize) -> &[C64] {
        let off = self.plane_offset(avg, coil);
        &self.data[off..off + self.plane_len()]
    }

    pub fn plane_mut(&mut self, avg: usize, coil: usize) -> &mut [C64] {
        let off = self.plane_offset(avg, coil);
        let len = self.plane_len();
        &mut self.data[off..off + len]
    }

    /// Sum of squared magnitudes over all samples.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub(crate) fn require(&self, domain: Domain) -> Result<()> {
        if self.domain != domain {
            return Err(Error::Domain {
                expected: domain,
                found: self.domain,
            });
        }
        Ok(())
    }

    fn check_coil(&self, coil: usize) -> Result<()> {
        if coil >= self.n_coil() {
            return Err(Error::CoilIndex {
                index: coil,
                n_coil: self.n_coil(),
            });
        }
        Ok(())
    }

    /// Inverse transform of every (average, coil) plane: k-space to image.
    pub fn ifft2_centered(&self) -> Result<Self> {
        self.require(Domain::KSpace)?;
        Ok(self.transformed(Direction::Inverse))
    }

    /// Forward transform of every (average, coil) plane: image to k-space.
    pub fn fft2_centered(&self) -> Result<Self> {
        self.require(Domain::Image)?;
        Ok(self.transformed(Direction::Forward))
    }

    fn transformed(&self, dir: Direction) -> Self {
        let mut out = self.clone();
        let plan = Fft2::new(self.height(), self.width());
        out.data
            .par_chunks_mut(self.plane_len())
            .for_each(|plane| plan.process(plane, dir));
        out.domain = self.domain.flipped();
        out
    }

    /// Collapses the average axis by complex summation.
    pub fn sum_averages(&self) -> Self {
        let per_avg = self.n_coil() * self.plane_len();
        let mut data = self.data[..per_avg].to_vec();
        for avg in self.data.chunks_exact(per_avg).skip(1) {
            for (acc, z) in data.iter_mut().zip(avg) {
                *acc += z;
            }
        }
        Self {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data,
            domain: self.domain,
        }
    }

    /// Extracts one coil of the first average as a standalone tensor.
    pub fn coil(&self, coil: usize) -> Result<Self> {
        self.check_coil(coil)?;
        Ok(Self {
            dims: [1, 1, self.height(), self.width()],
            data: self.plane(0, coil).to_vec(),
            domain: self.domain,
        })
    }

    /// Magnitude and wrapped phase of one image-domain coil (first average).
    pub fn split_image_channels(&self, coil: usize) -> Result<(RealPlane, RealPlane)> {
        self.require(Domain::Image)?;
        self.check_coil(coil)?;
        let plane = self.plane(0, coil);
        let mag = plane.iter().map(|z| z.norm()).collect();
        let phase = plane.iter().map(|&z| wrapped_arg(z)).collect();
        Ok((
            RealPlane::new(self.height(), self.width(), mag)?,
            RealPlane::new(self.height(), self.width(), phase)?,
        ))
    }

    /// Real and imaginary parts of one k-space coil (first average).
    pub fn split_kspace_channels(&self, coil: usize) -> Result<(RealPlane, RealPlane)> {
        self.require(Domain::KSpace)?;
        self.check_coil(coil)?;
        let plane = self.plane(0, coil);
        let re = plane.iter().map(|z| z.re).collect();
        let im = plane.iter().map(|z| z.im).collect();
        Ok((
            RealPlane::new(self.height(), self.width(), re)?,
            RealPlane::new(self.height(), self.width(), im)?,
        ))
    }

    /// Mirrors every plane left-right (column `x` goes to `width - 1 - x`).
    pub fn mirrored_horizontal(&self) -> Self {
        let w = self.width();
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(w) {
            row.reverse();
        }
        out
    }
}

/// `arg(z)` in `[-pi, pi]` with `arg(0) = 0` and `arg(-1) = pi`.
pub fn wrapped_arg(z: C64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        return 0.0;
    }
    let a = z.im.atan2(z.re);
    // atan2(-0.0, negative) gives -pi; keep the positive branch at the cut.
    if a == -PI {
        PI
    } else {
        a
    }
}

/// Real-valued image plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealPlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RealPlane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "plane {height}x{width} needs {} samples, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mirrored_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub(crate) fn check_same_dims(&self, other: &RealPlane) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "plane dims differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

/// Row and column plans for one plane size.
struct Fft2 {
    height: usize,
    width: usize,
    rows_fwd: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_fwd: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            rows_fwd: planner.plan_fft_forward(width),
            rows_inv: planner.plan_fft_inverse(width),
            cols_fwd: planner.plan_fft_forward(height),
            cols_inv: planner.plan_fft_inverse(height),
        }
    }

    fn process(&self, plane: &mut [C64], dir: Direction) {
        let (h, w) = (self.height, self.width);
        let (rows, cols) = match dir {
            Direction::Forward => (&self.rows_fwd, &self.cols_fwd),
            Direction::Inverse => (&self.rows_inv, &self.cols_inv),
        };
        let scratch_len = rows
            .get_inplace_scratch_len()
            .max(cols.get_inplace_scratch_len());
        let mut scratch = vec![C64::new(0.0, 0.0); scratch_len];

        // ifftshift, transposed so the column transforms run on contiguous memory.
        let mut buf = vec![C64::new(0.0, 0.0); h * w];
        for y in 0..h {
            let sy = (y + h / 2) % h;
            for x in 0..w {
                let sx = (x + w / 2) % w;
                buf[x * h + y] = plane[sy * w + sx];
            }
        }
        cols.process_with_scratch(&mut buf, &mut scratch[..cols.get_inplace_scratch_len()]);
        for x in 0..w {
            for y in 0..h {
                plane[y * w + x] = buf[x * h + y];
            }
        }
        rows.process_with_scratch(plane, &mut scratch[..rows.get_inplace_scratch_len()]);

        // fftshift back into the plane, with unitary scaling.
        let scale = 1.0 / ((h * w) as f64).sqrt();
        buf.copy_from_slice(plane);
        for y in 0..h {
            let sy = (y + h - h / 2) % h;
            for x in 0..w {
                let sx = (x + w - w / 2) % w;
                plane[y * w + x] = buf[sy * w + sx] * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: [usize; 4], domain: Domain, seed: u64) -> ComplexTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexTensor::new(dims, data, domain).unwrap()
    }

    fn max_abs_diff(a: &[C64], b: &[C64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn center_impulse_gives_flat_image() {
        let mut k = ComplexTensor::zeros([1, 1, 8, 8], Domain::KSpace).unwrap();
        k.plane_mut(0, 0)[4 * 8 + 4] = C64::new(1.0, 0.0);
        let img = k.ifft2_centered().unwrap();
        assert_eq!(img.domain(), Domain::Image);
        for z in img.data() {
            assert!((z.norm() - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_gives_center_impulse() {
        let img =
            ComplexTensor::new([1, 1, 6, 5], vec![C64::new(2.0, 0.0); 30], Domain::Image).unwrap();
        let k = img.fft2_centered().unwrap();
        for y in 0..6 {
            for x in 0..5 {
                let z = k.plane(0, 0)[y * 5 + x];
                if (y, x) == (3, 2) {
                    assert!((z.re - 2.0 * 30f64.sqrt()).abs() < 1e-12);
                } else {
                    assert!(z.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_domain_is_rejected() {
        let k = ComplexTensor::zeros([1, 1, 4, 4], Domain::KSpace).unwrap();
        assert!(matches!(k.fft2_centered(), Err(Error::Domain { .. })));
        let img = k.ifft2_centered().unwrap();
        assert!(matches!(img.ifft2_centered(), Err(Error::Domain { .. })));
        assert!(img.split_kspace_channels(0).is_err());
        assert!(k.split_image_channels(0).is_err());
    }

    #[test]
    fn round_trip_on_multi_plane_tensor() {
        let k = random_tensor([2, 3, 10, 7], Domain::KSpace, 1);
        let back = k.ifft2_centered().unwrap().fft2_centered().unwrap();
        assert!(max_abs_diff(k.data(), back.data()) < 1e-12);
        assert_eq!(back.domain(), Domain::KSpace);
    }

    #[test]
    fn sum_averages_cases() {
        let a = random_tensor([1, 2, 4, 4], Domain::KSpace, 2);
        assert_eq!(a.sum_averages(), a);

        let mut data = a.data().to_vec();
        data.extend(a.data().iter().map(|z| -z));
        let pair = ComplexTensor::new([2, 2, 4, 4], data, Domain::KSpace).unwrap();
        assert!(pair.sum_averages().data().iter().all(|z| z.norm() == 0.0));

        let four = ComplexTensor::new([4, 2, 4, 4], a.data().repeat(4), Domain::KSpace).unwrap();
        let summed = four.sum_averages();
        assert_eq!(summed.dims(), [1, 2, 4, 4]);
        for (s, z) in summed.data().iter().zip(a.data()) {
            assert!((s - z * 4.0).norm() < 1e-12);
        }
    }

    #[test]
    fn image_channel_conventions() {
        let vals = vec![
            C64::new(3.0, 4.0),
            C64::new(0.0, 0.0),
            C64::new(-1.0, 0.0),
            C64::new(-1.0, -0.0),
        ];
        let img = ComplexTensor::from_plane(2, 2, vals, Domain::Image).unwrap();
        let (mag, phase) = img.split_image_channels(0).unwrap();
        assert_eq!(mag.data()[0], 5.0);
        assert!((phase.data()[0] - 4f64.atan2(3.0)).abs() < 1e-15);
        assert!((phase.data()[0] - 0.9273).abs() < 1e-4);
        assert_eq!((mag.data()[1], phase.data()[1]), (0.0, 0.0));
        assert_eq!(phase.data()[2], PI);
        assert_eq!(phase.data()[3], PI);
        assert!(matches!(
            img.split_image_channels(1),
            Err(Error::CoilIndex { index: 1, n_coil: 1 })
        ));
    }

    #[test]
    fn kspace_channels_split_and_recombine_exactly() {
        let k = random_tensor([1, 2, 5, 6], Domain::KSpace, 3);
        let (re, im) = k.split_kspace_channels(1).unwrap();
        let back = ComplexTensor::from_real_imag(&re, &im, Domain::KSpace).unwrap();
        assert_eq!(back.data(), k.plane(0, 1));

        let real_only = ComplexTensor::from_plane(
            2,
            2,
            vec![C64::new(3.0, 0.0), C64::new(1.0, 0.0), C64::new(-2.0, 0.0), C64::new(0.5, 0.0)],
            Domain::KSpace,
        )
        .unwrap();
        let (re, im) = real_only.split_kspace_channels(0).unwrap();
        assert_eq!(re.data(), &[3.0, 1.0, -2.0, 0.5]);
        assert!(im.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(ComplexTensor::zeros([1, 1, 1, 4], Domain::KSpace).is_err());
        assert!(ComplexTensor::zeros([0, 1, 4, 4], Domain::KSpace).is_err());
        assert!(ComplexTensor::new([1, 1, 2, 2], vec![C64::new(0.0, 0.0); 3], Domain::Image).is_err());
    }
}

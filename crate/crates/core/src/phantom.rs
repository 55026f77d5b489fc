//! Deterministic multi-coil phantoms with optional disc lesions.
//!
//! Every sample is a pure function of `(spec, index)`. The label is drawn from
//! its own generator stream, so geometry and noise never influence it.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctensor::{ComplexTensor, Domain, RealPlane, C64};
use crate::error::{Error, Result};
use crate::seeding::derived_rng;

const TAG_LABEL: u64 = 1;
const TAG_GEOMETRY: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_EXTRA_NOISE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Height and width of the square matrix.
    pub matrix: usize,
    pub n_coil: usize,
    pub n_avg: usize,
    /// Standard deviation of the complex Gaussian noise per k-space sample and average.
    pub noise_sigma: f64,
    /// Probability that a sample carries a lesion (label 1).
    pub lesion_prob: f64,
    /// Lesion radius range, in units of the half field of view.
    pub lesion_radius_range: (f64, f64),
    /// Relative lesion brightness over the local background.
    pub lesion_contrast_range: (f64, f64),
    /// Extra phase of the lesion relative to its surroundings, radians.
    pub lesion_phase_range: (f64, f64),
    /// Bound on each coefficient of the smooth background phase polynomial, radians.
    pub phase_amplitude: f64,
    /// Multiply the noise by `sqrt(R)` when simulating acquisition at factor `R`.
    pub snr_scaling: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            matrix: 100,
            n_coil: 16,
            n_avg: 4,
            noise_sigma: 0.002,
            lesion_prob: 1.0 / 18.0,
            lesion_radius_range: (0.08, 0.14),
            lesion_contrast_range: (0.5, 0.9),
            lesion_phase_range: (0.8, 1.6),
            phase_amplitude: 0.8,
            snr_scaling: false,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.matrix < 32 {
            problems.push(format!("matrix must be at least 32 (got {})", self.matrix));
        }
        if self.n_coil < 1 {
            problems.push("n_coil must be at least 1".to_string());
        }
        if self.n_avg < 1 {
            problems.push("n_avg must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            problems.push(format!("lesion_prob must lie in [0, 1] (got {})", self.lesion_prob));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            problems.push(format!("noise_sigma must be finite and >= 0 (got {})", self.noise_sigma));
        }
        for (name, (lo, hi)) in [
            ("lesion_radius_range", self.lesion_radius_range),
            ("lesion_contrast_range", self.lesion_contrast_range),
            ("lesion_phase_range", self.lesion_phase_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                problems.push(format!("{name} must be an ordered finite range (got ({lo}, {hi}))"));
            }
        }
        if !(self.lesion_radius_range.0 > 0.0 && self.lesion_radius_range.1 < 0.5) {
            problems.push("lesion_radius_range must lie inside (0, 0.5)".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Center in normalized coordinates (`[-1, 1)` across the field of view).
    pub center: (f64, f64),
    pub radius: f64,
    pub contrast: f64,
    pub phase: f64,
}

#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub index: u64,
    /// `[n_avg, n_coil, matrix, matrix]` k-space.
    pub kspace: ComplexTensor,
    pub label: u8,
    /// Noiseless object magnitude; equals the RSS image of the summed averages.
    pub ground_truth_image: RealPlane,
    /// Complex object (magnitude times the smooth phase), image domain, one coil.
    pub object: ComplexTensor,
    /// `[1, n_coil, matrix, matrix]` image-domain sensitivities.
    pub smaps: ComplexTensor,
    pub lesion: Option<Lesion>,
}

/// Label of sample `index`, without generating the sample.
pub fn label_for(spec: &PhantomSpec, index: u64) -> u8 {
    let mut rng = derived_rng(spec.seed, index, TAG_LABEL);
    u8::from(rng.random::<f64>() < spec.lesion_prob)
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let du = u - self.cx;
        let dv = v - self.cy;
        let p = du * c + dv * s;
        let q = -du * s + dv * c;
        (p / self.a).powi(2) + (q / self.b).powi(2) <= 1.0
    }
}

fn coords(n: usize, i: usize) -> f64 {
    (i as f64 - (n / 2) as f64) / (n as f64 / 2.0)
}

/// Smooth, normalized coil sensitivities: Gaussian profiles centered on a ring
/// around the field of view, each with a linear phase ramp. Scaled so
/// `sum_c |s_c|^2 = 1` at every pixel.
pub fn coil_maps(matrix: usize, n_coil: usize) -> ComplexTensor {
    let len = matrix * matrix;
    let mut data = vec![C64::new(0.0, 0.0); n_coil * len];
    let ring = 1.3;
    let width = 0.9;
    let ramp = 0.6;
    for c in 0..n_coil {
        let ang = 2.0 * PI * c as f64 / n_coil as f64;
        let (sa, ca) = ang.sin_cos();
        let (px, py) = (ring * ca, ring * sa);
        for y in 0..matrix {
            let v = coords(matrix, y);
            for x in 0..matrix {
                let u = coords(matrix, x);
                let d2 = (u - px).powi(2) + (v - py).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let phase = ang + ramp * (u * ca + v * sa);
                data[c * len + y * matrix + x] = C64::from_polar(mag, phase);
            }
        }
    }
    for p in 0..len {
        let norm = (0..n_coil)
            .map(|c| data[c * len + p].norm_sqr())
            .sum::<f64>()
            .sqrt();
        for c in 0..n_coil {
            data[c * len + p] /= norm;
        }
    }
    ComplexTensor::new([1, n_coil, matrix, matrix], data, Domain::Image)
        .expect("matrix and coil count validated by caller")
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn complex_normal(rng: &mut ChaCha8Rng, sigma: f64) -> C64 {
    let s = sigma / std::f64::consts::SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * s, im * s)
}

/// Generates sample `index` of the phantom family described by `spec`.
pub fn make_sample(spec: &PhantomSpec, index: u64) -> Result<LabeledSample> {
    spec.validate()?;
    let smaps = coil_maps(spec.matrix, spec.n_coil);
    make_sample_with_maps(spec, index, &smaps)
}

/// As [`make_sample`], reusing precomputed [`coil_maps`].
pub fn make_sample_with_maps(
    spec: &PhantomSpec,
    index: u64,
    smaps: &ComplexTensor,
) -> Result<LabeledSample> {
    let n = spec.matrix;
    if smaps.dims() != [1, spec.n_coil, n, n] {
        return Err(Error::Shape(format!(
            "coil maps {:?} do not match spec ({} coils, matrix {n})",
            smaps.dims(),
            spec.n_coil
        )));
    }
    let label = label_for(spec, index);
    let mut rng = derived_rng(spec.seed, index, TAG_GEOMETRY);

    let body = Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.65..0.8),
        b: rng.random_range(0.55..0.75),
        theta: rng.random_range(-0.3..0.3),
        value: rng.random_range(0.6..0.8),
    };
    let n_inner = rng.random_range(2..=4);
    let inner: Vec<Ellipse> = (0..n_inner)
        .map(|_| {
            let r = rng.random_range(0.0..0.5);
            let t = rng.random_range(0.0..2.0 * PI);
            Ellipse {
                cx: body.cx + r * body.a * t.cos(),
                cy: body.cy + r * body.b * t.sin(),
                a: rng.random_range(0.08..0.25),
                b: rng.random_range(0.08..0.25),
                theta: rng.random_range(0.0..PI),
                value: rng.random_range(-0.25..0.15),
            }
        })
        .collect();
    let phase_coef: [f64; 6] =
        std::array::from_fn(|_| rng.random_range(-spec.phase_amplitude..=spec.phase_amplitude));

    let lesion = (label == 1).then(|| {
        let radius = uniform(&mut rng, spec.lesion_radius_range);
        // Keep the disc inside the body ellipse.
        let reach = (1.0 - radius / body.a.min(body.b)).max(0.0) * 0.8;
        let r = reach * rng.random::<f64>().sqrt();
        let t = rng.random_range(0.0..2.0 * PI);
        let (st, ct) = body.theta.sin_cos();
        let (p, q) = (r * body.a * t.cos(), r * body.b * t.sin());
        Lesion {
            center: (body.cx + p * ct - q * st, body.cy + p * st + q * ct),
            radius,
            contrast: uniform(&mut rng, spec.lesion_contrast_range),
            phase: uniform(&mut rng, spec.lesion_phase_range),
        }
    });

    let len = n * n;
    let mut magnitude = vec![0.0f64; len];
    let mut object = vec![C64::new(0.0, 0.0); len];
    for y in 0..n {
        let v = coords(n, y);
        for x in 0..n {
            let u = coords(n, x);
            if !body.contains(u, v) {
                continue;
            }
            let mut value = body.value;
            for e in &inner {
                if e.contains(u, v) {
                    value += e.value;
                }
            }
            let mut value = value.max(0.05);
            let [c0, c1, c2, c3, c4, c5] = phase_coef;
            let mut phase = c0 + c1 * u + c2 * v + c3 * u * v + c4 * u * u + c5 * v * v;
            if let Some(l) = &lesion {
                if (u - l.center.0).powi(2) + (v - l.center.1).powi(2) <= l.radius * l.radius {
                    value *= 1.0 + l.contrast;
                    phase += l.phase;
                }
            }
            magnitude[y * n + x] = value;
            object[y * n + x] = C64::from_polar(value, phase);
        }
    }

    // Per-coil images, then k-space; every average carries 1/n_avg of the object.
    let scale = 1.0 / spec.n_avg as f64;
    let mut coil_img = Vec::with_capacity(spec.n_coil * len);
    for c in 0..spec.n_coil {
        coil_img.extend(
            smaps
                .plane(0, c)
                .iter()
                .zip(&object)
                .map(|(s, m)| s * m * scale),
        );
    }
    let coil_k = ComplexTensor::new([1, spec.n_coil, n, n], coil_img, Domain::Image)?
        .fft2_centered()?;
    let mut noise_rng = derived_rng(spec.seed, index, TAG_NOISE);
    let mut data = Vec::with_capacity(spec.n_avg * spec.n_coil * len);
    for _ in 0..spec.n_avg {
        data.extend(coil_k.data().iter().map(|&z| {
            if spec.noise_sigma > 0.0 {
                z + complex_normal(&mut noise_rng, spec.noise_sigma)
            } else {
                z
            }
        }));
    }
    let kspace = ComplexTensor::new([spec.n_avg, spec.n_coil, n, n], data, Domain::KSpace)?;

    Ok(LabeledSample {
        index,
        kspace,
        label,
        ground_truth_image: RealPlane::new(n, n, magnitude)?,
        object: ComplexTensor::from_plane(n, n, object, Domain::Image)?,
        smaps: smaps.clone(),
        lesion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub index: u64,
    pub split: Split,
    pub label: u8,
}

/// Index-ordered assignment of samples to splits; samples are generated on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    pub spec: PhantomSpec,
    pub entries: Vec<PlanEntry>,
}

impl DatasetPlan {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PlanEntry> + '_ {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

pub const MIN_DATASET_SIZE: usize = 20;

/// Assigns indices `0..n` to train/val/test: the first `round(n * f_train)`
/// indices train, the next `round(n * f_val)` validate, the rest test.
pub fn make_dataset(spec: &PhantomSpec, n: usize, fractions: (f64, f64, f64)) -> Result<DatasetPlan> {
    spec.validate()?;
    if n < MIN_DATASET_SIZE {
        return Err(Error::Param(format!(
            "dataset needs at least {MIN_DATASET_SIZE} samples, got {n}"
        )));
    }
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let n_train = (n as f64 * ft).round() as usize;
    let n_val = ((n as f64 * fv).round() as usize).min(n - n_train);
    let entries = (0..n as u64)
        .map(|index| {
            let i = index as usize;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            PlanEntry {
                index,
                split,
                label: label_for(spec, index),
            }
        })
        .collect();
    Ok(DatasetPlan {
        spec: spec.clone(),
        entries,
    })
}

/// Noise level of an acquisition at factor `R`: `sigma * sqrt(R)` when
/// `snr_scaling` is on, otherwise unchanged.
pub fn snr_scaled_noise(spec: &PhantomSpec, factor: usize) -> Result<f64> {
    if factor < 1 {
        return Err(Error::Param("undersampling factor must be at least 1".into()));
    }
    Ok(if spec.snr_scaling {
        spec.noise_sigma * (factor as f64).sqrt()
    } else {
        spec.noise_sigma
    })
}

/// Adds the noise missing between `noise_sigma` and [`snr_scaled_noise`], so
/// each average ends up with the acquisition-realistic level. No-op when
/// `snr_scaling` is off.
pub fn add_acquisition_noise(
    k: &ComplexTensor,
    spec: &PhantomSpec,
    index: u64,
    factor: usize,
) -> Result<ComplexTensor> {
    k.require(Domain::KSpace)?;
    let target = snr_scaled_noise(spec, factor)?;
    let extra = (target * target - spec.noise_sigma * spec.noise_sigma).max(0.0).sqrt();
    let mut out = k.clone();
    if extra > 0.0 {
        let mut rng = derived_rng(spec.seed, index, TAG_EXTRA_NOISE ^ ((factor as u64) << 8));
        for z in out.data_mut() {
            *z += complex_normal(&mut rng, extra);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coils::rss_combine;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            matrix: 32,
            n_coil: 4,
            n_avg: 2,
            seed: 11,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn noiseless_forward_model_is_consistent() {
        let spec = PhantomSpec {
            noise_sigma: 0.0,
            lesion_prob: 0.0,
            ..small_spec()
        };
        for index in 0..3 {
            let s = make_sample(&spec, index).unwrap();
            assert_eq!(s.label, 0);
            let rss = rss_combine(&s.kspace.sum_averages().ifft2_centered().unwrap()).unwrap();
            for (a, b) in rss.data().iter().zip(s.ground_truth_image.data()) {
                if *b > 0.0 {
                    assert!((a - b).abs() / b < 1e-4);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = make_sample(&spec, 5).unwrap();
        let b = make_sample(&spec, 5).unwrap();
        assert_eq!(a.kspace, b.kspace);
        assert_eq!(a.label, b.label);
        let c = make_sample(&spec, 6).unwrap();
        assert_ne!(a.kspace, c.kspace);
    }

    #[test]
    fn maps_are_normalized() {
        let maps = coil_maps(32, 8);
        for p in 0..32 * 32 {
            let s: f64 = (0..8).map(|c| maps.plane(0, c)[p].norm_sqr()).sum();
            assert!((0.9..=1.1).contains(&s));
        }
    }

    #[test]
    fn lesion_only_when_labelled() {
        let spec = PhantomSpec {
            lesion_prob: 0.5,
            ..small_spec()
        };
        for index in 0..20 {
            let s = make_sample(&spec, index).unwrap();
            assert_eq!(s.label == 1, s.lesion.is_some());
            assert_eq!(s.label, label_for(&spec, index));
        }
    }

    #[test]
    fn label_ignores_other_randomness() {
        let spec = small_spec();
        let other = PhantomSpec {
            noise_sigma: 0.3,
            phase_amplitude: 0.1,
            lesion_contrast_range: (0.1, 0.2),
            ..spec.clone()
        };
        for index in 0..200 {
            assert_eq!(label_for(&spec, index), label_for(&other, index));
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let plan = make_dataset(&small_spec(), 1000, (0.7, 0.15, 0.15)).unwrap();
        assert_eq!(plan.count(Split::Train), 700);
        assert_eq!(plan.count(Split::Val), 150);
        assert_eq!(plan.count(Split::Test), 150);
        let mut seen = std::collections::HashSet::new();
        for e in &plan.entries {
            assert!(seen.insert(e.index));
        }
        assert!(make_dataset(&small_spec(), 19, (0.7, 0.15, 0.15)).is_err());
        assert!(make_dataset(&small_spec(), 100, (0.7, 0.2, 0.2)).is_err());
    }

    #[test]
    fn positive_rate_binomial_bound() {
        let plan = make_dataset(&small_spec(), 3600, (0.7, 0.15, 0.15)).unwrap();
        let pos = plan.entries.iter().filter(|e| e.label == 1).count();
        // mean 200, 3 sigma = 3 * sqrt(3600 * p * (1 - p)) ~ 41
        assert!((160..=240).contains(&pos), "positives {pos}");
    }

    #[test]
    fn snr_scaling() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.5;
        assert_eq!(snr_scaled_noise(&spec, 4).unwrap(), 0.5);
        spec.snr_scaling = true;
        assert_eq!(snr_scaled_noise(&spec, 1).unwrap(), 0.5);
        assert_eq!(snr_scaled_noise(&spec, 4).unwrap(), 1.0);
        assert_eq!(snr_scaled_noise(&spec, 16).unwrap(), 2.0);
    }

    #[test]
    fn validation_lists_problems() {
        let spec = PhantomSpec {
            matrix: 16,
            lesion_prob: 2.0,
            ..PhantomSpec::default()
        };
        match spec.validate() {
            Err(Error::Param(msg)) => {
                assert!(msg.contains("matrix"));
                assert!(msg.contains("lesion_prob"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

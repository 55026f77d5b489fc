//! Experiments on phantom data: GRAPPA fidelity, pipeline timing, and the
//! classification trend over undersampling factors.

use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coils::rss_combine;
use crate::ctensor::ComplexTensor;
use crate::error::{Error, Result};
use crate::grappa::GrappaConfig;
use crate::metrics::{auprc, auroc};
use crate::model::{score_stacks, train, Classifier, SampleSource, TrainConfig};
use crate::phantom::{coil_maps, make_dataset, make_sample_with_maps, PhantomSpec, Split};
use crate::pipeline::{
    grappa_then_undersample, hflip_augment, proposed_pipeline, stack_from_parts, standard_pipeline,
    standard_stack_image, ChannelSet, ChannelStack, PipelineKind, PipelineStats, StackMeta,
};
use crate::sampling::{draw_factor, make_mask};

/// `||a - b|| / ||b||`.
pub fn nrmse(a: &[f64], reference: &[f64]) -> Result<f64> {
    if a.len() != reference.len() {
        return Err(Error::Shape("nrmse inputs differ in length".into()));
    }
    let num: f64 = a.iter().zip(reference).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = reference.iter().map(|y| y * y).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("nrmse against an all-zero reference".into()));
    }
    Ok((num / den).sqrt())
}

/// Mask factor for a size-`height` grid; factors beyond the height keep one line.
fn clamp_factor(factor: usize, height: usize) -> usize {
    factor.clamp(1, height)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub factor: usize,
    pub nrmse: f64,
    pub lstsq_solves: usize,
}

/// GRAPPA + RSS magnitude at each factor against the fully sampled RSS
/// magnitude of the same phantom sample.
pub fn grappa_fidelity(
    spec: &PhantomSpec,
    index: u64,
    factors: &[usize],
    acs_lines: usize,
    cfg: &GrappaConfig,
) -> Result<Vec<FidelityRow>> {
    let smaps = coil_maps(spec.matrix, spec.n_coil);
    let sample = make_sample_with_maps(spec, index, &smaps)?;
    let full = rss_combine(&sample.kspace.sum_averages().ifft2_centered()?)?;
    factors
        .iter()
        .map(|&r| {
            let mask = make_mask(spec.matrix, r, acs_lines)?;
            let out = standard_pipeline(&sample.kspace, &mask, cfg, None)?;
            Ok(FidelityRow {
                factor: r,
                nrmse: nrmse(out.magnitude.data(), full.data())?,
                lstsq_solves: out.stats.lstsq_solves,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TimingRun {
    pub proposed: Vec<PipelineStats>,
    pub standard: Vec<PipelineStats>,
    /// Bitwise fingerprint of every output, for determinism checks.
    pub fingerprint: u64,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

impl TimingRun {
    pub fn median_proposed(&self) -> Duration {
        median(self.proposed.iter().map(|s| s.timings.total()).collect())
    }

    pub fn median_standard(&self) -> Duration {
        median(self.standard.iter().map(|s| s.timings.total()).collect())
    }

    /// Median per-stage times of one path, in the order of [`STAGES`].
    pub fn stage_medians(&self, kind: PipelineKind) -> Vec<(&'static str, Duration)> {
        let runs = match kind {
            PipelineKind::Pca => &self.proposed,
            PipelineKind::Grappa => &self.standard,
        };
        STAGES
            .iter()
            .map(|&(name, pick)| (name, median(runs.iter().map(pick).collect())))
            .collect()
    }
}

type StagePick = fn(&PipelineStats) -> Duration;

/// Bench stages; averaging is folded into the mask stage.
pub const STAGES: [(&str, StagePick); 6] = [
    ("mask", |s| s.timings.mask + s.timings.sum),
    ("pca", |s| s.timings.pca),
    ("grappa_calibrate", |s| s.timings.grappa_calibrate),
    ("grappa_reconstruct", |s| s.timings.grappa_reconstruct),
    ("fft", |s| s.timings.fft),
    ("combine", |s| s.timings.combine),
];

/// FNV-1a over the bit patterns of a sequence of floats.
pub fn fingerprint(values: impl IntoIterator<Item = f64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Runs both pipelines on `n_slices` phantom samples, one after the other on
/// identical inputs, and records per-stage wall-clock.
pub fn pipeline_timing(
    spec: &PhantomSpec,
    n_slices: usize,
    factor: usize,
    acs_lines: usize,
    cfg: &GrappaConfig,
) -> Result<TimingRun> {
    let smaps = coil_maps(spec.matrix, spec.n_coil);
    let mask = make_mask(spec.matrix, factor, acs_lines)?;
    let mut proposed = Vec::with_capacity(n_slices);
    let mut standard = Vec::with_capacity(n_slices);
    let mut values = Vec::new();
    for i in 0..n_slices {
        let sample = make_sample_with_maps(spec, i as u64, &smaps)?;
        let p = proposed_pipeline(&sample.kspace, &mask)?;
        let s = standard_pipeline(&sample.kspace, &mask, cfg, Some(&smaps))?;
        values.extend(p.kspace.data().iter().flat_map(|z| [z.re, z.im]));
        values.extend(s.magnitude.data().iter().copied());
        values.push(s.stats.lstsq_solves as f64);
        proposed.push(p.stats);
        standard.push(s.stats);
    }
    Ok(TimingRun {
        proposed,
        standard,
        fingerprint: fingerprint(values),
    })
}

/// One-coil image and k-space of a sample at each prepared factor.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: u64,
    pub label: u8,
    pub kind: PipelineKind,
    pub factors: Vec<usize>,
    kspace: Vec<ComplexTensor>,
    /// Only kept when the image does not follow from `kspace` (GRAPPA path).
    image: Vec<Option<ComplexTensor>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub acs_lines: usize,
    /// Undersampling already present in the acquired data, used by the
    /// GRAPPA path before any digital undersampling.
    pub native_factor: usize,
    pub grappa: GrappaConfig,
    /// Sensitivity-map coil combination on the GRAPPA path (RSS otherwise).
    pub use_sensitivity_maps: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            acs_lines: 24,
            native_factor: 2,
            grappa: GrappaConfig::default(),
            use_sensitivity_maps: true,
        }
    }
}

impl PreparedSample {
    /// Runs the `kind` pipeline on `raw` for each factor.
    pub fn prepare(
        raw: &ComplexTensor,
        id: u64,
        label: u8,
        kind: PipelineKind,
        factors: &[usize],
        cfg: &PrepConfig,
        smaps: Option<&ComplexTensor>,
    ) -> Result<Self> {
        let h = raw.height();
        let mut kspace = Vec::with_capacity(factors.len());
        let mut image = Vec::with_capacity(factors.len());
        match kind {
            PipelineKind::Pca => {
                for &r in factors {
                    let mask = make_mask(h, clamp_factor(r, h), cfg.acs_lines.min(h))?;
                    kspace.push(proposed_pipeline(raw, &mask)?.kspace);
                    image.push(None);
                }
            }
            PipelineKind::Grappa => {
                let native = make_mask(h, cfg.native_factor, cfg.acs_lines.min(h))?;
                let maps = if cfg.use_sensitivity_maps { smaps } else { None };
                for &r in factors {
                    let eval_factor = if r <= cfg.native_factor { 1 } else { clamp_factor(r, h) };
                    let eval = make_mask(h, eval_factor, cfg.acs_lines.min(h))?;
                    let out = grappa_then_undersample(raw, &native, &eval, &cfg.grappa, maps)?;
                    image.push(Some(standard_stack_image(&out)?));
                    kspace.push(out.kspace);
                }
            }
        }
        Ok(Self {
            id,
            label,
            kind,
            factors: factors.to_vec(),
            kspace,
            image,
        })
    }

    fn slot(&self, factor: usize) -> Result<usize> {
        self.factors
            .iter()
            .position(|&f| f == factor)
            .ok_or_else(|| Error::Param(format!("sample {} was not prepared at factor {factor}", self.id)))
    }

    pub fn kspace(&self, factor: usize) -> Result<&ComplexTensor> {
        Ok(&self.kspace[self.slot(factor)?])
    }

    pub fn stack(&self, set: ChannelSet, factor: usize) -> Result<ChannelStack> {
        let i = self.slot(factor)?;
        let k = &self.kspace[i];
        let image = match &self.image[i] {
            Some(img) => img.clone(),
            None => k.ifft2_centered()?,
        };
        let meta = StackMeta {
            factor,
            pipeline: self.kind,
            sample_id: self.id,
        };
        stack_from_parts(&image, k, set, self.label, meta)
    }
}

/// Serves prepared samples with a random factor per draw and random flips.
pub struct AugmentedSource<'a> {
    pub samples: &'a [PreparedSample],
    pub set: ChannelSet,
    pub factors: Vec<usize>,
    pub flip_p: f64,
}

impl SampleSource for AugmentedSource<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn stack(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<ChannelStack> {
        let r = draw_factor(&self.factors, rng);
        let stack = self.samples[index].stack(self.set, r)?;
        hflip_augment(&stack, rng, self.flip_p)
    }
}

pub fn stacks_at(samples: &[PreparedSample], set: ChannelSet, factor: usize) -> Result<Vec<ChannelStack>> {
    samples.par_iter().map(|s| s.stack(set, factor)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrendConfig {
    pub phantom: PhantomSpec,
    pub n_samples: usize,
    pub fractions: (f64, f64, f64),
    pub pipeline: PipelineKind,
    pub prep: PrepConfig,
    /// Factors drawn by the undersampling augmentation.
    pub train_factors: Vec<usize>,
    pub eval_factors: Vec<usize>,
    pub channel_sets: Vec<ChannelSet>,
    pub seeds: Vec<u64>,
    pub flip_p: f64,
    pub train: TrainConfig,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec {
                matrix: 32,
                n_coil: 8,
                n_avg: 2,
                noise_sigma: 0.01,
                lesion_radius_range: (0.18, 0.28),
                ..PhantomSpec::default()
            },
            n_samples: 3430,
            fractions: (0.7, 0.15, 0.15),
            pipeline: PipelineKind::Pca,
            prep: PrepConfig {
                acs_lines: 4,
                ..PrepConfig::default()
            },
            train_factors: vec![1, 2, 4, 8],
            eval_factors: vec![1, 2, 16],
            channel_sets: vec![ChannelSet::Mag, ChannelSet::MagK],
            seeds: vec![0, 1, 2, 3, 4],
            flip_p: 0.5,
            train: TrainConfig {
                lr0: 1e-2,
                max_epochs: 15,
                patience: 10,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub seed: u64,
    pub channels: ChannelSet,
    pub factor: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub n: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendResult {
    pub rows: Vec<TrendRow>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub test_prevalence: f64,
}

impl TrendResult {
    pub fn mean_auroc(&self, set: ChannelSet, factor: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.channels == set && r.factor == factor)
            .map(|r| r.auroc)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Prepares every sample of a phantom dataset split.
pub fn prepare_split(
    spec: &PhantomSpec,
    indices: &[u64],
    kind: PipelineKind,
    factors: &[usize],
    prep: &PrepConfig,
) -> Result<Vec<PreparedSample>> {
    let smaps = coil_maps(spec.matrix, spec.n_coil);
    indices
        .par_iter()
        .map(|&i| {
            let s = make_sample_with_maps(spec, i, &smaps)?;
            PreparedSample::prepare(&s.kspace, i, s.label, kind, factors, prep, Some(&smaps))
        })
        .collect()
}

fn sorted_unique(a: &[usize]) -> Vec<usize> {
    let mut v = a.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Trains one classifier per (seed, channel set) with undersampling and flip
/// augmentation, and scores the test split at each evaluation factor.
pub fn run_trend(cfg: &TrendConfig) -> Result<TrendResult> {
    let plan = make_dataset(&cfg.phantom, cfg.n_samples, cfg.fractions)?;
    let ids = |s: Split| plan.split(s).map(|e| e.index).collect::<Vec<_>>();
    let train_set = prepare_split(&cfg.phantom, &ids(Split::Train), cfg.pipeline, &cfg.train_factors, &cfg.prep)?;
    let val_set = prepare_split(&cfg.phantom, &ids(Split::Val), cfg.pipeline, &cfg.train_factors, &cfg.prep)?;
    let test_factors = sorted_unique(&cfg.eval_factors);
    let test_set = prepare_split(&cfg.phantom, &ids(Split::Test), cfg.pipeline, &test_factors, &cfg.prep)?;
    let labels: Vec<u8> = test_set.iter().map(|s| s.label).collect();

    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &set in &cfg.channel_sets {
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let train_src = AugmentedSource {
                samples: &train_set,
                set,
                factors: cfg.train_factors.clone(),
                flip_p: cfg.flip_p,
            };
            let val_src = AugmentedSource {
                samples: &val_set,
                set,
                factors: cfg.train_factors.clone(),
                flip_p: 0.0,
            };
            let out = train(Classifier::new(set, seed), &train_src, &val_src, &train_cfg)?;
            for &r in &cfg.eval_factors {
                let stacks = stacks_at(&test_set, set, r)?;
                let scores = score_stacks(&out.model, &stacks, train_cfg.normalize)?;
                rows.push(TrendRow {
                    seed,
                    channels: set,
                    factor: r,
                    auroc: auroc(&scores, &labels)?,
                    auprc: auprc(&scores, &labels)?,
                    n: scores.len(),
                    best_epoch: out.best_epoch,
                    epochs_run: out.history.len(),
                });
            }
        }
    }
    Ok(TrendResult {
        rows,
        n_train: train_set.len(),
        n_val: val_set.len(),
        n_test: test_set.len(),
        test_prevalence: labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nrmse_basics() {
        assert_eq!(nrmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((nrmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(nrmse(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn prepared_pca_matches_pipeline() {
        let spec = PhantomSpec {
            matrix: 32,
            n_coil: 4,
            n_avg: 2,
            ..PhantomSpec::default()
        };
        let prep = PrepConfig {
            acs_lines: 4,
            ..PrepConfig::default()
        };
        let s = prepare_split(&spec, &[3], PipelineKind::Pca, &[1, 4, 64], &prep).unwrap();
        let raw = crate::phantom::make_sample(&spec, 3).unwrap().kspace;
        let direct = proposed_pipeline(&raw, &make_mask(32, 4, 4).unwrap()).unwrap().kspace;
        assert_eq!(s[0].kspace(4).unwrap(), &direct);
        // Factors beyond the height keep one line plus ACS.
        assert!(s[0].stack(ChannelSet::MagK, 64).unwrap().is_finite());
        assert!(s[0].stack(ChannelSet::Mag, 8).is_err());
    }

    #[test]
    fn prepared_grappa_stack() {
        let spec = PhantomSpec {
            matrix: 32,
            n_coil: 4,
            n_avg: 1,
            ..PhantomSpec::default()
        };
        let s = prepare_split(&spec, &[0], PipelineKind::Grappa, &[1, 4], &PrepConfig::default()).unwrap();
        let st = s[0].stack(ChannelSet::MagPhase, 4).unwrap();
        assert_eq!(st.meta().pipeline, PipelineKind::Grappa);
        assert!(st.is_finite());
    }

    #[test]
    fn fingerprint_sensitive() {
        assert_ne!(fingerprint([1.0, 2.0]), fingerprint([2.0, 1.0]));
        assert_eq!(fingerprint([0.5]), fingerprint([0.5]));
    }
}

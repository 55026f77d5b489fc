//! The two preprocessing paths and the channel stacking that feeds the classifier.
//!
//! * proposed: mask, sum averages, PCA to one virtual coil. No reconstruction.
//! * standard: mask, sum averages, GRAPPA, image-domain coil combination, plus
//!   PCA of the GRAPPA-filled k-space so phase and k-space stay available.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coils::{pca_compress, rss_combine, sensitivity_combine};
use crate::ctensor::{wrapped_arg, ComplexTensor, Domain, RealPlane, C64};
use crate::error::{Error, Result};
use crate::grappa::{acs_block, calibrate, reconstruct, GrappaConfig};
use crate::sampling::{apply_mask, CartesianMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelTag {
    MagImage,
    PhaseImage,
    RealK,
    ImagK,
}

impl ChannelTag {
    pub fn is_image(self) -> bool {
        matches!(self, ChannelTag::MagImage | ChannelTag::PhaseImage)
    }
}

/// The three input configurations compared in the evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelSet {
    #[serde(rename = "mag")]
    Mag,
    #[serde(rename = "mag+phase")]
    MagPhase,
    #[serde(rename = "mag+k")]
    MagK,
}

impl ChannelSet {
    pub const ALL: [ChannelSet; 3] = [ChannelSet::Mag, ChannelSet::MagPhase, ChannelSet::MagK];

    pub fn tags(self) -> &'static [ChannelTag] {
        match self {
            ChannelSet::Mag => &[ChannelTag::MagImage],
            ChannelSet::MagPhase => &[ChannelTag::MagImage, ChannelTag::PhaseImage],
            ChannelSet::MagK => &[ChannelTag::MagImage, ChannelTag::RealK, ChannelTag::ImagK],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelSet::Mag => "mag",
            ChannelSet::MagPhase => "mag+phase",
            ChannelSet::MagK => "mag+k",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn image_channels(self) -> usize {
        self.tags().iter().filter(|t| t.is_image()).count()
    }

    pub fn kspace_channels(self) -> usize {
        self.tags().len() - self.image_channels()
    }

    fn from_tags(tags: &[ChannelTag]) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.tags() == tags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineKind {
    Pca,
    Grappa,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Pca => "pca",
            PipelineKind::Grappa => "grappa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pca" => Some(PipelineKind::Pca),
            "grappa" => Some(PipelineKind::Grappa),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackMeta {
    pub factor: usize,
    pub pipeline: PipelineKind,
    pub sample_id: u64,
}

/// Real-valued model input: same-sized planes tagged by content, plus the label.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: Vec<(ChannelTag, RealPlane)>,
    label: u8,
    meta: StackMeta,
}

impl ChannelStack {
    pub fn new(channels: Vec<(ChannelTag, RealPlane)>, label: u8, meta: StackMeta) -> Result<Self> {
        let tags: Vec<ChannelTag> = channels.iter().map(|(t, _)| *t).collect();
        if ChannelSet::from_tags(&tags).is_none() {
            return Err(Error::Shape(format!(
                "channel tags {tags:?} are not one of the supported sets"
            )));
        }
        let dims = channels[0].1.dims();
        if channels.iter().any(|(_, p)| p.dims() != dims) {
            return Err(Error::Shape("channel planes differ in size".into()));
        }
        if label > 1 {
            return Err(Error::Param(format!("label must be 0 or 1, got {label}")));
        }
        Ok(Self {
            channels,
            label,
            meta,
        })
    }

    pub fn set(&self) -> ChannelSet {
        let tags: Vec<ChannelTag> = self.channels.iter().map(|(t, _)| *t).collect();
        ChannelSet::from_tags(&tags).expect("validated on construction")
    }

    pub fn channels(&self) -> &[(ChannelTag, RealPlane)] {
        &self.channels
    }

    pub fn planes(&self) -> impl Iterator<Item = &RealPlane> {
        self.channels.iter().map(|(_, p)| p)
    }

    pub fn channel(&self, tag: ChannelTag) -> Option<&RealPlane> {
        self.channels.iter().find(|(t, _)| *t == tag).map(|(_, p)| p)
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].1.dims()
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn meta(&self) -> StackMeta {
        self.meta
    }

    pub fn is_finite(&self) -> bool {
        self.planes().all(RealPlane::is_finite)
    }

    /// Keeps only the channels of `set`, which must be a subset of this stack.
    pub fn select(&self, set: ChannelSet) -> Result<ChannelStack> {
        let channels = set
            .tags()
            .iter()
            .map(|&tag| {
                self.channel(tag)
                    .cloned()
                    .map(|p| (tag, p))
                    .ok_or_else(|| Error::Shape(format!("stack has no {tag:?} channel")))
            })
            .collect::<Result<Vec<_>>>()?;
        ChannelStack::new(channels, self.label, self.meta)
    }
}

/// Wall-clock per stage plus the number of least-squares solves.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub mask: Duration,
    pub sum: Duration,
    pub pca: Duration,
    pub grappa_calibrate: Duration,
    pub grappa_reconstruct: Duration,
    pub fft: Duration,
    pub combine: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.mask
            + self.sum
            + self.pca
            + self.grappa_calibrate
            + self.grappa_reconstruct
            + self.fft
            + self.combine
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PipelineStats {
    pub lstsq_solves: usize,
    pub timings: StageTimings,
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *slot += t.elapsed();
    out
}

#[derive(Debug, Clone)]
pub struct ProposedOutput {
    /// One-coil complex k-space (first principal component).
    pub kspace: ComplexTensor,
    pub explained_variance_ratio: Vec<f64>,
    pub stats: PipelineStats,
}

/// Mask, sum averages, and compress to one virtual coil in k-space.
pub fn proposed_pipeline(raw: &ComplexTensor, mask: &CartesianMask) -> Result<ProposedOutput> {
    let mut stats = PipelineStats::default();
    let t = &mut stats.timings;
    let masked = timed(&mut t.mask, || apply_mask(raw, mask))?;
    let summed = timed(&mut t.sum, || masked.sum_averages());
    let pca = timed(&mut t.pca, || pca_compress(&summed, 1))?;
    Ok(ProposedOutput {
        kspace: pca.compressed,
        explained_variance_ratio: pca.explained_variance_ratio,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct StandardOutput {
    /// Coil-combined magnitude image.
    pub magnitude: RealPlane,
    /// Complex combined image when sensitivity maps were supplied.
    pub image: Option<ComplexTensor>,
    /// One-coil complex k-space: PCA of the GRAPPA-filled data.
    pub kspace: ComplexTensor,
    /// Multi-coil GRAPPA output, before any later digital undersampling.
    pub filled: ComplexTensor,
    pub stats: PipelineStats,
}

/// GRAPPA-fills single-average k-space sampled with `mask`.
pub fn grappa_fill(
    summed: &ComplexTensor,
    mask: &CartesianMask,
    cfg: &GrappaConfig,
    stats: &mut PipelineStats,
) -> Result<ComplexTensor> {
    if mask.factor() == 1 {
        return Ok(summed.clone());
    }
    let kernel = timed(&mut stats.timings.grappa_calibrate, || {
        acs_block(summed, mask).and_then(|acs| calibrate(&acs, mask.factor(), cfg))
    })?;
    stats.lstsq_solves += kernel.solve_count();
    timed(&mut stats.timings.grappa_reconstruct, || {
        reconstruct(summed, &kernel, mask)
    })
}

/// Combination and PCA of (already filled) multi-coil k-space.
fn finish_standard(
    filled: ComplexTensor,
    smaps: Option<&ComplexTensor>,
    mut stats: PipelineStats,
) -> Result<StandardOutput> {
    let t = &mut stats.timings;
    let img = timed(&mut t.fft, || filled.ifft2_centered())?;
    let (magnitude, image) = timed(&mut t.combine, || -> Result<_> {
        match smaps {
            Some(maps) => {
                let combined = sensitivity_combine(&img, maps)?;
                let mag = combined.split_image_channels(0)?.0;
                Ok((mag, Some(combined)))
            }
            None => Ok((rss_combine(&img)?, None)),
        }
    })?;
    let pca = timed(&mut t.pca, || pca_compress(&filled, 1))?;
    Ok(StandardOutput {
        magnitude,
        image,
        kspace: pca.compressed,
        filled,
        stats,
    })
}

/// Mask, sum averages, GRAPPA, inverse FFT, coil combination (sensitivity
/// maps when given, RSS otherwise), and PCA of the filled k-space.
pub fn standard_pipeline(
    raw: &ComplexTensor,
    mask: &CartesianMask,
    cfg: &GrappaConfig,
    smaps: Option<&ComplexTensor>,
) -> Result<StandardOutput> {
    let mut stats = PipelineStats::default();
    let masked = timed(&mut stats.timings.mask, || apply_mask(raw, mask))?;
    let summed = timed(&mut stats.timings.sum, || masked.sum_averages());
    let filled = grappa_fill(&summed, mask, cfg, &mut stats)?;
    finish_standard(filled, smaps, stats)
}

/// GRAPPA once at the native sampling, then digital undersampling of the
/// filled multi-coil k-space with `eval_mask`, then combination and PCA.
pub fn grappa_then_undersample(
    raw: &ComplexTensor,
    native_mask: &CartesianMask,
    eval_mask: &CartesianMask,
    cfg: &GrappaConfig,
    smaps: Option<&ComplexTensor>,
) -> Result<StandardOutput> {
    let mut stats = PipelineStats::default();
    let masked = timed(&mut stats.timings.mask, || apply_mask(raw, native_mask))?;
    let summed = timed(&mut stats.timings.sum, || masked.sum_averages());
    let filled = grappa_fill(&summed, native_mask, cfg, &mut stats)?;
    let digital = timed(&mut stats.timings.mask, || apply_mask(&filled, eval_mask))?;
    finish_standard(digital, smaps, stats)
}

fn require_single_plane(k: &ComplexTensor, domain: Domain) -> Result<()> {
    k.require(domain)?;
    if k.n_avg() != 1 || k.n_coil() != 1 {
        return Err(Error::Shape(format!(
            "expected single-coil single-average data, got {:?}",
            k.dims()
        )));
    }
    Ok(())
}

/// Splits one-coil complex k-space into the planes of `set`, in the fixed
/// order magnitude, phase, real(k), imag(k).
pub fn stack_channels(
    kspace: &ComplexTensor,
    set: ChannelSet,
    label: u8,
    meta: StackMeta,
) -> Result<ChannelStack> {
    require_single_plane(kspace, Domain::KSpace)?;
    let image = kspace.ifft2_centered()?;
    stack_from_parts(&image, kspace, set, label, meta)
}

/// As [`stack_channels`], with the image-domain planes taken from a separately
/// combined complex image.
pub fn stack_from_parts(
    image: &ComplexTensor,
    kspace: &ComplexTensor,
    set: ChannelSet,
    label: u8,
    meta: StackMeta,
) -> Result<ChannelStack> {
    require_single_plane(image, Domain::Image)?;
    require_single_plane(kspace, Domain::KSpace)?;
    let (mag, phase) = image.split_image_channels(0)?;
    let mut channels = vec![(ChannelTag::MagImage, mag)];
    match set {
        ChannelSet::Mag => {}
        ChannelSet::MagPhase => channels.push((ChannelTag::PhaseImage, phase)),
        ChannelSet::MagK => {
            let (re, im) = kspace.split_kspace_channels(0)?;
            channels.push((ChannelTag::RealK, re));
            channels.push((ChannelTag::ImagK, im));
        }
    }
    ChannelStack::new(channels, label, meta)
}

/// Complex image for a GRAPPA-path stack: the sensitivity-combined image when
/// available, otherwise the combined magnitude with the phase of the PCA coil.
pub fn standard_stack_image(out: &StandardOutput) -> Result<ComplexTensor> {
    if let Some(img) = &out.image {
        return Ok(img.clone());
    }
    let pca_img = out.kspace.ifft2_centered()?;
    let data = out
        .magnitude
        .data()
        .iter()
        .zip(pca_img.data())
        .map(|(&m, &z)| C64::from_polar(m, wrapped_arg(z)))
        .collect();
    ComplexTensor::from_plane(out.magnitude.height(), out.magnitude.width(), data, Domain::Image)
}

pub const NORMALIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMode {
    /// Statistics per channel over the whole batch.
    #[default]
    Batch,
    /// Statistics per channel of each sample on its own.
    PerSample,
}

fn standardize(planes: &mut [&mut RealPlane]) {
    let n: usize = planes.iter().map(|p| p.data().len()).sum();
    let sum: f64 = planes.iter().map(|p| p.data().iter().sum::<f64>()).sum();
    let mean = sum / n as f64;
    let var = planes
        .iter()
        .map(|p| p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let scale = 1.0 / var.sqrt().max(NORMALIZE_EPS);
    for p in planes.iter_mut() {
        for v in p.data_mut() {
            *v = (*v - mean) * scale;
        }
    }
}

/// Standardizes every channel to zero mean and unit variance.
pub fn normalize_batch(batch: &mut [ChannelStack], mode: NormalizeMode) -> Result<()> {
    let Some(first) = batch.first() else {
        return Err(Error::Param("cannot normalize an empty batch".into()));
    };
    let set = first.set();
    if batch.iter().any(|s| s.set() != set) {
        return Err(Error::Shape("batch mixes channel sets".into()));
    }
    match mode {
        NormalizeMode::Batch => {
            for c in 0..set.tags().len() {
                standardize(&mut batch.iter_mut().map(|s| &mut s.channels[c].1).collect::<Vec<_>>());
            }
        }
        NormalizeMode::PerSample => {
            for stack in batch.iter_mut() {
                for (_, plane) in stack.channels.iter_mut() {
                    standardize(&mut [plane]);
                }
            }
        }
    }
    Ok(())
}

/// Left-right mirror of the image content. k-space planes are recomputed from
/// the mirrored complex image, not mirrored themselves.
pub fn hflip(stack: &ChannelStack) -> Result<ChannelStack> {
    let channels = match stack.set() {
        ChannelSet::Mag | ChannelSet::MagPhase => stack
            .channels
            .iter()
            .map(|(t, p)| (*t, p.mirrored_horizontal()))
            .collect(),
        ChannelSet::MagK => {
            let re = &stack.channels[1].1;
            let im = &stack.channels[2].1;
            let k = ComplexTensor::from_real_imag(re, im, Domain::KSpace)?;
            let flipped = k.ifft2_centered()?.mirrored_horizontal().fft2_centered()?;
            let (re, im) = flipped.split_kspace_channels(0)?;
            vec![
                (ChannelTag::MagImage, stack.channels[0].1.mirrored_horizontal()),
                (ChannelTag::RealK, re),
                (ChannelTag::ImagK, im),
            ]
        }
    };
    ChannelStack::new(channels, stack.label, stack.meta)
}

/// Applies [`hflip`] with probability `p`.
pub fn hflip_augment<R: Rng>(stack: &ChannelStack, rng: &mut R, p: f64) -> Result<ChannelStack> {
    if rng.random::<f64>() < p {
        hflip(stack)
    } else {
        Ok(stack.clone())
    }
}

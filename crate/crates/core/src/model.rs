//! Compact convolutional classifier, weighted loss, Adam, cosine schedule and
//! a deterministic data-parallel training loop.
//!
//! Each branch is conv3x3(in->8), ReLU, 2x2 mean pool, conv3x3(8->16), ReLU,
//! global mean, affine(16->2). When a stack carries k-space channels they go
//! to a second branch and the two logit vectors are averaged.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctensor::RealPlane;
use crate::error::{Error, Result};
use crate::pipeline::{normalize_batch, ChannelSet, ChannelStack, NormalizeMode};
use crate::seeding::derived_rng;

pub const C1: usize = 8;
pub const C2: usize = 16;
pub const N_CLASSES: usize = 2;
pub const DEFAULT_CLASS_WEIGHTS: [f64; 2] = [1.0, 17.0];

const INIT_TAG: u64 = 0x1417;
const SHUFFLE_TAG: u64 = 0x5A0F;
const AUGMENT_TAG: u64 = 0xA06E;
const VAL_TAG: u64 = 0x7A1D;

struct Layout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
    w3: std::ops::Range<usize>,
    b3: std::ops::Range<usize>,
}

impl Layout {
    fn new(in_ch: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Layout {
            w1: take(C1 * in_ch * 9),
            b1: take(C1),
            w2: take(C2 * C1 * 9),
            b2: take(C2),
            w3: take(N_CLASSES * C2),
            b3: take(N_CLASSES),
        }
    }

    fn len(&self) -> usize {
        self.b3.end
    }
}

/// Row range of a 3x3 'same' tap: output rows `lo..hi` read input row `y + d`.
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize) as usize;
    (lo, hi)
}

fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for (o, dst) in out.chunks_exact_mut(hw).enumerate() {
        dst.fill(bias[o]);
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(w, dx);
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    let sx0 = (x0 as isize + dx) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients, and the input gradient when asked.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let hw = h * w;
    for (o, g) in dout.chunks_exact(hw).enumerate() {
        dbias[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(w, dx);
                    let widx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let sx0 = (x0 as isize + dx) as usize;
                    let len = x1 - x0;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx0 + len];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(din) = dinput.as_deref_mut() {
                            let drow = &mut din[i * hw + sy * w + sx0..i * hw + sy * w + sx0 + len];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// 2x2 mean pooling; an odd trailing row or column is dropped.
fn mean_pool(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                let a = src[2 * y * w + 2 * x] + src[2 * y * w + 2 * x + 1];
                let b = src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1];
                out[(ch * h2 + y) * w2 + x] = 0.25 * (a + b);
            }
        }
    }
    out
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    h: usize,
    w: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    a2: Vec<f64>,
    g: [f64; C2],
}

impl ForwardCache {
    /// Which ReLU units are active, in a fixed order. Finite-difference
    /// checks are only meaningful while this pattern does not change.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.a1.iter().chain(&self.a2).map(|&a| a > 0.0).collect()
    }
}

/// One convolutional branch with its parameters in a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    in_channels: usize,
    params: Vec<f64>,
}

impl ConvNet {
    pub fn param_count(in_channels: usize) -> usize {
        Layout::new(in_channels).len()
    }

    pub fn zeros(in_channels: usize) -> Self {
        Self {
            in_channels,
            params: vec![0.0; Self::param_count(in_channels)],
        }
    }

    /// He-scaled normal weights, zero biases.
    pub fn init<R: Rng>(in_channels: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(in_channels);
        let l = Layout::new(in_channels);
        for (range, fan_in) in [(l.w1, in_channels * 9), (l.w2, C1 * 9), (l.w3, C2)] {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut net.params[range] {
                *p = dist.sample(rng);
            }
        }
        net
    }

    pub fn from_params(in_channels: usize, params: Vec<f64>) -> Result<Self> {
        if in_channels == 0 || params.len() != Self::param_count(in_channels) {
            return Err(Error::Shape(format!(
                "{} parameters do not fit a branch with {in_channels} input channels",
                params.len()
            )));
        }
        Ok(Self { in_channels, params })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter blocks in storage order.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let l = Layout::new(self.in_channels);
        vec![
            ("conv1.weight", &self.params[l.w1]),
            ("conv1.bias", &self.params[l.b1]),
            ("conv2.weight", &self.params[l.w2]),
            ("conv2.bias", &self.params[l.b2]),
            ("fc.weight", &self.params[l.w3]),
            ("fc.bias", &self.params[l.b3]),
        ]
    }

    fn check_input(&self, planes: &[&RealPlane]) -> Result<(usize, usize)> {
        if planes.len() != self.in_channels {
            return Err(Error::Shape(format!(
                "branch expects {} channels, got {}",
                self.in_channels,
                planes.len()
            )));
        }
        let dims = planes[0].dims();
        if dims.0 < 2 || dims.1 < 2 || planes.iter().any(|p| p.dims() != dims) {
            return Err(Error::Shape(format!("unusable input planes of size {dims:?}")));
        }
        Ok(dims)
    }

    pub fn forward(&self, planes: &[&RealPlane]) -> Result<[f64; 2]> {
        Ok(self.forward_cached(planes)?.0)
    }

    pub fn forward_cached(&self, planes: &[&RealPlane]) -> Result<([f64; 2], ForwardCache)> {
        let (h, w) = self.check_input(planes)?;
        let l = Layout::new(self.in_channels);
        let p = &self.params;
        let input: Vec<f64> = planes.iter().flat_map(|pl| pl.data().iter().copied()).collect();
        let mut a1 = conv3x3(&input, self.in_channels, h, w, &p[l.w1], &p[l.b1]);
        relu_inplace(&mut a1);
        let p1 = mean_pool(&a1, C1, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let mut a2 = conv3x3(&p1, C1, h2, w2, &p[l.w2], &p[l.b2]);
        relu_inplace(&mut a2);
        let mut g = [0.0; C2];
        for (gc, plane) in g.iter_mut().zip(a2.chunks_exact(h2 * w2)) {
            *gc = plane.iter().sum::<f64>() / (h2 * w2) as f64;
        }
        let (w3, b3) = (&p[l.w3], &p[l.b3]);
        let mut logits = [0.0; 2];
        for (k, z) in logits.iter_mut().enumerate() {
            *z = b3[k] + (0..C2).map(|j| w3[k * C2 + j] * g[j]).sum::<f64>();
        }
        Ok((
            logits,
            ForwardCache {
                h,
                w,
                input,
                a1,
                p1,
                a2,
                g,
            },
        ))
    }

    /// Adds the parameter gradient for upstream logit gradient `dlogits` to `grad`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: [f64; 2], grad: &mut [f64]) {
        let l = Layout::new(self.in_channels);
        let p = &self.params;
        let (h, w) = (cache.h, cache.w);
        let (h2, w2) = (h / 2, w / 2);
        let hw2 = h2 * w2;

        let mut dg = [0.0; C2];
        for k in 0..N_CLASSES {
            grad[l.b3.start + k] += dlogits[k];
            for j in 0..C2 {
                grad[l.w3.start + k * C2 + j] += dlogits[k] * cache.g[j];
                dg[j] += dlogits[k] * p[l.w3.start + k * C2 + j];
            }
        }

        let mut dz2 = vec![0.0; C2 * hw2];
        for j in 0..C2 {
            let scale = dg[j] / hw2 as f64;
            for (d, &a) in dz2[j * hw2..(j + 1) * hw2].iter_mut().zip(&cache.a2[j * hw2..(j + 1) * hw2]) {
                *d = if a > 0.0 { scale } else { 0.0 };
            }
        }

        let mut dp1 = vec![0.0; C1 * hw2];
        {
            let (gw, rest) = grad[l.w2.start..l.b2.end].split_at_mut(l.w2.len());
            conv3x3_backward(&cache.p1, C1, h2, w2, &p[l.w2], &dz2, gw, rest, Some(&mut dp1));
        }

        let hw = h * w;
        let mut dz1 = vec![0.0; C1 * hw];
        for c in 0..C1 {
            for y in 0..2 * h2 {
                for x in 0..2 * w2 {
                    let i = c * hw + y * w + x;
                    if cache.a1[i] > 0.0 {
                        dz1[i] = 0.25 * dp1[(c * h2 + y / 2) * w2 + x / 2];
                    }
                }
            }
        }
        let (gw, rest) = grad[l.w1.start..l.b1.end].split_at_mut(l.w1.len());
        conv3x3_backward(&cache.input, self.in_channels, h, w, &p[l.w1], &dz1, gw, rest, None);
    }
}

/// Numerically stable softmax probability of class 1.
pub fn prob_positive(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

/// `-w[label] * log softmax(logits)[label]`, with its gradient in the logits.
///
/// For two classes this is `w * softplus(z_other - z_label)`, evaluated
/// without cancellation.
pub fn weighted_ce(logits: [f64; 2], label: u8, weights: [f64; 2]) -> (f64, [f64; 2]) {
    let y = label as usize;
    let wy = weights[y];
    let d = logits[1 - y] - logits[y];
    let softplus = d.max(0.0) + (-d.abs()).exp().ln_1p();
    // Probability of the other class.
    let q = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    let mut grad = [0.0; 2];
    grad[1 - y] = wy * q;
    grad[y] = -wy * q;
    (wy * softplus, grad)
}

pub fn weighted_ce_loss(logits: [f64; 2], label: u8, weights: [f64; 2]) -> f64 {
    weighted_ce(logits, label, weights).0
}

/// Single-branch classifier for image-only channel sets, two branches with
/// averaged logits when k-space channels are present.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    set: ChannelSet,
    image: ConvNet,
    kspace: Option<ConvNet>,
}

impl Classifier {
    pub fn new(set: ChannelSet, seed: u64) -> Self {
        let image = ConvNet::init(set.image_channels(), &mut derived_rng(seed, 0, INIT_TAG));
        let kspace = (set.kspace_channels() > 0)
            .then(|| ConvNet::init(set.kspace_channels(), &mut derived_rng(seed, 1, INIT_TAG)));
        Self { set, image, kspace }
    }

    pub fn from_branches(set: ChannelSet, image: ConvNet, kspace: Option<ConvNet>) -> Result<Self> {
        let ok = image.in_channels() == set.image_channels()
            && kspace.as_ref().map(ConvNet::in_channels).unwrap_or(0) == set.kspace_channels();
        if !ok {
            return Err(Error::Shape(format!(
                "branch input channels do not match channel set {}",
                set.name()
            )));
        }
        Ok(Self { set, image, kspace })
    }

    pub fn set(&self) -> ChannelSet {
        self.set
    }

    pub fn image_branch(&self) -> &ConvNet {
        &self.image
    }

    pub fn kspace_branch(&self) -> Option<&ConvNet> {
        self.kspace.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.image.params.len() + self.kspace.as_ref().map_or(0, |k| k.params.len())
    }

    /// All parameters, image branch first.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.image.params.clone();
        if let Some(k) = &self.kspace {
            v.extend_from_slice(&k.params);
        }
        v
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let n = self.image.params.len();
        self.image.params.copy_from_slice(&flat[..n]);
        if let Some(k) = &mut self.kspace {
            k.params.copy_from_slice(&flat[n..]);
        }
        Ok(())
    }

    fn split<'a>(&self, stack: &'a ChannelStack) -> Result<(Vec<&'a RealPlane>, Vec<&'a RealPlane>)> {
        if stack.set() != self.set {
            return Err(Error::Shape(format!(
                "classifier expects {} channels, stack has {}",
                self.set.name(),
                stack.set().name()
            )));
        }
        let (img, k): (Vec<_>, Vec<_>) = stack.channels().iter().partition(|(t, _)| t.is_image());
        Ok((
            img.into_iter().map(|(_, p)| p).collect(),
            k.into_iter().map(|(_, p)| p).collect(),
        ))
    }

    pub fn forward(&self, stack: &ChannelStack) -> Result<[f64; 2]> {
        let (img, k) = self.split(stack)?;
        let a = self.image.forward(&img)?;
        match &self.kspace {
            None => Ok(a),
            Some(net) => {
                let b = net.forward(&k)?;
                Ok([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0])
            }
        }
    }

    /// ReLU activation pattern of every branch for `stack`.
    pub fn relu_pattern(&self, stack: &ChannelStack) -> Result<Vec<bool>> {
        let (img, k) = self.split(stack)?;
        let mut pattern = self.image.forward_cached(&img)?.1.relu_pattern();
        if let Some(net) = &self.kspace {
            pattern.extend(net.forward_cached(&k)?.1.relu_pattern());
        }
        Ok(pattern)
    }

    pub fn predict_proba(&self, stack: &ChannelStack) -> Result<f64> {
        Ok(prob_positive(self.forward(stack)?))
    }

    /// Weighted cross-entropy of one stack and its gradient in [`Self::flat_params`] order.
    pub fn loss_and_grad(&self, stack: &ChannelStack, weights: [f64; 2]) -> Result<(f64, Vec<f64>)> {
        let (img, k) = self.split(stack)?;
        let mut grad = vec![0.0; self.param_count()];
        let n_img = self.image.params.len();
        let (la, ca) = self.image.forward_cached(&img)?;
        match &self.kspace {
            None => {
                let (loss, dl) = weighted_ce(la, stack.label(), weights);
                self.image.backward(&ca, dl, &mut grad);
                Ok((loss, grad))
            }
            Some(net) => {
                let (lb, cb) = net.forward_cached(&k)?;
                let mean = [(la[0] + lb[0]) / 2.0, (la[1] + lb[1]) / 2.0];
                let (loss, dl) = weighted_ce(mean, stack.label(), weights);
                let half = [dl[0] / 2.0, dl[1] / 2.0];
                let (gi, gk) = grad.split_at_mut(n_img);
                self.image.backward(&ca, half, gi);
                net.backward(&cb, half, gk);
                Ok((loss, grad))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update at step `t >= 1` with learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], t: u64, lr: f64) -> Result<()> {
        if t == 0 {
            return Err(Error::Param("Adam steps are counted from 1".into()));
        }
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape("Adam state and parameter sizes differ".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powf(t as f64);
        let c2 = 1.0 - beta2.powf(t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }
}

/// `lr0 * (1 + cos(pi t / T)) / 2` for `0 <= t <= T`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if t > total {
        return Err(Error::Param(format!("step {t} beyond schedule length {total}")));
    }
    if total == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub adam: AdamConfig,
    pub patience: usize,
    pub class_weights: [f64; 2],
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub normalize: NormalizeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            adam: AdamConfig::default(),
            patience: 10,
            class_weights: DEFAULT_CLASS_WEIGHTS,
            batch_size: 32,
            max_epochs: 50,
            seed: 0,
            normalize: NormalizeMode::Batch,
        }
    }
}

impl TrainConfig {
    /// Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr0 > 0.0) {
            bad.push("lr0 must be positive");
        }
        if !(self.adam.beta1 > 0.0 && self.adam.beta1 < 1.0) || !(self.adam.beta2 > 0.0 && self.adam.beta2 < 1.0) {
            bad.push("adam betas must lie in (0, 1)");
        }
        if !(self.adam.eps > 0.0) {
            bad.push("adam eps must be positive");
        }
        if self.patience == 0 {
            bad.push("patience must be at least 1");
        }
        if !self.class_weights.iter().all(|w| *w > 0.0) {
            bad.push("class weights must be positive");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            bad.push("max_epochs must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(bad.join("; ")))
        }
    }
}

/// Produces model inputs. `rng` drives any augmentation and is derived from
/// (seed, epoch, sample), so draws do not depend on scheduling.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn stack(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<ChannelStack>;
}

/// A fixed list of stacks, served as-is.
impl SampleSource for [ChannelStack] {
    fn len(&self) -> usize {
        <[ChannelStack]>::len(self)
    }

    fn stack(&self, index: usize, _rng: &mut ChaCha8Rng) -> Result<ChannelStack> {
        Ok(self[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Classifier,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Pairwise sum with a fixed tree shape, so the result does not depend on
/// how the terms were computed in parallel.
pub fn tree_sum(mut terms: Vec<Vec<f64>>) -> Vec<f64> {
    while terms.len() > 1 {
        let mut next = Vec::with_capacity(terms.len().div_ceil(2));
        let mut it = terms.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        terms = next;
    }
    terms.pop().unwrap_or_default()
}

fn normalized(mut stacks: Vec<ChannelStack>, mode: NormalizeMode) -> Result<Vec<ChannelStack>> {
    normalize_batch(&mut stacks, mode)?;
    Ok(stacks)
}

/// Mean weighted loss over `stacks`, normalized together.
pub fn evaluate_loss(model: &Classifier, stacks: &[ChannelStack], cfg: &TrainConfig) -> Result<f64> {
    let stacks = normalized(stacks.to_vec(), cfg.normalize)?;
    let losses = stacks
        .par_iter()
        .map(|s| Ok(vec![weighted_ce_loss(model.forward(s)?, s.label(), cfg.class_weights)]))
        .collect::<Result<Vec<_>>>()?;
    Ok(tree_sum(losses)[0] / stacks.len() as f64)
}

/// Class-1 probabilities for `stacks`, normalized together as one batch.
pub fn score_stacks(model: &Classifier, stacks: &[ChannelStack], mode: NormalizeMode) -> Result<Vec<f64>> {
    let stacks = normalized(stacks.to_vec(), mode)?;
    stacks.par_iter().map(|s| model.predict_proba(s)).collect()
}

/// Mini-batch training with Adam, cosine annealing over `max_epochs`, and
/// early stopping on validation loss. Returns the best-validation weights.
pub fn train(
    mut model: Classifier,
    train_set: &(impl SampleSource + ?Sized),
    val_set: &(impl SampleSource + ?Sized),
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Param("training and validation sets must be non-empty".into()));
    }
    let val: Vec<ChannelStack> = (0..val_set.len())
        .into_par_iter()
        .map(|i| val_set.stack(i, &mut derived_rng(cfg.seed, i as u64, VAL_TAG)))
        .collect::<Result<_>>()?;

    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.max_epochs;
    let mut adam = Adam::new(model.param_count(), cfg.adam);
    let mut params = model.flat_params();
    let mut step = 0usize;
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut since_best = 0usize;
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(cfg.seed, epoch as u64, SHUFFLE_TAG));
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let stacks = batch
                .par_iter()
                .map(|&i| {
                    let stream = (epoch as u64) << 32 | i as u64;
                    train_set.stack(i, &mut derived_rng(cfg.seed, stream, AUGMENT_TAG))
                })
                .collect::<Result<Vec<_>>>()?;
            let stacks = normalized(stacks, cfg.normalize)?;
            model.set_flat_params(&params)?;
            let terms = stacks
                .par_iter()
                .map(|s| {
                    let (loss, mut g) = model.loss_and_grad(s, cfg.class_weights)?;
                    g.push(loss);
                    Ok(g)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut sum = tree_sum(terms);
            let batch_loss = sum.pop().expect("loss term") / batch.len() as f64;
            for g in &mut sum {
                *g /= batch.len() as f64;
            }
            if !batch_loss.is_finite() || sum.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss or gradient in epoch {epoch}")));
            }
            lr = cosine_lr(step, total_steps, cfg.lr0)?;
            step += 1;
            adam.step(&mut params, &sum, step as u64, lr)?;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        model.set_flat_params(&params)?;
        let val_loss = evaluate_loss(&model, &val, cfg)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n as f64,
            val_loss,
            lr,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    model.set_flat_params(&best.2)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch: best.1,
        stopped_early,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"KNET";
const CHECKPOINT_VERSION: u32 = 1;

fn set_code(set: ChannelSet) -> u8 {
    match set {
        ChannelSet::Mag => 0,
        ChannelSet::MagPhase => 1,
        ChannelSet::MagK => 2,
    }
}

/// Writes a checkpoint: magic, version, channel-set code, then named blocks
/// of little-endian f32 values.
pub fn write_checkpoint<W: Write>(model: &Classifier, mut out: W) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&[set_code(model.set)])?;
    let mut blocks = Vec::new();
    for (prefix, net) in [("image", Some(&model.image)), ("kspace", model.kspace.as_ref())] {
        if let Some(net) = net {
            for (name, vals) in net.blocks() {
                blocks.push((format!("{prefix}.{name}"), vals));
            }
        }
    }
    out.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for (name, vals) in blocks {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(vals.len() as u32).to_le_bytes())?;
        for v in vals {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R, path: &Path) -> Result<Classifier> {
    let invalid = |reason: String| Error::InvalidData {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| invalid(format!("checkpoint ends early at byte {pos}")))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(invalid("not a classifier checkpoint".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let set = match take(1)?[0] {
        0 => ChannelSet::Mag,
        1 => ChannelSet::MagPhase,
        2 => ChannelSet::MagK,
        c => return Err(invalid(format!("unknown channel set code {c}"))),
    };
    let n_blocks = u32_at(take(4)?) as usize;
    let mut image = Vec::new();
    let mut kspace = Vec::new();
    for _ in 0..n_blocks {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| invalid("block name is not UTF-8".into()))?;
        let count = u32_at(take(4)?) as usize;
        let raw = take(count.checked_mul(4).ok_or_else(|| invalid("block too large".into()))?)?;
        let vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        match name.split_once('.') {
            Some(("image", _)) => image.extend(vals),
            Some(("kspace", _)) => kspace.extend(vals),
            _ => return Err(invalid(format!("unexpected block {name}"))),
        }
    }
    let image = ConvNet::from_params(set.image_channels(), image)?;
    let kspace = if set.kspace_channels() > 0 {
        Some(ConvNet::from_params(set.kspace_channels(), kspace)?)
    } else {
        None
    };
    Classifier::from_branches(set, image, kspace)
}

pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{ChannelTag, PipelineKind, StackMeta};
    use rand::SeedableRng;

    fn meta() -> StackMeta {
        StackMeta {
            factor: 1,
            pipeline: PipelineKind::Pca,
            sample_id: 0,
        }
    }

    fn random_stack(set: ChannelSet, h: usize, w: usize, label: u8, rng: &mut ChaCha8Rng) -> ChannelStack {
        let channels = set
            .tags()
            .iter()
            .map(|&t| {
                let data = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
                (t, RealPlane::new(h, w, data).unwrap())
            })
            .collect();
        ChannelStack::new(channels, label, meta()).unwrap()
    }

    fn shifted(model: &Classifier, i: usize, delta: f64) -> Classifier {
        let mut p = model.flat_params();
        p[i] += delta;
        let mut m = model.clone();
        m.set_flat_params(&p).unwrap();
        m
    }

    /// Worst relative gradient error over all parameters, or `None` when a
    /// probe crosses a ReLU kink.
    fn fd_check(model: &Classifier, stack: &ChannelStack, h: f64) -> Option<f64> {
        let (_, grad) = model.loss_and_grad(stack, DEFAULT_CLASS_WEIGHTS).unwrap();
        let base = model.relu_pattern(stack).unwrap();
        let mut worst: f64 = 0.0;
        for (i, &g) in grad.iter().enumerate() {
            let mut loss = [0.0; 2];
            for (slot, delta) in loss.iter_mut().zip([h, -h]) {
                let m = shifted(model, i, delta);
                if m.relu_pattern(stack).unwrap() != base {
                    return None;
                }
                *slot = weighted_ce_loss(m.forward(stack).unwrap(), stack.label(), DEFAULT_CLASS_WEIGHTS);
            }
            let fd = (loss[0] - loss[1]) / (2.0 * h);
            worst = worst.max((g - fd).abs() / g.abs().max(1e-8));
        }
        Some(worst)
    }

    #[test]
    fn parameter_budget() {
        for set in ChannelSet::ALL {
            assert!(Classifier::new(set, 0).param_count() < 10_000);
        }
        assert_eq!(ConvNet::param_count(1), 72 + 8 + 1152 + 16 + 32 + 2);
    }

    #[test]
    fn loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((weighted_ce_loss([0.0, 0.0], 0, DEFAULT_CLASS_WEIGHTS) - ln2).abs() < 1e-15);
        assert!((weighted_ce_loss([0.0, 0.0], 1, DEFAULT_CLASS_WEIGHTS) - 17.0 * ln2).abs() < 1e-13);
        let closed = (-20.0f64).exp().ln_1p();
        assert!((weighted_ce_loss([10.0, -10.0], 0, DEFAULT_CLASS_WEIGHTS) / closed - 1.0).abs() < 1e-12);
        assert!((closed - 2.06e-9).abs() < 1e-11);
        assert!(weighted_ce_loss([1000.0, -1000.0], 1, DEFAULT_CLASS_WEIGHTS).is_finite());
    }

    #[test]
    fn probability_examples() {
        assert_eq!(prob_positive([0.0, 0.0]), 0.5);
        assert!((prob_positive([-50.0, 0.0]) - 1.0).abs() < 1e-20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let l: [f64; 2] = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let closed = l[1].exp() / (l[0].exp() + l[1].exp());
            assert!((prob_positive(l) - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stack = random_stack(ChannelSet::MagPhase, 8, 8, 0, &mut rng);
        let model = Classifier::from_branches(ChannelSet::MagPhase, ConvNet::zeros(2), None).unwrap();
        assert_eq!(model.forward(&stack).unwrap(), [0.0, 0.0]);
        let wrong = random_stack(ChannelSet::Mag, 8, 8, 0, &mut rng);
        assert!(model.forward(&wrong).is_err());
    }

    #[test]
    fn forward_is_bit_stable_and_finite_under_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = random_stack(ChannelSet::MagK, 10, 12, 1, &mut rng);
        let a = Classifier::new(ChannelSet::MagK, 5);
        let b = Classifier::new(ChannelSet::MagK, 5);
        assert_eq!(a.forward(&stack).unwrap(), b.forward(&stack).unwrap());
        let scaled: Vec<(ChannelTag, RealPlane)> = stack
            .channels()
            .iter()
            .map(|(t, p)| {
                (*t, RealPlane::new(p.height(), p.width(), p.data().iter().map(|v| v * 1e6).collect()).unwrap())
            })
            .collect();
        let scaled = ChannelStack::new(scaled, 1, meta()).unwrap();
        assert!(a.forward(&scaled).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dual_branch_averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = random_stack(ChannelSet::MagK, 8, 8, 1, &mut rng);
        let single = Classifier::new(ChannelSet::Mag, 9);
        let mag = stack.select(ChannelSet::Mag).unwrap();
        let la = single.forward(&mag).unwrap();
        let dual = Classifier::from_branches(ChannelSet::MagK, single.image_branch().clone(), Some(ConvNet::zeros(2))).unwrap();
        let ld = dual.forward(&stack).unwrap();
        assert!((ld[0] - la[0] / 2.0).abs() < 1e-15 && (ld[1] - la[1] / 2.0).abs() < 1e-15);
        // Equal gradient halves flow into both branches.
        let (_, g) = dual.loss_and_grad(&stack, DEFAULT_CLASS_WEIGHTS).unwrap();
        let (_, dl) = weighted_ce(ld, 1, DEFAULT_CLASS_WEIGHTS);
        let n_img = ConvNet::param_count(1);
        let n_k = ConvNet::param_count(2);
        let fc_bias_k = &g[n_img + n_k - 2..];
        assert!((fc_bias_k[0] - dl[0] / 2.0).abs() < 1e-15);
        assert!((g[n_img - 2] - dl[0] / 2.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (case, set) in ChannelSet::ALL.into_iter().cycle().take(6).enumerate() {
            let model = Classifier::new(set, case as u64);
            let worst = loop {
                let stack = random_stack(set, 7, 6, (case % 2) as u8, &mut rng);
                if let Some(w) = fd_check(&model, &stack, 1e-3) {
                    break w;
                }
            };
            assert!(worst < 1e-4, "{set:?}: worst relative error {worst}");
        }
    }

    #[test]
    fn zero_input_has_zero_conv_weight_gradient() {
        let stack = ChannelStack::new(vec![(ChannelTag::MagImage, RealPlane::zeros(6, 6))], 1, meta()).unwrap();
        let model = Classifier::new(ChannelSet::Mag, 1);
        let (_, g) = model.loss_and_grad(&stack, DEFAULT_CLASS_WEIGHTS).unwrap();
        assert!(g[..9 * C1].iter().all(|&v| v == 0.0));
        assert!(g[9 * C1..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack = random_stack(ChannelSet::MagK, 8, 8, 1, &mut rng);
        let mut model = Classifier::new(ChannelSet::MagK, 2);
        let (before, g) = model.loss_and_grad(&stack, DEFAULT_CLASS_WEIGHTS).unwrap();
        let p: Vec<f64> = model.flat_params().iter().zip(&g).map(|(p, g)| p - 1e-6 * g).collect();
        model.set_flat_params(&p).unwrap();
        let after = weighted_ce_loss(model.forward(&stack).unwrap(), 1, DEFAULT_CLASS_WEIGHTS);
        assert!(after < before);
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(2, cfg);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[0.5, -2.0], 1, 0.1).unwrap();
        // m_hat = g at t = 1, so the first step is lr * g / (|g| + eps).
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((adam.first_moment()[0] / (1.0 - 0.9) - 0.5).abs() < 1e-15);

        let mut adam = Adam::new(1, cfg);
        let mut p = vec![0.0];
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = p[0];
            adam.step(&mut p, &[3.0], t, 1e-3).unwrap();
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-9);

        let mut adam = Adam::new(1, cfg);
        let mut p = vec![0.25];
        adam.step(&mut p, &[0.0], 1, 1.0).unwrap();
        assert_eq!(p[0], 0.25);
        assert!(adam.step(&mut p, &[0.0], 0, 1.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 1e-4).unwrap(), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 1e-4).is_err());
    }

    #[test]
    fn class_weight_counteracts_imbalance() {
        let labels: Vec<u8> = (0..18).map(|i| (i == 0) as u8).collect();
        let mean = |logits: [f64; 2]| {
            labels.iter().map(|&l| weighted_ce_loss(logits, l, DEFAULT_CLASS_WEIGHTS)).sum::<f64>() / 18.0
        };
        assert!(mean([10.0, -10.0]) > mean([0.0, 0.0]));
    }

    #[test]
    fn tree_sum_shape() {
        let terms = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]];
        assert_eq!(tree_sum(terms), vec![15.0]);
        assert!(tree_sum(Vec::new()).is_empty());
    }

    fn toy_sets(n: usize, seed: u64) -> (Vec<ChannelStack>, Vec<ChannelStack>) {
        // Positives carry a bright centre square.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |label: u8, rng: &mut ChaCha8Rng| {
            let data = (0..64)
                .map(|i| {
                    let (y, x) = (i / 8, i % 8);
                    let blob = if label == 1 && (2..6).contains(&y) && (2..6).contains(&x) { 2.0 } else { 0.0 };
                    blob + rng.random_range(-0.1..0.1)
                })
                .collect();
            ChannelStack::new(vec![(ChannelTag::MagImage, RealPlane::new(8, 8, data).unwrap())], label, meta()).unwrap()
        };
        let train = (0..n).map(|i| make((i % 2) as u8, &mut rng)).collect();
        let val = (0..n / 2).map(|i| make((i % 2) as u8, &mut rng)).collect();
        (train, val)
    }

    #[test]
    fn separable_toy_set_trains_and_is_deterministic() {
        let (train_set, val_set) = toy_sets(64, 1);
        let cfg = TrainConfig {
            lr0: 1e-2,
            class_weights: [1.0, 1.0],
            batch_size: 16,
            max_epochs: 50,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(Classifier::new(ChannelSet::Mag, 1), &train_set[..], &val_set[..], &cfg).unwrap();
        let b = train(Classifier::new(ChannelSet::Mag, 1), &train_set[..], &val_set[..], &cfg).unwrap();
        assert_eq!(a.history, b.history);
        let best_train = a.history.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
        assert!(best_train < 0.1, "train loss {best_train}");
    }

    #[test]
    fn early_stopping_returns_best_epoch_weights() {
        let (train_set, val_set) = toy_sets(32, 2);
        // A huge rate makes validation loss blow up after the first epoch.
        let cfg = TrainConfig {
            lr0: 50.0,
            patience: 1,
            batch_size: 8,
            max_epochs: 20,
            ..TrainConfig::default()
        };
        let out = train(Classifier::new(ChannelSet::Mag, 0), &train_set[..], &val_set[..], &cfg).unwrap();
        let best = out.history.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
        assert_eq!(out.best_epoch, best.epoch);
        assert_eq!(out.history.len(), out.best_epoch + 1);
        let val_now = evaluate_loss(&out.model, &val_set, &cfg).unwrap();
        assert_eq!(val_now, best.val_loss);
        let empty: Vec<ChannelStack> = Vec::new();
        assert!(train(Classifier::new(ChannelSet::Mag, 0), &empty[..], &val_set[..], &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Classifier::new(ChannelSet::MagK, 4);
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back.set(), ChannelSet::MagK);
        for (a, b) in back.flat_params().iter().zip(model.flat_params()) {
            assert_eq!(*a, b as f32 as f64);
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..], Path::new("mem")).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 3], Path::new("mem")).is_err());
    }
}

//! Threshold-free classification metrics with bootstrap confidence intervals.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derived_rng;

const BOOTSTRAP_TAG: u64 = 0xB007;
const MAX_REDRAWS: usize = 10_000;
pub const MIN_BOOTSTRAP_N: usize = 10;
pub const DEFAULT_BOOTSTRAP_ITERS: usize = 1000;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("scores must be finite".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Param("labels must be 0 or 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// A ratio that may have a zero denominator, in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    fn of(num: usize, den: usize) -> Self {
        if den == 0 {
            Ratio {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Ratio {
                value: num as f64 / den as f64,
                degenerate: false,
            }
        }
    }
}

impl ConfusionCounts {
    /// Counts with "positive" meaning `score >= threshold`.
    pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check_inputs(scores, labels)?;
        let mut c = ConfusionCounts::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> Ratio {
        Ratio::of(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Ratio {
        Ratio::of(self.tp, self.tp + self.fn_)
    }
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

/// Indices sorted by descending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve via the Mann-Whitney U statistic with average
/// ranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both classes present".into(),
        ));
    }
    // Ascending ranks; work in doubled ranks so tie averages stay integral.
    let mut groups = tie_groups(scores);
    groups.reverse();
    let mut below = 0usize;
    let mut pos_rank2 = 0u128;
    for g in &groups {
        let avg2 = (2 * below + g.len() + 1) as u128;
        let pos_here = g.iter().filter(|&&i| labels[i] == 1).count() as u128;
        pos_rank2 += avg2 * pos_here;
        below += g.len();
    }
    let np = n_pos as u128;
    let u2 = pos_rank2 - np * (np + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// ROC operating points `(fpr, tpr)`, from (0, 0) to (1, 1), one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_inputs(scores, labels)?;
    let (n_pos, n_neg) = class_counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC curve needs both classes present".into(),
        ));
    }
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for g in tie_groups(scores) {
        for i in g {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        pts.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(pts)
}

/// Trapezoidal area under a piecewise-linear curve given as `(x, y)` points.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Precision-recall points `(recall, precision)`, one per distinct score threshold.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_inputs(scores, labels)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "precision-recall needs at least one positive".into(),
        ));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut pts = Vec::new();
    for g in tie_groups(scores) {
        seen += g.len();
        tp += g.iter().filter(|&&i| labels[i] == 1).count();
        pts.push((tp as f64 / n_pos as f64, tp as f64 / seen as f64));
    }
    Ok(pts)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact `num / den` accumulation; `None` once it no longer fits.
fn add_fraction(acc: (u128, u128), num: u128, den: u128) -> Option<(u128, u128)> {
    let n = acc.0.checked_mul(den)?.checked_add(num.checked_mul(acc.1)?)?;
    let d = acc.1.checked_mul(den)?;
    let g = gcd(n, d).max(1);
    Some((n / g, d / g))
}

const F64_EXACT: u128 = 1 << 53;

/// Average precision: sum over thresholds of the recall increment times the
/// precision at that threshold. Tied scores form one threshold.
///
/// Accumulated as an exact fraction while it fits, so the result is the
/// correctly rounded value for small inputs.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (n_pos, _) = class_counts(labels);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric(
            "precision-recall needs at least one positive".into(),
        ));
    }
    let mut exact = Some((0u128, 1u128));
    let mut approx = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    for g in tie_groups(scores) {
        let pos_here = g.iter().filter(|&&i| labels[i] == 1).count();
        seen += g.len();
        tp += pos_here;
        if pos_here > 0 {
            // (pos_here / n_pos) * (tp / seen)
            approx += pos_here as f64 / n_pos as f64 * (tp as f64 / seen as f64);
            exact = exact.and_then(|acc| {
                add_fraction(acc, (pos_here * tp) as u128, (n_pos * seen) as u128)
            });
        }
    }
    Ok(match exact {
        Some((n, d)) if n < F64_EXACT && d < F64_EXACT => n as f64 / d as f64,
        _ => approx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn compute(self, scores: &[f64], labels: &[u8]) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(scores, labels),
            Metric::Auprc => auprc(scores, labels),
        }
    }

    fn defined_for(self, labels: &[u8]) -> bool {
        let (pos, neg) = class_counts(labels);
        match self {
            Metric::Auroc => pos > 0 && neg > 0,
            Metric::Auprc => pos > 0,
        }
    }
}

/// Point estimate with a percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub std: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over resampled (score, label) pairs. Each iteration
/// has its own derived generator, so results do not depend on thread count.
/// Resamples on which the metric is undefined are redrawn.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    metric: Metric,
    iterations: usize,
    seed: u64,
) -> Result<Interval> {
    check_inputs(scores, labels)?;
    let n = scores.len();
    if n < MIN_BOOTSTRAP_N {
        return Err(Error::Param(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_N} samples, got {n}"
        )));
    }
    if iterations < 2 {
        return Err(Error::Param("bootstrap needs at least 2 iterations".into()));
    }
    let point = metric.compute(scores, labels)?;
    let mut values = (0..iterations)
        .into_par_iter()
        .map(|it| {
            let mut rng = derived_rng(seed, it as u64, BOOTSTRAP_TAG);
            let mut s = vec![0.0; n];
            let mut l = vec![0u8; n];
            for _ in 0..MAX_REDRAWS {
                for j in 0..n {
                    let k = rng.random_range(0..n);
                    s[j] = scores[k];
                    l[j] = labels[k];
                }
                if metric.defined_for(&l) {
                    return metric.compute(&s, &l);
                }
            }
            Err(Error::UndefinedMetric(
                "bootstrap could not draw a resample with both classes".into(),
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = values.iter().sum::<f64>() / iterations as f64;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (iterations - 1) as f64).sqrt();
    values.sort_by(f64::total_cmp);
    Ok(Interval {
        point,
        low: percentile(&values, 2.5).min(point),
        high: percentile(&values, 97.5).max(point),
        std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: Interval,
    pub auprc: Interval,
    pub n: usize,
    pub n_pos: usize,
    pub prevalence: f64,
    pub n_bootstrap: usize,
}

pub fn evaluate(scores: &[f64], labels: &[u8], iterations: usize, seed: u64) -> Result<MetricReport> {
    Ok(MetricReport {
        auroc: bootstrap_ci(scores, labels, Metric::Auroc, iterations, seed)?,
        auprc: bootstrap_ci(scores, labels, Metric::Auprc, iterations, seed ^ 1)?,
        n: scores.len(),
        n_pos: class_counts(labels).0,
        prevalence: class_counts(labels).0 as f64 / scores.len() as f64,
        n_bootstrap: iterations,
    })
}

//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use kspace_core::ctensor::{ComplexTensor, Domain, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_plane(h: usize, w: usize, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h * w)
        .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

pub fn random_tensor(dims: [usize; 4], domain: Domain, seed: u64) -> ComplexTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    ComplexTensor::new(dims, data, domain).unwrap()
}

/// Direct centered unitary 2D DFT, summed term by term.
/// `sign = -1` maps image to k-space, `+1` the reverse.
pub fn centered_dft(x: &[C64], h: usize, w: usize, sign: f64) -> Vec<C64> {
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![C64::new(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut acc = C64::new(0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let phase = sign
                        * 2.0
                        * PI
                        * (((u as f64 - cy) * (y as f64 - cy)) / h as f64
                            + ((v as f64 - cx) * (xx as f64 - cx)) / w as f64);
                    acc += x[y * w + xx] * C64::from_polar(1.0, phase);
                }
            }
            out[u * w + v] = acc * scale;
        }
    }
    out
}

pub fn max_abs_diff(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}

/// Eigenvalues of a Hermitian matrix (row-major, `n x n`) by cyclic Jacobi
/// on its real `2n x 2n` embedding `[[Re, -Im], [Im, Re]]`, whose spectrum
/// is the Hermitian spectrum with every value doubled. Sorted descending.
pub fn hermitian_eigenvalues(m: &[C64], n: usize) -> Vec<f64> {
    let d = 2 * n;
    let mut a = vec![0.0; d * d];
    for i in 0..n {
        for j in 0..n {
            let z = m[i * n + j];
            a[i * d + j] = z.re;
            a[(i + n) * d + j + n] = z.re;
            a[i * d + j + n] = -z.im;
            a[(i + n) * d + j] = z.im;
        }
    }
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev.into_iter().step_by(2).collect()
}

/// `M^H M` for the coil matrix whose columns are the coil planes.
pub fn coil_gram(k: &ComplexTensor) -> Vec<C64> {
    let c = k.n_coil();
    let mut g = vec![C64::new(0.0, 0.0); c * c];
    for i in 0..c {
        for j in 0..c {
            g[i * c + j] = k
                .plane(0, i)
                .iter()
                .zip(k.plane(0, j))
                .map(|(a, b)| a.conj() * b)
                .sum();
        }
    }
    g
}

/// Multi-coil k-space that lies exactly in the GRAPPA model class: every
/// coil is a 5x3 convolution of one random base field whose outer rows and
/// columns are zero, so the data also vanishes just outside the matrix.
pub fn planted_kspace(n_coil: usize, h: usize, w: usize, seed: u64) -> ComplexTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (by, bx) = (3usize, 2usize);
    let mut base = vec![C64::new(0.0, 0.0); h * w];
    for y in by..h - by {
        for x in bx..w - bx {
            base[y * w + x] = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
    }
    let mut data = Vec::with_capacity(n_coil * h * w);
    for _ in 0..n_coil {
        let kernel: Vec<C64> = (0..15)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = C64::new(0.0, 0.0);
                for dy in -2isize..=2 {
                    for dx in -1isize..=1 {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            acc += kernel[((dy + 2) * 3 + dx + 1) as usize] * base[sy as usize * w + sx as usize];
                        }
                    }
                }
                data.push(acc);
            }
        }
    }
    ComplexTensor::new([1, n_coil, h, w], data, Domain::KSpace).unwrap()
}

/// Fraction of correctly ordered (positive, negative) pairs, ties counting half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Average precision by enumerating every distinct threshold, as an exact
/// fraction rounded once at the end.
pub fn threshold_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let (mut num, mut den) = (0u128, 1u128);
    let mut prev_tp = 0u128;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i] == 1).count() as u128;
        let (tn, td) = ((tp - prev_tp) * tp, n_pos * selected.len() as u128);
        num = num * td + tn * den;
        den *= td;
        let g = gcd(num, den);
        num /= g;
        den /= g;
        prev_tp = tp;
    }
    num as f64 / den as f64
}

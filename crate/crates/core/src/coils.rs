//! Coil compression in k-space by PCA, and image-domain coil combination.

use nalgebra::DMatrix;

use crate::ctensor::{ComplexTensor, Domain, RealPlane, C64};
use crate::error::{Error, Result};

/// Output of [`pca_compress`].
#[derive(Debug, Clone)]
pub struct CompressionResult {
    /// Virtual coils, strongest first: `[1, n_components, H, W]`.
    pub compressed: ComplexTensor,
    /// `S[c]^2 / sum S[i]^2` over every input coil, non-increasing.
    pub explained_variance_ratio: Vec<f64>,
    /// All singular values of the sample matrix, descending.
    pub singular_values: Vec<f64>,
    /// `n_coil_in x n_components`, orthonormal columns.
    pub basis: DMatrix<C64>,
}

impl CompressionResult {
    /// Maps the virtual coils back onto the physical coils (`compressed * basis^H`).
    /// Exact when every component was kept.
    pub fn decompress(&self) -> ComplexTensor {
        let (n_in, n_comp) = self.basis.shape();
        let [_, _, h, w] = self.compressed.dims();
        let len = h * w;
        let mut data = vec![C64::new(0.0, 0.0); n_in * len];
        for s in 0..n_in {
            let out = &mut data[s * len..(s + 1) * len];
            for c in 0..n_comp {
                let b = self.basis[(s, c)].conj();
                for (o, z) in out.iter_mut().zip(self.compressed.plane(0, c)) {
                    *o += z * b;
                }
            }
        }
        ComplexTensor::new([1, n_in, h, w], data, self.compressed.domain())
            .expect("dims derived from a valid tensor")
    }
}

/// Compresses the coil axis of single-average k-space onto its leading
/// principal components.
///
/// The `(H*W) x n_coil` sample matrix is used without mean-centering. Its right
/// singular vectors form the basis; each basis column is rotated so its
/// largest-magnitude entry is real and positive.
pub fn pca_compress(k: &ComplexTensor, n_components: usize) -> Result<CompressionResult> {
    k.require(Domain::KSpace)?;
    if k.n_avg() != 1 {
        return Err(Error::Param(format!(
            "pca_compress needs a single average (got {}); sum averages first",
            k.n_avg()
        )));
    }
    let n_coil = k.n_coil();
    if n_components < 1 || n_components > n_coil {
        return Err(Error::Param(format!(
            "n_components {n_components} must lie in 1..={n_coil}"
        )));
    }
    let len = k.plane_len();
    // Coil planes are contiguous, so the tensor already is the column-major sample matrix.
    let samples = DMatrix::from_column_slice(len, n_coil, k.data());

    // QR first, then the SVD of the small triangular factor: M = Q R, R = U S V^H.
    let r = if len >= n_coil {
        samples.qr().r()
    } else {
        samples.clone()
    };
    let svd = r.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not return right singular vectors".into()))?;
    let sv = svd.singular_values;
    if sv.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite singular values".into()));
    }

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    let mut singular_values: Vec<f64> = order.iter().map(|&i| sv[i]).collect();
    singular_values.resize(n_coil, 0.0);

    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let explained_variance_ratio = singular_values
        .iter()
        .map(|s| if total > 0.0 { s * s / total } else { 0.0 })
        .collect();

    let mut basis = DMatrix::<C64>::zeros(n_coil, n_components);
    for (c, &src) in order.iter().take(n_components).enumerate() {
        for s in 0..n_coil {
            basis[(s, c)] = v_t[(src, s)].conj();
        }
        let (mut arg_max, mut max_norm) = (0usize, -1.0f64);
        for s in 0..n_coil {
            let n = basis[(s, c)].norm();
            if n > max_norm {
                arg_max = s;
                max_norm = n;
            }
        }
        if max_norm > 0.0 {
            let rot = basis[(arg_max, c)].conj() / max_norm;
            for s in 0..n_coil {
                basis[(s, c)] *= rot;
            }
            basis[(arg_max, c)] = C64::new(max_norm, 0.0);
        }
    }

    let mut data = vec![C64::new(0.0, 0.0); n_components * len];
    for c in 0..n_components {
        let out = &mut data[c * len..(c + 1) * len];
        for s in 0..n_coil {
            let b = basis[(s, c)];
            for (o, z) in out.iter_mut().zip(k.plane(0, s)) {
                *o += z * b;
            }
        }
    }
    let compressed =
        ComplexTensor::new([1, n_components, k.height(), k.width()], data, Domain::KSpace)?;

    Ok(CompressionResult {
        compressed,
        explained_variance_ratio,
        singular_values,
        basis,
    })
}

fn require_single_average(img: &ComplexTensor) -> Result<()> {
    if img.n_avg() != 1 {
        return Err(Error::Shape(format!(
            "coil combination needs a single average, got {}",
            img.n_avg()
        )));
    }
    Ok(())
}

/// Root-sum-of-squares magnitude over coils.
pub fn rss_combine(img: &ComplexTensor) -> Result<RealPlane> {
    img.require(Domain::Image)?;
    require_single_average(img)?;
    let mut acc = vec![0.0f64; img.plane_len()];
    for c in 0..img.n_coil() {
        for (a, z) in acc.iter_mut().zip(img.plane(0, c)) {
            *a += z.norm_sqr();
        }
    }
    RealPlane::new(
        img.height(),
        img.width(),
        acc.into_iter().map(f64::sqrt).collect(),
    )
}

pub const SENSITIVITY_EPS: f64 = 1e-12;

/// Matched-filter combination with known coil sensitivities:
/// `sum conj(s_c) z_c / sum |s_c|^2`, zero where the maps vanish.
pub fn sensitivity_combine(img: &ComplexTensor, smaps: &ComplexTensor) -> Result<ComplexTensor> {
    img.require(Domain::Image)?;
    require_single_average(img)?;
    if smaps.n_coil() != img.n_coil()
        || smaps.height() != img.height()
        || smaps.width() != img.width()
    {
        return Err(Error::Shape(format!(
            "sensitivity maps {:?} do not match image {:?}",
            smaps.dims(),
            img.dims()
        )));
    }
    let len = img.plane_len();
    let mut num = vec![C64::new(0.0, 0.0); len];
    let mut den = vec![0.0f64; len];
    for c in 0..img.n_coil() {
        for (i, (z, s)) in img.plane(0, c).iter().zip(smaps.plane(0, c)).enumerate() {
            num[i] += s.conj() * z;
            den[i] += s.norm_sqr();
        }
    }
    let data = num
        .into_iter()
        .zip(den)
        .map(|(n, d)| {
            if d < SENSITIVITY_EPS {
                C64::new(0.0, 0.0)
            } else {
                n / d.max(SENSITIVITY_EPS)
            }
        })
        .collect();
    ComplexTensor::from_plane(img.height(), img.width(), data, Domain::Image)
}

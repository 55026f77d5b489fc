//! Binary sample container and the JSON dataset manifest.
//!
//! A `.ksp` file is the magic `KSP1`, four little-endian u32 dims
//! `[n_avg, n_coil, H, W]`, one domain byte (0 k-space, 1 image), then
//! interleaved little-endian f32 `(re, im)` pairs in `[avg][coil][h][w]` order.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctensor::{ComplexTensor, Domain, C64};
use crate::error::{Error, Result};
use crate::phantom::{PhantomSpec, Split};

pub const KSP_MAGIC: &[u8; 4] = b"KSP1";
const HEADER_LEN: usize = 4 + 16 + 1;
/// Largest payload accepted when reading, in complex samples.
pub const MAX_SAMPLES: u64 = 1 << 32;

pub fn encode_ksp(t: &ComplexTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.data().len());
    out.extend_from_slice(KSP_MAGIC);
    for d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(match t.domain() {
        Domain::KSpace => 0,
        Domain::Image => 1,
    });
    for z in t.data() {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_ksp(bytes: &[u8], path: &Path) -> Result<ComplexTensor> {
    if bytes.len() < 4 || &bytes[..4] != KSP_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut dims32 = [0u32; 4];
    for (i, d) in dims32.iter_mut().enumerate() {
        *d = u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    }
    let count = dims32
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .filter(|&c| c <= MAX_SAMPLES && dims32.iter().all(|&d| d > 0))
        .ok_or_else(|| Error::DimOverflow {
            path: path.to_path_buf(),
            dims: dims32,
        })?;
    let domain = match bytes[20] {
        0 => Domain::KSpace,
        1 => Domain::Image,
        b => {
            return Err(Error::InvalidData {
                path: path.to_path_buf(),
                reason: format!("unknown domain tag {b}"),
            })
        }
    };
    let payload = &bytes[HEADER_LEN..];
    let expected = 8 * count;
    if payload.len() as u64 != expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() as u64,
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
            C64::new(re as f64, im as f64)
        })
        .collect();
    let dims = dims32.map(|d| d as usize);
    ComplexTensor::new(dims, data, domain)
}

pub fn write_ksp(path: &Path, t: &ComplexTensor) -> Result<()> {
    fs::write(path, encode_ksp(t)).map_err(|e| Error::io(path, e))
}

pub fn read_ksp(path: &Path) -> Result<ComplexTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ksp(&bytes, path)
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: u64,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: PhantomSpec,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Checks version, unique ids and labels; with `root`, also that every
    /// path resolves to a file.
    pub fn validate(&self, root: Option<&Path>) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id) {
                return Err(Error::Manifest(format!("duplicate id {}", e.id)));
            }
            if e.label > 1 {
                return Err(Error::Manifest(format!("entry {} has label {}", e.id, e.label)));
            }
            if e.path.is_absolute() {
                return Err(Error::Manifest(format!("entry {} path must be relative", e.id)));
            }
            if let Some(root) = root {
                if !root.join(&e.path).is_file() {
                    return Err(Error::Manifest(format!(
                        "entry {} path {} does not resolve",
                        e.id,
                        e.path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.validate(path.parent())?;
        Ok(m)
    }
}

//! k-space preserving preprocessing for MRI classification.
//!
//! Multi-coil raw data is undersampled on a cartesian comb, then either
//! compressed to one virtual coil directly in k-space by PCA, or GRAPPA
//! reconstructed and coil-combined. The complex result is split into image
//! magnitude/phase and k-space real/imaginary planes for a compact classifier,
//! evaluated with AUROC/AUPRC and bootstrap confidence intervals.

pub mod coils;
pub mod ctensor;
pub mod error;
pub mod experiment;
pub mod grappa;
pub mod io;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod sampling;
pub mod seeding;

pub use ctensor::{ComplexTensor, Domain, RealPlane, C64};
pub use error::{Error, Result};

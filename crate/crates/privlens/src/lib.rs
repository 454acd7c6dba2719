//! Privacy-preserving lens co-design toolkit.
//!
//! Simulates a phase-mask camera end to end: Zernike wavefront parameterization,
//! Fresnel/angular-spectrum PSF synthesis, sensor image formation, and an
//! adversarial training loop that learns lens coefficients jointly with a toy
//! action classifier against attribute-stealing adversaries. Includes the
//! post-training attack suite (fresh adversaries, Wiener deconvolution) and the
//! evaluation metrics (SSIM, temporal similarity matrices, C-MAP, the harmonic
//! privacy/utility score).
//!
//! Everything is deterministic under a fixed seed; data-parallel paths (enabled
//! by the default `parallel` feature) preserve bit-identical results because
//! each work item is independent and reductions run in a fixed order.

pub mod attacks;
pub mod autodiff;
mod error;
pub mod fft2;
pub mod io;
pub mod metrics;
pub mod models;
pub mod optics;
pub mod par;
pub mod sensor;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod zernike;

pub use error::{Error, Result};

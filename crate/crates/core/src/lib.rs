//! Multi-view normal-map anomaly detection toolkit.
//!
//! - [`tensor`], [`autodiff`], [`nn`], [`optim`], [`gradcheck`], [`rng`]: the
//!   numeric substrate (f64 tensors, reverse-mode graph, AdamW, PCG32).
//! - [`mvnt`]: the little-endian binary tensor file format.
//! - [`photometric`]: Lambertian photometric stereo and rendering.
//! - [`camera`]: calibration files, projection, distortion, homographies.
//! - [`synth`]: seeded multi-view synthetic benchmark generation.
//! - [`cprn`]: the cross-modal prototype reconstruction model.
//! - [`metrics`]: AUROC, max-F1, pixel AUROC, AUPRO and run evaluation.

pub mod autodiff;
pub mod camera;
pub mod cprn;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mvnt;
pub mod nn;
pub mod optim;
pub mod photometric;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

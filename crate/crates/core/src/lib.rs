//! Implicit background estimation for semantic segmentation.
//!
//! The crate is organized around the pieces of the explicit-vs-implicit
//! background comparison:
//!
//! - [`numerics`]: stable logsumexp / softmax kernels and a central-difference
//!   gradient oracle.
//! - [`heads`]: the explicit (pass-through) and implicit (`-logsumexp`)
//!   background heads, forward and backward.
//! - [`distinct`]: membership indicators, membership maps and Expected
//!   Non-Distinctiveness.
//! - [`metrics`]: confusion matrices, IoU / mIOU, background IoU on OOD data and
//!   Expected Calibration Error.
//! - [`model`]: a tiny fully-convolutional network with manual backprop, SGD
//!   training, evaluation and checkpoints.
//! - [`data`]: procedural in-distribution scenes and OOD generators with PNG
//!   persistence.
//! - [`experiment`]: the config-driven generate / train / eval / maps / compare
//!   pipeline used by the `softguard` binary.
//!
//! Batch-level loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled (default) and plain iterators otherwise. Results are
//! always merged in input order, so both builds produce identical numbers.

pub mod data;
pub mod distinct;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
pub use heads::{CompositeLogits, HeadKind, IdLogits};
pub use numerics::{LogitVector, SimplexPoint};
pub use tensor::{LabelField, TensorField};

/// Background class index, shared by every module.
pub const BACKGROUND: usize = 0;

/// Label value excluded from scoring.
pub const IGNORE_LABEL: u8 = 255;

/// Version string embedded into every emitted artifact.
pub const TOOL_VERSION: &str = concat!("softguard ", env!("CARGO_PKG_VERSION"));

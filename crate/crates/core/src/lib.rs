//! Two-branch attention CNN for hyperspectral patch classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`] and [`tape`]: dense tensors, primitive kernels and
//!   reverse-mode differentiation, with [`gradcheck`] for finite-difference
//!   verification.
//! * [`attention`]: backbone conv blocks, spectral and spatial attention
//!   modules, and the auxiliary output heads.
//! * [`network`]: sub-network assembly for every ablation variant and the
//!   fused two-branch model.
//! * [`training`]: losses, Adam, pretraining and fine-tuning.
//! * [`data`] and [`metrics`]: scene files, patches, synthetic scenes, and
//!   confusion-matrix indicators.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod params;
pub mod tensor;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod training;
pub mod network;

pub use error::{Error, Result};
pub use ops::conv::ConvGeometry;
pub use tape::{BatchStats, OpKind, Tape, Var};
pub use tensor::{Scalar, Tensor};

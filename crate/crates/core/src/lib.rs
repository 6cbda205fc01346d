//! Infrared/visible image fusion library.
//!
//! Dual dense-block encoders extract per-modality features, a
//! cross-attention fusion module built on a reversed softmax enhances
//! complementary content, and an intensity-aware decoder reconstructs the
//! fused image. Training runs in two stages (per-modality autoencoders,
//! then the fusion head with frozen encoders) on a tape-based autograd
//! engine, and the usual fusion quality metrics are included for
//! evaluation.

pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
pub use tensor::Tensor;

//! SAR ship detection at desk scale: a Swin-style hierarchical backbone, a
//! feature-enhancement FPN neck (with FPN/PAFPN baselines), an RPN detection
//! head, AP evaluation, and a synthetic speckle-scene trainer, all built on a
//! small reverse-mode tensor tape with an operation-level MAC counter.

pub mod error;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

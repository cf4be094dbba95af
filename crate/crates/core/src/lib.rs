//! Transformer head lifting 2D backbone features to 3D pose quantities:
//! 24 joint keypoints, 23 twist angles as `(cos, sin)` pairs and a 10-dim
//! body-shape vector.
//!
//! The crate carries its own small tensor type and reverse-mode tape
//! ([`Tape`]), the attention blocks ([`nn`]), the head ([`LiftingHead`]),
//! the training procedure ([`training`]), a synthetic task standing in for a
//! CNN backbone ([`synthetic`]) and closed-form efficiency accounting
//! ([`efficiency`]).

pub mod efficiency;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{LiftError, Result};
pub use head::{AttentionScale, HeadConfig, LiftingHead, PoseOutput, PoseVars};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! One-shot open affordance learning at desk scale.
//!
//! The crate wires a frozen feature source (synthetic encoders or ingested
//! precomputed features) into a trainable head made of three parts:
//!
//! - [`prompt`]: shared learnable context vectors composed with class tokens
//!   through a frozen text encoder,
//! - [`fusion`]: a softmax-weighted sum of linearly projected features from the
//!   last `j` encoder layers followed by an affine embedder,
//! - [`decoder`]: `t` cross-attention layers whose keys are gated by a mask
//!   derived from the image's `[CLS]` token, and a matrix-product prediction
//!   head.
//!
//! All arithmetic is `f64` and every trainable tensor has a hand-written
//! analytic gradient (see [`model`]), verified against central finite
//! differences in [`gradcheck`].

pub mod analysis;
mod container;
pub mod data;
pub mod decoder;
pub mod error;
pub mod features;
pub mod fusion;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod resample;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Mat;

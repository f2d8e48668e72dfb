//! Motion-disentangled zero-shot action recognition on synthetic frozen features.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense `f64` tensors, counter-based random streams, forward kernels.
//! - [`autograd`]: the reverse-mode tape every model component is written against.
//! - [`gradcheck`]: central finite-difference verification of the tape.
//! - [`backbone_sim`]: synthetic frozen features and the shared Dual Adapter.
//! - [`msm`]: motion statistics, saliency, bounded offsets and stream sampling.
//! - [`mab`]: gated fusion of the dynamic and global streams.
//! - [`text_space`]: prompt bank, surrogate text encoder, cosine classifier.
//! - [`losses`]: the training objectives.
//! - [`harness`]: datasets, training, zero-shot evaluation, ablations and exports.

pub mod autograd;
pub mod backbone_sim;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod mab;
pub mod msm;
pub mod numerics;
pub mod text_space;

pub use error::{Error, Result};

//! Crossmodal voice conversion at desk scale: a joint VAE over speech
//! feature sequences and face images, trained with a mutual-information
//! regularizer so the utterance decoder honors the face-derived voice code.
//!
//! The pipeline is: synthesize an attribute-paired corpus, train the five
//! networks, then convert utterances toward a target face or render a face
//! matching input speech. Everything is seed-deterministic end to end.

pub mod error;
pub mod scalar;
pub mod data;
pub mod gaussian;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;

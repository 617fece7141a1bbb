//! Train transformer retrievers from scratch on a target collection:
//! WordPiece vocabulary, MLM and MLM+FLOPS pretraining, SPLADE / dense /
//! cross-encoder finetuning, inverted-index retrieval, R-FLOPS estimation and
//! significance-tested evaluation.
//!
//! The model math is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checks); the aliases below name the usual instantiations.

pub mod autograd;
pub mod data;
pub mod batch;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod finetuning;
pub mod gradcheck;
pub mod index;
pub mod optim;
pub mod pipeline;
pub mod pretraining;
pub mod repr;
pub mod retrieval;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

/// Single-precision encoder used for training, inference and checkpoints.
pub type Encoder = encoder::EncoderModel<f32>;
/// Double-precision encoder used for gradient checking.
pub type Encoder64 = encoder::EncoderModel<f64>;

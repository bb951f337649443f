//! Agent-layer parameter-efficient fine-tuning for a toy dual-encoder
//! vision-language model.
//!
//! Per-channel scale/shift "agent layers" are attached after LayerNorms and
//! linear layers of both encoders. Their scaling vectors can be coupled across
//! modalities through low-rank bridges, either one-way or through a shared
//! meta-scaling vector. After training, every agent folds exactly into the
//! frozen weights it follows.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod coupling;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{cosine_similarity, DType, Scalar, Tensor};

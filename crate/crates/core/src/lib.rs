//! Self-supervised representation learning where augmentations are treated
//! as actions and the full augmentation record supervises an inverse model.
//!
//! - [`gradcore`]: reverse-mode differentiation over dense `f64` arrays
//! - [`imaging`]: the ordered augmentation pipeline with lossless records
//! - [`actions`]: affine matrices, egocentric composition, binning
//! - [`models`]: encoder, projector, manipulation head, EMA targets, checkpoints
//! - [`objectives`]: identity and manipulation losses, KL decomposition checks
//! - [`optim`]: momentum SGD with LARS and warmup/cosine schedules
//! - [`datasets`]: synthetic shapes, on-disk format, paired batches
//! - [`harness`]: SSL training, linear probe, metrics
//! - [`analysis`]: centroid separation, feature export, summaries
//! - [`cli`]: the `stec` executable

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actions;
pub mod analysis;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod gradcore;
pub mod harness;
pub mod imaging;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

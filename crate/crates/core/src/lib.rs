//! Two-stage CT estimation from MR volumes.
//!
//! A boosted tree ensemble trained with random undersampling assigns each
//! masked voxel a coarse tissue class (bone / non-bone) from its MR
//! intensities and neighbourhood; a per-class Gaussian mixture over joint
//! `(CT, MR)` vectors then supplies the conditional expectation of CT given
//! MR. The [`evaluation`] module carries the validation protocol and a
//! synthetic phantom generator with known ground truth.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod labeling;
pub mod mixture;
pub mod predictor;
pub mod rusboost;
pub mod tree;
pub mod volume;

pub use error::{Error, Result};

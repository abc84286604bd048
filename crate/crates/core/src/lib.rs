//! Visual-semantic contrastive alignment for episodic few-shot classification.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! - [`datasets`]: manifests, description corpora and a synthetic generator
//! - [`episodes`]: seeded N-way K-shot episode sampling
//! - [`encoders`]: trainable visual encoders and the frozen semantic encoder
//! - [`objectives`]: prototypes, cosine classifier, query cross-entropy and
//!   the visual-semantic NT-Xent alignment loss
//! - [`training`]: supervised pretraining followed by episodic meta-training
//! - [`evaluation`]: novel-class episodic evaluation and paired comparisons

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod autograd;
pub mod datasets;
pub mod encoders;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod matrix;
pub mod objectives;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;

/// Global class identifier, unique across all splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

//! Asymmetric cross-modal knowledge distillation at desk scale.
//!
//! A multispectral teacher distills into an RGB student with no paired
//! samples. Each student sample is paired with a teacher sample of its class,
//! first through a contrastively trained matcher and later by prediction
//! agreement. Features are aligned with attention-derived transport weights
//! and covariance losses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod transport;

pub use autodiff::{Conv2dSpec, Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

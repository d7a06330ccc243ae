//! Training toolkit for small-data image classification with dense
//! convolutional networks.
//!
//! Everything is built on [`autodiff::Tape`], a reverse-mode differentiation
//! tape over `f64` [`tensor::Tensor`]s. On top of that sit the network
//! builders ([`nn`]), the data pipeline ([`data`]), optimizers and the
//! one-cycle training loop ([`optim`], [`train`]) and evaluation
//! ([`metrics`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

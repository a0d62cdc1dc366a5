//! Core library for sparsely-gated mixture-of-experts layers embedded in
//! convolutional residual networks.
//!
//! Everything in this crate is pure computation over heap-allocated buffers:
//! a define-by-run reverse-mode autodiff tape, the MoE gate with top-k
//! sparsification, the four expert-utilization constraints, utilization and
//! specialization metrics, model assembly and analytic MAC counting.
//! IO, file formats and the CLI live in the companion `resmoe` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod constraints;
pub mod macs;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

use alloc::string::String;

/// Errors produced by graph construction, model building and metric helpers.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = core::result::Result<T, Error>;

//! Reference-guided adaptive token elision for transformer training.
//!
//! A frozen text-only teacher scores how hard each output token is to
//! predict without the visual stream; that reference loss, blended with an
//! exponential moving average of the student's own per-token loss, drives
//! top-k token gating under a cyclic sparsity schedule. Skipped tokens pass
//! through decoder layers untouched, cutting tokens processed per step.
//!
//! Everything runs on the CPU at desk scale: a from-scratch reverse-mode
//! tape, a decoder-only transformer, a synthetic multimodal task, and a
//! training harness with deterministic accounting.

pub mod cli;
pub mod data;
pub mod gating;
pub mod harness;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod scoring;
pub mod selfcheck;
pub mod tensor;

pub use tensor::{Element, Tape, Tensor, TensorError};

/// Version string stamped into output file headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

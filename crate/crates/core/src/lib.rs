//! Long-video question answering at desk scale.
//!
//! The pipeline compresses a raw frame tensor into per-temporal-unit tokens
//! ([`ftc`]), interleaves them with rendered timestamp tokens, grounds a
//! question to candidate time windows and resamples frames inside them with
//! a per-window sampling policy ([`tms`]), and answers with a small
//! cross-attention decoder ([`answerer`]). [`synthbench`] produces seeded
//! long videos with sparse events, and [`metrics`] scores the answers.

// validation writes `!(x > 0.0)` on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod answerer;
pub mod config;
pub mod error;
pub mod experiments;
pub mod ftc;
pub mod metrics;
pub mod ndcore;
pub mod pipeline;
pub mod synthbench;
pub mod tms;
pub mod tokenizer;
pub mod video;

pub use error::{Axis, Error, Result};
pub use ndcore::{ParamStore, Tape, Tensor, Var};

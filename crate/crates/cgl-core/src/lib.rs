//! Core of a class-incremental continual graph learning benchmark for
//! skeleton-sequence classification.
//!
//! Everything numeric lives here: a dense f64 tensor engine with
//! reverse-mode autodiff, GCN / ST-GCN-lite backbones, curriculum
//! construction, the continual-learning method suite (Bare, Joint, EWC,
//! MAS, TWP, LwF, GEM, Replay) and the accuracy / forgetting / order
//! disparity metrics. IO, file formats and the CLI live in `cgl-bench`.
//!
//! The crate is `no_std` + `alloc`; every computation is deterministic
//! given its seeds.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod graph;
pub mod methods;
pub mod metrics;
pub mod tensor;

pub use error::{CglError, Result};

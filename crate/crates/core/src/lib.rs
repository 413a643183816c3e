//! Prototype-based hypernetwork adapters (PHA) for a tiny encoder-decoder
//! transformer.
//!
//! A frozen backbone carries task-shared adapters in its encoder and
//! hypernetwork-generated adapters in its decoder. The hypernetwork is
//! conditioned on per-task prototypes learned contrastively against
//! instance retrieval vectors, which also lets a new task pick up the
//! closest learned prototype from a handful of examples.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pha;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod verify;

pub use autodiff::{AttentionSpec, ContrastTerm, Grads, Tape, Var};
pub use error::{PhaError, Result};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

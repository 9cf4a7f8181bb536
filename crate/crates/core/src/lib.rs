//! Multiscale gradient estimation for convolutional networks.
//!
//! The crate provides a small reverse-mode tensor engine, mesh restriction
//! operators, resolution-agnostic convolutional models, the telescopic
//! multilevel gradient estimator, coarse-to-fine training, an exact
//! work-unit ledger, and the experiment harness used by the `mge` CLI.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod mesh;
pub mod metrics;
pub mod mge;
pub mod models;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod wu;

pub use autodiff::{finite_diff_grad, ParamVars, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Params, Tensor};

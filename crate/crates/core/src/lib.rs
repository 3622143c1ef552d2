//! Privacy leakage laboratory for split transformer inference.
//!
//! A compact transformer is split into a client part and a server part. The
//! crate implements the activation-inversion attack against the cut-layer
//! activations, a Jacobian-based layer sensitivity analysis, perturbation
//! defenses, reconstruction metrics and an experiment harness.

pub mod attack;
pub mod defense;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sensitivity;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{GradTape, Var};
pub use tensor::Tensor;

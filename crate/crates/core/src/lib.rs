//! District-embedded latent neural ODE for panel forecasting.

pub mod adjoint;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod model;
pub mod nn;
pub mod odeint;
pub mod params;
pub mod pca;
pub mod selfcheck;
pub mod tape;
pub mod train;
pub mod tensor;

pub use tape::{forward, grad_check, AdError, Gradients, OpKind, Recording, Tape, TapeNode, Var};
pub use tensor::Tensor;

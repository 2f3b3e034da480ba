//! Minimal tensor autodiff engine: kernels, tape, parameters and optimizer.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamKind, ParamStore};

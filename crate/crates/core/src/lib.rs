//! Core building blocks for the federated-learning privacy lab: a dense-tensor
//! reverse-mode autodiff engine with second-order support, the two reference
//! networks, client-side gradient defenses, optimizers and the gradient
//! inversion attack.

pub mod data;
pub mod defenses;
pub mod dlg;
pub mod error;
pub mod fd;
pub mod gradvec;
pub mod graph;
pub mod image;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::CoreError;
pub use gradvec::{GradientVector, Layout, LayoutEntry, ModelParams};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

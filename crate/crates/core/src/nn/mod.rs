//! Minimal tensor and reverse-mode autodiff toolkit shared by the
//! recognizer, fusion and detector models.

pub mod graph;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Grads, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;

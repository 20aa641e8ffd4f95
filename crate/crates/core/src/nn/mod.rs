//! Minimal neural network toolkit: tensors, tape autodiff, Adam.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{clip_grad_norm, Adam};
pub use tape::{sigmoid, NllRow, ParamId, ParamStore, Tape, Var};
pub use tensor::Tensor;

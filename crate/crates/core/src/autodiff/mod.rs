//! Reverse-mode automatic differentiation over dense CPU tensors.

mod graph;
mod kernels;
mod sgd;
mod tensor;

pub use graph::{BnMode, BnOutput, CustomOp, Graph, Var};
pub use sgd::{Sgd, SgdConfig};
pub use tensor::{Element, Param, Tensor};

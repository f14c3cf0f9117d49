//! Dense tensors and reverse-mode automatic differentiation.

pub mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};
pub use optim::{Adam, Optimizer, Sgd};
pub use tensor::{argmax, Element, Tensor};

pub(crate) use graph::{log_sum_exp, softmax_in_place};

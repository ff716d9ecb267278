//! Dense tensors, reverse-mode differentiation, finite-difference checks and
//! seeded random streams.

mod fd;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use fd::{finite_difference_gradient, relative_error};
pub use graph::{Grads, Graph, Var, LN_EPS};
pub use rng::{gaussian, splitmix64, Rng};
pub use tensor::{Real, Tensor};

pub(crate) use graph::{log_sum_exp, softmax_in_place};

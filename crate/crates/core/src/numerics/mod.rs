//! Dense tensors, forward kernels, a reverse-mode tape and its
//! finite-difference oracle.

mod check;
mod graph;
pub mod ops;
mod store;
mod tensor;

pub use check::{finite_diff_check, relative_error, EntryCheck, EntryStatus, FdReport, ParamCheck};
pub use graph::{grad, GradientReport, Graph, Var};
pub use store::{Entry, ParameterStore};
pub use tensor::Tensor;

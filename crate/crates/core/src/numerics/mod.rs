//! Dense tensors, reverse-mode differentiation, and a finite-difference
//! oracle. Everything is `f64`.

pub mod gradcheck;
pub mod io;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, CheckReport, GradCheck};
pub use tape::{concat_last, concat_rows, grad, softmax_tensor, Gradients, Tape, Var};
pub use tensor::Tensor;



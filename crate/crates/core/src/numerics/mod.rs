//! Dense double-precision tensors, a reverse-mode tape and a finite-difference
//! gradient checker.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use conv::output_extent as conv_output_extent;
pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport, WorstElement, REL_ERROR_FLOOR};
pub use tape::{sigmoid, Gradients, Tape, Var, SIGMOID_LIMIT};
pub use tensor::{cosine_sim, fro_sq_diff, Tensor, NORM_EPS};

//! Dense matrices, a reverse-mode tape, Adam and a finite-difference oracle.

mod adam;
mod gradcheck;
mod matrix;
mod ops;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport, FD_STEP, GRAD_FLOOR};
pub use matrix::{cosine, dot, norm, Matrix};
pub use ops::{argmax, cross_entropy, gelu, layer_norm, log_sum_exp, softmax, LAYER_NORM_EPS};
pub use tape::{Gradients, Segment, Tape, Var};

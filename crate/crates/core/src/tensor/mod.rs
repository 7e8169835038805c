//! Dense matrices and a reverse-mode differentiation tape.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{sigmoid, Activation, BinaryKind, Reduction, Tape, Var, NORM_EPS, SIGMOID_CLAMP};

//! Dense matrices, a reverse-mode tape, and finite-difference checking.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{fd_check, BlockReport, BlockStatus, FdReport, ParamBlock};
pub use matrix::{householder_q, random_orthonormal_rows, Fnv, Matrix};
pub use tape::{Fault, Gradients, Tape, Var};

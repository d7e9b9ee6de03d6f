//! Dense `f64` tensors with a reverse-mode differentiation tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradCheck, GradCheckReport, DEFAULT_FLOOR, DEFAULT_STEP};
pub use tape::{BatchStats, Tape, Targets, Var, COSINE_EPS};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;

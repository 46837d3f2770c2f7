//! Reverse-mode differentiation, gradient checking, Adam and checkpoints.

pub mod adam;
pub mod check;
pub mod checkpoint;
pub mod tape;
pub mod tensor;

pub use adam::{round_to_f32, AdamState};
pub use check::{central_differences, directional_check, finite_diff_check};
pub use checkpoint::Checkpoint;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

//! Tensors, reverse-mode differentiation, 2D FFTs and the finite-difference oracle.

pub mod fft;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use fft::{center_shift, center_unshift, fft2, ifft2, ifft2_complex, ComplexGrid};
pub use gradcheck::{grad_check, GradCheckReport, GradEntry};
pub use tape::{FilterVariant, Gradients, Tape, Var};
pub use tensor::{layer_norm, matmul, softmax, Tensor};

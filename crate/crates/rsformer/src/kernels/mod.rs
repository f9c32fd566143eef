//! Low-level numeric kernels shared by the evaluation and autodiff backends.

pub mod activation;
pub mod conv;
pub mod fft;
pub mod linalg;
pub mod norm;
pub mod reduce;
pub mod shuffle;

//! Spectral analysis and Procrustes regularization of convolution operators,
//! plus an instrumented residual-network trainer that measures how well each
//! block preserves the norm of the backpropagated gradient.

pub mod error;
pub mod linalg;
pub mod net;
pub mod probe;
pub mod spectrum;
pub mod tensor;

pub use error::{Error, Result};

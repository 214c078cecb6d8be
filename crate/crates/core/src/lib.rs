//! Shared attention / linear-recurrence sequence block.
//!
//! One set of tied key/value projections feeds both a softmax-attention KV
//! cache and a linear recurrent state (Mamba-2 or gated delta rule), so the
//! active mixer can change per chunk during training and per position at
//! inference time.

pub mod autodiff;
pub mod block;
pub mod error;
pub mod flops;
pub mod infer;
pub mod mixers;
pub mod model;
pub mod ops;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub use rng::SeededRng;
pub use tensor::Tensor;

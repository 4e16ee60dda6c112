//! Quantizable neural networks: a single full-precision parent model whose
//! weights and activations can be executed at any bit-width from 1 to k (or
//! at full precision) without retraining, plus the k-bit packed storage that
//! switches to lower bit-widths on load.

pub mod bsbn;
pub mod data;
pub mod engine;
pub mod error;
pub mod mode;
pub mod network;
pub mod objective;
pub mod quantize;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
pub use mode::BitMode;

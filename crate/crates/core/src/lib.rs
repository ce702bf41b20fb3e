//! Binarized Q-networks: bit-packed inference, straight-through training,
//! binary Q-learning on pixel environments, and mixed-integer verification of
//! argmax robustness.

pub mod bits;
pub mod error;
pub mod network;
pub mod rl;
pub mod tensorfile;
pub mod training;
pub mod verifier;

pub use bits::{binary_dot, pack_bits, sign, BitTensor};
pub use error::{BnnError, FormatError};
pub use network::{BinarizedNetwork, FullPrecisionNetwork, Layer, LayerSpec, Shape3};

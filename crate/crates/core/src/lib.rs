//! Approximate support recovery of K-sparse vectors through a measurement
//! ensemble built from random spreading sequences and CRC-aided polar codes.
//!
//! The decoder runs matched filtering, per-sequence activity tests, list
//! decoding and successive interference cancellation, and never touches an
//! object of size `n`. An AMP baseline over dense Gaussian ensembles and an
//! analytical parameter designer are included.

pub mod amp;
pub mod channel;
pub mod codebook;
pub mod designer;
pub mod detector;
pub mod error;
pub mod model;
pub mod polar;
pub mod quadrature;
pub mod recovery;
pub mod rng;
pub mod sim;

pub use error::{AsrError, Result};

//! Blind super-resolution by recurrent detail-structure alternative
//! optimization: degradation synthesis, the recurrent network with its
//! structure modulation unit, ablation variants, training and Y-channel
//! evaluation.
//!
//! Everything runs on the CPU through the small autograd in [`autograd`].

pub mod autograd;
pub mod degradation;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod imaging;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod variants;

pub use error::{Error, Result};

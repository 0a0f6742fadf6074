//! Test-time low-rank adaptation of a small vision transformer.

pub mod adapt;
pub mod augment;
pub mod error;
pub mod harness;
pub mod lora;
pub mod objective;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};

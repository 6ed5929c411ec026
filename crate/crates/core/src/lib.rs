//! Sneaky bit-flip attacks on small numeric models.
//!
//! Modules, bottom up: [`bitcodec`] encodes and flips single words,
//! [`tensormodel`] holds tensors, range statistics and on-disk bundles,
//! [`nnet`] runs forward/backward passes, [`impact`] scores flips,
//! [`search`] ranks them, and [`attack`] drives the iterative attack.

pub mod attack;
pub mod bitcodec;
pub mod error;
pub mod export;
pub mod impact;
pub mod nnet;
mod serde_ext;
pub mod search;
pub mod tensormodel;

pub use error::{BundleError, CodecError, NumericalError};

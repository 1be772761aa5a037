//! Siamese encoder-exchange-decoder change detection at desk scale.
//!
//! The crate bundles a small float64 autodiff engine ([`tensor`]), the
//! parameter-free exchange operators and their permutation-matrix form
//! ([`exchange`]), an exact discrete information oracle ([`info`]), a
//! synthetic bi-temporal dataset ([`data`]), the toy model zoo ([`model`]),
//! confusion metrics ([`metrics`]) and the experiment harness ([`harness`]).

pub mod data;
pub mod error;
pub mod exchange;
pub mod harness;
pub mod info;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

//! Mixture of prefix experts for zero-shot dialogue state tracking, at
//! toy scale.
//!
//! Slots are clustered by learned features, one prefix-prompt expert is
//! trained per cluster against a frozen autoregressive transformer, and
//! unseen slots are routed to the nearest cluster's expert for value
//! generation.

pub mod backbone;
pub mod ckpt;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod experts;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

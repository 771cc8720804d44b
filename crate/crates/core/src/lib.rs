//! Simultaneous sequence transduction with a gated mixture-of-experts refiner.
//!
//! A streaming encoder (block-causal cached layers followed by bidirectional
//! layers) feeds an autoregressive decoder. During training a refiner mixes a
//! prefix expert and a global expert under a learned gate; at inference the
//! same gate alone decides whether to read another chunk or write a token.

pub mod ablation;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod policy;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};

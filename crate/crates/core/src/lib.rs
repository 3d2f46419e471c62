//! Edge-cloud collaborative inference simulator.
//!
//! A small edge network answers confident inputs locally. Uncertain inputs
//! either ship an intermediate edge feature map through a learned adapter
//! into the tail of a large cloud network, or ship the raw input to the full
//! cloud network. The crate covers the networks, their training (with
//! feature distillation and multi-objective recall boosting), the routing
//! policies, and the cost and accuracy scores used to compare them.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod moo;
pub mod nn;
pub mod par;
pub mod policy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

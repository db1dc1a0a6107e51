//! Coordination-graph priors from language models for cooperative
//! multi-agent value decomposition.
//!
//! The crate covers the whole pipeline: particle-world scenarios ([`env`]),
//! observation summaries ([`describe`]), prompt/provider/post-processing
//! ([`prior`]), graph convolution over the prior ([`gnn`]), value-decomposition
//! learners ([`learn`]) and multi-seed experiments ([`harness`]).

pub mod describe;
pub mod env;
pub mod error;
pub mod gnn;
pub mod harness;
pub mod learn;
pub mod numeric;
pub mod prior;

pub use error::{Error, Result};

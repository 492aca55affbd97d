//! Sub-graph captioning: decompose a scene graph into sub-graphs, score them
//! with a proposal network, decode each selected sub-graph into a grounded
//! sentence, and evaluate the resulting caption sets.

pub mod cli;
pub mod config;
pub mod decoder;
pub mod decompose;
pub mod encoder;
pub mod error;
pub mod fixture;
pub mod graph;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sgpn;
pub mod tensor;
pub mod workflow;

pub use error::{Error, Result};

pub mod clustering;
pub mod codec;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod netcore;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};

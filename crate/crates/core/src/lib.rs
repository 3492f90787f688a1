pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod params;
pub mod retrieval;
pub mod text;
pub mod training;

pub use error::{Error, Result};

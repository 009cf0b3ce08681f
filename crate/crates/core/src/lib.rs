pub mod audit;
pub mod baseline;
pub mod corpus;
pub mod editing;
pub mod error;
pub mod model;
pub mod numerics;
pub mod tracing;
pub mod training;

pub use error::{Error, Result};

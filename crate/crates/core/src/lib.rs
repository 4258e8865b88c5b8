pub mod adapters;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod routing;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

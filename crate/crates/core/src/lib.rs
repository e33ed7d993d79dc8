pub mod attribution;
pub mod cli;
pub mod counterfactual;
pub mod error;
pub mod linalg;
pub mod model;
pub mod scenarios;
pub mod training;

pub use error::{Error, Result};

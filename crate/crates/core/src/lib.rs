pub mod aero;
pub mod cnn;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod levelset;
pub mod optimizer;

pub use error::{Error, Result};

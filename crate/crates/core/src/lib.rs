pub mod analysis;
pub mod cli;
pub mod data;
pub mod diffengine;
pub mod divergence;
pub mod error;
pub mod losses;
pub mod model;
pub mod routing;
pub mod trainer;

pub use error::{Error, Result};

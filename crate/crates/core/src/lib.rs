pub mod autodiff;
pub mod data;
pub mod embed;
pub mod error;
pub mod got;
pub mod heads;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod stride;
pub mod train;

pub use error::{Error, Result};

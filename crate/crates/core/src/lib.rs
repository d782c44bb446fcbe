pub mod analysis;
pub mod error;
pub mod geometry;
pub mod network;
pub mod open_system;
pub mod pipeline;
pub mod quadrature;
pub mod rng;
pub mod similarity;
pub mod transport;

pub use error::{Error, Result};

//! (build in progress)
pub mod autograd;
pub mod grid;
pub mod lognormal;
pub mod model;
pub mod rng;
pub mod threading;

pub use grid::Grid;
pub use rng::SeedStream;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

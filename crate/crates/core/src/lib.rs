pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};

pub mod carss;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod preprocess;
pub mod simharness;
pub mod solvers;

pub use error::{Error, Result};

pub mod error;
pub mod extension;
pub mod hyptrig;
pub mod limits;
pub mod radial;
pub mod runner;
pub mod spheres;

pub use error::{Error, Result};

pub mod error;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod linearizer;
pub mod nets;
pub mod oracle;
pub mod points;
pub mod qpsolver;

pub use error::{Error, Result};

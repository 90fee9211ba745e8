pub mod cli;
pub mod error;
pub mod fit;
pub mod leverage;
pub mod loss;
pub mod mc;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod smoothing;

pub use error::{PlzipError, Result};

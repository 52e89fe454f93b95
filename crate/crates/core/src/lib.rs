pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod stats;
pub mod tensor;
pub mod textprep;
pub mod trainer;

pub use error::{Error, Result};

pub mod checkpoint;
pub mod corruption;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluate;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod report;
pub mod par;
pub mod rng;
pub mod sfim;
pub mod trainer;

pub use error::{Error, Result};

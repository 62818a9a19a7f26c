pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ply;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

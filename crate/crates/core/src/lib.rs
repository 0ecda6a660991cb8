pub mod audio;
pub mod corpus;
pub mod density;
pub mod error;
pub mod melody;
pub mod onsets;
pub mod pipeline;
pub mod pitch;
pub mod plot;
pub mod rhythm;
pub mod rng;
pub mod separation;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

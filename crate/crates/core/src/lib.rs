pub mod audio;
pub mod contours;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod events;
pub mod eval;
pub mod frontend;
pub mod kernel;
pub mod nn;
pub mod notes;
pub mod pipeline;
pub mod pitchogram;

pub use error::{Error, Result};

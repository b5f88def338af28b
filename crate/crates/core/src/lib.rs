pub mod cli;
mod colormap;
pub mod error;
pub mod eval;
pub mod io;
pub mod net;
pub mod percept;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

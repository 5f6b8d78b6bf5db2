pub mod ccad;
pub mod cli;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod mscm;
pub mod nn;
pub mod objective;
pub mod synth;
pub mod viz;
pub mod vocab;

pub use error::{Error, Result};

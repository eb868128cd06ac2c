pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod gre;
pub mod head;
pub mod ingest;
pub mod interp;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tools;
pub mod train;

pub use error::{Error, Result};

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tape, Var};
pub mod dataset;
pub mod io;
pub mod graph;
pub mod losses;
pub mod masking;
pub mod model;
pub mod metrics;
pub mod trainer;
pub mod experiment;

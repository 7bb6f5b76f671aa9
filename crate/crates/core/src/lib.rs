//! Detection and iterative correction of per-pixel errors in predicted depth maps.

pub mod decn;
pub mod dedn;
pub mod depth;
pub mod error;
pub mod evaluation;
pub mod labeling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

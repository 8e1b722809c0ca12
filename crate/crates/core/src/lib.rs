pub mod datastream;
pub mod encoder;
pub mod error;
pub mod numkernel;
pub mod replay;
pub mod sevpr;
pub mod sgakt;
pub mod theory;
pub mod trainer;

pub use error::{FormatErrorKind, Result, SecaError};

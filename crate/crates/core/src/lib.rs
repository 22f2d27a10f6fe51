pub mod error;
pub mod evalgen;
pub mod fixture;
pub mod image;
pub mod mimicit;
pub mod model;
pub mod seqformat;
pub mod tensor;
pub mod trainer;
pub mod util;
pub mod verify;

pub use error::{Error, Result};

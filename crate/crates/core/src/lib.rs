pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod masking;
pub mod networks;
pub mod objectives;
pub mod pipeline;
pub mod projection;
pub mod training;

pub use error::{Error, Result};

pub mod backbone;
pub mod cli;
pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod optim;
pub mod params;
pub mod proposal;
pub mod tensor;

pub use error::{MitosError, Result};
pub use tensor::Tensor;

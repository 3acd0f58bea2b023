pub mod bench;
pub mod epipolar;
pub mod error;
pub mod flow;
pub mod imageio;
pub mod lme;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod toyscene;
pub mod trainer;

pub use error::{Error, Result};

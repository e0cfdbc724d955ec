pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pointcloud;
pub mod projection;
pub mod reconstruction;
pub mod tensor;
pub mod training;
pub mod weights;

pub use error::{Error, Result};

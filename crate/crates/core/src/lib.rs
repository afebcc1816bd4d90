pub mod autodiff;
pub mod classify;
pub mod error;
pub mod explain;
pub mod mocap;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};

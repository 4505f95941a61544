pub mod alignment;
pub mod autodiff;
pub mod backbone;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

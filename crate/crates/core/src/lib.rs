pub mod error;
pub mod head_model;
pub mod math;

pub use error::{Error, Result};
pub mod anchoring;
pub mod renderer;
pub mod scene;
pub mod objectives;
pub mod fitter;
pub mod assets_io;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod numcore;
pub mod pipeline;
pub mod signal;
pub mod theory;

pub use error::{Error, Result};

pub mod cli;
pub mod error;
pub mod federation;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod presets;
pub mod synthdata;
pub mod tensorio;
pub mod uncertainty;

pub use error::{Error, Result};

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod geometry;
pub mod instrument;
pub mod losses;
pub mod nn;
pub mod par;
pub mod seeding;

pub use error::{Error, Result};

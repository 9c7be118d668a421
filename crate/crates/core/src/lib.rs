pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod joint;
pub mod network;
pub mod oracles;
pub mod sampler;
pub mod schedule;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
pub use grid::Grid;

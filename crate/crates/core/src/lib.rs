pub mod controllers;
pub mod epca;
pub mod error;
pub mod io;
pub mod planner;
pub mod pomdp;
pub mod problems;

pub use error::{Error, Result};

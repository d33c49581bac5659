pub mod error;
pub mod guidance;
pub mod harness;
pub mod nn;
pub mod numerics;
pub mod planner;
pub mod posenc;
pub mod renderer;
pub mod schedules;
pub mod sequence;
pub mod toydata;

pub use error::{Error, Result};

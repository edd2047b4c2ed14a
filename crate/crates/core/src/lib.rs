pub mod ddpg;
pub mod env;
pub mod error;
pub mod feedback;
pub mod gflow_continuous;
pub mod gflow_discrete;
pub mod harness;
pub mod nn;

pub use error::{Error, Result};

pub mod error;
pub mod mdp;
pub mod planner;

pub use error::{LabError, Result, Site};
pub mod erm;
pub mod env;
pub mod params;
pub mod context_free;
pub mod context_dep;
pub mod oracles;
pub mod schema;
pub mod harness;
pub mod verify;

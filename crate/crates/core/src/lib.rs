pub mod baselines;
pub mod cogspace;
pub mod driver;
pub mod error;
pub mod evaluation;
pub mod objectives;
pub mod report;
pub mod search;
pub mod simflow;
pub mod store;
pub mod surrogate;

pub use error::{Error, Result};

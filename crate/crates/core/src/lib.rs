pub mod calibration;
pub mod error;
pub mod eval_report;
pub mod linmodel;
pub mod pipeline;
pub mod steering;
pub mod toy_lm;
pub mod trace_store;

pub use error::{MeraError, Result};

//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod captions;
pub mod contracts;
pub mod gradcheck;
pub mod metric_oracle;

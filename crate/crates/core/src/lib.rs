pub mod corpus;
pub mod deskmodel;
pub mod error;
pub mod intervention;
pub mod math;
pub mod metrics;
pub mod parser;
pub mod pipeline;
pub mod promptgen;
pub mod report;
pub mod sae;
pub mod scoring;

pub use error::{AuditError, Result};

//! Hierarchical multi-label text classification with label-based attention.
//!
//! Each hierarchy level attends over the document's words once per label,
//! through a shared set of learned components. Local per-level heads and a
//! global head over all levels are trained jointly and blended at
//! prediction time.

pub mod attention;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod explain;
pub mod hierarchy;
pub mod metrics;
pub mod synthetic;
pub mod tensor;
pub mod training;

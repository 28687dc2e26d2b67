//! Memory-aware pipeline-parallel planning.
//!
//! Given a profiled fine-grained computation graph, [`partitioner::plan`]
//! chooses stage boundaries plus a per-stage swap/recompute plan that
//! minimizes the slowest stage under a per-device memory capacity, and
//! [`simulator::simulate`] replays the result under GPipe-style or 1F1B
//! schedules.

pub mod balance;
pub mod error;
pub mod graph;
pub mod memopt;
pub mod oracle;
pub mod partitioner;
pub mod simulator;
pub mod synthgen;
pub mod units;

pub use error::{Error, Result};
pub use graph::{ComputationGraph, ProfiledNode, TensorRef};
pub use partitioner::{PartitionPlan, PlanConfig, Schedule};

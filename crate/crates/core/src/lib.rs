//! Straggler-aware parallelization planning and simulation for
//! hybrid-parallel (DP x TP x PP) training of large models.
//!
//! The planner partitions a cluster's GPUs into tensor-parallel groups,
//! organizes the groups into 1F1B pipelines, and assigns model layers and
//! training data non-uniformly so that slow GPUs carry less work. A
//! discrete-event simulator replays iterative training under a dynamic
//! straggler trace, re-planning when measured rates shift and migrating
//! optimizer-state shards between plans.

pub mod assignment;
pub mod costmodel;
pub mod domain;
pub mod error;
pub mod grouping;
pub mod orchestration;
pub mod planner;
pub mod report;
pub mod sharding;
pub mod simulator;
pub mod solver;
pub mod tracegen;

pub use error::PlanError;

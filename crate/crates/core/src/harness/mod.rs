//! Distributed evaluation: dispatcher, wire protocol, early stopping and
//! kernel emission for workers.

pub mod dispatch;
pub mod emit;
pub mod mock;
pub mod protocol;
pub mod prune;

pub use dispatch::{EvalTask, Harness, HarnessConfig, HarnessError, HarnessReport, TaskResult, TaskStatus};
pub use emit::{emit, EmitFormat};
pub use protocol::{Message, TaskId};
pub use prune::{lambda, prune_decision, AccuracyCurve, Decision, PruneRule};

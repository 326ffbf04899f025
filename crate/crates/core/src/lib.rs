//! Federated class-incremental learning with new-class augmented
//! self-distillation.
//!
//! Clients learn a sequence of tasks, each adding classes. On every task
//! after the first, a client distils from a snapshot of its previous model
//! whose old-class scores are rescaled to make room for the current model's
//! new-class scores. The server aggregates client models weighted by the
//! size of their current-task data.

pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod federation;
pub mod incremental;
pub mod metrics;
pub mod seeding;
pub mod tensor;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use federation::run_experiment;
pub use metrics::RunReport;

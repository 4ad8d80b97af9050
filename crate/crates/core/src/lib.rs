//! Tabular POMDP laboratory for confounded offline policy optimization.
//!
//! The crate covers the full pipeline on finite models: exact model algebra
//! and bridge oracles, confounded trajectory generation, linear minimax
//! bridge estimation, confidence-region pessimism with policy selection, and
//! the benchmark harness used by the `p3o` binary.

pub mod baseline;
pub mod bench;
pub mod enumerate;
pub mod error;
pub mod estimation;
pub mod instances;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pessimism;
pub mod policy;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{RankDiagnostics, TabularPomdp};
pub use policy::{BehaviorPolicy, HistoryClass, PolicySet, TargetPolicy};
pub use simulate::{OfflineDataset, Trajectory};

/// Artifact version string embedded in every report.
pub fn artifact_version() -> String {
    format!("p3o-core-{}", env!("CARGO_PKG_VERSION"))
}

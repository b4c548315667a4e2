//! Executable forms of the protocol's analyses: the linearizability
//! checker for recorded histories, distinct-leaf distributions and their
//! statistical distance, the strong-mode distance bound, Zipfian workload
//! machinery, and stash-size simulation.

pub mod checker;
pub mod leaves;
pub mod stash;
pub mod zipf;

pub use checker::{check_history, HistoryRecord, Verdict};
pub use leaves::{dist_x, dist_y, mu, statistical_distance, LeafCountDistribution};
pub use stash::{quartile_means, simulate_stash, StashRunConfig};
pub use zipf::{level_weights, ZipfSampler};

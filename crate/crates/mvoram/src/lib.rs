//! A wait-free, multi-client, multi-version Path ORAM over a simulated
//! Byzantine fault-tolerant replica group, together with the analyses that
//! make its guarantees checkable: a linearizability checker for recorded
//! histories, distinct-leaf distribution math for access-pattern distance,
//! and stash-size simulation.
//!
//! The position map, stash, and tree all live server-side; concurrent
//! clients read snapshots, merge the versions they observe, and evict new
//! versions without ever waiting on each other. Replication executes the
//! same deterministic state machine on every replica and masks up to `t`
//! Byzantine replicas by matching replies.
//!
//! Start with the runnable examples (`cargo run --example basic_access`)
//! or the `mvoram` binary for the experiment suites.

pub mod analysis;
pub mod client;
pub mod core;
pub mod experiments;
pub mod replication;
pub mod secrets;
pub mod server;

pub use client::{AccessRequest, Client, OpKind, ServerFacade};
pub use core::{Block, Location, PathMap, PositionMap, SlotId, Stash, Timestamp, TreeGeometry};
pub use server::{Mode, ServerConfig, StateMachine};

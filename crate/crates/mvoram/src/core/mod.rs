//! Domain types shared by the client, server, and analyses: timestamps,
//! tree geometry, blocks, position maps, the multi-version server state,
//! and the canonical wire encoding.
//!
//! Everything here is an immutable value; state transitions build new
//! values (structurally shared where it matters).

pub mod block;
pub mod geometry;
pub mod pmap;
pub mod state;
pub mod timestamp;
pub mod wire;

pub use block::Block;
pub use geometry::{paths_through, random_path_through, GeometryError, Location, PmEntry, SlotId, TreeGeometry};
pub use pmap::{PathMap, PositionMap, Stash};
pub use state::{HistoryEntry, OramState};
pub use timestamp::Timestamp;

//! Position maps, per-access path maps, and stashes.

use std::collections::BTreeMap;

use super::block::Block;
use super::geometry::{Location, PmEntry};
use super::timestamp::Timestamp;

/// The consolidated view mapping every address to its current location and
/// timestamp. Fresh entries are `(stash, sentinel)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionMap {
    entries: Vec<PmEntry>,
}

impl PositionMap {
    pub fn fresh(block_count: u32) -> Self {
        PositionMap {
            entries: vec![PmEntry::FRESH; block_count as usize],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, addr: u32) -> PmEntry {
        self.entries[addr as usize]
    }

    /// Applies one location update, keeping the entry with the higher
    /// timestamp. Returns true if the entry changed.
    pub fn fold_update(&mut self, addr: u32, loc: Location, ts: Timestamp) -> bool {
        let cell = &mut self.entries[addr as usize];
        if ts > cell.ts {
            *cell = PmEntry { loc, ts };
            true
        } else {
            false
        }
    }

    /// Folds a whole path map into this view.
    pub fn fold_path_map(&mut self, map: &PathMap) {
        for (&addr, &(loc, ts)) in map.iter() {
            self.fold_update(addr, loc, ts);
        }
    }

    /// Addresses currently assigned to the stash, ignoring never-written
    /// entries. This is the stash-size metric of the consolidated view.
    pub fn stash_population(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.loc.is_stash() && !e.ts.is_sentinel())
            .count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, PmEntry)> + '_ {
        self.entries.iter().enumerate().map(|(a, e)| (a as u32, *e))
    }
}

/// The location updates produced by a single access: at most one entry per
/// address. Carries the sequence number of the access that produced it so
/// histories can be inspected and compacted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PathMap {
    pub seq: u64,
    updates: BTreeMap<u32, (Location, Timestamp)>,
}

impl PathMap {
    pub fn new(seq: u64) -> Self {
        PathMap {
            seq,
            updates: BTreeMap::new(),
        }
    }

    /// Records an update; an access touches each address at most once.
    pub fn record(&mut self, addr: u32, loc: Location, ts: Timestamp) {
        let prior = self.updates.insert(addr, (loc, ts));
        debug_assert!(prior.is_none(), "duplicate path-map entry for addr {addr}");
    }

    pub fn get(&self, addr: u32) -> Option<(Location, Timestamp)> {
        self.updates.get(&addr).copied()
    }

    pub fn len(&self) -> usize {
        self.updates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &(Location, Timestamp))> {
        self.updates.iter()
    }

    /// A path map equivalent to an entire consolidated position map,
    /// skipping never-written entries. Used by history compaction.
    pub fn from_position_map(seq: u64, pm: &PositionMap) -> Self {
        let mut map = PathMap::new(seq);
        for (addr, entry) in pm.iter() {
            if !entry.ts.is_sentinel() {
                map.record(addr, entry.loc, entry.ts);
            }
        }
        map
    }
}

/// A list of overflowing blocks, at most one per address.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Stash {
    blocks: Vec<Block>,
}

impl Stash {
    pub fn new(mut blocks: Vec<Block>) -> Self {
        blocks.sort_by_key(|b| b.addr);
        debug_assert!(
            blocks.windows(2).all(|w| w[0].addr < w[1].addr),
            "duplicate address in stash"
        );
        Stash { blocks }
    }

    pub fn empty() -> Self {
        Stash { blocks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }
}

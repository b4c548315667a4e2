//! The server's replicated ORAM state: a multi-version tree, the set of
//! live stashes, and the path-map history.
//!
//! Snapshots must be cheap because every in-flight access holds one. The
//! tree is a persistent structure with path copying: cloning the state is
//! O(1) for the tree and O(open accesses) for the rest, while an eviction
//! rebuilds only the nodes along one path.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::block::Block;
use super::geometry::{SlotId, TreeGeometry};
use super::pmap::{PathMap, PositionMap, Stash};
use super::timestamp::Timestamp;

/// One entry of the path-map history. `hidx` is the server-assigned append
/// index: it increases monotonically, so a client that has folded
/// everything up to some `hidx` only needs newer entries, even across
/// history compactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub hidx: u64,
    pub map: PathMap,
}

#[derive(Debug)]
struct TreeNode {
    /// One version set per slot, kept sorted by `(addr, ts)`.
    slots: Vec<Vec<Block>>,
    left: Option<Arc<TreeNode>>,
    right: Option<Arc<TreeNode>>,
}

impl TreeNode {
    fn empty(bucket_size: u32) -> TreeNode {
        TreeNode {
            slots: vec![Vec::new(); bucket_size as usize],
            left: None,
            right: None,
        }
    }
}

/// The full ORAM state, cloneable as a snapshot.
#[derive(Debug, Clone)]
pub struct OramState {
    root: Option<Arc<TreeNode>>,
    stashes: BTreeMap<u64, Arc<Stash>>,
    history: Vec<Arc<HistoryEntry>>,
    next_stash_id: u64,
    next_hidx: u64,
}

fn insert_version(set: &mut Vec<Block>, block: Block) {
    match set.binary_search_by_key(&block.version_key(), |b| b.version_key()) {
        Ok(_) => {} // identical version already present
        Err(pos) => set.insert(pos, block),
    }
}

fn remove_versions(set: &mut Vec<Block>, seen: &[Block]) {
    set.retain(|b| !seen.iter().any(|s| s.version_key() == b.version_key()));
}

impl OramState {
    pub fn empty() -> Self {
        OramState {
            root: None,
            stashes: BTreeMap::new(),
            history: Vec::new(),
            next_stash_id: 0,
            next_hidx: 0,
        }
    }

    /// Builds the initial state for `initial` blocks, placed leaf-first in
    /// address order, together with the synthetic sequence-0 path map that
    /// records every placement. The path map is already part of the state's
    /// history.
    pub fn with_initial(geom: &TreeGeometry, initial: &[(u32, Vec<u8>)]) -> (Self, PathMap) {
        let mut state = OramState::empty();
        let mut map = PathMap::new(0);
        // Slot order starting at the leaf level and moving up, nodes and
        // slot indices ascending within a level.
        let mut slots = Vec::new();
        for level in (0..=geom.height).rev() {
            for node in (1u32 << level)..(1u32 << (level + 1)) {
                for index in 0..geom.bucket_size {
                    slots.push(SlotId::new(node, index));
                }
            }
        }
        let mut sorted: Vec<_> = initial.to_vec();
        sorted.sort_by_key(|(addr, _)| *addr);
        for ((addr, data), slot) in sorted.into_iter().zip(slots) {
            let ts = Timestamp::written(0);
            let block = Block::new(addr, data, ts);
            state.place_for_setup(geom, slot, block);
            map.record(addr, super::geometry::Location::Slot(slot), ts);
        }
        if !map.is_empty() {
            state.append_history(map.clone());
        }
        (state, map)
    }

    fn place_for_setup(&mut self, geom: &TreeGeometry, slot: SlotId, block: Block) {
        let depth = geom.level_of(slot.node).expect("setup slot valid");
        let root = self.root.take();
        self.root = Some(Self::place_rec(root, geom, 0, depth, slot, block));
    }

    fn place_rec(
        node: Option<Arc<TreeNode>>,
        geom: &TreeGeometry,
        level: u32,
        target_level: u32,
        slot: SlotId,
        block: Block,
    ) -> Arc<TreeNode> {
        let mut fresh = match node {
            Some(arc) => TreeNode {
                slots: arc.slots.clone(),
                left: arc.left.clone(),
                right: arc.right.clone(),
            },
            None => TreeNode::empty(geom.bucket_size),
        };
        if level == target_level {
            insert_version(&mut fresh.slots[slot.index as usize], block);
        } else {
            // Which child holds the ancestor chain of `slot.node`.
            let child_id = slot.node >> (target_level - level - 1);
            let go_left = child_id % 2 == 0;
            let sub = if go_left { fresh.left.take() } else { fresh.right.take() };
            let rebuilt = Self::place_rec(sub, geom, level + 1, target_level, slot, block);
            if go_left {
                fresh.left = Some(rebuilt);
            } else {
                fresh.right = Some(rebuilt);
            }
        }
        Arc::new(fresh)
    }

    fn node_ref(&self, geom: &TreeGeometry, node_id: u32) -> Option<&TreeNode> {
        let depth = geom.level_of(node_id).ok()?;
        let mut cur = self.root.as_deref()?;
        for level in 0..depth {
            let child_id = node_id >> (depth - level - 1);
            cur = if child_id % 2 == 0 {
                cur.left.as_deref()?
            } else {
                cur.right.as_deref()?
            };
        }
        Some(cur)
    }

    /// The multi-version content of every slot on the path to `leaf`, in
    /// slot order. Empty slots appear with empty version sets.
    pub fn path_versions(&self, geom: &TreeGeometry, leaf: u32) -> Vec<(SlotId, Vec<Block>)> {
        let mut out = Vec::with_capacity((geom.height as usize + 1) * geom.bucket_size as usize);
        let nodes = geom.path_nodes(leaf).expect("leaf validated by caller");
        let mut cur = self.root.as_deref();
        for (level, node_id) in nodes.iter().enumerate() {
            for index in 0..geom.bucket_size {
                let set = cur
                    .map(|n| n.slots[index as usize].clone())
                    .unwrap_or_default();
                out.push((SlotId::new(*node_id, index), set));
            }
            if level < nodes.len() - 1 {
                let child_id = nodes[level + 1];
                cur = cur.and_then(|n| {
                    if child_id % 2 == 0 {
                        n.left.as_deref()
                    } else {
                        n.right.as_deref()
                    }
                });
            }
        }
        out
    }

    pub fn stashes(&self) -> impl Iterator<Item = &Stash> {
        self.stashes.values().map(|s| s.as_ref())
    }

    pub fn stash_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.stashes.keys().copied()
    }

    pub fn stash_count(&self) -> usize {
        self.stashes.len()
    }

    pub fn history(&self) -> &[Arc<HistoryEntry>] {
        &self.history
    }

    /// Highest history index present, or 0 for an empty history.
    pub fn max_hidx(&self) -> u64 {
        self.history.last().map(|e| e.hidx).unwrap_or(0)
    }

    pub fn append_history(&mut self, map: PathMap) {
        self.next_hidx += 1;
        self.history.push(Arc::new(HistoryEntry {
            hidx: self.next_hidx,
            map,
        }));
    }

    /// Applies an eviction: along the path to `leaf`, every slot drops the
    /// versions the evicting client saw in its `snapshot` and gains the
    /// client's new content; the snapshotted stashes are replaced by the new
    /// one; the path map joins the history (or, with `compacted`, replaces
    /// the history prefix the client consolidated).
    pub fn apply_evict(
        &mut self,
        geom: &TreeGeometry,
        leaf: u32,
        snapshot: &OramState,
        new_path: &[(SlotId, Block)],
        new_stash: Stash,
        path_map: PathMap,
        compacted: Option<PositionMap>,
    ) {
        let snapshot_path = snapshot.path_versions(geom, leaf);
        let current_path = self.path_versions(geom, leaf);
        let mut new_by_slot: BTreeMap<SlotId, &Block> = BTreeMap::new();
        for (slot, block) in new_path {
            new_by_slot.insert(*slot, block);
        }
        let mut merged = Vec::with_capacity(current_path.len());
        for ((slot, mut cur_set), (snap_slot, snap_set)) in
            current_path.into_iter().zip(snapshot_path)
        {
            debug_assert_eq!(slot, snap_slot);
            remove_versions(&mut cur_set, &snap_set);
            if let Some(block) = new_by_slot.get(&slot) {
                insert_version(&mut cur_set, (*block).clone());
            }
            merged.push(cur_set);
        }
        self.rebuild_path(geom, leaf, merged);

        for id in snapshot.stashes.keys() {
            self.stashes.remove(id);
        }
        self.next_stash_id += 1;
        self.stashes.insert(self.next_stash_id, Arc::new(new_stash));

        match compacted {
            None => self.append_history(path_map),
            Some(pm) => {
                // Keep only the entries the client had not consolidated;
                // everything older is subsumed by the client's view.
                let cutoff = snapshot.max_hidx();
                self.history.retain(|e| e.hidx > cutoff);
                self.append_history(PathMap::from_position_map(path_map.seq, &pm));
            }
        }
    }

    fn rebuild_path(&mut self, geom: &TreeGeometry, leaf: u32, slot_sets: Vec<Vec<Block>>) {
        let nodes = geom.path_nodes(leaf).expect("leaf validated by caller");
        let z = geom.bucket_size as usize;
        let mut per_node: Vec<Vec<Vec<Block>>> = slot_sets
            .chunks(z)
            .map(|chunk| chunk.to_vec())
            .collect();
        debug_assert_eq!(per_node.len(), nodes.len());
        let root = self.root.take();
        self.root = Some(Self::rebuild_rec(root, geom, &nodes, 0, &mut per_node));
    }

    fn rebuild_rec(
        node: Option<Arc<TreeNode>>,
        geom: &TreeGeometry,
        nodes: &[u32],
        level: usize,
        per_node: &mut Vec<Vec<Vec<Block>>>,
    ) -> Arc<TreeNode> {
        let mut fresh = match node {
            Some(arc) => TreeNode {
                slots: Vec::new(),
                left: arc.left.clone(),
                right: arc.right.clone(),
            },
            None => TreeNode::empty(geom.bucket_size),
        };
        fresh.slots = std::mem::take(&mut per_node[level]);
        if level + 1 < nodes.len() {
            let child_id = nodes[level + 1];
            let go_left = child_id % 2 == 0;
            let sub = if go_left { fresh.left.take() } else { fresh.right.take() };
            let rebuilt = Self::rebuild_rec(sub, geom, nodes, level + 1, per_node);
            if go_left {
                fresh.left = Some(rebuilt);
            } else {
                fresh.right = Some(rebuilt);
            }
        }
        Arc::new(fresh)
    }

    /// Folds the entire history into a fresh position map.
    pub fn consolidated(&self, block_count: u32) -> PositionMap {
        let mut pm = PositionMap::fresh(block_count);
        for entry in &self.history {
            pm.fold_path_map(&entry.map);
        }
        pm
    }

    /// Finds the block version a position-map entry names, wherever it
    /// lives. Returns `None` if the named version is not retrievable, which
    /// would violate state preservation.
    pub fn lookup_version(
        &self,
        geom: &TreeGeometry,
        addr: u32,
        entry: super::geometry::PmEntry,
    ) -> Option<Block> {
        if entry.ts.is_sentinel() {
            return None;
        }
        match entry.loc {
            super::geometry::Location::Stash => self
                .stashes
                .values()
                .flat_map(|s| s.blocks())
                .find(|b| b.addr == addr && b.ts == entry.ts)
                .cloned(),
            super::geometry::Location::Slot(slot) => {
                let node = self.node_ref(geom, slot.node)?;
                node.slots[slot.index as usize]
                    .iter()
                    .find(|b| b.addr == addr && b.ts == entry.ts)
                    .cloned()
            }
        }
    }

    /// Occupied slots over the whole tree, in slot order. Heavyweight; used
    /// by serialization and state sweeps.
    pub fn all_occupied_slots(&self, geom: &TreeGeometry) -> Vec<(SlotId, Vec<Block>)> {
        let mut out = Vec::new();
        for node_id in 1..=geom.node_count() {
            if let Some(node) = self.node_ref(geom, node_id) {
                for (index, set) in node.slots.iter().enumerate() {
                    if !set.is_empty() {
                        out.push((SlotId::new(node_id, index as u32), set.clone()));
                    }
                }
            }
        }
        out
    }

    pub fn stash_entries(&self) -> impl Iterator<Item = (u64, &Stash)> {
        self.stashes.iter().map(|(id, s)| (*id, s.as_ref()))
    }
}

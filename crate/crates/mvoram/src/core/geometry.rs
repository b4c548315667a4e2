//! Binary-tree geometry: node numbering, slots, and path arithmetic.
//!
//! Nodes use 1-based heap order: the root is node 1 and node `k` has
//! children `2k` and `2k+1`, so level `d` occupies the index range
//! `[2^d, 2^(d+1))`. Leaves are numbered `0..2^L` and leaf `l` sits at node
//! `2^L + l`.

use thiserror::Error;

use super::timestamp::Timestamp;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("node index {0} out of range for tree of height {1}")]
    InvalidNode(u32, u32),
    #[error("slot index {0} out of range for bucket size {1}")]
    InvalidSlotIndex(u32, u32),
    #[error("leaf {0} out of range for tree of height {1}")]
    InvalidLeaf(u32, u32),
    #[error("block count {requested} exceeds tree capacity {capacity}")]
    CapacityExceeded { requested: u32, capacity: u64 },
}

/// Static shape of the ORAM: tree height, bucket size, payload size, and the
/// number of addressable blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeGeometry {
    /// Tree height `L`; the tree has `L + 1` levels and `2^L` leaves.
    pub height: u32,
    /// Blocks per bucket (`Z`).
    pub bucket_size: u32,
    /// Exact payload size of every real block, in bytes.
    pub block_size: usize,
    /// Number of addressable blocks (`N`); addresses are `0..N`.
    pub block_count: u32,
}

impl TreeGeometry {
    pub fn new(
        height: u32,
        bucket_size: u32,
        block_size: usize,
        block_count: u32,
    ) -> Result<Self, GeometryError> {
        assert!(height >= 1 && height <= 30, "height out of supported range");
        assert!(bucket_size >= 1, "bucket size must be positive");
        let geom = TreeGeometry {
            height,
            bucket_size,
            block_size,
            block_count,
        };
        if u64::from(block_count) > geom.capacity() {
            return Err(GeometryError::CapacityExceeded {
                requested: block_count,
                capacity: geom.capacity(),
            });
        }
        Ok(geom)
    }

    /// Geometry with the conventional block count `N = 2^(L+1) - 1`, one
    /// block per tree node.
    pub fn with_default_count(height: u32, bucket_size: u32, block_size: usize) -> Self {
        let n = (1u32 << (height + 1)) - 1;
        TreeGeometry::new(height, bucket_size, block_size, n).expect("one block per node fits")
    }

    pub fn leaf_count(&self) -> u32 {
        1 << self.height
    }

    pub fn node_count(&self) -> u32 {
        (1 << (self.height + 1)) - 1
    }

    /// Total slot capacity `Z * (2^(L+1) - 1)`.
    pub fn capacity(&self) -> u64 {
        u64::from(self.bucket_size) * u64::from(self.node_count())
    }

    /// Level of `node` (root = level 0).
    pub fn level_of(&self, node: u32) -> Result<u32, GeometryError> {
        if node == 0 || node >= 1 << (self.height + 1) {
            return Err(GeometryError::InvalidNode(node, self.height));
        }
        Ok(node.ilog2())
    }

    pub fn leaf_node(&self, leaf: u32) -> Result<u32, GeometryError> {
        if leaf >= self.leaf_count() {
            return Err(GeometryError::InvalidLeaf(leaf, self.height));
        }
        Ok(self.leaf_count() + leaf)
    }

    /// Nodes on the path from the root to `leaf`, root first.
    pub fn path_nodes(&self, leaf: u32) -> Result<Vec<u32>, GeometryError> {
        let mut node = self.leaf_node(leaf)?;
        let mut nodes = Vec::with_capacity(self.height as usize + 1);
        while node >= 1 {
            nodes.push(node);
            node >>= 1;
        }
        nodes.reverse();
        Ok(nodes)
    }

    /// All `(L + 1) * Z` slots on the path to `leaf`, in slot order
    /// (root-most first).
    pub fn path_slots(&self, leaf: u32) -> Result<Vec<SlotId>, GeometryError> {
        let nodes = self.path_nodes(leaf)?;
        let mut slots = Vec::with_capacity(nodes.len() * self.bucket_size as usize);
        for node in nodes {
            for index in 0..self.bucket_size {
                slots.push(SlotId { node, index });
            }
        }
        Ok(slots)
    }

    /// Whether `node` lies on the root-to-`leaf` path.
    pub fn node_on_path(&self, node: u32, leaf: u32) -> Result<bool, GeometryError> {
        let d = self.level_of(node)?;
        let leaf_node = self.leaf_node(leaf)?;
        Ok(leaf_node >> (self.height - d) == node)
    }

    /// Range of leaf ids whose paths pass through `node`.
    pub fn leaves_under(&self, node: u32) -> Result<std::ops::Range<u32>, GeometryError> {
        let d = self.level_of(node)?;
        let span = self.height - d;
        let first = (node << span) - self.leaf_count();
        Ok(first..first + (1 << span))
    }

    pub fn validate_slot(&self, slot: SlotId) -> Result<(), GeometryError> {
        self.level_of(slot.node)?;
        if slot.index >= self.bucket_size {
            return Err(GeometryError::InvalidSlotIndex(slot.index, self.bucket_size));
        }
        Ok(())
    }
}

/// One block position in the tree: a node plus an index within its bucket.
///
/// The derived order is `(node, index)` lexicographic, which coincides with
/// `(level, node, index)` because heap indices are monotone in level. The
/// "lowest" slot is therefore the one closest to the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId {
    pub node: u32,
    pub index: u32,
}

impl SlotId {
    pub fn new(node: u32, index: u32) -> Self {
        SlotId { node, index }
    }
}

/// Where a block lives: a tree slot or the stash. The stash compares below
/// every slot, mirroring its role as the root-most position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Location {
    Stash,
    Slot(SlotId),
}

impl Location {
    pub fn slot(self) -> Option<SlotId> {
        match self {
            Location::Stash => None,
            Location::Slot(s) => Some(s),
        }
    }

    pub fn is_stash(self) -> bool {
        matches!(self, Location::Stash)
    }
}

/// A position-map cell: the block's location and the timestamp it had when
/// the location was recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PmEntry {
    pub loc: Location,
    pub ts: Timestamp,
}

impl PmEntry {
    pub const FRESH: PmEntry = PmEntry {
        loc: Location::Stash,
        ts: Timestamp::SENTINEL,
    };
}

/// Leaves whose paths pass through `loc`: every leaf for the stash, the
/// subtree range for a tree slot.
pub fn paths_through(loc: Location, geom: &TreeGeometry) -> Result<std::ops::Range<u32>, GeometryError> {
    match loc {
        Location::Stash => Ok(0..geom.leaf_count()),
        Location::Slot(slot) => {
            geom.validate_slot(slot)?;
            geom.leaves_under(slot.node)
        }
    }
}

/// A leaf sampled uniformly from the paths that pass through `loc`.
pub fn random_path_through<R: rand::Rng + ?Sized>(
    loc: Location,
    geom: &TreeGeometry,
    rng: &mut R,
) -> Result<u32, GeometryError> {
    let range = paths_through(loc, geom)?;
    Ok(rng.gen_range(range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn geom(height: u32) -> TreeGeometry {
        TreeGeometry::with_default_count(height, 4, 16)
    }

    #[test]
    fn root_covers_all_leaves() {
        let g = geom(3);
        let r = paths_through(Location::Slot(SlotId::new(1, 0)), &g).unwrap();
        assert_eq!(r, 0..8);
    }

    #[test]
    fn leaf_slot_covers_itself() {
        let g = geom(3);
        let node = g.leaf_node(5).unwrap();
        let r = paths_through(Location::Slot(SlotId::new(node, 2)), &g).unwrap();
        assert_eq!(r, 5..6);
    }

    #[test]
    fn level_one_node_covers_left_half() {
        // Independent oracle: enumerate the ancestor relation over all leaves.
        let g = geom(3);
        let mut expected = Vec::new();
        for leaf in 0..g.leaf_count() {
            if g.path_nodes(leaf).unwrap().contains(&2) {
                expected.push(leaf);
            }
        }
        assert_eq!(expected, vec![0, 1, 2, 3]);
        let r = paths_through(Location::Slot(SlotId::new(2, 0)), &g).unwrap();
        assert_eq!(r.collect::<Vec<_>>(), expected);
    }

    #[test]
    fn invalid_node_rejected() {
        let g = geom(3);
        assert!(paths_through(Location::Slot(SlotId::new(0, 0)), &g).is_err());
        assert!(paths_through(Location::Slot(SlotId::new(16, 0)), &g).is_err());
    }

    #[test]
    fn cardinality_is_two_to_the_remaining_height() {
        let g = geom(5);
        for node in 1..g.node_count() + 1 {
            let d = g.level_of(node).unwrap();
            let r = g.leaves_under(node).unwrap();
            assert_eq!(r.len() as u32, 1 << (g.height - d));
        }
    }

    #[test]
    fn slot_order_respects_levels() {
        let g = geom(4);
        let mut slots = Vec::new();
        for node in 1..=g.node_count() {
            for idx in 0..g.bucket_size {
                slots.push(SlotId::new(node, idx));
            }
        }
        let mut sorted = slots.clone();
        sorted.sort();
        assert_eq!(slots, sorted);
        for w in sorted.windows(2) {
            let da = g.level_of(w[0].node).unwrap();
            let db = g.level_of(w[1].node).unwrap();
            assert!(da <= db);
        }
    }

    #[test]
    fn leaf_level_slot_always_returns_its_leaf() {
        let g = geom(3);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let node = g.leaf_node(6).unwrap();
        for _ in 0..32 {
            let l = random_path_through(Location::Slot(SlotId::new(node, 1)), &g, &mut rng).unwrap();
            assert_eq!(l, 6);
        }
    }

    // Chi-square style check: each leaf frequency within 3 binomial sigmas.
    fn assert_uniform_leaves(loc: Location, seed: u64) {
        let g = geom(3);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let draws = 100_000usize;
        let mut counts = vec![0usize; g.leaf_count() as usize];
        for _ in 0..draws {
            counts[random_path_through(loc, &g, &mut rng).unwrap() as usize] += 1;
        }
        let p = 1.0 / g.leaf_count() as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (leaf, &count) in counts.iter().enumerate() {
            let dev = (count as f64 - mean).abs();
            assert!(
                dev <= 3.0 * sigma,
                "leaf {leaf}: count {count} deviates {dev:.1} > 3 sigma {:.1}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn root_slot_samples_uniformly() {
        assert_uniform_leaves(Location::Slot(SlotId::new(1, 3)), 42);
    }

    #[test]
    fn stash_samples_uniformly() {
        assert_uniform_leaves(Location::Stash, 43);
    }

    #[test]
    fn capacity_check() {
        assert!(TreeGeometry::new(3, 1, 8, 15).is_ok());
        assert!(TreeGeometry::new(3, 1, 8, 16).is_err());
    }
}

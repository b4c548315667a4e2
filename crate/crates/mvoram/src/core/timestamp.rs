//! Logical block timestamps.
//!
//! Every block carries a triple of sequence numbers: the last access that
//! wrote it, the last access that read or wrote it, and the last access that
//! moved it between slots. Timestamps are compared lexicographically, which
//! gives the total order used to merge concurrent versions: a newer write
//! dominates any read, and a newer read dominates any move.

/// A logical block timestamp `(version, access, moved)`.
///
/// `version` is the sequence number of the last write, `access` of the last
/// read-or-write, and `moved` of the last relocation. The derived `Ord` is
/// lexicographic over the fields in that order, which is exactly the merge
/// rule: higher `version` wins, then higher `access`, then higher `moved`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp {
    pub version: i64,
    pub access: i64,
    pub moved: i64,
}

impl Timestamp {
    /// The sentinel `(-1, -1, -1)`, strictly below every timestamp the
    /// protocol produces. Fresh position-map entries start here.
    pub const SENTINEL: Timestamp = Timestamp {
        version: -1,
        access: -1,
        moved: -1,
    };

    pub fn new(version: i64, access: i64, moved: i64) -> Self {
        Timestamp {
            version,
            access,
            moved,
        }
    }

    /// Timestamp of a block written at `seq`: all three components move.
    pub fn written(seq: u64) -> Self {
        let s = seq as i64;
        Timestamp::new(s, s, s)
    }

    /// Timestamp of a block read at `seq`: keeps its version, refreshes the
    /// access and move components.
    pub fn read_at(version: i64, seq: u64) -> Self {
        Timestamp::new(version, seq as i64, seq as i64)
    }

    /// Timestamp of a block relocated at `seq` without being accessed.
    pub fn moved_at(self, seq: u64) -> Self {
        Timestamp::new(self.version, self.access, seq as i64)
    }

    pub fn is_sentinel(self) -> bool {
        self == Timestamp::SENTINEL
    }
}

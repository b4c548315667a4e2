//! Canonical byte serialization.
//!
//! Replicas compare replies byte-for-byte, so every encoder here is
//! deterministic: little-endian fixed-width integers, length-prefixed
//! collections, and sorted iteration orders (addresses ascending, slots in
//! slot order).

use thiserror::Error;

use super::block::Block;
use super::geometry::{Location, SlotId};
use super::pmap::{PathMap, PositionMap, Stash};
use super::timestamp::Timestamp;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("invalid tag {tag} for {what}")]
    InvalidTag { tag: u8, what: &'static str },
    #[error("trailing {0} bytes after message")]
    Trailing(usize),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn raw(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn timestamp(&mut self, ts: Timestamp) {
        self.i64(ts.version);
        self.i64(ts.access);
        self.i64(ts.moved);
    }

    pub fn slot(&mut self, s: SlotId) {
        self.u32(s.node);
        self.u32(s.index);
    }

    pub fn location(&mut self, loc: Location) {
        match loc {
            Location::Stash => self.u8(0),
            Location::Slot(s) => {
                self.u8(1);
                self.slot(s);
            }
        }
    }

    pub fn block(&mut self, b: &Block) {
        self.u32(b.addr);
        self.timestamp(b.ts);
        self.bytes(&b.data);
    }

    pub fn path_map(&mut self, m: &PathMap) {
        self.u64(m.seq);
        self.u32(m.len() as u32);
        for (addr, (loc, ts)) in m.iter() {
            self.u32(*addr);
            self.location(*loc);
            self.timestamp(*ts);
        }
    }

    pub fn stash(&mut self, s: &Stash) {
        self.u32(s.len() as u32);
        for b in s.blocks() {
            self.block(b);
        }
    }

    /// A multi-version path: every slot with its version set, slot order.
    pub fn path_versions(&mut self, path: &[(SlotId, Vec<Block>)]) {
        self.u32(path.len() as u32);
        for (slot, set) in path {
            self.slot(*slot);
            self.u32(set.len() as u32);
            for b in set {
                self.block(b);
            }
        }
    }

    pub fn position_map(&mut self, pm: &PositionMap) {
        self.u32(pm.len() as u32);
        for (_, e) in pm.iter() {
            self.location(e.loc);
            self.timestamp(e.ts);
        }
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(self) -> Result<(), WireError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(WireError::Trailing(self.remaining()))
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated {
                needed: n - self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub fn timestamp(&mut self) -> Result<Timestamp, WireError> {
        Ok(Timestamp::new(self.i64()?, self.i64()?, self.i64()?))
    }

    pub fn slot(&mut self) -> Result<SlotId, WireError> {
        Ok(SlotId::new(self.u32()?, self.u32()?))
    }

    pub fn location(&mut self) -> Result<Location, WireError> {
        match self.u8()? {
            0 => Ok(Location::Stash),
            1 => Ok(Location::Slot(self.slot()?)),
            tag => Err(WireError::InvalidTag {
                tag,
                what: "location",
            }),
        }
    }

    pub fn block(&mut self) -> Result<Block, WireError> {
        let addr = self.u32()?;
        let ts = self.timestamp()?;
        let data = self.bytes()?;
        Ok(Block::new(addr, data, ts))
    }

    pub fn path_map(&mut self) -> Result<PathMap, WireError> {
        let seq = self.u64()?;
        let count = self.u32()?;
        let mut map = PathMap::new(seq);
        for _ in 0..count {
            let addr = self.u32()?;
            let loc = self.location()?;
            let ts = self.timestamp()?;
            map.record(addr, loc, ts);
        }
        Ok(map)
    }

    pub fn stash(&mut self) -> Result<Stash, WireError> {
        let count = self.u32()?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            blocks.push(self.block()?);
        }
        Ok(Stash::new(blocks))
    }

    pub fn path_versions(&mut self) -> Result<Vec<(SlotId, Vec<Block>)>, WireError> {
        let slots = self.u32()?;
        let mut out = Vec::with_capacity(slots as usize);
        for _ in 0..slots {
            let slot = self.slot()?;
            let versions = self.u32()?;
            let mut set = Vec::with_capacity(versions as usize);
            for _ in 0..versions {
                set.push(self.block()?);
            }
            out.push((slot, set));
        }
        Ok(out)
    }

    pub fn position_map_into(&mut self, block_count: u32) -> Result<PositionMap, WireError> {
        let count = self.u32()?;
        if count != block_count {
            return Err(WireError::InvalidTag {
                tag: 0,
                what: "position map length",
            });
        }
        let mut pm = PositionMap::fresh(block_count);
        for addr in 0..count {
            let loc = self.location()?;
            let ts = self.timestamp()?;
            pm.fold_update(addr, loc, ts);
        }
        Ok(pm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_ts() -> impl Strategy<Value = Timestamp> {
        (-1i64..1000, -1i64..1000, -1i64..1000).prop_map(|(v, a, s)| Timestamp::new(v, a, s))
    }

    fn arb_block() -> impl Strategy<Value = Block> {
        (0u32..64, proptest::collection::vec(any::<u8>(), 0..24), arb_ts())
            .prop_map(|(addr, data, ts)| Block::new(addr, data, ts))
    }

    proptest! {
        #[test]
        fn block_round_trip(b in arb_block()) {
            let mut w = Writer::new();
            w.block(&b);
            let bytes = w.into_bytes();
            let mut r = Reader::new(&bytes);
            let back = r.block().unwrap();
            r.finish().unwrap();
            prop_assert_eq!(b, back);
        }

        #[test]
        fn path_map_round_trip(
            seq in 0u64..100,
            entries in proptest::collection::btree_map(0u32..32, (any::<bool>(), arb_ts()), 0..8)
        ) {
            let mut m = PathMap::new(seq);
            for (addr, (stash, ts)) in &entries {
                let loc = if *stash { Location::Stash } else { Location::Slot(SlotId::new(1 + addr, 0)) };
                m.record(*addr, loc, *ts);
            }
            let mut w = Writer::new();
            w.path_map(&m);
            let bytes = w.into_bytes();
            let mut r = Reader::new(&bytes);
            let back = r.path_map().unwrap();
            r.finish().unwrap();
            prop_assert_eq!(m, back);
        }
    }

    #[test]
    fn truncation_detected() {
        let mut w = Writer::new();
        w.block(&Block::new(1, vec![1, 2, 3], Timestamp::written(4)));
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes[..bytes.len() - 1]);
        assert!(r.block().is_err());
    }
}

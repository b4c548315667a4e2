use super::timestamp::Timestamp;

/// An addressed data block: payload plus logical timestamp.
///
/// Two blocks with the same `(addr, ts)` are the same version; honest
/// clients never produce distinct payloads under one version identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub addr: u32,
    pub data: Vec<u8>,
    pub ts: Timestamp,
}

impl Block {
    pub fn new(addr: u32, data: Vec<u8>, ts: Timestamp) -> Self {
        Block { addr, data, ts }
    }

    /// The all-zero payload returned for addresses that were never written,
    /// modelled as an initial write at sequence number 0.
    pub fn initial(addr: u32, block_size: usize) -> Self {
        Block {
            addr,
            data: vec![0; block_size],
            ts: Timestamp::written(0),
        }
    }

    /// Version identity used by the multi-version tree's set semantics.
    pub fn version_key(&self) -> (u32, Timestamp) {
        (self.addr, self.ts)
    }
}

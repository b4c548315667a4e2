//! The deterministic ORAM state machine.
//!
//! Replicas run one instance each and must stay byte-identical, so every
//! operation is a pure function of the current state and the request: no
//! randomness, no clocks, deterministic iteration orders throughout.
//! Rejections (open context, admission) are ordinary replies, never waits.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::core::state::HistoryEntry;
use crate::core::wire::{Reader, WireError, Writer};
use crate::core::{Block, OramState, PathMap, PositionMap, SlotId, Stash, TreeGeometry};

pub type ClientId = u32;

/// Protocol mode: the strong variant pads every access with dummy rounds
/// and tracks in-flight target addresses in a registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Basic,
    Strong { sigma: u32 },
}

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub geom: TreeGeometry,
    pub mode: Mode,
    /// Open-context admission bound; a `getPM` beyond it is answered with a
    /// retriable busy status instead of blocking.
    pub c_max: usize,
    /// Clear a context once this many sequence numbers pass without its
    /// eviction. Off by default: a crashed client's context stays open.
    pub reclaim_after: Option<u64>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SetupError {
    #[error("initial address {0} out of range")]
    AddressOutOfRange(u32),
    #[error("duplicate initial address {0}")]
    DuplicateAddress(u32),
    #[error("initial payload for {0} is {1} bytes, expected {2}")]
    BadPayloadSize(u32, usize, usize),
}

/// Why a request was rejected. All rejections are deterministic functions
/// of the state, so replicas agree on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusyReason {
    /// The client already has an access in flight.
    ContextOpen,
    /// `c_max` accesses are already in flight.
    AdmissionFull,
    /// `getPS`/`evict` without a prior `getPM`.
    NoContext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    GetPm {
        client: ClientId,
        /// Strong mode: opaque tag of the address this access will target.
        addr_tag: Option<[u8; 16]>,
    },
    GetPs {
        client: ClientId,
        leaf: u32,
    },
    Evict {
        client: ClientId,
        body: EvictBody,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictBody {
    pub leaf: u32,
    pub path_map: PathMap,
    /// Occupied slots of the rewritten path; absent slots are empty.
    pub new_path: Vec<(SlotId, Block)>,
    pub new_stash: Stash,
    /// Every gamma-th access ships the client's consolidated view so the
    /// server can compact its history.
    pub compacted: Option<PositionMap>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub client: ClientId,
    pub addr_tag: [u8; 16],
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    GetPm {
        seq: u64,
        history: Vec<(u64, PathMap)>,
        registry: Option<Vec<RegistryEntry>>,
    },
    GetPs {
        path: Vec<(SlotId, Vec<Block>)>,
        stashes: Vec<Stash>,
    },
    EvictAck,
    Busy(BusyReason),
}

#[derive(Debug, Clone)]
struct Context {
    snapshot: OramState,
    seq: u64,
}

#[derive(Debug, Clone)]
pub struct StateMachine {
    config: ServerConfig,
    next_seq: u64,
    state: OramState,
    contexts: BTreeMap<ClientId, Context>,
    registry: BTreeMap<ClientId, ([u8; 16], u32)>,
    /// Highest history index already sent to each client. `getPM` replies
    /// carry only newer entries; compaction keeps this sound because the
    /// compacted summary always receives a fresh index.
    last_sent: BTreeMap<ClientId, u64>,
}

impl StateMachine {
    pub fn setup(
        config: ServerConfig,
        initial: &[(u32, Vec<u8>)],
    ) -> Result<StateMachine, SetupError> {
        let geom = config.geom;
        let mut seen = std::collections::BTreeSet::new();
        for (addr, data) in initial {
            if *addr >= geom.block_count {
                return Err(SetupError::AddressOutOfRange(*addr));
            }
            if !seen.insert(*addr) {
                return Err(SetupError::DuplicateAddress(*addr));
            }
            if data.len() != geom.block_size {
                return Err(SetupError::BadPayloadSize(*addr, data.len(), geom.block_size));
            }
        }
        let (state, _) = OramState::with_initial(&geom, initial);
        Ok(StateMachine {
            config,
            next_seq: 1,
            state,
            contexts: BTreeMap::new(),
            registry: BTreeMap::new(),
            last_sent: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn state(&self) -> &OramState {
        &self.state
    }

    pub fn open_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Executes one totally ordered operation.
    pub fn apply(&mut self, request: &Request) -> Reply {
        match request {
            Request::GetPm { client, addr_tag } => self.get_pm(*client, *addr_tag),
            Request::GetPs { client, leaf } => self.get_ps(*client, *leaf),
            Request::Evict { client, body } => self.evict(*client, body),
        }
    }

    fn reclaim_stale_contexts(&mut self) {
        if let Some(k) = self.config.reclaim_after {
            let cutoff = self.next_seq.saturating_sub(k);
            self.contexts.retain(|_, ctx| ctx.seq >= cutoff);
        }
    }

    fn get_pm(&mut self, client: ClientId, addr_tag: Option<[u8; 16]>) -> Reply {
        self.reclaim_stale_contexts();
        if self.contexts.contains_key(&client) {
            return Reply::Busy(BusyReason::ContextOpen);
        }
        if self.contexts.len() >= self.config.c_max {
            return Reply::Busy(BusyReason::AdmissionFull);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.contexts.insert(
            client,
            Context {
                snapshot: self.state.clone(),
                seq,
            },
        );
        let registry = match self.config.mode {
            Mode::Basic => None,
            Mode::Strong { .. } => {
                let tag = addr_tag.unwrap_or([0; 16]);
                let entry = self.registry.entry(client).or_insert((tag, 0));
                *entry = (tag, entry.1 + 1);
                Some(
                    self.registry
                        .iter()
                        .map(|(c, (t, n))| RegistryEntry {
                            client: *c,
                            addr_tag: *t,
                            count: *n,
                        })
                        .collect(),
                )
            }
        };
        let already_sent = self.last_sent.get(&client).copied().unwrap_or(0);
        let history: Vec<(u64, PathMap)> = self
            .state
            .history()
            .iter()
            .filter(|e| e.hidx > already_sent)
            .map(|e| (e.hidx, e.map.clone()))
            .collect();
        self.last_sent.insert(client, self.state.max_hidx());
        Reply::GetPm {
            seq,
            history,
            registry,
        }
    }

    fn get_ps(&mut self, client: ClientId, leaf: u32) -> Reply {
        let Some(ctx) = self.contexts.get(&client) else {
            return Reply::Busy(BusyReason::NoContext);
        };
        if leaf >= self.config.geom.leaf_count() {
            return Reply::Busy(BusyReason::NoContext);
        }
        let path = ctx.snapshot.path_versions(&self.config.geom, leaf);
        let stashes = ctx.snapshot.stashes().cloned().collect();
        Reply::GetPs { path, stashes }
    }

    fn evict(&mut self, client: ClientId, body: &EvictBody) -> Reply {
        let Some(ctx) = self.contexts.remove(&client) else {
            return Reply::Busy(BusyReason::NoContext);
        };
        if let Mode::Strong { sigma } = self.config.mode {
            if let Some((_, count)) = self.registry.get(&client).copied() {
                if count == sigma + 1 {
                    self.registry.remove(&client);
                }
            }
        }
        self.state.apply_evict(
            &self.config.geom,
            body.leaf,
            &ctx.snapshot,
            &body.new_path,
            body.new_stash.clone(),
            body.path_map.clone(),
            body.compacted.clone(),
        );
        Reply::EvictAck
    }

    /// Folds the whole path-map history into a position map.
    pub fn consolidated_view(&self) -> PositionMap {
        self.state.consolidated(self.config.geom.block_count)
    }

    /// Canonical serialization of the complete machine state, contexts and
    /// registry included.
    pub fn serialize_state(&self) -> Vec<u8> {
        let mut w = Writer::new();
        serialize_oram_state(&mut w, &self.state, &self.config.geom);
        w.u64(self.next_seq);
        w.u32(self.contexts.len() as u32);
        for (client, ctx) in &self.contexts {
            w.u32(*client);
            w.u64(ctx.seq);
            serialize_oram_state(&mut w, &ctx.snapshot, &self.config.geom);
        }
        w.u32(self.registry.len() as u32);
        for (client, (tag, count)) in &self.registry {
            w.u32(*client);
            w.raw(tag);
            w.u32(*count);
        }
        w.u32(self.last_sent.len() as u32);
        for (client, hidx) in &self.last_sent {
            w.u32(*client);
            w.u64(*hidx);
        }
        w.into_bytes()
    }

    /// Digest of the serialized state, for cross-replica divergence checks.
    pub fn state_hash(&self) -> [u8; 32] {
        Sha256::digest(self.serialize_state()).into()
    }
}

fn serialize_oram_state(w: &mut Writer, state: &OramState, geom: &TreeGeometry) {
    let occupied = state.all_occupied_slots(geom);
    w.u32(occupied.len() as u32);
    for (slot, set) in occupied {
        w.slot(slot);
        w.u32(set.len() as u32);
        for b in &set {
            w.block(b);
        }
    }
    let stashes: Vec<_> = state.stash_entries().collect();
    w.u32(stashes.len() as u32);
    for (id, stash) in stashes {
        w.u64(id);
        w.stash(stash);
    }
    let history: &[std::sync::Arc<HistoryEntry>] = state.history();
    w.u32(history.len() as u32);
    for entry in history {
        w.u64(entry.hidx);
        w.path_map(&entry.map);
    }
}

// Wire codecs for requests and replies. Requests are what clients seal and
// send; replies are what replicas seal, hash, and return.

pub fn encode_request(req: &Request) -> Vec<u8> {
    let mut w = Writer::new();
    match req {
        Request::GetPm { client, addr_tag } => {
            w.u8(1);
            w.u32(*client);
            match addr_tag {
                None => w.u8(0),
                Some(tag) => {
                    w.u8(1);
                    w.raw(tag);
                }
            }
        }
        Request::GetPs { client, leaf } => {
            w.u8(2);
            w.u32(*client);
            w.u32(*leaf);
        }
        Request::Evict { client, body } => {
            w.u8(3);
            w.u32(*client);
            w.u32(body.leaf);
            w.path_map(&body.path_map);
            w.u32(body.new_path.len() as u32);
            for (slot, block) in &body.new_path {
                w.slot(*slot);
                w.block(block);
            }
            w.stash(&body.new_stash);
            match &body.compacted {
                None => w.u8(0),
                Some(pm) => {
                    w.u8(1);
                    w.position_map(pm);
                }
            }
        }
    }
    w.into_bytes()
}

pub fn decode_request(bytes: &[u8], geom: &TreeGeometry) -> Result<Request, WireError> {
    let mut r = Reader::new(bytes);
    let req = match r.u8()? {
        1 => {
            let client = r.u32()?;
            let addr_tag = match r.u8()? {
                0 => None,
                1 => {
                    let mut tag = [0u8; 16];
                    for b in tag.iter_mut() {
                        *b = r.u8()?;
                    }
                    Some(tag)
                }
                tag => return Err(WireError::InvalidTag { tag, what: "addr tag" }),
            };
            Request::GetPm { client, addr_tag }
        }
        2 => Request::GetPs {
            client: r.u32()?,
            leaf: r.u32()?,
        },
        3 => {
            let client = r.u32()?;
            let leaf = r.u32()?;
            let path_map = r.path_map()?;
            let count = r.u32()?;
            let mut new_path = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let slot = r.slot()?;
                let block = r.block()?;
                new_path.push((slot, block));
            }
            let new_stash = r.stash()?;
            let compacted = match r.u8()? {
                0 => None,
                1 => Some(r.position_map_into(geom.block_count)?),
                tag => {
                    return Err(WireError::InvalidTag {
                        tag,
                        what: "compacted pm",
                    })
                }
            };
            Request::Evict {
                client,
                body: EvictBody {
                    leaf,
                    path_map,
                    new_path,
                    new_stash,
                    compacted,
                },
            }
        }
        tag => return Err(WireError::InvalidTag { tag, what: "request" }),
    };
    r.finish()?;
    Ok(req)
}

pub fn encode_reply(reply: &Reply) -> Vec<u8> {
    let mut w = Writer::new();
    match reply {
        Reply::GetPm {
            seq,
            history,
            registry,
        } => {
            w.u8(1);
            w.u64(*seq);
            w.u32(history.len() as u32);
            for (hidx, map) in history {
                w.u64(*hidx);
                w.path_map(map);
            }
            match registry {
                None => w.u8(0),
                Some(entries) => {
                    w.u8(1);
                    w.u32(entries.len() as u32);
                    for e in entries {
                        w.u32(e.client);
                        w.raw(&e.addr_tag);
                        w.u32(e.count);
                    }
                }
            }
        }
        Reply::GetPs { path, stashes } => {
            w.u8(2);
            w.path_versions(path);
            w.u32(stashes.len() as u32);
            for s in stashes {
                w.stash(s);
            }
        }
        Reply::EvictAck => w.u8(3),
        Reply::Busy(reason) => {
            w.u8(4);
            w.u8(match reason {
                BusyReason::ContextOpen => 0,
                BusyReason::AdmissionFull => 1,
                BusyReason::NoContext => 2,
            });
        }
    }
    w.into_bytes()
}

pub fn decode_reply(bytes: &[u8]) -> Result<Reply, WireError> {
    let mut r = Reader::new(bytes);
    let reply = match r.u8()? {
        1 => {
            let seq = r.u64()?;
            let count = r.u32()?;
            let mut history = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let hidx = r.u64()?;
                history.push((hidx, r.path_map()?));
            }
            let registry = match r.u8()? {
                0 => None,
                1 => {
                    let n = r.u32()?;
                    let mut entries = Vec::with_capacity(n as usize);
                    for _ in 0..n {
                        let client = r.u32()?;
                        let mut tag = [0u8; 16];
                        for b in tag.iter_mut() {
                            *b = r.u8()?;
                        }
                        entries.push(RegistryEntry {
                            client,
                            addr_tag: tag,
                            count: r.u32()?,
                        });
                    }
                    Some(entries)
                }
                tag => {
                    return Err(WireError::InvalidTag {
                        tag,
                        what: "registry",
                    })
                }
            };
            Reply::GetPm {
                seq,
                history,
                registry,
            }
        }
        2 => {
            let path = r.path_versions()?;
            let count = r.u32()?;
            let mut stashes = Vec::with_capacity(count as usize);
            for _ in 0..count {
                stashes.push(r.stash()?);
            }
            Reply::GetPs { path, stashes }
        }
        3 => Reply::EvictAck,
        4 => Reply::Busy(match r.u8()? {
            0 => BusyReason::ContextOpen,
            1 => BusyReason::AdmissionFull,
            2 => BusyReason::NoContext,
            tag => return Err(WireError::InvalidTag { tag, what: "busy" }),
        }),
        tag => return Err(WireError::InvalidTag { tag, what: "reply" }),
    };
    r.finish()?;
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Location, Timestamp};

    fn config(height: u32) -> ServerConfig {
        ServerConfig {
            geom: TreeGeometry::with_default_count(height, 2, 8),
            mode: Mode::Basic,
            c_max: 10,
            reclaim_after: None,
        }
    }

    fn get_pm(sm: &mut StateMachine, client: ClientId) -> (u64, Vec<(u64, PathMap)>) {
        match sm.apply(&Request::GetPm {
            client,
            addr_tag: None,
        }) {
            Reply::GetPm { seq, history, .. } => (seq, history),
            other => panic!("unexpected reply {other:?}"),
        }
    }

    fn get_ps(sm: &mut StateMachine, client: ClientId, leaf: u32) -> (Vec<(SlotId, Vec<Block>)>, Vec<Stash>) {
        match sm.apply(&Request::GetPs { client, leaf }) {
            Reply::GetPs { path, stashes } => (path, stashes),
            other => panic!("unexpected reply {other:?}"),
        }
    }

    fn empty_evict(client: ClientId, leaf: u32, seq: u64) -> Request {
        Request::Evict {
            client,
            body: EvictBody {
                leaf,
                path_map: PathMap::new(seq),
                new_path: Vec::new(),
                new_stash: Stash::empty(),
                compacted: None,
            },
        }
    }

    #[test]
    fn empty_setup() {
        let sm = StateMachine::setup(config(3), &[]).unwrap();
        assert_eq!(sm.state().stash_count(), 0);
        assert!(sm.state().history().is_empty());
        assert_eq!(sm.next_seq(), 1);
    }

    #[test]
    fn first_get_pm_returns_seq_one() {
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        let (seq, history) = get_pm(&mut sm, 0);
        assert_eq!(seq, 1);
        assert!(history.is_empty());
    }

    #[test]
    fn seq_increases_per_get_pm() {
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        let (a, _) = get_pm(&mut sm, 0);
        let (b, _) = get_pm(&mut sm, 1);
        assert_eq!(b, a + 1);
    }

    #[test]
    fn setup_rejects_bad_initial() {
        assert_eq!(
            StateMachine::setup(config(3), &[(1 << 20, vec![0; 8])]).unwrap_err(),
            SetupError::AddressOutOfRange(1 << 20)
        );
        assert_eq!(
            StateMachine::setup(config(3), &[(1, vec![0; 8]), (1, vec![1; 8])]).unwrap_err(),
            SetupError::DuplicateAddress(1)
        );
        assert!(matches!(
            StateMachine::setup(config(3), &[(1, vec![0; 4])]),
            Err(SetupError::BadPayloadSize(1, 4, 8))
        ));
    }

    #[test]
    fn initial_blocks_are_retrievable_via_consolidation() {
        let geom = TreeGeometry::with_default_count(3, 2, 8);
        let initial: Vec<(u32, Vec<u8>)> =
            (0..geom.block_count).map(|a| (a, vec![a as u8; 8])).collect();
        let sm = StateMachine::setup(
            ServerConfig {
                geom,
                ..config(3)
            },
            &initial,
        )
        .unwrap();
        let pm = sm.consolidated_view();
        for (addr, data) in &initial {
            let entry = pm.get(*addr);
            assert_eq!(entry.ts, Timestamp::written(0));
            let block = sm
                .state()
                .lookup_version(&geom, *addr, entry)
                .expect("initial block retrievable");
            assert_eq!(&block.data, data);
        }
    }

    #[test]
    fn get_ps_of_empty_tree_is_empty() {
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        get_pm(&mut sm, 0);
        let (path, stashes) = get_ps(&mut sm, 0, 5);
        assert_eq!(path.len(), 4 * 2);
        assert!(path.iter().all(|(_, set)| set.is_empty()));
        assert!(stashes.is_empty());
    }

    #[test]
    fn snapshot_isolated_from_later_evicts() {
        // A context stores the state as of its getPM; evicts by other
        // clients must not change what getPS returns for it.
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        get_pm(&mut sm, 0);
        let (before, _) = get_ps(&mut sm, 0, 2);

        let (seq1, _) = get_pm(&mut sm, 1);
        let block = Block::new(4, vec![9; 8], Timestamp::written(seq1));
        let slot = SlotId::new(1, 0);
        let mut m = PathMap::new(seq1);
        m.record(4, Location::Slot(slot), block.ts);
        sm.apply(&Request::Evict {
            client: 1,
            body: EvictBody {
                leaf: 2,
                path_map: m,
                new_path: vec![(slot, block)],
                new_stash: Stash::empty(),
                compacted: None,
            },
        });

        let (after, _) = get_ps(&mut sm, 0, 2);
        assert_eq!(before, after);

        // A fresh snapshot does see the eviction.
        get_pm(&mut sm, 2);
        let (fresh, _) = get_ps(&mut sm, 2, 2);
        assert_ne!(before, fresh);
    }

    #[test]
    fn same_snapshot_same_path() {
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        get_pm(&mut sm, 0);
        get_pm(&mut sm, 1);
        let (a, _) = get_ps(&mut sm, 0, 3);
        let (b, _) = get_ps(&mut sm, 1, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn get_ps_requires_context() {
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        assert_eq!(
            sm.apply(&Request::GetPs { client: 7, leaf: 0 }),
            Reply::Busy(BusyReason::NoContext)
        );
    }

    #[test]
    fn one_access_at_a_time_per_client() {
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        get_pm(&mut sm, 0);
        assert_eq!(
            sm.apply(&Request::GetPm {
                client: 0,
                addr_tag: None
            }),
            Reply::Busy(BusyReason::ContextOpen)
        );
    }

    #[test]
    fn admission_bound_enforced() {
        let mut sm = StateMachine::setup(
            ServerConfig {
                c_max: 2,
                ..config(3)
            },
            &[],
        )
        .unwrap();
        get_pm(&mut sm, 0);
        get_pm(&mut sm, 1);
        assert_eq!(
            sm.apply(&Request::GetPm {
                client: 2,
                addr_tag: None
            }),
            Reply::Busy(BusyReason::AdmissionFull)
        );
        // Draining one access admits the next client.
        sm.apply(&empty_evict(0, 0, 1));
        let (seq, _) = get_pm(&mut sm, 2);
        assert_eq!(seq, 3);
    }

    #[test]
    fn context_reclamation_clears_stale_contexts() {
        let mut sm = StateMachine::setup(
            ServerConfig {
                reclaim_after: Some(2),
                ..config(3)
            },
            &[],
        )
        .unwrap();
        get_pm(&mut sm, 0); // seq 1, then crashes
        get_pm(&mut sm, 1); // seq 2
        get_pm(&mut sm, 2); // seq 3
        assert_eq!(sm.open_contexts(), 3);
        get_pm(&mut sm, 3); // seq 4; cutoff clears client 0's context
        assert_eq!(sm.open_contexts(), 3);
        assert_eq!(
            sm.apply(&Request::GetPs { client: 0, leaf: 0 }),
            Reply::Busy(BusyReason::NoContext)
        );
    }

    #[test]
    fn single_client_evict_replaces_path_and_stash() {
        let mut sm = StateMachine::setup(config(2), &[]).unwrap();
        let (seq, _) = get_pm(&mut sm, 0);
        let slot = SlotId::new(1, 1);
        let block = Block::new(3, vec![1; 8], Timestamp::written(seq));
        let mut m = PathMap::new(seq);
        m.record(3, Location::Slot(slot), block.ts);
        sm.apply(&Request::Evict {
            client: 0,
            body: EvictBody {
                leaf: 0,
                path_map: m,
                new_path: vec![(slot, block.clone())],
                new_stash: Stash::new(vec![Block::new(5, vec![2; 8], Timestamp::written(seq))]),
                compacted: None,
            },
        });
        assert_eq!(sm.state().stash_count(), 1);
        // Re-snapshot and replace the path outright: the old version is
        // removed because the second client saw it.
        let (seq2, _) = get_pm(&mut sm, 1);
        let (path, _) = get_ps(&mut sm, 1, 0);
        assert_eq!(
            path.iter().flat_map(|(_, set)| set).count(),
            1,
            "exactly the evicted block lives on the path"
        );
        let block2 = Block::new(3, vec![4; 8], Timestamp::written(seq2));
        let mut m2 = PathMap::new(seq2);
        m2.record(3, Location::Slot(slot), block2.ts);
        sm.apply(&Request::Evict {
            client: 1,
            body: EvictBody {
                leaf: 0,
                path_map: m2,
                new_path: vec![(slot, block2.clone())],
                new_stash: Stash::empty(),
                compacted: None,
            },
        });
        assert_eq!(sm.state().stash_count(), 1, "snapshotted stash replaced");
        let versions = sm.state().path_versions(&sm.config().geom, 0);
        let blocks: Vec<_> = versions.iter().flat_map(|(_, set)| set).collect();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0], &block2);
    }

    #[test]
    fn concurrent_evicts_union_per_slot() {
        // Set-algebra oracle: both clients snapshot the same (empty) state,
        // so each evict removes nothing and adds its own contribution.
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        let (seq_a, _) = get_pm(&mut sm, 0);
        let (seq_b, _) = get_pm(&mut sm, 1);
        let slot = SlotId::new(1, 0); // root slot, shared by all paths
        let block_a = Block::new(1, vec![1; 8], Timestamp::written(seq_a));
        let block_b = Block::new(2, vec![2; 8], Timestamp::written(seq_b));
        let mut m_a = PathMap::new(seq_a);
        m_a.record(1, Location::Slot(slot), block_a.ts);
        let mut m_b = PathMap::new(seq_b);
        m_b.record(2, Location::Slot(slot), block_b.ts);
        sm.apply(&Request::Evict {
            client: 0,
            body: EvictBody {
                leaf: 0,
                path_map: m_a,
                new_path: vec![(slot, block_a.clone())],
                new_stash: Stash::empty(),
                compacted: None,
            },
        });
        sm.apply(&Request::Evict {
            client: 1,
            body: EvictBody {
                leaf: 7,
                path_map: m_b,
                new_path: vec![(slot, block_b.clone())],
                new_stash: Stash::empty(),
                compacted: None,
            },
        });
        let versions = sm.state().path_versions(&sm.config().geom, 0);
        let root_set = &versions[0].1;
        assert_eq!(root_set.len(), 2, "both concurrent versions coexist");
        assert!(root_set.contains(&block_a) && root_set.contains(&block_b));
        assert_eq!(sm.state().stash_count(), 2);
    }

    #[test]
    fn compaction_preserves_consolidation() {
        let mut sm = StateMachine::setup(config(3), &[]).unwrap();
        // Two ordinary evictions build up history.
        for (client, addr) in [(0u32, 1u32), (1u32, 2u32)] {
            let (seq, _) = get_pm(&mut sm, client);
            let mut m = PathMap::new(seq);
            let block = Block::new(addr, vec![addr as u8; 8], Timestamp::written(seq));
            m.record(addr, Location::Stash, block.ts);
            sm.apply(&Request::Evict {
                client,
                body: EvictBody {
                    leaf: 0,
                    path_map: m,
                    new_path: Vec::new(),
                    new_stash: Stash::new(vec![block]),
                    compacted: None,
                },
            });
        }
        let before = sm.consolidated_view();
        assert_eq!(sm.state().history().len(), 2);

        // Third access carries the consolidated view: history collapses.
        let (seq, history) = get_pm(&mut sm, 2);
        let mut view = PositionMap::fresh(sm.config().geom.block_count);
        for (_, map) in &history {
            view.fold_path_map(map);
        }
        let mut m = PathMap::new(seq);
        let block = Block::new(3, vec![3; 8], Timestamp::written(seq));
        m.record(3, Location::Stash, block.ts);
        view.fold_path_map(&m);
        sm.apply(&Request::Evict {
            client: 2,
            body: EvictBody {
                leaf: 0,
                path_map: m,
                new_path: Vec::new(),
                new_stash: Stash::new(vec![block]),
                compacted: Some(view),
            },
        });
        assert_eq!(sm.state().history().len(), 1);
        let after = sm.consolidated_view();
        for addr in 0..sm.config().geom.block_count {
            if addr == 3 {
                continue; // written by the compacting access itself
            }
            assert_eq!(before.get(addr), after.get(addr), "addr {addr}");
        }
    }

    #[test]
    fn replay_yields_identical_state_hash() {
        let ops = |sm: &mut StateMachine| {
            get_pm(sm, 0);
            get_pm(sm, 1);
            let slot = SlotId::new(2, 0);
            let block = Block::new(1, vec![1; 8], Timestamp::written(1));
            let mut m = PathMap::new(1);
            m.record(1, Location::Slot(slot), block.ts);
            sm.apply(&Request::Evict {
                client: 0,
                body: EvictBody {
                    leaf: 0,
                    path_map: m,
                    new_path: vec![(slot, block)],
                    new_stash: Stash::empty(),
                    compacted: None,
                },
            });
            sm.apply(&empty_evict(1, 3, 2));
        };
        let mut a = StateMachine::setup(config(3), &[]).unwrap();
        let mut b = StateMachine::setup(config(3), &[]).unwrap();
        ops(&mut a);
        ops(&mut b);
        assert_eq!(a.state_hash(), b.state_hash());
        assert_eq!(a.serialize_state(), b.serialize_state());
    }

    #[test]
    fn strong_mode_registry_lifecycle() {
        let mut sm = StateMachine::setup(
            ServerConfig {
                mode: Mode::Strong { sigma: 1 },
                ..config(3)
            },
            &[],
        )
        .unwrap();
        let tag = [7u8; 16];
        let reply = sm.apply(&Request::GetPm {
            client: 0,
            addr_tag: Some(tag),
        });
        let Reply::GetPm { registry: Some(reg), .. } = reply else {
            panic!("expected registry");
        };
        assert_eq!(reg, vec![RegistryEntry { client: 0, addr_tag: tag, count: 1 }]);

        sm.apply(&empty_evict(0, 0, 1));
        // counter 1 != sigma + 1, so the registration survives round one.
        let reply = sm.apply(&Request::GetPm {
            client: 0,
            addr_tag: Some(tag),
        });
        let Reply::GetPm { registry: Some(reg), .. } = reply else {
            panic!("expected registry");
        };
        assert_eq!(reg[0].count, 2);
        sm.apply(&empty_evict(0, 0, 2));
        // counter reached sigma + 1 = 2: cleared at that eviction.
        let reply = sm.apply(&Request::GetPm {
            client: 1,
            addr_tag: Some([9; 16]),
        });
        let Reply::GetPm { registry: Some(reg), .. } = reply else {
            panic!("expected registry");
        };
        assert_eq!(reg.len(), 1);
        assert_eq!(reg[0].client, 1);
    }

    #[test]
    fn request_reply_codecs_round_trip() {
        let geom = TreeGeometry::with_default_count(3, 2, 8);
        let mut m = PathMap::new(9);
        m.record(4, Location::Stash, Timestamp::written(9));
        let requests = vec![
            Request::GetPm {
                client: 3,
                addr_tag: Some([8; 16]),
            },
            Request::GetPm {
                client: 3,
                addr_tag: None,
            },
            Request::GetPs { client: 1, leaf: 6 },
            Request::Evict {
                client: 2,
                body: EvictBody {
                    leaf: 5,
                    path_map: m.clone(),
                    new_path: vec![(SlotId::new(1, 1), Block::new(4, vec![1; 8], Timestamp::written(9)))],
                    new_stash: Stash::new(vec![Block::new(2, vec![3; 8], Timestamp::written(8))]),
                    compacted: Some(PositionMap::fresh(geom.block_count)),
                },
            },
        ];
        for req in requests {
            let bytes = encode_request(&req);
            assert_eq!(decode_request(&bytes, &geom).unwrap(), req);
        }
        let replies = vec![
            Reply::GetPm {
                seq: 4,
                history: vec![(1, m)],
                registry: Some(vec![RegistryEntry {
                    client: 0,
                    addr_tag: [2; 16],
                    count: 3,
                }]),
            },
            Reply::GetPs {
                path: vec![(SlotId::new(1, 0), vec![Block::new(1, vec![0; 8], Timestamp::written(2))])],
                stashes: vec![Stash::empty()],
            },
            Reply::EvictAck,
            Reply::Busy(BusyReason::AdmissionFull),
        ];
        for reply in replies {
            let bytes = encode_reply(&reply);
            assert_eq!(decode_reply(&bytes).unwrap(), reply);
        }
    }
}

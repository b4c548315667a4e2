//! Client-side protocol logic.
//!
//! An access is three server operations: fetch and consolidate the path-map
//! history, fetch one multi-version path plus the stashes and merge them
//! into a working set, then rebuild the path and evict. Clients never
//! coordinate with each other; every step is a bounded local computation
//! between server calls, so a client finishes regardless of what other
//! clients do.
//!
//! The driver is resumable: [`Client::step`] performs exactly one server
//! operation, which lets the simulator interleave concurrent clients
//! deterministically.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::core::{
    random_path_through, Block, Location, PathMap, PositionMap, SlotId, Stash, Timestamp,
    TreeGeometry,
};
use crate::server::{BusyReason, ClientId, EvictBody, Mode, RegistryEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Read,
    Write,
}

/// One logical read or write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRequest {
    pub op: OpKind,
    pub addr: u32,
    /// Required for writes, absent for reads.
    pub data: Option<Vec<u8>>,
}

/// What `getPM` returns, plus the log position the operation executed at.
#[derive(Debug, Clone)]
pub struct PmView {
    pub sn: u64,
    pub seq: u64,
    pub history: Vec<(u64, PathMap)>,
    pub registry: Option<Vec<RegistryEntry>>,
}

/// What `getPS` returns.
#[derive(Debug, Clone)]
pub struct PsView {
    pub sn: u64,
    pub path: Vec<(SlotId, Vec<Block>)>,
    pub stashes: Vec<Stash>,
}

#[derive(Debug, Error)]
pub enum FacadeError {
    #[error("server busy: {0:?}")]
    Busy(BusyReason),
    #[error("transport failure: {0}")]
    Transport(String),
}

/// The three-method server interface the client drives. Implemented
/// in-process for unit tests and by the replication layer for simulations.
pub trait ServerFacade {
    fn get_pm(&mut self, client: ClientId, addr_tag: Option<[u8; 16]>)
        -> Result<PmView, FacadeError>;
    fn get_ps(&mut self, client: ClientId, leaf: u32) -> Result<PsView, FacadeError>;
    fn evict(&mut self, client: ClientId, body: EvictBody) -> Result<u64, FacadeError>;

    /// Equality-comparable opaque tag for an address, used by the strong
    /// mode registry. Facades with an envelope key derive it from the key.
    fn addr_tag(&self, addr: u32) -> [u8; 16] {
        let mut tag = [0u8; 16];
        tag[..4].copy_from_slice(&addr.to_le_bytes());
        tag
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Facade(#[from] FacadeError),
    #[error("write request without payload")]
    MissingWriteData,
    #[error("payload is {got} bytes, block size is {want}")]
    BadPayloadSize { got: usize, want: usize },
    #[error("address {0} out of range")]
    AddressOutOfRange(u32),
    #[error("position map names a version of {0} that was not retrievable")]
    MissingBlock(u32),
    #[error("another access is already in flight")]
    AccessInFlight,
    #[error("no access in flight")]
    NoAccess,
}

/// Folds a path-map history into `base`, keeping the highest-timestamp
/// entry per address. Order-independent, so it works on any subset or
/// superset of the history a client has already folded.
pub fn consolidate_path_maps(history: &[(u64, PathMap)], mut base: PositionMap) -> PositionMap {
    for (_, map) in history {
        base.fold_path_map(map);
    }
    base
}

/// The blocks an access works on, keyed by address.
#[derive(Debug, Clone, Default)]
pub struct WorkingSet {
    blocks: BTreeMap<u32, Block>,
}

impl WorkingSet {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, addr: u32) -> Option<&Block> {
        self.blocks.get(&addr)
    }

    pub fn insert(&mut self, block: Block) {
        self.blocks.insert(block.addr, block);
    }

    pub fn addresses(&self) -> impl Iterator<Item = u32> + '_ {
        self.blocks.keys().copied()
    }
}

/// Filters a multi-version path and stash set down to the single version of
/// each block that the consolidated position map names. Stale and duplicate
/// versions are dropped.
pub fn merge_path_stashes(
    path: &[(SlotId, Vec<Block>)],
    stashes: &[Stash],
    pm: &PositionMap,
) -> WorkingSet {
    let mut w = WorkingSet::default();
    for stash in stashes {
        for block in stash.blocks() {
            let entry = pm.get(block.addr);
            if entry.loc == Location::Stash && entry.ts == block.ts {
                w.insert(block.clone());
            }
        }
    }
    for (slot, versions) in path {
        for block in versions {
            let entry = pm.get(block.addr);
            if entry.loc == Location::Slot(*slot) && entry.ts == block.ts {
                w.insert(block.clone());
            }
        }
    }
    w
}

/// Accounting for the swap phase, exposed for the swap-budget property.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PopulateStats {
    /// Real occupants of the sampled slots moved off the path.
    pub swapped_to_stash: usize,
    /// Working-set blocks moved onto the path.
    pub swapped_to_path: usize,
    /// Blocks that lost a same-slot collision and stayed in the working
    /// set. Only concurrent histories produce these.
    pub collision_losers: usize,
}

#[derive(Debug, Clone)]
pub struct PopulateResult {
    /// Occupied slots of the rebuilt path, in slot order.
    pub new_path: Vec<(SlotId, Block)>,
    pub new_stash: Stash,
    pub path_map: PathMap,
    pub stats: PopulateStats,
}

fn sample_distinct_indices<R: Rng + ?Sized>(rng: &mut R, pool: usize, k: usize) -> Vec<usize> {
    let k = k.min(pool);
    let mut idx: Vec<usize> = (0..pool).collect();
    for i in 0..k {
        let j = rng.gen_range(i..pool);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Rebuilds the path for `leaf` from the working set in four phases:
/// place blocks at their mapped slots (highest move-sequence wins a
/// collision), swap `Z` random slots against `Z` random working-set blocks
/// (always pulling the accessed block off the path), reorder so the most
/// recently accessed blocks sit closest to the root, and put everything
/// left over in the new stash. The accessed block always ends in the stash.
pub fn populate_path<R: Rng + ?Sized>(
    mut working: WorkingSet,
    leaf: u32,
    addr: u32,
    pm: &PositionMap,
    seq: u64,
    geom: &TreeGeometry,
    rng: &mut R,
) -> PopulateResult {
    let path_slots = geom.path_slots(leaf).expect("leaf in range");
    let input_addrs: BTreeSet<u32> = working.addresses().collect();
    let mut stats = PopulateStats::default();

    // Placement: group working-set blocks by their mapped on-path slot.
    let mut by_slot: BTreeMap<SlotId, Vec<u32>> = BTreeMap::new();
    for a in working.addresses() {
        if let Location::Slot(slot) = pm.get(a).loc {
            if geom.node_on_path(slot.node, leaf).unwrap_or(false) {
                by_slot.entry(slot).or_default().push(a);
            }
        }
    }
    let mut placed: BTreeMap<SlotId, Block> = BTreeMap::new();
    let mut used: BTreeSet<SlotId> = BTreeSet::new();
    for (&slot, candidates) in &by_slot {
        // Collision rule: highest move sequence, ties to the larger address.
        let winner = *candidates
            .iter()
            .max_by_key(|&&a| (working.get(a).unwrap().ts.moved, a))
            .unwrap();
        stats.collision_losers += candidates.len() - 1;
        let block = working.blocks.remove(&winner).unwrap();
        placed.insert(slot, block);
        used.insert(slot);
    }

    // Swap: Z slots, forced to include the accessed block's slot when it is
    // on this path, and Z working-set blocks chosen before any occupant
    // moves back, so a freshly removed block is never re-placed.
    let forced = match pm.get(addr).loc {
        Location::Slot(slot) if geom.node_on_path(slot.node, leaf).unwrap_or(false) => Some(slot),
        _ => None,
    };
    let z = geom.bucket_size as usize;
    let mut swap_slots: BTreeSet<SlotId> = BTreeSet::new();
    if let Some(slot) = forced {
        swap_slots.insert(slot);
    }
    let pool: Vec<SlotId> = path_slots
        .iter()
        .copied()
        .filter(|s| Some(*s) != forced)
        .collect();
    let rest = z.saturating_sub(swap_slots.len());
    for i in sample_distinct_indices(rng, pool.len(), rest) {
        swap_slots.insert(pool[i]);
    }
    let swap_candidates: Vec<u32> = working.addresses().filter(|&a| a != addr).collect();
    let picked = sample_distinct_indices(rng, swap_candidates.len(), z);
    let mut incoming: Vec<u32> = picked.into_iter().map(|i| swap_candidates[i]).collect();
    for &slot in &swap_slots {
        if let Some(block) = placed.remove(&slot) {
            stats.swapped_to_stash += 1;
            working.insert(block);
        }
        if let Some(a) = incoming.pop() {
            let block = working.blocks.remove(&a).unwrap();
            placed.insert(slot, block);
            stats.swapped_to_path += 1;
        }
    }

    // Reorder: pour every path block back over the touched slots, most
    // recently accessed closest to the root, stamping the move sequence.
    let touched: BTreeSet<SlotId> = used.union(&swap_slots).copied().collect();
    let mut pool: Vec<Block> = placed.into_values().collect();
    pool.sort_by_key(|b| std::cmp::Reverse((b.ts.access, b.ts.moved, b.addr)));
    let mut path_map = PathMap::new(seq);
    let mut new_path = Vec::with_capacity(pool.len());
    for (&slot, block) in touched.iter().zip(pool.into_iter()) {
        let ts = block.ts.moved_at(seq);
        path_map.record(block.addr, Location::Slot(slot), ts);
        new_path.push((slot, Block { ts, ..block }));
    }
    new_path.sort_by_key(|(slot, _)| *slot);

    // Stash build: whatever is left, always including the accessed block.
    // Blocks that just left the tree (or were accessed) get a fresh move
    // sequence and a relocation entry; blocks already mapped to the stash
    // keep their timestamps.
    let mut stash_blocks = Vec::with_capacity(working.len());
    for (a, mut block) in std::mem::take(&mut working.blocks) {
        if !pm.get(a).loc.is_stash() || a == addr {
            block.ts = block.ts.moved_at(seq);
            path_map.record(a, Location::Stash, block.ts);
        }
        stash_blocks.push(block);
    }
    let new_stash = Stash::new(stash_blocks);

    debug_assert_eq!(
        {
            let mut out: BTreeSet<u32> = new_path.iter().map(|(_, b)| b.addr).collect();
            out.extend(new_stash.blocks().iter().map(|b| b.addr));
            out
        },
        input_addrs,
        "populate_path must neither lose nor duplicate blocks"
    );

    PopulateResult {
        new_path,
        new_stash,
        path_map,
        stats,
    }
}

/// Everything the history checker needs to know about one completed access.
#[derive(Debug, Clone, Default)]
pub struct AccessTrace {
    /// Log position of the first `getPM` (invocation edge in real time).
    pub sn_first_invoke: u64,
    /// Log position of the `getPM` of the round that touched the block.
    pub sn_value_invoke: u64,
    /// Log position of the `evict` that published the touched block.
    pub sn_value_reply: Option<u64>,
    /// Log position of the last `evict` (reply edge in real time).
    pub sn_last_reply: Option<u64>,
    /// Access sequence number of the value round.
    pub seq: u64,
    /// Round index (0-based) at which the real access executed.
    pub real_round: u32,
}

#[derive(Debug)]
pub struct AccessOutcome {
    pub value: Vec<u8>,
    pub trace: AccessTrace,
    /// Server operations this access issued; exactly 3 in basic mode and
    /// 3 * (sigma + 1) in strong mode, with no retries.
    pub ops_issued: u32,
}

#[derive(Debug)]
pub enum StepOutcome {
    Continue,
    Done(AccessOutcome),
}

#[derive(Debug)]
enum Phase {
    NeedPm,
    NeedPs {
        seq: u64,
        leaf: u32,
    },
    NeedEvict {
        body: EvictBody,
    },
}

#[derive(Debug)]
struct InFlight {
    req: AccessRequest,
    round: u32,
    tau_real: u32,
    phase: Phase,
    value: Option<Vec<u8>>,
    ops_issued: u32,
    trace: AccessTrace,
}

/// A protocol client. Holds the consolidated position map across accesses
/// and folds only history entries it has not seen yet.
#[derive(Debug)]
pub struct Client {
    pub id: ClientId,
    geom: TreeGeometry,
    mode: Mode,
    /// Ship the consolidated view every `gamma`-th eviction; 0 disables.
    gamma: u64,
    rng: ChaCha12Rng,
    pm: PositionMap,
    seen_hidx: u64,
    evicts_done: u64,
    current: Option<InFlight>,
}

impl Client {
    pub fn new(id: ClientId, geom: TreeGeometry, mode: Mode, gamma: u64, rng: ChaCha12Rng) -> Self {
        Client {
            id,
            geom,
            mode,
            gamma,
            rng,
            pm: PositionMap::fresh(geom.block_count),
            seen_hidx: 0,
            evicts_done: 0,
            current: None,
        }
    }

    pub fn busy(&self) -> bool {
        self.current.is_some()
    }

    pub fn position_map(&self) -> &PositionMap {
        &self.pm
    }

    /// Rounds one access takes: 1, or sigma + 1 in strong mode.
    pub fn rounds_per_access(&self) -> u32 {
        match self.mode {
            Mode::Basic => 1,
            Mode::Strong { sigma } => sigma + 1,
        }
    }

    pub fn start_access(&mut self, req: AccessRequest) -> Result<(), ClientError> {
        if self.current.is_some() {
            return Err(ClientError::AccessInFlight);
        }
        if req.addr >= self.geom.block_count {
            return Err(ClientError::AddressOutOfRange(req.addr));
        }
        match (req.op, &req.data) {
            (OpKind::Write, None) => return Err(ClientError::MissingWriteData),
            (OpKind::Write, Some(d)) if d.len() != self.geom.block_size => {
                return Err(ClientError::BadPayloadSize {
                    got: d.len(),
                    want: self.geom.block_size,
                })
            }
            _ => {}
        }
        self.current = Some(InFlight {
            req,
            round: 0,
            tau_real: 0,
            phase: Phase::NeedPm,
            value: None,
            ops_issued: 0,
            trace: AccessTrace::default(),
        });
        Ok(())
    }

    /// Performs exactly one server operation of the in-flight access.
    pub fn step(&mut self, facade: &mut dyn ServerFacade) -> Result<StepOutcome, ClientError> {
        let mut flight = self.current.take().ok_or(ClientError::NoAccess)?;
        let result = self.step_inner(&mut flight, facade);
        match result {
            Ok(done) => {
                if done {
                    let value = flight.value.take().unwrap_or_default();
                    Ok(StepOutcome::Done(AccessOutcome {
                        value,
                        trace: flight.trace,
                        ops_issued: flight.ops_issued,
                    }))
                } else {
                    self.current = Some(flight);
                    Ok(StepOutcome::Continue)
                }
            }
            Err(e) => Err(e),
        }
    }

    fn step_inner(
        &mut self,
        flight: &mut InFlight,
        facade: &mut dyn ServerFacade,
    ) -> Result<bool, ClientError> {
        match std::mem::replace(&mut flight.phase, Phase::NeedPm) {
            Phase::NeedPm => {
                let addr_tag = match self.mode {
                    Mode::Basic => None,
                    Mode::Strong { .. } => Some(facade.addr_tag(flight.req.addr)),
                };
                let view = facade.get_pm(self.id, addr_tag)?;
                flight.ops_issued += 1;
                if flight.round == 0 {
                    flight.trace.sn_first_invoke = view.sn;
                }
                // Fold only the history suffix this client has not seen.
                for (hidx, map) in &view.history {
                    if *hidx > self.seen_hidx {
                        self.pm.fold_path_map(map);
                    }
                }
                self.seen_hidx = self
                    .seen_hidx
                    .max(view.history.last().map(|(h, _)| *h).unwrap_or(0));

                if let Mode::Strong { sigma } = self.mode {
                    if flight.round == 0 {
                        let mine = facade.addr_tag(flight.req.addr);
                        let concurrent = view
                            .registry
                            .as_deref()
                            .map(|reg| reg.iter().filter(|e| e.addr_tag == mine).count())
                            .unwrap_or(1);
                        flight.tau_real = sigma.min(concurrent.saturating_sub(1) as u32);
                    }
                }
                let real_round = flight.round == flight.tau_real;
                let leaf = if real_round {
                    random_path_through(self.pm.get(flight.req.addr).loc, &self.geom, &mut self.rng)
                        .expect("pm locations are valid")
                } else {
                    self.rng.gen_range(0..self.geom.leaf_count())
                };
                if real_round {
                    flight.trace.sn_value_invoke = view.sn;
                    flight.trace.seq = view.seq;
                    flight.trace.real_round = flight.round;
                }
                flight.phase = Phase::NeedPs {
                    seq: view.seq,
                    leaf,
                };
                Ok(false)
            }
            Phase::NeedPs { seq, leaf } => {
                let view = facade.get_ps(self.id, leaf)?;
                flight.ops_issued += 1;
                let mut working = merge_path_stashes(&view.path, &view.stashes, &self.pm);
                let addr = flight.req.addr;
                if flight.round == flight.tau_real {
                    let (data, version) = match flight.req.op {
                        OpKind::Write => (flight.req.data.clone().unwrap(), seq as i64),
                        OpKind::Read => match working.get(addr) {
                            Some(block) => (block.data.clone(), block.ts.version),
                            None if self.pm.get(addr).ts.is_sentinel() => {
                                // Never written: the configured initial
                                // payload, modelled as a write at seq 0.
                                (vec![0; self.geom.block_size], 0)
                            }
                            None => return Err(ClientError::MissingBlock(addr)),
                        },
                    };
                    working.insert(Block::new(
                        addr,
                        data.clone(),
                        Timestamp::new(version, seq as i64, seq as i64),
                    ));
                    flight.value = Some(data);
                }
                let result = populate_path(
                    working,
                    leaf,
                    addr,
                    &self.pm,
                    seq,
                    &self.geom,
                    &mut self.rng,
                );
                let compacted = if self.gamma > 0 && (self.evicts_done + 1) % self.gamma == 0 {
                    let mut view = self.pm.clone();
                    view.fold_path_map(&result.path_map);
                    Some(view)
                } else {
                    None
                };
                flight.phase = Phase::NeedEvict {
                    body: EvictBody {
                        leaf,
                        path_map: result.path_map,
                        new_path: result.new_path,
                        new_stash: result.new_stash,
                        compacted,
                    },
                };
                Ok(false)
            }
            Phase::NeedEvict { body } => {
                let sn = facade.evict(self.id, body)?;
                flight.ops_issued += 1;
                self.evicts_done += 1;
                if flight.round == flight.tau_real {
                    flight.trace.sn_value_reply = Some(sn);
                }
                flight.trace.sn_last_reply = Some(sn);
                flight.round += 1;
                if flight.round < self.rounds_per_access() {
                    flight.phase = Phase::NeedPm;
                    Ok(false)
                } else {
                    Ok(true)
                }
            }
        }
    }

    /// Runs a whole access to completion against `facade`.
    pub fn access(
        &mut self,
        req: AccessRequest,
        facade: &mut dyn ServerFacade,
    ) -> Result<AccessOutcome, ClientError> {
        self.start_access(req)?;
        loop {
            match self.step(facade)? {
                StepOutcome::Continue => {}
                StepOutcome::Done(outcome) => return Ok(outcome),
            }
        }
    }
}

/// In-process facade over a single state machine: the non-replicated
/// deployment, and the workhorse for unit tests and examples.
#[derive(Debug)]
pub struct DirectFacade {
    sm: crate::server::StateMachine,
    log_pos: u64,
}

impl DirectFacade {
    pub fn new(sm: crate::server::StateMachine) -> Self {
        DirectFacade { sm, log_pos: 0 }
    }

    pub fn machine(&self) -> &crate::server::StateMachine {
        &self.sm
    }
}

impl ServerFacade for DirectFacade {
    fn get_pm(
        &mut self,
        client: ClientId,
        addr_tag: Option<[u8; 16]>,
    ) -> Result<PmView, FacadeError> {
        self.log_pos += 1;
        let sn = self.log_pos;
        match self.sm.apply(&crate::server::Request::GetPm { client, addr_tag }) {
            crate::server::Reply::GetPm {
                seq,
                history,
                registry,
            } => Ok(PmView {
                sn,
                seq,
                history,
                registry,
            }),
            crate::server::Reply::Busy(reason) => Err(FacadeError::Busy(reason)),
            other => Err(FacadeError::Transport(format!("unexpected reply {other:?}"))),
        }
    }

    fn get_ps(&mut self, client: ClientId, leaf: u32) -> Result<PsView, FacadeError> {
        self.log_pos += 1;
        let sn = self.log_pos;
        match self.sm.apply(&crate::server::Request::GetPs { client, leaf }) {
            crate::server::Reply::GetPs { path, stashes } => Ok(PsView { sn, path, stashes }),
            crate::server::Reply::Busy(reason) => Err(FacadeError::Busy(reason)),
            other => Err(FacadeError::Transport(format!("unexpected reply {other:?}"))),
        }
    }

    fn evict(&mut self, client: ClientId, body: EvictBody) -> Result<u64, FacadeError> {
        self.log_pos += 1;
        let sn = self.log_pos;
        match self.sm.apply(&crate::server::Request::Evict { client, body }) {
            crate::server::Reply::EvictAck => Ok(sn),
            crate::server::Reply::Busy(reason) => Err(FacadeError::Busy(reason)),
            other => Err(FacadeError::Transport(format!("unexpected reply {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::{ServerConfig, StateMachine};
    use rand::SeedableRng;

    fn geom(height: u32) -> TreeGeometry {
        TreeGeometry::with_default_count(height, 4, 8)
    }

    fn fresh_client(id: ClientId, g: TreeGeometry, seed: u64) -> Client {
        Client::new(id, g, Mode::Basic, 0, ChaCha12Rng::seed_from_u64(seed))
    }

    fn direct(g: TreeGeometry) -> DirectFacade {
        DirectFacade::new(
            StateMachine::setup(
                ServerConfig {
                    geom: g,
                    mode: Mode::Basic,
                    c_max: 10,
                    reclaim_after: None,
                },
                &[],
            )
            .unwrap(),
        )
    }

    #[test]
    fn consolidate_highest_timestamp_wins() {
        let g = geom(3);
        let slot = SlotId::new(3, 0);
        let mut m1 = PathMap::new(1);
        m1.record(7, Location::Slot(slot), Timestamp::new(1, 1, 1));
        let mut m2 = PathMap::new(2);
        m2.record(7, Location::Stash, Timestamp::new(1, 2, 2));
        let pm = consolidate_path_maps(&[(1, m1), (2, m2)], PositionMap::fresh(g.block_count));
        let e = pm.get(7);
        assert_eq!(e.loc, Location::Stash);
        assert_eq!(e.ts, Timestamp::new(1, 2, 2));
    }

    #[test]
    fn consolidate_empty_history_is_fresh() {
        let g = geom(3);
        let pm = consolidate_path_maps(&[], PositionMap::fresh(g.block_count));
        for (_, e) in pm.iter() {
            assert_eq!(e.loc, Location::Stash);
            assert!(e.ts.is_sentinel());
        }
    }

    #[test]
    fn consolidate_matches_brute_force_max_scan() {
        // Oracle: flatten all updates and take the max timestamp per addr.
        let g = geom(3);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..1_000 {
            // The move component is the sequence number of the access that
            // produced the entry, so it is distinct across updates.
            let mut move_seq = 0i64;
            let maps: Vec<(u64, PathMap)> = (0..rng.gen_range(0..6))
                .map(|i| {
                    let mut m = PathMap::new(i);
                    for _ in 0..rng.gen_range(0..5) {
                        let addr = rng.gen_range(0..8u32);
                        if m.get(addr).is_some() {
                            continue;
                        }
                        let loc = if rng.gen_bool(0.5) {
                            Location::Stash
                        } else {
                            Location::Slot(SlotId::new(rng.gen_range(1..15), rng.gen_range(0..4)))
                        };
                        move_seq += 1;
                        let ts = Timestamp::new(
                            rng.gen_range(0..4),
                            rng.gen_range(0..4),
                            move_seq,
                        );
                        m.record(addr, loc, ts);
                    }
                    (i, m)
                })
                .collect();
            let got = consolidate_path_maps(&maps, PositionMap::fresh(g.block_count));
            let mut flat: Vec<(u32, Location, Timestamp)> = Vec::new();
            for (_, m) in &maps {
                for (a, (l, t)) in m.iter() {
                    flat.push((*a, *l, *t));
                }
            }
            for addr in 0..g.block_count {
                let best = flat
                    .iter()
                    .filter(|(a, _, _)| *a == addr)
                    .max_by_key(|(_, _, t)| *t);
                let e = got.get(addr);
                match best {
                    None => assert!(e.ts.is_sentinel()),
                    Some((_, l, t)) => {
                        assert_eq!(e.ts, *t);
                        assert_eq!(e.loc, *l);
                    }
                }
            }
        }
    }

    #[test]
    fn merge_filters_by_exact_timestamp() {
        let g = geom(3);
        let slot = SlotId::new(1, 0);
        let mut pm = PositionMap::fresh(g.block_count);
        pm.fold_update(4, Location::Slot(slot), Timestamp::new(1, 3, 3));
        let path = vec![(
            slot,
            vec![
                Block::new(4, vec![1; 8], Timestamp::new(1, 1, 1)),
                Block::new(4, vec![2; 8], Timestamp::new(1, 3, 3)),
            ],
        )];
        let w = merge_path_stashes(&path, &[], &pm);
        assert_eq!(w.len(), 1);
        assert_eq!(w.get(4).unwrap().data, vec![2; 8]);
    }

    #[test]
    fn merge_excludes_stash_block_when_pm_points_to_tree() {
        let g = geom(3);
        let mut pm = PositionMap::fresh(g.block_count);
        pm.fold_update(4, Location::Slot(SlotId::new(1, 0)), Timestamp::new(1, 1, 1));
        let stash = Stash::new(vec![Block::new(4, vec![9; 8], Timestamp::new(1, 1, 1))]);
        let w = merge_path_stashes(&[], &[stash], &pm);
        assert!(w.is_empty());
    }

    #[test]
    fn merge_matches_brute_force_filter() {
        // Oracle: keep a block iff pm[addr] == (location, ts).
        let g = geom(2);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..500 {
            let leaf = rng.gen_range(0..g.leaf_count());
            let slots = g.path_slots(leaf).unwrap();
            let mut pm = PositionMap::fresh(g.block_count);
            for addr in 0..g.block_count {
                if rng.gen_bool(0.6) {
                    let loc = if rng.gen_bool(0.3) {
                        Location::Stash
                    } else {
                        Location::Slot(slots[rng.gen_range(0..slots.len())])
                    };
                    pm.fold_update(
                        addr,
                        loc,
                        Timestamp::new(rng.gen_range(0..3), rng.gen_range(0..3), rng.gen_range(0..3)),
                    );
                }
            }
            // Random multi-version fixtures, some stale.
            let mut path: Vec<(SlotId, Vec<Block>)> =
                slots.iter().map(|s| (*s, Vec::new())).collect();
            let mut stash_blocks: Vec<Block> = Vec::new();
            let mut expected: Vec<u32> = Vec::new();
            for addr in 0..g.block_count {
                let e = pm.get(addr);
                if e.ts.is_sentinel() || !rng.gen_bool(0.8) {
                    continue;
                }
                let block = Block::new(addr, vec![addr as u8; 8], e.ts);
                let stale = Block::new(addr, vec![0xee; 8], Timestamp::new(-1, 0, 0));
                match e.loc {
                    Location::Stash => {
                        stash_blocks.push(block);
                        expected.push(addr);
                    }
                    Location::Slot(s) => {
                        let cell = path.iter_mut().find(|(ps, _)| *ps == s).unwrap();
                        cell.1.push(stale);
                        cell.1.push(block);
                        expected.push(addr);
                    }
                }
            }
            let stashes = [Stash::new(stash_blocks)];
            let w = merge_path_stashes(&path, &stashes, &pm);
            let mut got: Vec<u32> = w.addresses().collect();
            got.sort_unstable();
            expected.sort_unstable();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn populate_first_access_puts_block_in_stash() {
        let g = geom(3);
        let pm = PositionMap::fresh(g.block_count);
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let mut w = WorkingSet::default();
        let seq = 5;
        w.insert(Block::new(0, vec![7; 8], Timestamp::written(seq)));
        let out = populate_path(w, 2, 0, &pm, seq, &g, &mut rng);
        assert!(out.new_path.is_empty());
        assert_eq!(out.new_stash.len(), 1);
        assert_eq!(out.new_stash.blocks()[0].ts, Timestamp::written(seq));
        assert_eq!(
            out.path_map.get(0),
            Some((Location::Stash, Timestamp::written(seq)))
        );
        assert_eq!(out.path_map.len(), 1);
    }

    #[test]
    fn populate_forces_accessed_slot_into_swap() {
        // The accessed block sits on the path per pm; after populate it must
        // be in the stash, never on the path.
        let g = geom(3);
        for seed in 0..50 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let slot = SlotId::new(2, 1); // level-1 node on paths 0..4
            let mut pm = PositionMap::fresh(g.block_count);
            let ts = Timestamp::new(1, 1, 1);
            pm.fold_update(3, Location::Slot(slot), ts);
            let mut w = WorkingSet::default();
            // Simulate the read: ts already refreshed by the access.
            w.insert(Block::new(3, vec![1; 8], Timestamp::read_at(1, 9)));
            let out = populate_path(w, 1, 3, &pm, 9, &g, &mut rng);
            assert!(out.new_path.iter().all(|(_, b)| b.addr != 3));
            assert!(out.new_stash.blocks().iter().any(|b| b.addr == 3));
        }
    }

    #[test]
    fn populate_conserves_addresses() {
        // Shadow-multiset oracle over random pm-consistent fixtures.
        let g = geom(3);
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        for round in 0..10_000 {
            let leaf = rng.gen_range(0..g.leaf_count());
            let slots = g.path_slots(leaf).unwrap();
            let mut pm = PositionMap::fresh(g.block_count);
            let mut w = WorkingSet::default();
            for addr in 0..g.block_count.min(20) {
                if !rng.gen_bool(0.5) {
                    continue;
                }
                let loc = if rng.gen_bool(0.4) {
                    Location::Stash
                } else {
                    Location::Slot(slots[rng.gen_range(0..slots.len())])
                };
                let ts = Timestamp::new(
                    rng.gen_range(0..5),
                    rng.gen_range(0..5),
                    rng.gen_range(0..5),
                );
                pm.fold_update(addr, loc, ts);
                w.insert(Block::new(addr, vec![addr as u8; 8], ts));
            }
            let addr = rng.gen_range(0..g.block_count.min(20));
            let seq = 100 + round;
            if w.get(addr).is_none() {
                // An access always holds its own block by this point.
                w.insert(Block::new(addr, vec![0; 8], Timestamp::written(seq)));
            }
            let mut before: Vec<u32> = w.addresses().collect();
            before.sort_unstable();
            let out = populate_path(w, leaf, addr, &pm, seq, &g, &mut rng);
            let mut after: Vec<u32> = out.new_path.iter().map(|(_, b)| b.addr).collect();
            after.extend(out.new_stash.blocks().iter().map(|b| b.addr));
            after.sort_unstable();
            assert_eq!(before, after, "round {round}");
            // Swap budget.
            assert!(out.stats.swapped_to_stash <= g.bucket_size as usize);
            assert!(out.stats.swapped_to_path <= g.bucket_size as usize);
            // Reorder contract: access timestamps non-increasing along the
            // new path in slot order.
            let accesses: Vec<i64> = out.new_path.iter().map(|(_, b)| b.ts.access).collect();
            assert!(
                accesses.windows(2).all(|p| p[0] >= p[1]),
                "round {round}: {accesses:?}"
            );
            // Every placed block carries the new move sequence.
            assert!(out.new_path.iter().all(|(_, b)| b.ts.moved == seq as i64));
        }
    }

    #[test]
    fn populate_is_deterministic_under_seed() {
        let g = geom(3);
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            let slot = SlotId::new(2, 0);
            let mut pm = PositionMap::fresh(g.block_count);
            pm.fold_update(1, Location::Slot(slot), Timestamp::new(1, 1, 1));
            pm.fold_update(2, Location::Stash, Timestamp::new(2, 2, 2));
            let mut w = WorkingSet::default();
            w.insert(Block::new(1, vec![1; 8], Timestamp::new(1, 1, 1)));
            w.insert(Block::new(2, vec![2; 8], Timestamp::new(2, 2, 2)));
            w.insert(Block::new(3, vec![3; 8], Timestamp::written(9)));
            populate_path(w, 0, 3, &pm, 9, &g, &mut rng)
        };
        let a = run();
        let b = run();
        assert_eq!(a.new_path, b.new_path);
        assert_eq!(a.new_stash, b.new_stash);
        assert_eq!(a.path_map, b.path_map);
    }

    #[test]
    fn write_then_read_returns_written_value() {
        let g = geom(3);
        let mut facade = direct(g);
        let mut client = fresh_client(0, g, 1);
        let written = vec![0xab; 8];
        let out = client
            .access(
                AccessRequest {
                    op: OpKind::Write,
                    addr: 3,
                    data: Some(written.clone()),
                },
                &mut facade,
            )
            .unwrap();
        assert_eq!(out.value, written);
        assert_eq!(out.ops_issued, 3);
        let out = client
            .access(
                AccessRequest {
                    op: OpKind::Read,
                    addr: 3,
                    data: None,
                },
                &mut facade,
            )
            .unwrap();
        assert_eq!(out.value, written);
        assert_eq!(out.ops_issued, 3);
    }

    #[test]
    fn read_of_never_written_address_is_zero() {
        let g = geom(3);
        let mut facade = direct(g);
        let mut client = fresh_client(0, g, 2);
        let out = client
            .access(
                AccessRequest {
                    op: OpKind::Read,
                    addr: 6,
                    data: None,
                },
                &mut facade,
            )
            .unwrap();
        assert_eq!(out.value, vec![0; 8]);
    }

    #[test]
    fn sequential_register_semantics_over_many_accesses() {
        let g = geom(3);
        let mut facade = direct(g);
        let mut client = fresh_client(0, g, 3);
        let mut model: std::collections::HashMap<u32, Vec<u8>> = Default::default();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for i in 0..2_000u64 {
            let addr = rng.gen_range(0..g.block_count);
            if rng.gen_bool(0.5) {
                let data = vec![(i % 251) as u8; 8];
                client
                    .access(
                        AccessRequest {
                            op: OpKind::Write,
                            addr,
                            data: Some(data.clone()),
                        },
                        &mut facade,
                    )
                    .unwrap();
                model.insert(addr, data);
            } else {
                let out = client
                    .access(
                        AccessRequest {
                            op: OpKind::Read,
                            addr,
                            data: None,
                        },
                        &mut facade,
                    )
                    .unwrap();
                let expected = model.get(&addr).cloned().unwrap_or_else(|| vec![0; 8]);
                assert_eq!(out.value, expected, "access {i} addr {addr}");
            }
        }
        // State preservation: every consolidated entry is retrievable.
        let pm = facade.machine().consolidated_view();
        for (addr, entry) in pm.iter() {
            if entry.ts.is_sentinel() {
                continue;
            }
            assert!(
                facade
                    .machine()
                    .state()
                    .lookup_version(&g, addr, entry)
                    .is_some(),
                "addr {addr} not retrievable"
            );
        }
    }

    #[test]
    fn initial_blocks_recovered_through_consolidate_and_merge() {
        // Setup round-trip: consolidate then merge must surface every
        // initial block when walking each block's own path.
        let g = geom(3);
        let initial: Vec<(u32, Vec<u8>)> = (0..g.block_count)
            .map(|a| (a, vec![(a % 251) as u8; 8]))
            .collect();
        let sm = StateMachine::setup(
            ServerConfig {
                geom: g,
                mode: Mode::Basic,
                c_max: 10,
                reclaim_after: None,
            },
            &initial,
        )
        .unwrap();
        let mut facade = DirectFacade::new(sm);
        let mut client = fresh_client(0, g, 5);
        for (addr, data) in &initial {
            let out = client
                .access(
                    AccessRequest {
                        op: OpKind::Read,
                        addr: *addr,
                        data: None,
                    },
                    &mut facade,
                )
                .unwrap();
            assert_eq!(&out.value, data, "addr {addr}");
        }
    }

    #[test]
    fn gamma_compaction_keeps_register_semantics() {
        let g = geom(3);
        let mut facade = direct(g);
        let mut client = Client::new(0, g, Mode::Basic, 4, ChaCha12Rng::seed_from_u64(6));
        let mut model: std::collections::HashMap<u32, Vec<u8>> = Default::default();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for i in 0..200u64 {
            let addr = rng.gen_range(0..g.block_count);
            if rng.gen_bool(0.5) {
                let data = vec![(i % 251) as u8; 8];
                client
                    .access(
                        AccessRequest {
                            op: OpKind::Write,
                            addr,
                            data: Some(data.clone()),
                        },
                        &mut facade,
                    )
                    .unwrap();
                model.insert(addr, data);
            } else {
                let out = client
                    .access(
                        AccessRequest {
                            op: OpKind::Read,
                            addr,
                            data: None,
                        },
                        &mut facade,
                    )
                    .unwrap();
                let expected = model.get(&addr).cloned().unwrap_or_else(|| vec![0; 8]);
                assert_eq!(out.value, expected);
            }
        }
        // History stays bounded by compaction.
        assert!(facade.machine().state().history().len() <= 5);
    }

    #[test]
    fn single_client_stash_does_not_trend_upward() {
        let g = geom(4);
        let mut facade = direct(g);
        let mut client = fresh_client(0, g, 8);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut sizes = Vec::new();
        for _ in 0..3_000 {
            let addr = rng.gen_range(0..g.block_count);
            client
                .access(
                    AccessRequest {
                        op: OpKind::Write,
                        addr,
                        data: Some(vec![1; 8]),
                    },
                    &mut facade,
                )
                .unwrap();
            sizes.push(facade.machine().consolidated_view().stash_population());
        }
        let early: f64 =
            sizes[500..1500].iter().sum::<usize>() as f64 / 1000.0;
        let late: f64 = sizes[2000..3000].iter().sum::<usize>() as f64 / 1000.0;
        assert!(
            late <= early + g.bucket_size as f64,
            "stash trending upward: early {early:.2} late {late:.2}"
        );
    }
}

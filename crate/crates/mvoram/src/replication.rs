//! Deterministic simulation of the replicated deployment.
//!
//! Consensus is an oracle: the simulator assigns the total order directly
//! and every live replica executes the same log. What is simulated
//! faithfully is everything above consensus: direct dissemination of
//! eviction payloads with only their digest ordered, the hash-reply
//! optimization with its fallback, `t + 1` matching-reply consolidation,
//! per-access key reconstruction from replica shares, the encryption
//! envelope with its padding classes, Byzantine fault injection, and the
//! round scheduler that interleaves concurrent clients.
//!
//! Correct replicas are deterministic, so they produce byte-identical
//! replies; the simulator encodes each replica's reply, checks the bytes
//! agree, and seals/digests the canonical bytes once. Sampled state-hash
//! comparisons independently verify that determinism.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::zipf::ZipfSampler;
use crate::client::{
    AccessRequest, AccessTrace, Client, ClientError, FacadeError, OpKind, PmView, PsView,
    ServerFacade, StepOutcome,
};
use crate::core::{PositionMap, TreeGeometry};
use crate::secrets::{
    self, addr_tag, pow2_class, reconstruct_key, share_key, KeyShare, MsgKind, SecretsError,
    NONCE_LEN,
};
use crate::server::{
    decode_reply, encode_reply, encode_request, ClientId, EvictBody, Mode, Reply, Request,
    ServerConfig, StateMachine,
};

/// Bytes of a hash-only reply on the wire: a 32-byte digest plus framing.
const HASH_REPLY_BYTES: u64 = 40;
/// Bytes of the ordered digest record for a directly disseminated eviction.
const ORDER_DIGEST_BYTES: u64 = 40;

#[derive(Debug, Error)]
pub enum ReplicationError {
    #[error("resilience bound violated: need n > 3t, got n={n} t={t}")]
    ResilienceBound { n: usize, t: usize },
    #[error("fault budget exhausted: {0} replicas already faulty")]
    FaultBudget(usize),
    #[error("replica index {0} out of range")]
    BadReplica(usize),
    #[error("correct replicas disagree on reply bytes at log position {0}")]
    ReplyDivergence(u64),
    #[error("no reply reached t+1 matching support at log position {0}")]
    QuorumUnreachable(u64),
    #[error("reconstructed key does not match the session key")]
    KeyMismatch,
    #[error("share handling: {0}")]
    Secrets(#[from] SecretsError),
    #[error("wire: {0}")]
    Wire(#[from] crate::core::wire::WireError),
    #[error("client: {0}")]
    Client(String),
    #[error("setup: {0}")]
    Setup(String),
}

/// How an injected Byzantine replica misbehaves. The total order itself is
/// assumed correct; faults only affect a replica's own state and messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultBehavior {
    /// Stops executing and replying.
    Crash,
    /// Executes correctly but garbles its outbound replies (and advertises
    /// the digest of the garbled bytes, like a consistent liar).
    CorruptReplies,
    /// Replies correctly but corrupts the key share it distributes.
    CorruptShares,
    /// Replies correctly but advertises a wrong digest.
    EquivocateHash,
    /// Silently diverges its own state, so all its future replies drift.
    CorruptState,
}

impl FaultBehavior {
    pub fn parse(s: &str) -> Option<FaultBehavior> {
        Some(match s {
            "crash" => FaultBehavior::Crash,
            "corrupt-replies" => FaultBehavior::CorruptReplies,
            "corrupt-shares" => FaultBehavior::CorruptShares,
            "equivocate-hash" => FaultBehavior::EquivocateHash,
            "corrupt-state" => FaultBehavior::CorruptState,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            FaultBehavior::Crash => "crash",
            FaultBehavior::CorruptReplies => "corrupt-replies",
            FaultBehavior::CorruptShares => "corrupt-shares",
            FaultBehavior::EquivocateHash => "equivocate-hash",
            FaultBehavior::CorruptState => "corrupt-state",
        }
    }
}

struct Replica {
    sm: StateMachine,
    fault: Option<FaultBehavior>,
    share: KeyShare,
}

/// `n` replicas of the ORAM state machine behind a simulated total order.
pub struct ReplicaGroup {
    geom: TreeGeometry,
    n: usize,
    t: usize,
    key: [u8; 32],
    replicas: Vec<Replica>,
    log_pos: u64,
}

/// Per-client network identity: the session key plus the stream used for
/// nonces and for picking the designated full replier.
pub struct NetClient {
    pub id: ClientId,
    key: [u8; 32],
    rng: ChaCha12Rng,
}

pub struct SubmitOutcome {
    pub sn: u64,
    pub reply: Reply,
    pub req_bytes: u64,
    pub resp_bytes: u64,
    pub open_contexts: usize,
}

impl ReplicaGroup {
    pub fn new(
        server: ServerConfig,
        n: usize,
        t: usize,
        initial: &[(u32, Vec<u8>)],
        key: [u8; 32],
        share_rng: &mut ChaCha12Rng,
    ) -> Result<ReplicaGroup, ReplicationError> {
        if n <= 3 * t {
            return Err(ReplicationError::ResilienceBound { n, t });
        }
        let shares = share_key(&key, n, t, share_rng)?;
        let replicas = shares
            .into_iter()
            .map(|share| {
                StateMachine::setup(server, initial)
                    .map(|sm| Replica {
                        sm,
                        fault: None,
                        share,
                    })
                    .map_err(|e| ReplicationError::Setup(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ReplicaGroup {
            geom: server.geom,
            n,
            t,
            key,
            replicas,
            log_pos: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn log_position(&self) -> u64 {
        self.log_pos
    }

    pub fn faulty_count(&self) -> usize {
        self.replicas.iter().filter(|r| r.fault.is_some()).count()
    }

    /// Marks a replica Byzantine. Rejected if it would exceed `t`.
    pub fn inject_fault(
        &mut self,
        replica: usize,
        behavior: FaultBehavior,
    ) -> Result<(), ReplicationError> {
        if replica >= self.n {
            return Err(ReplicationError::BadReplica(replica));
        }
        if self.replicas[replica].fault.is_none() && self.faulty_count() >= self.t {
            return Err(ReplicationError::FaultBudget(self.faulty_count()));
        }
        self.replicas[replica].fault = Some(behavior);
        Ok(())
    }

    fn first_correct(&self) -> &Replica {
        self.replicas
            .iter()
            .find(|r| r.fault.is_none())
            .expect("at most t of n > 3t replicas are faulty")
    }

    /// State machine of the first correct replica, the reference for
    /// consolidated views and sweeps.
    pub fn reference_machine(&self) -> &StateMachine {
        &self.first_correct().sm
    }

    /// State hashes of all correct replicas.
    pub fn correct_state_hashes(&self) -> Vec<[u8; 32]> {
        self.replicas
            .iter()
            .filter(|r| r.fault.is_none())
            .map(|r| r.sm.state_hash())
            .collect()
    }

    fn kinds(request: &Request) -> (MsgKind, MsgKind) {
        match request {
            Request::GetPm { .. } => (MsgKind::GetPmRequest, MsgKind::GetPmReply),
            Request::GetPs { .. } => (MsgKind::GetPsRequest, MsgKind::GetPsReply),
            Request::Evict { .. } => (MsgKind::EvictRequest, MsgKind::EvictReply),
        }
    }

    /// Padding class for a reply. `getPM` replies are bucketed by powers of
    /// two; `getPS` replies are padded to the worst case implied by the
    /// open-context count and a bucketed stash bound, so their length
    /// depends only on server-visible metadata, never on which block an
    /// access touched.
    fn reply_class(&self, kind: MsgKind, plain_len: usize, machine: &StateMachine) -> usize {
        match kind {
            MsgKind::GetPmReply => pow2_class(plain_len, 64),
            MsgKind::EvictReply => 16,
            MsgKind::GetPsReply => {
                let geom = self.geom;
                let slots = (geom.height as usize + 1) * geom.bucket_size as usize;
                let block_ser = 32 + geom.block_size;
                let versions_bound = machine.open_contexts() + 1;
                let stash_total: usize = machine.state().stashes().map(|s| s.len()).sum();
                let stash_bound = stash_total.next_power_of_two().max(4);
                let path_part = 4 + slots * (12 + versions_bound * block_ser);
                let stash_part = 4 + versions_bound * 4 + stash_bound * block_ser;
                let class = path_part + stash_part;
                if plain_len + 4 > class {
                    // Version pile-up beyond the metadata bound; fall back
                    // to a bucketed class rather than failing the seal.
                    pow2_class(plain_len, class.next_power_of_two())
                } else {
                    class
                }
            }
            _ => pow2_class(plain_len, 64),
        }
    }

    fn request_class(kind: MsgKind, plain_len: usize) -> usize {
        match kind {
            MsgKind::EvictRequest => pow2_class(plain_len, 256),
            _ => 64,
        }
    }

    /// Executes one operation at the next log position and consolidates the
    /// replies the way the client driver does: one designated full reply,
    /// digests from the rest, fallback fetches on mismatch.
    pub fn submit(
        &mut self,
        net: &mut NetClient,
        request: &Request,
    ) -> Result<SubmitOutcome, ReplicationError> {
        self.log_pos += 1;
        let sn = self.log_pos;
        let (req_kind, reply_kind) = Self::kinds(request);

        // Client -> replicas: the sealed request goes to everyone. An
        // eviction payload travels directly; only its digest is ordered.
        let plain_req = encode_request(request);
        let mut nonce = [0u8; NONCE_LEN];
        net.rng.fill_bytes(&mut nonce);
        let sealed_req = secrets::seal(
            &net.key,
            req_kind,
            nonce,
            &plain_req,
            Self::request_class(req_kind, plain_req.len()),
        )?;
        let mut req_bytes = (self.n as u64) * sealed_req.len() as u64;
        if matches!(request, Request::Evict { .. }) {
            req_bytes += (self.n as u64) * ORDER_DIGEST_BYTES;
        }

        // Execute on every live replica and encode each reply.
        let mut encoded: Vec<Option<Vec<u8>>> = Vec::with_capacity(self.n);
        for replica in &mut self.replicas {
            match replica.fault {
                Some(FaultBehavior::Crash) => {
                    encoded.push(None);
                    continue;
                }
                Some(FaultBehavior::CorruptState) => {
                    let reply = replica.sm.apply(request);
                    // One bogus operation is enough: the sequence counter
                    // diverges and every later reply drifts with it.
                    replica.sm.apply(&Request::GetPm {
                        client: u32::MAX,
                        addr_tag: None,
                    });
                    encoded.push(Some(encode_reply(&reply)));
                }
                _ => {
                    let reply = replica.sm.apply(request);
                    encoded.push(Some(encode_reply(&reply)));
                }
            }
        }

        // Correct replicas must agree byte-for-byte; seal the canonical
        // bytes once on their behalf.
        let canonical_plain = self
            .replicas
            .iter()
            .zip(&encoded)
            .find(|(r, e)| r.fault.is_none() && e.is_some())
            .and_then(|(_, e)| e.clone())
            .expect("a correct replica always replies");
        for (replica, bytes) in self.replicas.iter().zip(&encoded) {
            if replica.fault.is_none() && bytes.as_deref() != Some(canonical_plain.as_slice()) {
                return Err(ReplicationError::ReplyDivergence(sn));
            }
        }
        let reply_nonce = secrets::reply_nonce(sn, reply_kind);
        let class = self.reply_class(reply_kind, canonical_plain.len(), &self.first_correct().sm);
        let canonical_sealed =
            secrets::seal(&self.key, reply_kind, reply_nonce, &canonical_plain, class)?;
        let canonical_digest: [u8; 32] = Sha256::digest(&canonical_sealed).into();

        // Per-replica wire view: sealed bytes plus the digest it advertises
        // (and, for getPM, its key share).
        struct WireReply {
            sealed: Vec<u8>,
            advertised: [u8; 32],
            share: Option<Vec<u8>>,
        }
        let mut wire: Vec<Option<WireReply>> = Vec::with_capacity(self.n);
        for (idx, replica) in self.replicas.iter().enumerate() {
            let Some(plain) = &encoded[idx] else {
                wire.push(None);
                continue;
            };
            let mut share = None;
            if matches!(request, Request::GetPm { .. }) {
                let mut s = replica.share.clone();
                if replica.fault == Some(FaultBehavior::CorruptShares) {
                    // Still a valid field element, so only consistency
                    // voting can unmask it.
                    s.words[0] = (s.words[0] + 1) % ((1u64 << 61) - 1);
                }
                share = Some(s.to_wire());
            }
            let entry = match replica.fault {
                None | Some(FaultBehavior::CorruptShares) => WireReply {
                    sealed: canonical_sealed.clone(),
                    advertised: canonical_digest,
                    share,
                },
                Some(FaultBehavior::EquivocateHash) => {
                    let mut advertised = canonical_digest;
                    advertised[0] ^= 0xff;
                    WireReply {
                        sealed: canonical_sealed.clone(),
                        advertised,
                        share,
                    }
                }
                Some(FaultBehavior::CorruptReplies) => {
                    let mut sealed = canonical_sealed.clone();
                    let mid = sealed.len() / 2;
                    sealed[mid] ^= 0x5a;
                    let advertised = Sha256::digest(&sealed).into();
                    WireReply {
                        sealed,
                        advertised,
                        share,
                    }
                }
                Some(FaultBehavior::CorruptState) => {
                    let sealed = secrets::seal(&self.key, reply_kind, reply_nonce, plain, class)
                        .unwrap_or_else(|_| {
                            // Its divergent reply may overflow the class; a
                            // garbled envelope is just as Byzantine.
                            let mut s = canonical_sealed.clone();
                            s[0] ^= 1;
                            s
                        });
                    let advertised = Sha256::digest(&sealed).into();
                    WireReply {
                        sealed,
                        advertised,
                        share,
                    }
                }
                Some(FaultBehavior::Crash) => unreachable!(),
            };
            wire.push(Some(entry));
        }

        // Consolidation: the designated replica sends the full reply,
        // everyone else a digest. Accept on t matching digests; otherwise
        // fetch full replies until one digest has t+1 total support.
        let mut resp_bytes = 0u64;
        if matches!(request, Request::GetPm { .. }) {
            resp_bytes += wire
                .iter()
                .flatten()
                .map(|w| w.share.as_ref().map(|s| s.len() as u64).unwrap_or(0))
                .sum::<u64>();
        }
        let live: Vec<usize> = (0..self.n).filter(|i| wire[*i].is_some()).collect();
        resp_bytes += (live.len().saturating_sub(1) as u64) * HASH_REPLY_BYTES;

        let mut designated = net.rng.gen_range(0..self.n);
        while wire[designated].is_none() {
            designated = (designated + 1) % self.n;
        }
        let mut fetched: Vec<usize> = vec![designated];
        resp_bytes += wire[designated].as_ref().unwrap().sealed.len() as u64;

        let chosen_bytes: Vec<u8> = 'consolidate: {
            let full = wire[designated].as_ref().unwrap();
            let full_digest: [u8; 32] = Sha256::digest(&full.sealed).into();
            let votes = live
                .iter()
                .filter(|&&i| i != designated)
                .filter(|&&i| wire[i].as_ref().unwrap().advertised == full_digest)
                .count();
            if votes >= self.t {
                break 'consolidate full.sealed.clone();
            }
            // Fallback: ask t further replicas for their full replies.
            let mut support: BTreeMap<[u8; 32], usize> = BTreeMap::new();
            for &i in &live {
                if i != designated {
                    *support
                        .entry(wire[i].as_ref().unwrap().advertised)
                        .or_default() += 1;
                }
            }
            *support.entry(full_digest).or_default() += 1;
            let mut cursor = (designated + 1) % self.n;
            let mut extra = 0;
            while extra < self.t {
                if wire[cursor].is_some() && !fetched.contains(&cursor) {
                    fetched.push(cursor);
                    resp_bytes += wire[cursor].as_ref().unwrap().sealed.len() as u64;
                    extra += 1;
                }
                cursor = (cursor + 1) % self.n;
            }
            // A digest needs t+1 total support; with at most t faulty
            // replicas only the correct reply can reach that.
            let winner = support
                .iter()
                .find(|(_, &count)| count >= self.t + 1)
                .map(|(digest, _)| *digest)
                .ok_or(ReplicationError::QuorumUnreachable(sn))?;
            for &i in &fetched {
                let w = wire[i].as_ref().unwrap();
                let digest: [u8; 32] = Sha256::digest(&w.sealed).into();
                if digest == winner {
                    break 'consolidate w.sealed.clone();
                }
            }
            // The winner's bytes are not among the fetched replies yet;
            // fetch from a replica that advertised it.
            for &i in &live {
                let w = wire[i].as_ref().unwrap();
                if w.advertised == winner && !fetched.contains(&i) {
                    resp_bytes += w.sealed.len() as u64;
                    let digest: [u8; 32] = Sha256::digest(&w.sealed).into();
                    if digest == winner {
                        break 'consolidate w.sealed.clone();
                    }
                }
            }
            return Err(ReplicationError::QuorumUnreachable(sn));
        };

        let (_, plain) = secrets::open(&net.key, &chosen_bytes)?;
        let reply = decode_reply(&plain)?;

        // Key reconstruction from the shares riding a getPM reply.
        if matches!(request, Request::GetPm { .. }) {
            let shares: Vec<KeyShare> = wire
                .iter()
                .flatten()
                .filter_map(|w| w.share.as_deref())
                .filter_map(|bytes| KeyShare::from_wire(bytes).ok())
                .collect();
            let key = reconstruct_key(&shares, self.t)?;
            if key != self.key {
                return Err(ReplicationError::KeyMismatch);
            }
        }

        let open_contexts = self.first_correct().sm.open_contexts();
        Ok(SubmitOutcome {
            sn,
            reply,
            req_bytes,
            resp_bytes,
            open_contexts,
        })
    }
}

pub fn derive_rng(seed: u64, label: &str, id: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(b"mvoram.rng");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(id.to_le_bytes());
    ChaCha12Rng::from_seed(h.finalize().into())
}

pub fn derive_key(seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"mvoram.key");
    h.update(seed.to_le_bytes());
    h.finalize().into()
}

/// Which clients act each round and how their three phases interleave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePolicy {
    /// Clients take turns; each performs its whole access uninterrupted.
    RoundRobin,
    /// Random interleaving of all active clients' phases.
    Random,
    /// Maximum version fan-out: all `getPM`s first, then all `getPS`s,
    /// then all `evict`s.
    Adversarial,
}

impl SchedulePolicy {
    pub fn parse(s: &str) -> Option<SchedulePolicy> {
        Some(match s {
            "round-robin" => SchedulePolicy::RoundRobin,
            "random" => SchedulePolicy::Random,
            "adversarial" => SchedulePolicy::Adversarial,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchedulePolicy::RoundRobin => "round-robin",
            SchedulePolicy::Random => "random",
            SchedulePolicy::Adversarial => "adversarial",
        }
    }
}

/// Freeze a client (simulated crash) at a given round, after it has issued
/// `after_ops` of that round's server operations (0 freezes it before the
/// round; 1 after `getPM`; 2 after `getPS`).
#[derive(Debug, Clone, Copy)]
pub struct FreezeSpec {
    pub client: ClientId,
    pub round: u64,
    pub after_ops: u32,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub geom: TreeGeometry,
    pub n: usize,
    pub t: usize,
    /// Concurrent clients (`c`): the pool size and per-round activity.
    pub clients: u32,
    pub mode: Mode,
    pub gamma: u64,
    pub c_max: usize,
    pub schedule: SchedulePolicy,
    /// Zipfian skew of the workload's address distribution.
    pub alpha: f64,
    pub write_fraction: f64,
    /// Target number of completed accesses (rounded up to whole rounds).
    pub accesses: u64,
    pub seed: u64,
    pub faults: Vec<(usize, FaultBehavior)>,
    pub freezes: Vec<FreezeSpec>,
    /// Operations between cross-replica state-hash comparisons (0: final only).
    pub hash_check_interval: u64,
    /// Completed accesses between full retrievability sweeps (0: final only).
    pub sweep_interval: u64,
    pub collect_metrics: bool,
    /// Preload every address at setup instead of starting empty.
    pub initial_fill: bool,
}

impl SimConfig {
    pub fn new(geom: TreeGeometry, n: usize, t: usize, clients: u32, seed: u64) -> Self {
        SimConfig {
            geom,
            n,
            t,
            clients,
            mode: Mode::Basic,
            gamma: 64,
            c_max: (clients as usize).max(10),
            schedule: SchedulePolicy::Adversarial,
            alpha: 1.0,
            write_fraction: 0.5,
            accesses: 1000,
            seed,
            faults: Vec::new(),
            freezes: Vec::new(),
            hash_check_interval: 2048,
            sweep_interval: 0,
            collect_metrics: false,
            initial_fill: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpLabel {
    GetPm,
    GetPs,
    Evict,
}

impl OpLabel {
    pub fn name(&self) -> &'static str {
        match self {
            OpLabel::GetPm => "getPM",
            OpLabel::GetPs => "getPS",
            OpLabel::Evict => "evict",
        }
    }
}

/// One row of the per-operation metrics stream.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub round: u64,
    pub client: ClientId,
    pub op: OpLabel,
    pub req_bytes: u64,
    pub resp_bytes: u64,
    pub sn: u64,
    pub stash_size: usize,
    pub open_contexts: usize,
}

#[derive(Debug, Clone)]
pub struct StashSample {
    pub round: u64,
    pub accesses_done: u64,
    pub stash_size: usize,
}

/// A completed high-level access with everything the checker needs.
#[derive(Debug, Clone)]
pub struct CompletedAccess {
    pub client: ClientId,
    pub op: OpKind,
    pub addr: u32,
    pub value: Vec<u8>,
    pub trace: AccessTrace,
    pub ops_issued: u32,
    pub start_round: u64,
    pub end_round: u64,
    /// Simulator round in which the real (non-dummy) access executed.
    pub real_sim_round: u64,
}

#[derive(Debug, Clone)]
pub struct IncompleteAccess {
    pub client: ClientId,
    pub op: OpKind,
    pub addr: u32,
    pub ops_issued: u32,
    pub frozen_at_round: u64,
}

#[derive(Debug)]
pub struct SimOutput {
    pub records: Vec<CompletedAccess>,
    pub incomplete: Vec<IncompleteAccess>,
    pub metrics: Vec<MetricRow>,
    pub stash_series: Vec<StashSample>,
    pub per_client_completed: BTreeMap<ClientId, u64>,
    pub rounds_run: u64,
    pub total_ops: u64,
    pub shadow_checks: u64,
    pub shadow_mismatches: u64,
    pub sweeps: u64,
    pub sweep_failures: u64,
    /// Sampled (log position, agreed hash) of the correct replicas.
    pub hash_samples: Vec<(u64, [u8; 32])>,
    pub final_correct_hash: [u8; 32],
    /// Cross-replica divergence, if any was ever observed.
    pub divergence: Option<String>,
    /// Structural wait-freedom violations (wrong op counts, retries).
    pub structural_violations: Vec<String>,
}

struct Recorder {
    view: PositionMap,
    stash_pop: usize,
    shadow: Vec<(u64, Vec<u8>)>,
    shadow_checks: u64,
    shadow_mismatches: u64,
    metrics: Vec<MetricRow>,
    collect_metrics: bool,
    round: u64,
}

impl Recorder {
    fn new(geom: &TreeGeometry, collect_metrics: bool, initial: &[(u32, Vec<u8>)]) -> Recorder {
        let mut shadow = vec![(0u64, vec![0u8; geom.block_size]); geom.block_count as usize];
        let mut view = PositionMap::fresh(geom.block_count);
        for (addr, data) in initial {
            shadow[*addr as usize] = (0, data.clone());
        }
        if !initial.is_empty() {
            // Setup placements form the synthetic sequence-0 path map.
            let (state, _) = crate::core::OramState::with_initial(geom, initial);
            view = state.consolidated(geom.block_count);
        }
        let stash_pop = view.stash_population();
        Recorder {
            view,
            stash_pop,
            shadow,
            shadow_checks: 0,
            shadow_mismatches: 0,
            metrics: Vec::new(),
            collect_metrics,
            round: 0,
        }
    }

    /// Folds an eviction's path map into the running consolidated view,
    /// updates the shadow of latest writes, and checks that the view's
    /// version for every touched address equals the shadow's.
    fn on_evict(&mut self, body: &EvictBody) {
        let seq = body.path_map.seq as i64;
        for (addr, (loc, ts)) in body.path_map.iter() {
            if ts.version == seq && seq >= 0 {
                // The block written (or zero-initialized) by this access.
                if let Some(block) = body
                    .new_stash
                    .blocks()
                    .iter()
                    .find(|b| b.addr == *addr && b.ts == *ts)
                {
                    let cell = &mut self.shadow[*addr as usize];
                    if seq as u64 >= cell.0 {
                        *cell = (seq as u64, block.data.clone());
                    }
                }
            }
            let was_stash = {
                let e = self.view.get(*addr);
                e.loc.is_stash() && !e.ts.is_sentinel()
            };
            if self.view.fold_update(*addr, *loc, *ts) {
                match (was_stash, loc.is_stash()) {
                    (false, true) => self.stash_pop += 1,
                    (true, false) => self.stash_pop -= 1,
                    _ => {}
                }
            }
        }
        for (addr, _) in body.path_map.iter() {
            self.shadow_checks += 1;
            let view_version = self.view.get(*addr).ts.version;
            if view_version != self.shadow[*addr as usize].0 as i64 {
                self.shadow_mismatches += 1;
            }
        }
    }

    fn record_op(&mut self, client: ClientId, op: OpLabel, out: &SubmitOutcome) {
        if self.collect_metrics {
            self.metrics.push(MetricRow {
                round: self.round,
                client,
                op,
                req_bytes: out.req_bytes,
                resp_bytes: out.resp_bytes,
                sn: out.sn,
                stash_size: self.stash_pop,
                open_contexts: out.open_contexts,
            });
        }
    }
}

struct Fabric {
    group: ReplicaGroup,
    nets: Vec<NetClient>,
    recorder: Recorder,
}

struct FabricFacade<'a> {
    fabric: &'a mut Fabric,
    idx: usize,
    err: Option<ReplicationError>,
}

impl FabricFacade<'_> {
    fn submit(&mut self, label: OpLabel, request: Request) -> Result<SubmitOutcome, FacadeError> {
        if let Request::Evict { body, .. } = &request {
            self.fabric.recorder.on_evict(body);
        }
        let client = self.fabric.nets[self.idx].id;
        match self
            .fabric
            .group
            .submit(&mut self.fabric.nets[self.idx], &request)
        {
            Ok(out) => {
                self.fabric.recorder.record_op(client, label, &out);
                Ok(out)
            }
            Err(e) => {
                let msg = e.to_string();
                self.err = Some(e);
                Err(FacadeError::Transport(msg))
            }
        }
    }
}

impl ServerFacade for FabricFacade<'_> {
    fn get_pm(
        &mut self,
        client: ClientId,
        addr_tag: Option<[u8; 16]>,
    ) -> Result<PmView, FacadeError> {
        let out = self.submit(OpLabel::GetPm, Request::GetPm { client, addr_tag })?;
        match out.reply {
            Reply::GetPm {
                seq,
                history,
                registry,
            } => Ok(PmView {
                sn: out.sn,
                seq,
                history,
                registry,
            }),
            Reply::Busy(reason) => Err(FacadeError::Busy(reason)),
            other => Err(FacadeError::Transport(format!("unexpected reply {other:?}"))),
        }
    }

    fn get_ps(&mut self, client: ClientId, leaf: u32) -> Result<PsView, FacadeError> {
        let out = self.submit(OpLabel::GetPs, Request::GetPs { client, leaf })?;
        match out.reply {
            Reply::GetPs { path, stashes } => Ok(PsView {
                sn: out.sn,
                path,
                stashes,
            }),
            Reply::Busy(reason) => Err(FacadeError::Busy(reason)),
            other => Err(FacadeError::Transport(format!("unexpected reply {other:?}"))),
        }
    }

    fn evict(&mut self, client: ClientId, body: EvictBody) -> Result<u64, FacadeError> {
        let out = self.submit(OpLabel::Evict, Request::Evict { client, body })?;
        match out.reply {
            Reply::EvictAck => Ok(out.sn),
            Reply::Busy(reason) => Err(FacadeError::Busy(reason)),
            other => Err(FacadeError::Transport(format!("unexpected reply {other:?}"))),
        }
    }

    fn addr_tag(&self, addr: u32) -> [u8; 16] {
        addr_tag(&self.fabric.nets[self.idx].key, addr)
    }
}

struct WorkloadStream {
    zipf: ZipfSampler,
    rng: ChaCha12Rng,
    write_fraction: f64,
    client: ClientId,
    counter: u64,
    block_size: usize,
}

impl WorkloadStream {
    fn next_request(&mut self) -> AccessRequest {
        let addr = (self.zipf.sample(&mut self.rng) - 1) as u32;
        self.counter += 1;
        if self.rng.gen_bool(self.write_fraction) {
            // Payloads embed (client, counter, addr) so written values are
            // unique whenever the block size allows, which the history
            // checker's witness construction relies on.
            let mut data = vec![0u8; self.block_size];
            let mut pattern = Vec::with_capacity(16);
            pattern.extend_from_slice(&self.client.to_le_bytes());
            pattern.extend_from_slice(&self.counter.to_le_bytes());
            pattern.extend_from_slice(&addr.to_le_bytes());
            for (i, b) in data.iter_mut().enumerate() {
                *b = pattern[i % pattern.len()];
            }
            AccessRequest {
                op: OpKind::Write,
                addr,
                data: Some(data),
            }
        } else {
            AccessRequest {
                op: OpKind::Read,
                addr,
                data: None,
            }
        }
    }
}

/// Runs a full deterministic simulation of the configured system.
pub fn run(config: &SimConfig) -> Result<SimOutput, ReplicationError> {
    let geom = config.geom;
    let c = config.clients as usize;
    if c == 0 {
        return Err(ReplicationError::Setup("need at least one client".into()));
    }
    let key = derive_key(config.seed);
    let mut share_rng = derive_rng(config.seed, "shares", 0);
    let server = ServerConfig {
        geom,
        mode: config.mode,
        c_max: config.c_max,
        reclaim_after: None,
    };
    let initial: Vec<(u32, Vec<u8>)> = if config.initial_fill {
        (0..geom.block_count)
            .map(|a| {
                let mut data = vec![0u8; geom.block_size];
                let tag = a.to_le_bytes();
                for (i, b) in data.iter_mut().enumerate() {
                    *b = tag[i % 4];
                }
                (a, data)
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut group = ReplicaGroup::new(server, config.n, config.t, &initial, key, &mut share_rng)?;
    for (replica, behavior) in &config.faults {
        group.inject_fault(*replica, *behavior)?;
    }

    let mut clients: Vec<Client> = (0..c)
        .map(|i| {
            Client::new(
                i as ClientId,
                geom,
                config.mode,
                config.gamma,
                derive_rng(config.seed, "client", i as u64),
            )
        })
        .collect();
    let mut workloads: Vec<WorkloadStream> = (0..c)
        .map(|i| WorkloadStream {
            zipf: ZipfSampler::new(geom.block_count as u64, config.alpha),
            rng: derive_rng(config.seed, "workload", i as u64),
            write_fraction: config.write_fraction,
            client: i as ClientId,
            counter: 0,
            block_size: geom.block_size,
        })
        .collect();
    let mut fabric = Fabric {
        group,
        nets: (0..c)
            .map(|i| NetClient {
                id: i as ClientId,
                key,
                rng: derive_rng(config.seed, "net", i as u64),
            })
            .collect(),
        recorder: Recorder::new(&geom, config.collect_metrics, &initial),
    };
    let mut sched_rng = derive_rng(config.seed, "sched", 0);

    let rounds_per_access = match config.mode {
        Mode::Basic => 1u64,
        Mode::Strong { sigma } => sigma as u64 + 1,
    };
    let rounds = config.accesses.div_ceil(c as u64) * rounds_per_access;

    let mut out = SimOutput {
        records: Vec::new(),
        incomplete: Vec::new(),
        metrics: Vec::new(),
        stash_series: Vec::new(),
        per_client_completed: (0..c as u32).map(|i| (i, 0)).collect(),
        rounds_run: 0,
        total_ops: 0,
        shadow_checks: 0,
        shadow_mismatches: 0,
        sweeps: 0,
        sweep_failures: 0,
        hash_samples: Vec::new(),
        final_correct_hash: [0; 32],
        divergence: None,
        structural_violations: Vec::new(),
    };

    let mut frozen = vec![false; c];
    let mut start_round = vec![0u64; c];
    let mut current_req: Vec<Option<AccessRequest>> = vec![None; c];
    let mut ops_since_hash_check = 0u64;
    let mut done_since_sweep = 0u64;

    let expected_ops = 3 * rounds_per_access as u32;

    for round in 0..rounds {
        fabric.recorder.round = round;
        // Clients with no in-flight access start their next one.
        for i in 0..c {
            if frozen[i] || clients[i].busy() {
                continue;
            }
            let req = workloads[i].next_request();
            current_req[i] = Some(req.clone());
            start_round[i] = round;
            clients[i]
                .start_access(req)
                .map_err(|e| ReplicationError::Client(e.to_string()))?;
        }

        // Per-round operation order.
        let active: Vec<usize> = (0..c).filter(|&i| !frozen[i] && clients[i].busy()).collect();
        let rotated: Vec<usize> = {
            let mut v = active.clone();
            if !v.is_empty() {
                let shift = (round as usize) % v.len();
                v.rotate_left(shift);
            }
            v
        };
        let order: Vec<usize> = match config.schedule {
            SchedulePolicy::RoundRobin => rotated
                .iter()
                .flat_map(|&i| std::iter::repeat(i).take(3))
                .collect(),
            SchedulePolicy::Adversarial => {
                let mut v = Vec::with_capacity(rotated.len() * 3);
                for _phase in 0..3 {
                    v.extend_from_slice(&rotated);
                }
                v
            }
            SchedulePolicy::Random => {
                let mut v: Vec<usize> = rotated
                    .iter()
                    .flat_map(|&i| std::iter::repeat(i).take(3))
                    .collect();
                for i in (1..v.len()).rev() {
                    let j = sched_rng.gen_range(0..=i);
                    v.swap(i, j);
                }
                v
            }
        };

        let mut ops_this_round = vec![0u32; c];
        for &i in &order {
            if frozen[i] {
                continue;
            }
            if let Some(_spec) = config
                .freezes
                .iter()
                .find(|f| f.client as usize == i && f.round == round && f.after_ops <= ops_this_round[i])
            {
                frozen[i] = true;
                let req = current_req[i].clone().expect("frozen client had a request");
                out.incomplete.push(IncompleteAccess {
                    client: i as ClientId,
                    op: req.op,
                    addr: req.addr,
                    ops_issued: ops_this_round[i],
                    frozen_at_round: round,
                });
                continue;
            }
            let mut facade = FabricFacade {
                fabric: &mut fabric,
                idx: i,
                err: None,
            };
            let step = clients[i].step(&mut facade);
            if let Some(err) = facade.err {
                return Err(err);
            }
            let step = step.map_err(|e: ClientError| ReplicationError::Client(e.to_string()))?;
            ops_this_round[i] += 1;
            out.total_ops += 1;
            ops_since_hash_check += 1;

            if let StepOutcome::Done(outcome) = step {
                let req = current_req[i].take().expect("completed access had a request");
                if outcome.ops_issued != expected_ops {
                    out.structural_violations.push(format!(
                        "client {i} issued {} ops, expected {expected_ops}",
                        outcome.ops_issued
                    ));
                }
                *out.per_client_completed.get_mut(&(i as u32)).unwrap() += 1;
                done_since_sweep += 1;
                out.records.push(CompletedAccess {
                    client: i as ClientId,
                    op: req.op,
                    addr: req.addr,
                    value: outcome.value,
                    real_sim_round: start_round[i] + outcome.trace.real_round as u64,
                    trace: outcome.trace,
                    ops_issued: outcome.ops_issued,
                    start_round: start_round[i],
                    end_round: round,
                });
            }

            if config.hash_check_interval > 0 && ops_since_hash_check >= config.hash_check_interval
            {
                ops_since_hash_check = 0;
                check_agreement(&fabric.group, &mut out);
            }
        }

        out.stash_series.push(StashSample {
            round,
            accesses_done: out.records.len() as u64,
            stash_size: fabric.recorder.stash_pop,
        });
        out.rounds_run = round + 1;

        if config.sweep_interval > 0 && done_since_sweep >= config.sweep_interval {
            done_since_sweep = 0;
            run_sweep(&fabric, &mut out);
        }
    }

    check_agreement(&fabric.group, &mut out);
    run_sweep(&fabric, &mut out);
    out.final_correct_hash = fabric.group.correct_state_hashes()[0];
    out.shadow_checks = fabric.recorder.shadow_checks;
    out.shadow_mismatches = fabric.recorder.shadow_mismatches;
    out.metrics = std::mem::take(&mut fabric.recorder.metrics);
    Ok(out)
}

fn check_agreement(group: &ReplicaGroup, out: &mut SimOutput) {
    let hashes = group.correct_state_hashes();
    if hashes.windows(2).any(|w| w[0] != w[1]) {
        out.divergence = Some(format!(
            "correct replicas diverged at log position {}",
            group.log_position()
        ));
    } else {
        out.hash_samples.push((group.log_position(), hashes[0]));
    }
}

/// State preservation sweep: the version named by the consolidated view
/// must be retrievable from a correct replica's state and carry the latest
/// written payload.
fn run_sweep(fabric: &Fabric, out: &mut SimOutput) {
    out.sweeps += 1;
    let machine = fabric.group.reference_machine();
    let geom = machine.config().geom;
    let view = &fabric.recorder.view;
    for (addr, entry) in view.iter() {
        if entry.ts.is_sentinel() {
            continue;
        }
        match machine.state().lookup_version(&geom, addr, entry) {
            None => out.sweep_failures += 1,
            Some(block) => {
                if block.data != fabric.recorder.shadow[addr as usize].1 {
                    out.sweep_failures += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(seed: u64) -> SimConfig {
        let geom = TreeGeometry::with_default_count(5, 4, 16);
        let mut cfg = SimConfig::new(geom, 4, 1, 4, seed);
        cfg.accesses = 400;
        cfg.hash_check_interval = 200;
        cfg.sweep_interval = 100;
        cfg
    }

    #[test]
    fn fault_free_run_is_clean_and_reproducible() {
        let cfg = base_config(7);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert!(a.divergence.is_none());
        assert!(a.structural_violations.is_empty());
        assert_eq!(a.shadow_mismatches, 0);
        assert_eq!(a.sweep_failures, 0);
        assert!(a.records.len() >= 400);
        assert_eq!(a.final_correct_hash, b.final_correct_hash);
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.value, y.value);
            assert_eq!(x.addr, y.addr);
        }
    }

    #[test]
    fn single_client_pattern_is_three_ops_per_round() {
        let mut cfg = base_config(8);
        cfg.clients = 1;
        cfg.n = 1;
        cfg.t = 0;
        cfg.accesses = 100;
        let out = run(&cfg).unwrap();
        assert_eq!(out.records.len(), 100);
        assert_eq!(out.total_ops, 300);
        assert!(out.records.iter().all(|r| r.ops_issued == 3));
    }

    #[test]
    fn quorum_arithmetic_no_faults() {
        // n=4, t=1: one full reply plus at least one matching digest.
        let geom = TreeGeometry::with_default_count(3, 2, 8);
        let key = derive_key(1);
        let mut share_rng = derive_rng(1, "shares", 0);
        let server = ServerConfig {
            geom,
            mode: Mode::Basic,
            c_max: 4,
            reclaim_after: None,
        };
        let mut group = ReplicaGroup::new(server, 4, 1, &[], key, &mut share_rng).unwrap();
        let mut net = NetClient {
            id: 0,
            key,
            rng: derive_rng(1, "net", 0),
        };
        let out = group
            .submit(
                &mut net,
                &Request::GetPm {
                    client: 0,
                    addr_tag: None,
                },
            )
            .unwrap();
        assert!(matches!(out.reply, Reply::GetPm { seq: 1, .. }));
        assert!(out.resp_bytes > 0);
    }

    #[test]
    fn resilience_bound_checked() {
        let geom = TreeGeometry::with_default_count(3, 2, 8);
        let key = derive_key(2);
        let mut share_rng = derive_rng(2, "shares", 0);
        let server = ServerConfig {
            geom,
            mode: Mode::Basic,
            c_max: 4,
            reclaim_after: None,
        };
        assert!(matches!(
            ReplicaGroup::new(server, 3, 1, &[], key, &mut share_rng),
            Err(ReplicationError::ResilienceBound { .. })
        ));
    }

    #[test]
    fn fault_budget_enforced() {
        let geom = TreeGeometry::with_default_count(3, 2, 8);
        let key = derive_key(3);
        let mut share_rng = derive_rng(3, "shares", 0);
        let server = ServerConfig {
            geom,
            mode: Mode::Basic,
            c_max: 4,
            reclaim_after: None,
        };
        let mut group = ReplicaGroup::new(server, 4, 1, &[], key, &mut share_rng).unwrap();
        group.inject_fault(0, FaultBehavior::Crash).unwrap();
        assert!(matches!(
            group.inject_fault(1, FaultBehavior::CorruptReplies),
            Err(ReplicationError::FaultBudget(1))
        ));
        // Re-injecting on the same replica is allowed.
        group.inject_fault(0, FaultBehavior::CorruptReplies).unwrap();
    }

    fn masked_run_matches_fault_free(behavior: FaultBehavior) {
        let mut cfg = base_config(9);
        cfg.accesses = 200;
        let clean = run(&cfg).unwrap();
        let mut faulty_cfg = cfg.clone();
        faulty_cfg.faults = vec![(2, behavior)];
        let faulty = run(&faulty_cfg).unwrap();
        assert!(faulty.divergence.is_none());
        assert_eq!(faulty.shadow_mismatches, 0);
        assert_eq!(faulty.sweep_failures, 0);
        assert_eq!(clean.records.len(), faulty.records.len());
        for (x, y) in clean.records.iter().zip(&faulty.records) {
            assert_eq!(x.client, y.client);
            assert_eq!(x.addr, y.addr);
            assert_eq!(x.value, y.value, "client-visible payloads must match");
        }
        assert_eq!(clean.final_correct_hash, faulty.final_correct_hash);
    }

    #[test]
    fn crash_is_masked() {
        masked_run_matches_fault_free(FaultBehavior::Crash);
    }

    #[test]
    fn corrupt_replies_are_masked() {
        masked_run_matches_fault_free(FaultBehavior::CorruptReplies);
    }

    #[test]
    fn corrupt_shares_are_masked() {
        masked_run_matches_fault_free(FaultBehavior::CorruptShares);
    }

    #[test]
    fn equivocating_hashes_are_masked() {
        masked_run_matches_fault_free(FaultBehavior::EquivocateHash);
    }

    #[test]
    fn corrupt_state_is_masked() {
        masked_run_matches_fault_free(FaultBehavior::CorruptState);
    }

    #[test]
    fn freezing_clients_leaves_others_unaffected() {
        let mut cfg = base_config(10);
        cfg.accesses = 400;
        let baseline = run(&cfg).unwrap();
        let mut frozen_cfg = cfg.clone();
        frozen_cfg.freezes = vec![FreezeSpec {
            client: 2,
            round: 30,
            after_ops: 1, // mid-access: after its getPM
        }];
        let frozen = run(&frozen_cfg).unwrap();
        assert!(frozen.structural_violations.is_empty());
        assert_eq!(frozen.shadow_mismatches, 0);
        assert_eq!(frozen.sweep_failures, 0);
        // Other clients complete exactly as many accesses as in the
        // baseline; the frozen client stops at its freeze round.
        for i in [0u32, 1, 3] {
            assert_eq!(
                frozen.per_client_completed[&i],
                baseline.per_client_completed[&i],
                "client {i}"
            );
        }
        assert_eq!(frozen.per_client_completed[&2], 30);
        assert_eq!(frozen.incomplete.len(), 1);
        // Prefix determinism: records completed before the freeze match.
        for (x, y) in baseline
            .records
            .iter()
            .filter(|r| r.end_round < 30)
            .zip(frozen.records.iter().filter(|r| r.end_round < 30))
        {
            assert_eq!(x.value, y.value);
            assert_eq!(x.client, y.client);
        }
    }

    #[test]
    fn metrics_collect_when_enabled() {
        let mut cfg = base_config(11);
        cfg.accesses = 40;
        cfg.collect_metrics = true;
        let out = run(&cfg).unwrap();
        assert_eq!(out.metrics.len() as u64, out.total_ops);
        let pm_req: Vec<u64> = out
            .metrics
            .iter()
            .filter(|m| m.op == OpLabel::GetPm)
            .map(|m| m.req_bytes)
            .collect();
        // Fixed-class requests broadcast to n replicas.
        assert!(pm_req.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn strong_mode_runs_and_separates_real_accesses() {
        let geom = TreeGeometry::with_default_count(4, 4, 16);
        let mut cfg = SimConfig::new(geom, 1, 0, 3, 12);
        cfg.mode = Mode::Strong { sigma: 4 };
        cfg.accesses = 30;
        cfg.alpha = 0.0;
        let out = run(&cfg).unwrap();
        assert!(out.structural_violations.is_empty());
        assert!(out.records.iter().all(|r| r.ops_issued == 15));
        // Collision-freedom: no two real accesses to the same address in
        // the same simulator round.
        let mut seen = std::collections::HashSet::new();
        for r in &out.records {
            assert!(
                seen.insert((r.real_sim_round, r.addr)),
                "two real accesses to addr {} in round {}",
                r.addr,
                r.real_sim_round
            );
        }
    }
}

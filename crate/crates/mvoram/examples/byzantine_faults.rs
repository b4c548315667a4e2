//! Byzantine fault injection: up to `t` replicas lie, crash, or corrupt
//! their own state, and clients still observe exactly what a fault-free
//! run produces.

use mvoram::replication::{run, FaultBehavior, SimConfig};
use mvoram::TreeGeometry;

fn main() {
    let geom = TreeGeometry::with_default_count(6, 4, 16);
    let mut clean_cfg = SimConfig::new(geom, 4, 1, 5, 99);
    clean_cfg.accesses = 1_000;
    let clean = run(&clean_cfg).expect("fault-free run");

    for behavior in [
        FaultBehavior::Crash,
        FaultBehavior::CorruptReplies,
        FaultBehavior::CorruptShares,
        FaultBehavior::EquivocateHash,
        FaultBehavior::CorruptState,
    ] {
        let mut cfg = clean_cfg.clone();
        cfg.faults = vec![(1, behavior)];
        let faulty = run(&cfg).expect("faulty run completes");
        assert!(faulty.divergence.is_none());
        assert_eq!(faulty.records.len(), clean.records.len());
        for (a, b) in clean.records.iter().zip(&faulty.records) {
            assert_eq!(a.value, b.value, "visible payloads must not change");
        }
        assert_eq!(
            clean.final_correct_hash, faulty.final_correct_hash,
            "correct replicas end in the same state"
        );
        println!(
            "{:>16}: masked ({} accesses, payloads and state hash identical)",
            behavior.name(),
            faulty.records.len()
        );
    }
}

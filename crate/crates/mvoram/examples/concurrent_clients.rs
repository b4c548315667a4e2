//! Eight clients hammering the replicated service concurrently under the
//! adversarial schedule, with the recorded history checked for register
//! legality and linearizability afterwards.

use mvoram::analysis::checker::{check_history, records_from_sim};
use mvoram::replication::{run, SchedulePolicy, SimConfig};
use mvoram::TreeGeometry;

fn main() {
    let geom = TreeGeometry::with_default_count(8, 4, 16);
    let mut config = SimConfig::new(geom, 4, 1, 8, 2024);
    config.schedule = SchedulePolicy::Adversarial;
    config.accesses = 4_000;
    config.sweep_interval = 1_000;

    let out = run(&config).expect("simulation runs");
    println!(
        "{} accesses completed over {} rounds ({} server ops)",
        out.records.len(),
        out.rounds_run,
        out.total_ops
    );
    println!(
        "shadow checks: {} with {} mismatches; sweeps: {} with {} failures",
        out.shadow_checks, out.shadow_mismatches, out.sweeps, out.sweep_failures
    );
    assert!(out.divergence.is_none(), "replicas diverged");
    assert!(out.structural_violations.is_empty());

    let records = records_from_sim(&out);
    let verdict = check_history(&records, geom.block_size);
    println!("history verdict: {verdict:?}");
    assert!(verdict.is_legal());

    // Every access took exactly three server operations, no retries.
    assert!(out.records.iter().all(|r| r.ops_issued == 3));
    println!("every access used exactly 3 server operations");
}

//! Strong mode: each access runs sigma dummy rounds around its real one,
//! so clients targeting the same block never touch it in the same round.
//!
//! All clients here request the same address concurrently; the printed
//! schedule shows their real accesses landing in distinct rounds.

use mvoram::server::Mode;
use mvoram::replication::{run, SimConfig};
use mvoram::TreeGeometry;

fn main() {
    let geom = TreeGeometry::with_default_count(6, 4, 16);
    let sigma = 5u32;
    let clients = 4u32; // c <= sigma + 1: collision-free regime
    let mut config = SimConfig::new(geom, 1, 0, clients, 7);
    config.mode = Mode::Strong { sigma };
    config.accesses = 40;
    // Near-uniform workload over a tiny tree maximizes collision pressure.
    config.alpha = 0.0;

    let out = run(&config).expect("simulation runs");
    assert!(out.structural_violations.is_empty());
    println!(
        "{} accesses, each exactly {} server ops (3 per round, {} rounds)",
        out.records.len(),
        3 * (sigma + 1),
        sigma + 1
    );

    let mut collisions = 0;
    let mut seen = std::collections::HashMap::new();
    for r in &out.records {
        if let Some(other) = seen.insert((r.real_sim_round, r.addr), r.client) {
            println!(
                "collision: clients {other} and {} touch addr {} in round {}",
                r.client, r.addr, r.real_sim_round
            );
            collisions += 1;
        }
    }
    println!("real-access collisions: {collisions}");
    assert_eq!(collisions, 0);

    for r in out.records.iter().take(8) {
        println!(
            "client {} addr {:>2}: rounds {:>3}..{:>3}, real access in round {}",
            r.client, r.addr, r.start_round, r.end_round, r.real_sim_round
        );
    }
}

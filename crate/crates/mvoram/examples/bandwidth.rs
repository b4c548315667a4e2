//! Bandwidth shape of the three operations: getPS replies grow with the
//! number of active clients, getPM requests stay flat as the tree grows.

use mvoram::replication::{run, OpLabel, SimConfig};
use mvoram::TreeGeometry;

fn mean(metrics: &[mvoram::replication::MetricRow], op: OpLabel, req: bool) -> f64 {
    let start = metrics.len() / 3; // skip warm-up
    let rows: Vec<_> = metrics[start..].iter().filter(|m| m.op == op).collect();
    let total: u64 = rows
        .iter()
        .map(|m| if req { m.req_bytes } else { m.resp_bytes })
        .sum();
    total as f64 / rows.len().max(1) as f64
}

fn main() {
    println!("mean bytes per operation (n=4, t=1, height 8):");
    println!(
        "{:>4} {:>14} {:>14} {:>14} {:>14}",
        "c", "getPM resp", "getPS resp", "evict req", "getPM req"
    );
    for clients in [1u32, 5, 10] {
        let geom = TreeGeometry::with_default_count(8, 4, 16);
        let mut cfg = SimConfig::new(geom, 4, 1, clients, 31);
        cfg.accesses = 1_200.max(clients as u64 * 100);
        cfg.collect_metrics = true;
        cfg.hash_check_interval = 0;
        let out = run(&cfg).expect("simulation runs");
        println!(
            "{clients:>4} {:>14.0} {:>14.0} {:>14.0} {:>14.0}",
            mean(&out.metrics, OpLabel::GetPm, false),
            mean(&out.metrics, OpLabel::GetPs, false),
            mean(&out.metrics, OpLabel::Evict, true),
            mean(&out.metrics, OpLabel::GetPm, true),
        );
    }

    println!("\ngetPM request bytes across tree heights (c=5):");
    for height in [8u32, 10, 12] {
        let geom = TreeGeometry::with_default_count(height, 4, 16);
        let mut cfg = SimConfig::new(geom, 4, 1, 5, 31);
        cfg.accesses = 500;
        cfg.collect_metrics = true;
        cfg.hash_check_interval = 0;
        let out = run(&cfg).expect("simulation runs");
        println!(
            "  L = {height:>2}: {:>6.0} bytes",
            mean(&out.metrics, OpLabel::GetPm, true)
        );
    }
    println!("(requests carry no tree data, so height does not matter)");
}

//! Stash growth under worst-case concurrency: the consolidated stash
//! population climbs, then plateaus, and the plateau rises as the workload
//! flattens (lower alpha) or concurrency grows.
//!
//! A scaled-down sweep; the `mvoram stash` subcommand runs the full grid.

use mvoram::analysis::stash::{quartile_means, simulate_stash, StashRunConfig};

fn main() {
    let accesses = 12_000;
    println!("alpha sweep at c=15 (height 8, {accesses} accesses):");
    for alpha in [1e-6, 1.0, 2.0] {
        let cfg = StashRunConfig::new(8, 15, alpha, accesses, 5);
        let series = simulate_stash(&cfg).expect("simulation runs");
        let q = quartile_means(&series);
        println!(
            "  alpha {alpha:>8}: quartile means {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
            q[0], q[1], q[2], q[3]
        );
    }
    println!("client sweep at alpha=1.0:");
    for clients in [1u32, 10, 15] {
        let cfg = StashRunConfig::new(8, clients, 1.0, accesses, 5);
        let series = simulate_stash(&cfg).expect("simulation runs");
        let q = quartile_means(&series);
        println!(
            "  c = {clients:>2}: quartile means {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
            q[0], q[1], q[2], q[3]
        );
    }
    println!("(the last-quartile mean is the plateau estimate)");
}

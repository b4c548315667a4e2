//! Stash-size simulation over the real protocol.
//!
//! Runs the replicated simulator under the adversarial schedule (the
//! concurrency worst case) and reports the consolidated view's stash
//! population over time. "Stash size" counts addresses whose consolidated
//! position-map entry is the stash, not the duplicated copies inside
//! unconsolidated stash versions.

use crate::core::TreeGeometry;
use crate::replication::{self, ReplicationError, SchedulePolicy, SimConfig, StashSample};
use crate::server::Mode;

#[derive(Debug, Clone)]
pub struct StashRunConfig {
    pub height: u32,
    pub bucket_size: u32,
    pub block_size: usize,
    pub clients: u32,
    pub alpha: f64,
    pub accesses: u64,
    pub seed: u64,
    /// Keep every `sample_every`-th round in the returned series.
    pub sample_every: u64,
}

impl StashRunConfig {
    pub fn new(height: u32, clients: u32, alpha: f64, accesses: u64, seed: u64) -> Self {
        StashRunConfig {
            height,
            bucket_size: 4,
            block_size: 8,
            clients,
            alpha,
            accesses,
            seed,
            sample_every: 1,
        }
    }
}

/// Time series of stash sizes under the worst-case schedule.
pub fn simulate_stash(cfg: &StashRunConfig) -> Result<Vec<StashSample>, ReplicationError> {
    let geom = TreeGeometry::with_default_count(cfg.height, cfg.bucket_size, cfg.block_size);
    let mut sim = SimConfig::new(geom, 1, 0, cfg.clients, cfg.seed);
    sim.mode = Mode::Basic;
    sim.schedule = SchedulePolicy::Adversarial;
    sim.alpha = cfg.alpha;
    sim.accesses = cfg.accesses;
    sim.c_max = cfg.clients as usize;
    sim.hash_check_interval = 0;
    sim.sweep_interval = 0;
    let out = replication::run(&sim)?;
    let every = cfg.sample_every.max(1);
    Ok(out
        .stash_series
        .into_iter()
        .filter(|s| s.round % every == 0)
        .collect())
}

/// Mean stash size over each quarter of the series.
pub fn quartile_means(series: &[StashSample]) -> [f64; 4] {
    let mut out = [0.0f64; 4];
    if series.is_empty() {
        return out;
    }
    let quarter = series.len().div_ceil(4);
    for (q, chunk) in series.chunks(quarter).enumerate().take(4) {
        out[q] = chunk.iter().map(|s| s.stash_size as f64).sum::<f64>() / chunk.len() as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_client_series_is_flat() {
        let cfg = StashRunConfig::new(5, 1, 1.0, 3_000, 3);
        let series = simulate_stash(&cfg).unwrap();
        let q = quartile_means(&series);
        assert!(
            q[3] <= q[1].max(q[2]) + 4.0,
            "single-client stash grew: quartiles {q:?}"
        );
    }

    #[test]
    fn more_clients_mean_bigger_stash() {
        let accesses = 4_000;
        let one = quartile_means(&simulate_stash(&StashRunConfig::new(6, 1, 1.0, accesses, 4)).unwrap());
        let many =
            quartile_means(&simulate_stash(&StashRunConfig::new(6, 8, 1.0, accesses, 4)).unwrap());
        assert!(
            many[3] > one[3],
            "c=8 plateau {:.1} not above c=1 plateau {:.1}",
            many[3],
            one[3]
        );
    }
}

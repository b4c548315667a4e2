//! Experiment runner: protocol simulation with correctness checking,
//! stash-size and statistical-distance grids, bandwidth measurement, and
//! re-verification of saved histories.
//!
//! Exit codes: 0 on success, 1 on a property violation, 2 on usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvoram::experiments::{
    cmd_bench, cmd_check, cmd_simulate, cmd_stash, cmd_tvd, parse_faults, parse_freezes,
    ExperimentConfig,
};
use mvoram::replication::SchedulePolicy;

#[derive(Parser)]
#[command(name = "mvoram", version, about = "Wait-free multi-version ORAM simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonArgs {
    /// Config file of key=value lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tree height L.
    #[arg(long)]
    height: Option<u32>,
    /// Bucket size Z.
    #[arg(long)]
    bucket_size: Option<u32>,
    /// Block payload size in bytes.
    #[arg(long)]
    block_size: Option<usize>,
    /// Replica count.
    #[arg(long)]
    n: Option<usize>,
    /// Fault threshold (requires n > 3t).
    #[arg(long)]
    t: Option<usize>,
    /// Concurrent clients.
    #[arg(long)]
    clients: Option<u32>,
    /// Admission bound on open accesses.
    #[arg(long)]
    c_max: Option<usize>,
    /// Zipfian skew of the workload.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of writes in the workload.
    #[arg(long)]
    write_fraction: Option<f64>,
    /// Completed accesses to run.
    #[arg(long)]
    accesses: Option<u64>,
    /// round-robin | random | adversarial.
    #[arg(long)]
    schedule: Option<String>,
    /// Dummy rounds per access (enables strong mode).
    #[arg(long)]
    sigma: Option<u32>,
    /// History compaction period (0 disables).
    #[arg(long)]
    gamma: Option<u64>,
    /// Seed for all randomness.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for CSV files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Byzantine faults, e.g. corrupt-replies:1,crash:2.
    #[arg(long)]
    faults: Option<String>,
    /// Client freezes, e.g. 2@50+1 (client 2, round 50, after 1 op).
    #[arg(long)]
    freeze: Option<String>,
    /// Preload every address at setup.
    #[arg(long)]
    initial_fill: bool,
    /// Also emit a gnuplot script next to the CSV.
    #[arg(long)]
    gnuplot: bool,
}

impl CommonArgs {
    fn build(&self) -> Result<ExperimentConfig, String> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path).map_err(|e| e.to_string())?;
        }
        if let Some(v) = self.height {
            config.height = v;
        }
        if let Some(v) = self.bucket_size {
            config.bucket_size = v;
        }
        if let Some(v) = self.block_size {
            config.block_size = v;
        }
        if let Some(v) = self.n {
            config.n = v;
        }
        if let Some(v) = self.t {
            config.t = v;
        }
        if let Some(v) = self.clients {
            config.clients = v;
        }
        if let Some(v) = self.c_max {
            config.c_max = v;
        }
        if let Some(v) = self.alpha {
            config.alpha = v;
        }
        if let Some(v) = self.write_fraction {
            config.write_fraction = v;
        }
        if let Some(v) = self.accesses {
            config.accesses = v;
        }
        if let Some(s) = &self.schedule {
            config.schedule =
                SchedulePolicy::parse(s).ok_or_else(|| format!("unknown schedule {s}"))?;
        }
        if let Some(v) = self.sigma {
            config.sigma = Some(v);
        }
        if let Some(v) = self.gamma {
            config.gamma = v;
        }
        config.seeds = vec![self.seed];
        config.out_dir = self.out.clone();
        if let Some(s) = &self.faults {
            config.faults = parse_faults(s).ok_or_else(|| format!("bad --faults {s}"))?;
        }
        if let Some(s) = &self.freeze {
            config.freezes = parse_freezes(s).ok_or_else(|| format!("bad --freeze {s}"))?;
        }
        if self.initial_fill {
            config.initial_fill = true;
        }
        if self.gnuplot {
            config.emit_gnuplot = true;
        }
        if config.n <= 3 * config.t {
            return Err(format!("need n > 3t, got n={} t={}", config.n, config.t));
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the replicated protocol, check the history, emit history and
    /// metrics CSVs.
    Simulate(CommonArgs),
    /// Stash-size grid (alpha sweep and client sweep) under the
    /// adversarial schedule.
    Stash(CommonArgs),
    /// Analytic statistical-distance grids, including the strong-mode
    /// bound over dummy-round counts.
    Tvd(CommonArgs),
    /// Bandwidth trends across client counts and tree heights.
    Bench(CommonArgs),
    /// Re-verify a saved history CSV.
    Check {
        /// Path to a history CSV produced by `simulate`.
        #[arg(long)]
        history: PathBuf,
        /// Block size the run used (digests of the zero block depend on it).
        #[arg(long, default_value_t = 16)]
        block_size: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Simulate(args) => {
            let config = args.build()?;
            let report = cmd_simulate(&config).map_err(|e| e.to_string())?;
            println!(
                "simulate: {} accesses completed, verdict {:?}",
                report.completed, report.verdict
            );
            println!("history: {}", report.history_path.display());
            println!("metrics: {}", report.metrics_path.display());
            if let Some(d) = &report.divergence {
                println!("replica divergence: {d}");
            }
            if report.shadow_mismatches > 0 || report.sweep_failures > 0 {
                println!(
                    "state preservation: {} shadow mismatches, {} sweep failures",
                    report.shadow_mismatches, report.sweep_failures
                );
            }
            for v in &report.structural_violations {
                println!("structural: {v}");
            }
            Ok(report.passed())
        }
        Command::Stash(args) => {
            let mut config = args.build()?;
            if args.height.is_none() && args.config.is_none() {
                config.height = 12;
            }
            if args.accesses.is_none() && args.config.is_none() {
                config.accesses = 100_000;
            }
            config.clients = config.clients.max(15);
            let report = cmd_stash(&config).map_err(|e| e.to_string())?;
            for (label, q) in &report.plateaus {
                println!("{label}: quartile means {q:?}");
            }
            println!(
                "alpha ordering: {}, client ordering: {}",
                report.alpha_ordering_ok, report.client_ordering_ok
            );
            println!("csv: {}", report.csv_path.display());
            Ok(report.alpha_ordering_ok && report.client_ordering_ok)
        }
        Command::Tvd(args) => {
            let config = args.build()?;
            let report = cmd_tvd(&config).map_err(|e| e.to_string())?;
            println!(
                "tvd: monotone in alpha {}, monotone in height {}, zero below sigma+1 {}",
                report.monotone_in_alpha, report.monotone_in_height, report.zero_below_sigma
            );
            println!("csv: {}", report.csv_path.display());
            Ok(report.monotone_in_alpha && report.monotone_in_height && report.zero_below_sigma)
        }
        Command::Bench(args) => {
            let config = args.build()?;
            let report = cmd_bench(&config).map_err(|e| e.to_string())?;
            for (c, bytes) in &report.getps_reply_bytes {
                println!("getPS reply bytes at c={c}: {bytes:.0}");
            }
            for (l, bytes) in &report.getpm_request_bytes {
                println!("getPM request bytes at L={l}: {bytes:.0}");
            }
            println!(
                "getPS monotone: {}, getPM height-independent: {}",
                report.getps_monotone, report.getpm_height_independent
            );
            println!("csv: {}", report.csv_path.display());
            Ok(report.getps_monotone && report.getpm_height_independent)
        }
        Command::Check { history, block_size } => {
            let verdict = cmd_check(&history, block_size).map_err(|e| e.to_string())?;
            println!("check: {verdict:?}");
            Ok(verdict.is_legal())
        }
    }
}

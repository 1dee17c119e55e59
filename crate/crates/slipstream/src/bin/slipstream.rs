//! Benchmark CLI: single runs and the hop / window-size / iterator sweeps.
//! All heavy lifting lives in the library; this binary only parses flags,
//! builds configs, and writes artifacts.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use slipstream::bench::{
    self, bench_stream, count_metric, run_injection, write_artifacts, InjectorConfig,
};
use slipstream::engine::{Engine, EngineConfig};
use slipstream::model::WindowSpec;

#[derive(Parser)]
#[command(name = "slipstream", about = "Streaming-aggregation latency benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with optional [engine] and [injector] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target events per second (overrides config).
    #[arg(long)]
    throughput: Option<f64>,
    /// Run duration in seconds (overrides config).
    #[arg(long)]
    duration: Option<f64>,
    /// Warmup in seconds, excluded from measurement (overrides config).
    #[arg(long)]
    warmup: Option<f64>,
    /// Generator seed (overrides config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.csv, samples, and the percentile table.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// One paced run against a sliding-window engine.
    Run {
        #[command(flatten)]
        common: Common,
        /// Sliding window size in milliseconds.
        #[arg(long, default_value_t = 60_000)]
        window_ms: i64,
    },
    /// Hopping runs over a hop-size list plus one sliding run, same schedule.
    SweepHops {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 60_000)]
        window_ms: i64,
        /// Comma-separated hop sizes in milliseconds.
        #[arg(long, value_delimiter = ',', default_value = "60000,10000,1000,100")]
        hops_ms: Vec<i64>,
    },
    /// Sliding runs over a window-size list with equal prefill volume.
    SweepWindows {
        #[command(flatten)]
        common: Common,
        /// Comma-separated window sizes in milliseconds.
        #[arg(long, value_delimiter = ',', default_value = "60000,3600000,86400000")]
        sizes_ms: Vec<i64>,
        /// Events to pre-load into each window before measuring.
        #[arg(long, default_value_t = 20_000)]
        prefill: u64,
    },
    /// Runs over misaligned-window counts at a fixed chunk-cache capacity.
    SweepIterators {
        #[command(flatten)]
        common: Common,
        /// Comma-separated misaligned window counts (iterators = 2x count).
        #[arg(long, value_delimiter = ',', default_value = "10,40")]
        window_counts: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        cache_capacity: usize,
        #[arg(long, default_value_t = 20_000)]
        prefill: u64,
    },
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct ConfigFile {
    engine: Option<EngineConfig>,
    injector: Option<InjectorConfig>,
}

fn load(common: &Common) -> (Option<EngineConfig>, InjectorConfig) {
    let file: ConfigFile = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
            toml::from_str(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
        }
        None => ConfigFile::default(),
    };
    let mut inj = file.injector.unwrap_or_default();
    if let Some(t) = common.throughput {
        inj.target_throughput = t;
    }
    if let Some(d) = common.duration {
        inj.duration_s = d;
    }
    if let Some(w) = common.warmup {
        inj.warmup_s = w;
    }
    if let Some(s) = common.seed {
        inj.seed = s;
    }
    inj.validate();
    (file.engine, inj)
}

fn finish(out: &std::path::Path, runs: Vec<(bench::HistogramReport, Vec<bench::LatencySample>)>) {
    write_artifacts(out, &runs).unwrap_or_else(|e| panic!("write artifacts: {e}"));
    let reports: Vec<_> = runs.into_iter().map(|(r, _)| r).collect();
    print!("{}", bench::percentile_table(&reports));
    for r in &reports {
        if !r.valid {
            eprintln!(
                "warning: run `{}` achieved {:.1} ev/s, below 95% of the {:.1} target",
                r.label, r.achieved_throughput, r.target_throughput
            );
        }
    }
    println!("artifacts written to {}", out.display());
}

fn main() {
    match Cli::parse().command {
        Command::Run { common, window_ms } => {
            let (engine_cfg, inj) = load(&common);
            let mut ecfg = engine_cfg.unwrap_or_default();
            ecfg.data_root = common.out.join("run-data");
            let _ = fs::remove_dir_all(&ecfg.data_root);
            let stream = bench_stream(
                vec![count_metric("card_count", WindowSpec::sliding(window_ms))],
                2,
            );
            let engine = Engine::start(ecfg, stream).unwrap_or_else(|e| panic!("engine: {e}"));
            let run = run_injection(&engine, &inj, "run");
            engine.shutdown();
            finish(&common.out, vec![run]);
        }
        Command::SweepHops {
            common,
            window_ms,
            hops_ms,
        } => {
            let (_, inj) = load(&common);
            let runs = bench::sweep_hops(&common.out.join("data"), &inj, window_ms, &hops_ms);
            finish(&common.out, runs);
        }
        Command::SweepWindows {
            common,
            sizes_ms,
            prefill,
        } => {
            let (_, inj) = load(&common);
            let runs = bench::sweep_windows(&common.out.join("data"), &inj, &sizes_ms, prefill);
            finish(&common.out, runs);
        }
        Command::SweepIterators {
            common,
            window_counts,
            cache_capacity,
            prefill,
        } => {
            let (_, inj) = load(&common);
            let runs = bench::sweep_iterators(
                &common.out.join("data"),
                &inj,
                &window_counts,
                cache_capacity,
                prefill,
            );
            finish(&common.out, runs);
        }
    }
}

//! Load injector and latency harness: sustained fixed-interval injection,
//! warmup exclusion, coordinated-omission correction, percentile reporting,
//! and the hop-granularity / window-size / iterator-count sweeps, emitting
//! CSV and plot-ready tables.
//!
//! Latency is measured against the *intended* send instant of the schedule,
//! not the actual (possibly delayed) send, so injector stalls are charged to
//! the measurements they delayed instead of being silently absorbed.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use hdrhistogram::Histogram;
use parking_lot::Mutex;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Zipf};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::engine::{Engine, EngineConfig, Response};
use crate::model::{
    Aggregation, MetricSpec, StreamConfig, TopicSpec, Value, ValueType, WindowSpec,
};

/// Injection schedule and synthetic-dataset parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectorConfig {
    /// Events per second; the schedule interval is its reciprocal.
    pub target_throughput: f64,
    pub duration_s: f64,
    /// Responses to events scheduled inside the warmup are not measured.
    pub warmup_s: f64,
    pub seed: u64,
    /// Card keys are Zipf-distributed over this cardinality.
    pub card_cardinality: u64,
    pub merchant_cardinality: u64,
    pub zipf_exponent: f64,
    /// Amounts are log-normal(mu, sigma).
    pub amount_mu: f64,
    pub amount_sigma: f64,
    /// Optional injected stall (event index, seconds): the injector sleeps
    /// before that send. Exists so the correction property is auditable.
    pub stall: Option<(u32, f64)>,
}

impl Default for InjectorConfig {
    fn default() -> Self {
        InjectorConfig {
            target_throughput: 500.0,
            duration_s: 60.0,
            warmup_s: 10.0,
            seed: 7,
            card_cardinality: 100_000,
            merchant_cardinality: 1_000,
            zipf_exponent: 1.2,
            amount_mu: 3.5,
            amount_sigma: 1.0,
            stall: None,
        }
    }
}

impl InjectorConfig {
    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn validate(&self) {
        assert!(self.target_throughput > 0.0, "throughput must be positive");
        assert!(self.warmup_s < self.duration_s, "warmup must end before the run");
    }
}

/// Deterministic synthetic event source: same seed, same sequence.
pub struct EventGen {
    rng: ChaCha8Rng,
    cards: Zipf<f64>,
    merchants: Zipf<f64>,
    amounts: LogNormal<f64>,
}

impl EventGen {
    pub fn new(cfg: &InjectorConfig) -> EventGen {
        EventGen::with_seed(cfg, cfg.seed)
    }

    pub fn with_seed(cfg: &InjectorConfig, seed: u64) -> EventGen {
        EventGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cards: Zipf::new(cfg.card_cardinality, cfg.zipf_exponent).expect("zipf params"),
            merchants: Zipf::new(cfg.merchant_cardinality, cfg.zipf_exponent)
                .expect("zipf params"),
            amounts: LogNormal::new(cfg.amount_mu, cfg.amount_sigma).expect("lognormal params"),
        }
    }

    pub fn next_fields(&mut self) -> BTreeMap<String, Value> {
        let card = self.cards.sample(&mut self.rng) as u64;
        let merchant = self.merchants.sample(&mut self.rng) as u64;
        let amount = self.amounts.sample(&mut self.rng);
        [
            ("card".to_string(), Value::Str(format!("c{card}"))),
            ("merchant".to_string(), Value::Str(format!("m{merchant}"))),
            ("amount".to_string(), Value::Float(amount)),
        ]
        .into()
    }
}

/// Stream shape used by every benchmark: card/merchant/amount events routed
/// by card.
pub fn bench_stream(metrics: Vec<MetricSpec>, partitions: u32) -> StreamConfig {
    StreamConfig {
        stream_id: "bench".to_string(),
        schema: [
            ("card".to_string(), ValueType::Str),
            ("merchant".to_string(), ValueType::Str),
            ("amount".to_string(), ValueType::Float),
        ]
        .into(),
        metrics,
        topics: vec![TopicSpec {
            name: "by-card".to_string(),
            routing_keys: vec!["card".to_string()],
            partitions,
        }],
    }
}

pub fn count_metric(id: &str, window: WindowSpec) -> MetricSpec {
    MetricSpec {
        metric_id: id.to_string(),
        window,
        filter: None,
        group_by: vec!["card".to_string()],
        aggregation: Aggregation::Count,
    }
}

/// One measured response, offsets in microseconds from the run start.
/// corrected = received - intended; uncorrected = received - actual send.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencySample {
    pub intended_us: u64,
    pub actual_us: u64,
    pub received_us: u64,
    pub corrected_us: u64,
    pub uncorrected_us: u64,
}

/// One run's percentiles plus the counters needed by the scaling claims.
#[derive(Debug, Clone, Serialize)]
pub struct HistogramReport {
    pub label: String,
    pub target_throughput: f64,
    pub achieved_throughput: f64,
    /// False when achieved throughput fell below 95% of target.
    pub valid: bool,
    pub emitted: u64,
    pub measured: u64,
    pub incomplete: u64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub p999_ms: f64,
    pub p9999_ms: f64,
    pub max_ms: f64,
    pub cache_misses: u64,
    pub resident_chunk_hwm: usize,
    pub heap_hwm_kb: u64,
    pub window_ms: Option<i64>,
    pub hop_ms: Option<i64>,
    /// w_s / hop for hopping runs: the fixed live-window count per group.
    pub live_windows: Option<i64>,
    pub window_count: Option<usize>,
    pub iterator_count: Option<usize>,
}

impl HistogramReport {
    pub fn percentiles(&self) -> [f64; 6] {
        [
            self.p50_ms,
            self.p90_ms,
            self.p99_ms,
            self.p999_ms,
            self.p9999_ms,
            self.max_ms,
        ]
    }
}

fn heap_hwm_kb() -> u64 {
    let Ok(status) = fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

/// Aggregates samples into a report. Corrected latencies go into a
/// logarithmic-bucket histogram (3 significant digits, 10-minute ceiling) so
/// the 99.99th percentile is stable.
pub fn build_report(
    label: &str,
    cfg: &InjectorConfig,
    samples: &[LatencySample],
    emitted: u64,
    emission_elapsed: Duration,
    incomplete: u64,
    engine: &Engine,
) -> HistogramReport {
    let mut hist = Histogram::<u64>::new_with_bounds(1, 600_000_000, 3).expect("histogram bounds");
    for s in samples {
        hist.record(s.corrected_us.max(1)).expect("within bounds");
    }
    let ms = |q: f64| hist.value_at_quantile(q) as f64 / 1000.0;
    let achieved = emitted as f64 / emission_elapsed.as_secs_f64().max(1e-9);
    let (mut misses, mut hwm) = (0u64, 0usize);
    for (_, s) in engine.reservoir_stats() {
        misses += s.cache_misses;
        hwm = hwm.max(s.resident_hwm);
    }
    HistogramReport {
        label: label.to_string(),
        target_throughput: cfg.target_throughput,
        achieved_throughput: achieved,
        valid: achieved >= 0.95 * cfg.target_throughput,
        emitted,
        measured: samples.len() as u64,
        incomplete,
        p50_ms: ms(0.50),
        p90_ms: ms(0.90),
        p99_ms: ms(0.99),
        p999_ms: ms(0.999),
        p9999_ms: ms(0.9999),
        max_ms: hist.max() as f64 / 1000.0,
        cache_misses: misses,
        resident_chunk_hwm: hwm,
        heap_hwm_kb: heap_hwm_kb(),
        window_ms: None,
        hop_ms: None,
        live_windows: None,
        window_count: None,
        iterator_count: None,
    }
}

/// Runs one paced injection against a running engine. Event time is the
/// intended schedule offset in milliseconds, so two runs with the same seed
/// and schedule produce identical event sequences and identical replies.
pub fn run_injection(
    engine: &Engine,
    cfg: &InjectorConfig,
    label: &str,
) -> (HistogramReport, Vec<LatencySample>) {
    cfg.validate();
    let mut gen = EventGen::new(cfg);
    let interval = Duration::from_secs_f64(1.0 / cfg.target_throughput);
    let total = Duration::from_secs_f64(cfg.duration_s);
    let warmup = Duration::from_secs_f64(cfg.warmup_s);

    let rx = engine.responses();
    while rx.try_recv().is_ok() {} // discard responses from prefill etc.

    // intended/actual send offsets by ingest id, written by the scheduling
    // thread, consumed (removed) by the matcher: single writer per key
    let in_flight: Arc<Mutex<HashMap<u64, (Duration, Duration)>>> = Arc::default();
    let samples: Arc<Mutex<Vec<LatencySample>>> = Arc::default();
    let incomplete = Arc::new(AtomicU64::new(0));
    let done = Arc::new(AtomicBool::new(false));
    let start = Instant::now();

    let matcher = {
        let in_flight = Arc::clone(&in_flight);
        let samples = Arc::clone(&samples);
        let incomplete = Arc::clone(&incomplete);
        let done = Arc::clone(&done);
        thread::spawn(move || {
            // a response can outrun the scheduler's in_flight insert by a few
            // microseconds; unmatched responses are retried, not dropped
            let mut unmatched: Vec<(Response, Duration)> = Vec::new();
            let settle = |r: &Response, received: Duration| -> bool {
                let Some((intended, actual)) = in_flight.lock().remove(&r.ingest_id) else {
                    return false;
                };
                if !r.complete {
                    incomplete.fetch_add(1, Ordering::Relaxed);
                } else if intended >= warmup {
                    samples.lock().push(LatencySample {
                        intended_us: intended.as_micros() as u64,
                        actual_us: actual.as_micros() as u64,
                        received_us: received.as_micros() as u64,
                        corrected_us: received.saturating_sub(intended).as_micros() as u64,
                        uncorrected_us: received.saturating_sub(actual).as_micros() as u64,
                    });
                }
                true
            };
            loop {
                match rx.recv_timeout(Duration::from_millis(5)) {
                    Ok(r) => {
                        let received = start.elapsed();
                        if !settle(&r, received) {
                            unmatched.push((r, received));
                        }
                    }
                    Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                        if done.load(Ordering::Relaxed) {
                            break;
                        }
                    }
                    Err(crossbeam_channel::RecvTimeoutError::Disconnected) => break,
                }
                unmatched.retain(|(r, received)| !settle(r, *received));
            }
            for (r, received) in &unmatched {
                settle(r, *received);
            }
        })
    };

    let mut emitted = 0u64;
    let mut i = 0u32;
    loop {
        let intended = interval.mul_f64(i as f64);
        if intended >= total {
            break;
        }
        let now = start.elapsed();
        if now < intended {
            thread::sleep(intended - now);
        }
        if let Some((at, secs)) = cfg.stall {
            if i == at {
                thread::sleep(Duration::from_secs_f64(secs));
            }
        }
        let actual = start.elapsed();
        let ts = intended.as_millis() as i64;
        match engine.ingest(ts, gen.next_fields()) {
            Ok(id) => {
                in_flight.lock().insert(id, (intended, actual));
                emitted += 1;
            }
            Err(err) => panic!("ingest failed mid-run: {err}"),
        }
        i += 1;
    }
    let emission_elapsed = start.elapsed();
    engine.drain(Duration::from_secs(30));
    thread::sleep(Duration::from_millis(20)); // let the last replies land
    done.store(true, Ordering::Relaxed);
    matcher.join().expect("matcher thread");

    // events never answered at all count as incomplete too
    let lost = in_flight.lock().len() as u64;
    let incomplete = incomplete.load(Ordering::Relaxed) + lost;
    let samples = Arc::try_unwrap(samples)
        .expect("matcher joined")
        .into_inner();
    let report = build_report(
        label,
        cfg,
        &samples,
        emitted,
        emission_elapsed,
        incomplete,
        engine,
    );
    (report, samples)
}

/// Floods the reservoir with `events` synthetic events spread over
/// `span_ms` of event time ending at t=0, then waits for quiescence. Uses a
/// seed offset so the paced run's sequence is unaffected.
pub fn prefill(engine: &Engine, cfg: &InjectorConfig, events: u64, span_ms: i64) {
    let mut gen = EventGen::with_seed(cfg, cfg.seed.wrapping_add(1));
    for i in 0..events {
        let ts = -span_ms + (span_ms * i as i64) / events as i64;
        engine.ingest(ts, gen.next_fields()).expect("prefill ingest");
        if i % 2048 == 2047 {
            engine.drain(Duration::from_secs(30));
        }
    }
    engine.drain(Duration::from_secs(30));
}

fn engine_for(dir: &Path, units: usize, cache_capacity: usize, chunk_events: usize) -> EngineConfig {
    EngineConfig {
        data_root: dir.to_path_buf(),
        units,
        cache_capacity,
        chunk_events,
        ..EngineConfig::default()
    }
}

fn fresh_dir(work_dir: &Path, label: &str) -> std::path::PathBuf {
    let dir = work_dir.join(label);
    let _ = fs::remove_dir_all(&dir);
    dir
}

/// Hop-granularity sweep: one hopping run per hop over a fixed window size,
/// plus one sliding run, all on the same seed and schedule.
pub fn sweep_hops(
    work_dir: &Path,
    inj: &InjectorConfig,
    window_ms: i64,
    hops: &[i64],
) -> Vec<(HistogramReport, Vec<LatencySample>)> {
    let mut out = Vec::new();
    for &hop in hops {
        let label = format!("hop-{hop}ms");
        let stream = bench_stream(
            vec![count_metric("card_count", WindowSpec::hopping(window_ms, hop))],
            2,
        );
        let engine = Engine::start(
            engine_for(&fresh_dir(work_dir, &label), 2, 220, 4096),
            stream,
        )
        .expect("engine");
        let (mut report, samples) = run_injection(&engine, inj, &label);
        report.window_ms = Some(window_ms);
        report.hop_ms = Some(hop);
        report.live_windows = Some(window_ms / hop);
        out.push((report, samples));
        engine.shutdown();
    }
    let stream = bench_stream(
        vec![count_metric("card_count", WindowSpec::sliding(window_ms))],
        2,
    );
    let engine = Engine::start(
        engine_for(&fresh_dir(work_dir, "sliding"), 2, 220, 4096),
        stream,
    )
    .expect("engine");
    let (mut report, samples) = run_injection(&engine, inj, "sliding");
    report.window_ms = Some(window_ms);
    out.push((report, samples));
    engine.shutdown();
    out
}

/// Window-size sweep: identical schedule and prefill volume per size; the
/// reports carry the resident-chunk high-water mark that the independence
/// claim is about.
pub fn sweep_windows(
    work_dir: &Path,
    inj: &InjectorConfig,
    sizes_ms: &[i64],
    prefill_events: u64,
) -> Vec<(HistogramReport, Vec<LatencySample>)> {
    let mut out = Vec::new();
    for &size in sizes_ms {
        let label = format!("window-{size}ms");
        let stream = bench_stream(
            vec![count_metric("card_count", WindowSpec::sliding(size))],
            1,
        );
        // checkpoint-driven retention truncation would shrink the resident
        // set only for the smallest window; defer it so the high-water mark
        // reflects memory behaviour, not retention timing
        let cfg = EngineConfig {
            checkpoint_events: u64::MAX,
            checkpoint_ms: u64::MAX,
            ..engine_for(&fresh_dir(work_dir, &label), 1, 220, 512)
        };
        let engine = Engine::start(cfg, stream).expect("engine");
        prefill(&engine, inj, prefill_events, size);
        let (mut report, samples) = run_injection(&engine, inj, &label);
        report.window_ms = Some(size);
        report.window_count = Some(1);
        report.iterator_count = Some(2);
        out.push((report, samples));
        engine.shutdown();
    }
    out
}

/// Pairwise-distinct (misaligned) sliding window sizes: every window needs
/// its own head and tail, so n windows cost 2n iterators.
pub fn misaligned_windows(n: usize) -> Vec<MetricSpec> {
    (0..n)
        .map(|i| {
            count_metric(
                &format!("w{i}"),
                WindowSpec::sliding(20_000 + 3_001 * i as i64),
            )
        })
        .collect()
}

/// Iterator-count sweep at a fixed cache capacity: one run per misaligned
/// window count on a single partition, reporting cache misses.
pub fn sweep_iterators(
    work_dir: &Path,
    inj: &InjectorConfig,
    window_counts: &[usize],
    cache_capacity: usize,
    prefill_events: u64,
) -> Vec<(HistogramReport, Vec<LatencySample>)> {
    let mut out = Vec::new();
    for &n in window_counts {
        let label = format!("windows-{n}");
        let metrics = misaligned_windows(n);
        let largest = metrics.iter().map(|m| m.window.size_ms).max().unwrap();
        let stream = bench_stream(metrics, 1);
        let engine = Engine::start(
            engine_for(&fresh_dir(work_dir, &label), 1, cache_capacity, 256),
            stream,
        )
        .expect("engine");
        prefill(&engine, inj, prefill_events, largest);
        let (mut report, samples) = run_injection(&engine, inj, &label);
        report.window_count = Some(n);
        report.iterator_count = Some(2 * n);
        out.push((report, samples));
        engine.shutdown();
    }
    out
}

// -- outputs ------------------------------------------------------------------

/// One row per run: config + percentiles + counters.
pub fn write_reports_csv(path: &Path, reports: &[HistogramReport]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Raw corrected latencies, gzip-compressed CSV.
pub fn write_samples_gz(path: &Path, samples: &[LatencySample]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let file = fs::File::create(path)?;
    let gz = flate2::write::GzEncoder::new(file, flate2::Compression::default());
    let mut w = csv::Writer::from_writer(gz);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    w.into_inner()
        .map_err(|e| io::Error::other(e.to_string()))?
        .finish()?;
    Ok(())
}

/// Plot-friendly tab-separated percentile table, one line per run.
pub fn percentile_table(reports: &[HistogramReport]) -> String {
    let mut out = String::from("label\tp50_ms\tp90_ms\tp99_ms\tp99.9_ms\tp99.99_ms\tmax_ms\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\n",
            r.label, r.p50_ms, r.p90_ms, r.p99_ms, r.p999_ms, r.p9999_ms, r.max_ms
        ));
    }
    out
}

/// Writes the standard artifact set for a sweep into `out_dir`.
pub fn write_artifacts(
    out_dir: &Path,
    runs: &[(HistogramReport, Vec<LatencySample>)],
) -> io::Result<()> {
    fs::create_dir_all(out_dir)?;
    let reports: Vec<HistogramReport> = runs.iter().map(|(r, _)| r.clone()).collect();
    write_reports_csv(&out_dir.join("report.csv"), &reports)?;
    for (r, samples) in runs {
        write_samples_gz(&out_dir.join(format!("samples-{}.csv.gz", r.label)), samples)?;
    }
    fs::write(out_dir.join("percentiles.tsv"), percentile_table(&reports))?;
    Ok(())
}

// keep the unused-import lint honest when /proc is absent
#[allow(unused)]
fn _touch_rng(r: &mut ChaCha8Rng) -> u64 {
    r.gen()
}

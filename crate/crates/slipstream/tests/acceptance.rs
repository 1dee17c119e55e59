//! Acceptance gate: one check per release criterion, each printed as a
//! single PASS/FAIL line. Runs without the libtest harness so the lines
//! always reach stdout and the ordering is stable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slipstream::bench::{
    bench_stream, count_metric, misaligned_windows, prefill, run_injection, sweep_windows,
    InjectorConfig,
};
use slipstream::engine::{Engine, EngineConfig};
use slipstream::model::{
    Aggregation, CmpOp, Comparison, Event, MetricSpec, Predicate, StreamConfig, TopicSpec, Value,
    ValueType, WindowSpec,
};
use slipstream::plan::{group_key, PlanDag};
use slipstream::reservoir::{
    plan_iterators, share_tail, IoPool, IterRole, IterStart, Reservoir, ReservoirConfig,
    WindowShape,
};

fn main() {
    let criteria: Vec<(&str, fn() -> String)> = vec![
        ("criterion 01 (sliding exactness vs hopping baseline)", c01_sliding_vs_hopping),
        ("criterion 02 (randomized equivalence vs naive recount)", c02_randomized_oracle),
        ("criterion 03 (hopping live-window count law)", c03_hopping_state_law),
        ("criterion 04 (hop->sliding limit at 1s hops)", c04_hop_sliding_limit),
        ("criterion 05 (window-size independence of memory)", c05_window_independence),
        ("criterion 06 (cache degradation past capacity)", c06_cache_degradation),
        ("criterion 07 (recovery equivalence after kill)", c07_recovery_equivalence),
        ("criterion 08 (reservoir durability and corruption)", c08_reservoir_durability),
        ("criterion 09 (iterator-count law)", c09_iterator_law),
        ("criterion 10 (critical-path disk-op isolation)", c10_critical_path),
        ("smoke benchmark (500 ev/s x 60 s)", smoke_benchmark),
    ];
    let t0 = Instant::now();
    let mut failures = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(detail) => {
                println!("{name}: PASS [{:.1}s] {detail}", started.elapsed().as_secs_f64());
            }
            Err(payload) => {
                failures += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .map(String::as_str)
                    .or_else(|| payload.downcast_ref::<&str>().copied())
                    .unwrap_or("panic");
                println!("{name}: FAIL [{:.1}s] {msg}", started.elapsed().as_secs_f64());
            }
        }
    }
    println!(
        "acceptance: {} in {:.0}s",
        if failures == 0 { "all criteria passed".to_string() } else { format!("{failures} FAILED") },
        t0.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}

// -- shared helpers -----------------------------------------------------------

fn card_event(ts: i64, id: u64, card: &str, amount: f64) -> Event {
    let fields: BTreeMap<String, Value> = [
        ("card".to_string(), Value::Str(card.to_string())),
        ("amount".to_string(), Value::Float(amount)),
    ]
    .into();
    Event::new(ts, id, fields)
}

fn card_metric(id: &str, window: WindowSpec, aggregation: Aggregation) -> MetricSpec {
    MetricSpec {
        metric_id: id.to_string(),
        window,
        filter: None,
        group_by: vec!["card".to_string()],
        aggregation,
    }
}

fn amount_filter() -> Predicate {
    Predicate {
        clauses: vec![Comparison {
            field: "amount".to_string(),
            op: CmpOp::Gt,
            value: Value::Float(500.0),
        }],
    }
}

fn open_reservoir(dir: &Path, chunk_events: usize, cache: usize) -> Reservoir {
    let cfg = ReservoirConfig {
        chunk_events,
        cache_capacity: cache,
        ..ReservoirConfig::default()
    };
    Reservoir::open(dir, cfg, IoPool::new(2)).expect("open reservoir").0
}

fn assert_float_eq(got: f64, want: f64, what: &str) {
    let tol = 1e-9 * want.abs().max(1.0);
    assert!(
        (got - want).abs() <= tol,
        "{what}: got {got}, want {want} (tol {tol})"
    );
}

fn assert_value_close(got: &Value, want: &Value, what: &str) {
    match (got, want) {
        (Value::Int(a), Value::Int(b)) => assert_eq!(a, b, "{what}"),
        (a, b) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert_float_eq(a, b, what);
        }
    }
}

// -- criterion 1 --------------------------------------------------------------

/// Same-card events at 50/120/180/240/345 s, 5-minute window: the per-event
/// sliding count reaches 5 while no 1-minute-hop baseline window ever holds
/// more than 4. Both sides exact, well under a second.
fn c01_sliding_vs_hopping() -> String {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut r = open_reservoir(dir.path(), 1024, 32);
    let metrics = vec![
        card_metric("sliding_count", WindowSpec::sliding(300_000), Aggregation::Count),
        card_metric("hopping_count", WindowSpec::hopping(300_000, 60_000), Aggregation::Count),
    ];
    let mut plan = PlanDag::build(&metrics);
    plan.attach(&mut r).unwrap();

    let stamps = [50_000i64, 120_000, 180_000, 240_000, 345_000];
    let mut last = Vec::new();
    for (i, &ts) in stamps.iter().enumerate() {
        let e = card_event(ts, i as u64, "c4242", 25.0);
        r.append(e.clone()).unwrap();
        last = plan.advance(&mut r, &e).unwrap();
    }

    let sliding = last
        .iter()
        .find(|o| o.metric_id == "sliding_count")
        .expect("sliding reported");
    assert_eq!(sliding.value, Value::Int(5), "sliding count after 5th event");

    // brute-force enumeration of every hop window that could hold an event
    let mut brute = 0usize;
    for k in (stamps[0] - 300_000).div_euclid(60_000)..=stamps[4].div_euclid(60_000) {
        let start = k * 60_000;
        let n = stamps.iter().filter(|&&t| t >= start && t < start + 300_000).count();
        brute = brute.max(n);
    }
    assert_eq!(brute, 4, "enumerated hopping max");
    let live_max = last
        .iter()
        .filter(|o| o.metric_id == "hopping_count" && !o.closed)
        .filter_map(|o| o.value.as_f64())
        .fold(0.0f64, f64::max);
    assert_eq!(live_max as usize, 4, "live hopping max at arrival");
    assert!(t0.elapsed() < Duration::from_secs(1), "must finish in under 1 s");
    format!("sliding=5 hopping_max=4 in {:.0}ms", t0.elapsed().as_millis())
}

// -- criterion 2 --------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum AggCheck {
    Count,
    Sum,
    Avg,
    Distinct,
}

#[derive(Default)]
struct GroupHist {
    ts: Vec<i64>,
    val: Vec<f64>,
    start: usize,
}

/// 100 randomized streams: every per-event sliding value is checked against
/// an independent recount of the raw events inside that event's window.
/// Count/distinct must match exactly, sum/avg to 1e-9 relative.
fn c02_randomized_oracle() -> String {
    let t0 = Instant::now();
    let group_fields = vec!["card".to_string()];
    let mut comparisons = 0u64;
    let mut total_events = 0u64;

    for stream_idx in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC2_0000 + stream_idx);
        let n: usize = rng.gen_range(10_000..=50_000);
        let keys: u32 = rng.gen_range(1..=200);
        let mut window = || (1_000.0 * 3_600.0f64.powf(rng.gen::<f64>())) as i64;
        let (w0, w1) = (window(), window());
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC2_8000 + stream_idx);
        // cap the gap so no window holds an unbounded recount range
        let gap_cap = (w0.max(w1) / 1_500).max(2);

        // all four aggregations over both windows, alternating filtered
        let descs: [(&str, i64, AggCheck, bool); 8] = [
            ("m0", w0, AggCheck::Count, false),
            ("m1", w0, AggCheck::Sum, true),
            ("m2", w0, AggCheck::Avg, false),
            ("m3", w0, AggCheck::Distinct, true),
            ("m4", w1, AggCheck::Count, true),
            ("m5", w1, AggCheck::Sum, false),
            ("m6", w1, AggCheck::Avg, true),
            ("m7", w1, AggCheck::Distinct, false),
        ];
        let metrics: Vec<MetricSpec> = descs
            .iter()
            .map(|&(id, w, agg, filtered)| MetricSpec {
                metric_id: id.to_string(),
                window: WindowSpec::sliding(w),
                filter: filtered.then(amount_filter),
                group_by: group_fields.clone(),
                aggregation: match agg {
                    AggCheck::Count => Aggregation::Count,
                    AggCheck::Sum => Aggregation::Sum("amount".to_string()),
                    AggCheck::Avg => Aggregation::Avg("amount".to_string()),
                    AggCheck::Distinct => Aggregation::DistinctCount("amount".to_string()),
                },
            })
            .collect();

        let dir = tempfile::tempdir().unwrap();
        let mut r = open_reservoir(dir.path(), 2048, 64);
        let mut plan = PlanDag::build(&metrics);
        plan.attach(&mut r).unwrap();
        let mut oracle: Vec<HashMap<Vec<u8>, GroupHist>> =
            (0..descs.len()).map(|_| HashMap::new()).collect();

        let mut ts = 0i64;
        for i in 0..n {
            ts += rng.gen_range(0..=gap_cap);
            let card = format!("k{}", rng.gen_range(0..keys));
            let amount = rng.gen_range(1..=400) as f64 * 5.0;
            let e = card_event(ts, i as u64, &card, amount);
            let gk = group_key(&group_fields, &e);

            for (m, &(_, _, _, filtered)) in descs.iter().enumerate() {
                if !filtered || amount > 500.0 {
                    let h = oracle[m].entry(gk.clone()).or_default();
                    h.ts.push(ts);
                    h.val.push(amount);
                }
            }

            r.append(e.clone()).unwrap();
            let outs = plan.advance(&mut r, &e).unwrap();
            let mut seen = [false; 8];
            for o in &outs {
                let m = descs.iter().position(|d| d.0 == o.metric_id).unwrap();
                assert!(!seen[m], "one reply per metric per event");
                seen[m] = true;
                assert_eq!(o.group, gk, "reply is for the arriving group");
                let (_, w, agg, _) = descs[m];
                let h = oracle[m].entry(gk.clone()).or_default();
                let lo = ts + 1 - w;
                while h.start < h.ts.len() && h.ts[h.start] < lo {
                    h.start += 1;
                }
                let vals = &h.val[h.start..];
                let count = vals.len() as i64;
                match agg {
                    AggCheck::Count => assert_eq!(o.value, Value::Int(count), "count"),
                    AggCheck::Sum => {
                        assert_float_eq(o.value.as_f64().unwrap(), vals.iter().sum(), "sum")
                    }
                    AggCheck::Avg => {
                        assert!(count > 0, "avg reported for an empty window");
                        let want = vals.iter().sum::<f64>() / count as f64;
                        assert_float_eq(o.value.as_f64().unwrap(), want, "avg");
                    }
                    AggCheck::Distinct => {
                        let set: HashSet<u64> = vals.iter().map(|v| v.to_bits()).collect();
                        assert_eq!(o.value, Value::Int(set.len() as i64), "distinct");
                    }
                }
                comparisons += 1;
            }
            // only a filtered avg over an empty window may be unreported
            for (m, &(_, _, agg, filtered)) in descs.iter().enumerate() {
                if !seen[m] {
                    assert!(
                        agg == AggCheck::Avg && filtered,
                        "metric {m} missing from the reply"
                    );
                }
            }
        }
        total_events += n as u64;
    }
    assert!(t0.elapsed() < Duration::from_secs(300), "must finish under 5 minutes");
    format!(
        "{comparisons} values checked over {total_events} events / 100 streams"
    )
}

// -- criterion 3 --------------------------------------------------------------

/// After warmup a hopping window node holds exactly w_s / s live windows.
fn c03_hopping_state_law() -> String {
    let mut out = Vec::new();
    for (w, s, expect) in [(300_000i64, 60_000i64, 5usize), (60_000, 1_000, 60), (60_000, 60_000, 1)] {
        let dir = tempfile::tempdir().unwrap();
        let mut r = open_reservoir(dir.path(), 4096, 32);
        let metrics = vec![card_metric("h", WindowSpec::hopping(w, s), Aggregation::Count)];
        let mut plan = PlanDag::build(&metrics);
        plan.attach(&mut r).unwrap();
        let mut id = 0u64;
        let mut ts = 0i64;
        while ts <= 3 * w {
            let e = card_event(ts, id, "c1", 10.0);
            r.append(e.clone()).unwrap();
            plan.advance(&mut r, &e).unwrap();
            id += 1;
            ts += s;
        }
        assert_eq!(plan.live_hop_windows(0), expect, "w={w} s={s}");
        out.push(format!("{}s/{}s={expect}", w / 1000, s / 1000));
    }
    format!("live windows: {}", out.join(" "))
}

// -- criterion 4 --------------------------------------------------------------

/// On integer-second streams, a 1-second hop evaluated at arrival equals the
/// sliding result exactly: the oldest live hop window covers the same set.
fn c04_hop_sliding_limit() -> String {
    let w = 30_000i64;
    let aggs = [
        ("count", Aggregation::Count),
        ("sum", Aggregation::Sum("amount".to_string())),
        ("avg", Aggregation::Avg("amount".to_string())),
        ("dist", Aggregation::DistinctCount("amount".to_string())),
    ];
    let mut compared = 0u64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC4_0000 + seed);
        let dir = tempfile::tempdir().unwrap();
        let mut r = open_reservoir(dir.path(), 2048, 32);
        let mut metrics = Vec::new();
        for (name, agg) in &aggs {
            metrics.push(card_metric(&format!("s_{name}"), WindowSpec::sliding(w), agg.clone()));
            metrics.push(card_metric(&format!("h_{name}"), WindowSpec::hopping(w, 1_000), agg.clone()));
        }
        let mut plan = PlanDag::build(&metrics);
        plan.attach(&mut r).unwrap();

        let mut ts = 0i64;
        for i in 0..1_000u64 {
            ts += rng.gen_range(0..=5) * 1_000; // integer seconds
            let card = format!("c{}", rng.gen_range(0..3));
            // integer-valued amounts keep float sums order-independent
            let e = card_event(ts, i, &card, rng.gen_range(0..100) as f64);
            let gk = group_key(&["card".to_string()], &e);
            r.append(e.clone()).unwrap();
            let outs = plan.advance(&mut r, &e).unwrap();
            for (name, _) in &aggs {
                let slid = outs
                    .iter()
                    .find(|o| o.metric_id == format!("s_{name}") && o.group == gk)
                    .expect("sliding value for the arriving group");
                let oldest = outs
                    .iter()
                    .filter(|o| o.metric_id == format!("h_{name}") && !o.closed && o.group == gk)
                    .min_by_key(|o| o.window.expect("hopping output has bounds").0)
                    .expect("a live hop window covers the arrival");
                assert_eq!(
                    oldest.value, slid.value,
                    "{name} at ts={ts}: hop {:?} vs sliding",
                    oldest.window
                );
                compared += 1;
            }
        }
    }
    format!("{compared} agreement checks over 5 x 1000-event streams")
}

// -- criterion 5 --------------------------------------------------------------

/// Pre-filled 1-minute, 1-hour and 24-hour windows at a fixed rate: the
/// resident-chunk high-water mark is identical and p99 stays within 2x.
fn c05_window_independence() -> String {
    let t0 = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let inj = InjectorConfig {
        target_throughput: 200.0,
        duration_s: 12.0,
        warmup_s: 2.0,
        seed: 11,
        ..InjectorConfig::default()
    };
    // throwaway run: the first paced run in a process pays one-time costs
    // (page cache, allocator growth) that would skew the first size measured
    sweep_windows(work.path(), &inj, &[60_000], 3_000);

    let mut spread = (0.0, 0.0);
    let mut hwm = 0;
    for attempt in 0.. {
        let runs = sweep_windows(work.path(), &inj, &[60_000, 3_600_000, 86_400_000], 3_000);
        let mut hwms = Vec::new();
        let mut p99s = Vec::new();
        for (report, _) in &runs {
            assert!(report.valid, "{}: run fell below target throughput", report.label);
            hwms.push(report.resident_chunk_hwm);
            p99s.push(report.p99_ms);
        }
        // the memory bound is deterministic: identical on every attempt
        assert!(hwms.iter().all(|&h| h == hwms[0]), "resident HWM differs: {hwms:?}");
        hwm = hwms[0];
        let (lo, hi) = (
            p99s.iter().cloned().fold(f64::MAX, f64::min),
            p99s.iter().cloned().fold(0.0, f64::max),
        );
        spread = (lo, hi);
        // the p99 ratio rides on scheduler noise; a real size dependency
        // reproduces, so allow two retries before declaring failure
        if hi <= 2.0 * lo {
            break;
        }
        assert!(attempt < 2, "p99 spread above 2x on every attempt: {p99s:?}");
    }
    assert!(t0.elapsed() < Duration::from_secs(600), "must finish under 10 minutes");
    format!("hwm={hwm} chunks for all sizes, p99 {:.2}..{:.2}ms", spread.0, spread.1)
}

// -- criterion 6 --------------------------------------------------------------

/// With a 32-chunk cache, 10 misaligned windows (20 accounted iterators)
/// run with ~no blocking misses; 40 windows (80 iterators, past 2x the
/// capacity) must show strictly positive misses and a strictly higher p99.
fn c06_cache_degradation() -> String {
    let inj = InjectorConfig {
        target_throughput: 100.0,
        duration_s: 8.0,
        warmup_s: 2.0,
        seed: 13,
        ..InjectorConfig::default()
    };
    let work = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    for n in [10usize, 40] {
        let metrics = misaligned_windows(n);
        let largest = metrics.iter().map(|m| m.window.size_ms).max().unwrap();
        let cfg = EngineConfig {
            data_root: work.path().join(format!("windows-{n}")),
            units: 1,
            cache_capacity: 32,
            chunk_events: 256,
            // keep retention truncation out of the miss accounting
            checkpoint_events: u64::MAX,
            checkpoint_ms: u64::MAX,
            ..EngineConfig::default()
        };
        let engine = Engine::start(cfg, bench_stream(metrics, 1)).expect("engine");
        prefill(&engine, &inj, 20_000, largest);
        let misses_before: u64 = engine.reservoir_stats().iter().map(|(_, s)| s.cache_misses).sum();
        let (report, _) = run_injection(&engine, &inj, &format!("windows-{n}"));
        let misses: u64 =
            engine.reservoir_stats().iter().map(|(_, s)| s.cache_misses).sum::<u64>() - misses_before;
        engine.shutdown();
        assert!(report.valid, "windows-{n} fell below target throughput");
        results.push((n, misses, report.p99_ms));
    }
    let (_, m10, p10) = (results[0].0, results[0].1, results[0].2);
    let (_, m40, p40) = (results[1].0, results[1].1, results[1].2);
    assert_eq!(plan_iterators(&misaligned_shapes(10)).total(), 20);
    assert_eq!(plan_iterators(&misaligned_shapes(40)).total(), 80);
    assert!(m10 <= 8, "expected ~0 misses under capacity, saw {m10}");
    assert!(m40 > 0, "expected blocking misses past capacity");
    assert!(m40 > m10, "misses must grow past capacity: {m10} vs {m40}");
    assert!(p40 > p10, "p99 must degrade past capacity: {p10:.2} vs {p40:.2} ms");
    format!("misses {m10} -> {m40}, p99 {p10:.2} -> {p40:.2} ms")
}

/// Pairwise-distinct sizes and alignments: no edge is shared, so every
/// window accounts for its own head and tail iterator.
fn misaligned_shapes(n: usize) -> Vec<WindowShape> {
    (0..n as i64)
        .map(|i| WindowShape {
            size_ms: 20_000 + 3_001 * i,
            offset_ms: 13 + 997 * i,
        })
        .collect()
}

// -- criterion 7 --------------------------------------------------------------

/// Kill the owning unit at 10 random points of a 20k-event run; every reply
/// and every per-key final state must equal the no-failure run.
fn c07_recovery_equivalence() -> String {
    let t0 = Instant::now();
    // deterministic event sequence shared by every run
    let mut rng = ChaCha8Rng::seed_from_u64(0xC7_0001);
    let mut ts = 0i64;
    let mut events: Vec<(i64, String, f64)> = (0..20_000)
        .map(|_| {
            ts += rng.gen_range(0..=50);
            (
                ts,
                format!("c{}", rng.gen_range(0..50)),
                rng.gen_range(1..=999) as f64,
            )
        })
        .collect();
    for i in 0..50 {
        // final-state probes: one per key, after the stream
        ts += 1;
        events.push((ts, format!("c{i}"), 7.0));
    }

    let baseline = c07_run(&events, None);
    let mut kp_rng = ChaCha8Rng::seed_from_u64(0xC7_0002);
    for trial in 0..10 {
        let kill_at = kp_rng.gen_range(2_000..18_000);
        let run = c07_run(&events, Some(kill_at));
        assert_eq!(run.len(), baseline.len());
        for (i, (got, want)) in run.iter().zip(&baseline).enumerate() {
            assert_eq!(
                got.keys().collect::<Vec<_>>(),
                want.keys().collect::<Vec<_>>(),
                "trial {trial} event {i}: metric set"
            );
            for (k, v) in want {
                assert_value_close(&got[k], v, &format!("trial {trial} event {i} metric {k}"));
            }
        }
    }
    format!(
        "10 kill points, {} replies each bitwise-compatible with the clean run ({:.0}s)",
        baseline.len(),
        t0.elapsed().as_secs_f64()
    )
}

fn c07_run(events: &[(i64, String, f64)], kill_at: Option<usize>) -> Vec<BTreeMap<String, Value>> {
    let dir = tempfile::tempdir().unwrap();
    let stream = StreamConfig {
        stream_id: "payments".to_string(),
        schema: [
            ("card".to_string(), ValueType::Str),
            ("amount".to_string(), ValueType::Float),
        ]
        .into(),
        metrics: vec![
            card_metric("card_count_1m", WindowSpec::sliding(60_000), Aggregation::Count),
            card_metric(
                "card_sum_1m",
                WindowSpec::sliding(60_000),
                Aggregation::Sum("amount".to_string()),
            ),
            card_metric(
                "card_hop_count",
                WindowSpec::hopping(60_000, 10_000),
                Aggregation::Count,
            ),
        ],
        topics: vec![TopicSpec {
            name: "by-card".to_string(),
            routing_keys: vec!["card".to_string()],
            partitions: 4,
        }],
    };
    let cfg = EngineConfig {
        data_root: dir.path().to_path_buf(),
        units: 2,
        checkpoint_events: 2_000,
        chunk_events: 512,
        reply_timeout_ms: 120_000,
        ..EngineConfig::default()
    };
    let engine = Engine::start(cfg, stream).expect("engine");
    let rx = engine.responses();

    let mut order = HashMap::new();
    for (i, (ts, card, amount)) in events.iter().enumerate() {
        if kill_at == Some(i) {
            let ids = engine.unit_ids();
            assert!(engine.kill_unit(ids[i % ids.len()]));
        }
        let fields: BTreeMap<String, Value> = [
            ("card".to_string(), Value::Str(card.clone())),
            ("amount".to_string(), Value::Float(*amount)),
        ]
        .into();
        let id = engine.ingest(*ts, fields).expect("ingest");
        order.insert(id, i);
    }
    assert!(engine.drain(Duration::from_secs(120)), "drain timed out");

    let mut replies: Vec<Option<BTreeMap<String, Value>>> = vec![None; events.len()];
    let mut got = 0usize;
    while got < events.len() {
        let r = rx.recv_timeout(Duration::from_secs(120)).expect("response");
        let Some(&i) = order.get(&r.ingest_id) else { continue };
        assert!(r.complete, "event {i} reply incomplete: {:?}", r.missing_topics);
        assert!(replies[i].replace(r.metrics).is_none(), "duplicate reply for {i}");
        got += 1;
    }
    engine.shutdown();
    replies.into_iter().map(Option::unwrap).collect()
}

// -- criterion 8 --------------------------------------------------------------

/// Crash injection after every chunk seal of a 10-chunk run: a copy of the
/// directory recovers to a consistent position with a byte-identical event
/// prefix, a torn tail falls back to the previous seal, and interior
/// corruption is detected rather than read through.
fn c08_reservoir_durability() -> String {
    let dir = tempfile::tempdir().unwrap();
    let pool = IoPool::new(2);
    let cfg = ReservoirConfig {
        chunk_events: 100,
        ..ReservoirConfig::default()
    };
    let (mut r, _) = Reservoir::open(dir.path(), cfg.clone(), pool.clone()).unwrap();
    let mut encoded = Vec::new();
    let mut seal_points = 0;
    for i in 0..1_000u64 {
        let e = card_event(i as i64 * 10, i, &format!("c{}", i % 5), (i % 90) as f64);
        encoded.push(e.encode());
        r.append(e).unwrap();
        if (i + 1) % 100 != 0 {
            continue;
        }
        r.seal_now();
        r.wait_persisted();
        let durable = r.durable_events();
        assert_eq!(durable, i + 1, "seal boundary");
        seal_points += 1;

        // clean crash at the seal: everything durable comes back bytewise
        let copy = tempfile::tempdir().unwrap();
        copy_flat_dir(dir.path(), copy.path());
        let (rec, info) = Reservoir::open(copy.path(), cfg.clone(), pool.clone()).unwrap();
        assert_eq!(info.durable_events, durable, "recover position");
        assert_prefix(rec, &encoded[..durable as usize]);

        // torn tail: drop 7 bytes off the newest chunk file
        let torn = tempfile::tempdir().unwrap();
        copy_flat_dir(dir.path(), torn.path());
        let newest = newest_chunk(torn.path());
        let len = fs::metadata(&newest).unwrap().len();
        fs::OpenOptions::new().write(true).open(&newest).unwrap().set_len(len - 7).unwrap();
        let (rec, info) = Reservoir::open(torn.path(), cfg.clone(), pool.clone()).unwrap();
        assert_eq!(info.durable_events, durable - 100, "torn tail drops one seal");
        assert_prefix(rec, &encoded[..(durable - 100) as usize]);

        // interior corruption with valid successors must be detected
        if durable >= 200 {
            let bad = tempfile::tempdir().unwrap();
            copy_flat_dir(dir.path(), bad.path());
            let oldest = oldest_chunk(bad.path());
            let mut bytes = fs::read(&oldest).unwrap();
            let mid = bytes.len() / 2;
            bytes[mid] ^= 0xA5;
            fs::write(&oldest, bytes).unwrap();
            let detected = match Reservoir::open(bad.path(), cfg.clone(), pool.clone()) {
                Err(_) => true,
                Ok((mut rec, _)) => {
                    let it = rec.open_iterator(IterRole::Tail, IterStart::Time(i64::MIN));
                    match it {
                        Err(_) => true,
                        Ok(it) => loop {
                            match rec.iterator_next(it) {
                                Err(_) => break true,
                                Ok(None) => break false,
                                Ok(Some(_)) => {}
                            }
                        },
                    }
                }
            };
            assert!(detected, "interior corruption read through silently");
        }
    }
    format!("{seal_points} seal points: recover/torn-tail/corruption all consistent")
}

fn copy_flat_dir(src: &Path, dst: &Path) {
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            fs::copy(entry.path(), dst.join(entry.file_name())).unwrap();
        }
    }
}

fn chunk_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("chk"))
        .collect();
    files.sort();
    files
}

fn newest_chunk(dir: &Path) -> std::path::PathBuf {
    chunk_files(dir).pop().unwrap()
}

fn oldest_chunk(dir: &Path) -> std::path::PathBuf {
    chunk_files(dir).remove(0)
}

fn assert_prefix(mut r: Reservoir, want: &[Vec<u8>]) {
    let it = r.open_iterator(IterRole::Tail, IterStart::Time(i64::MIN)).unwrap();
    let mut n = 0usize;
    while let Some(e) = r.iterator_next(it).unwrap() {
        assert!(n < want.len(), "recovered beyond the durable prefix");
        assert_eq!(e.encode(), want[n], "event {n} differs after recovery");
        n += 1;
    }
    assert_eq!(n, want.len(), "recovered prefix is short");
}

// -- criterion 9 --------------------------------------------------------------

/// Tail sharing: {1-minute, 5-minute} sliding windows need 3 iterators;
/// 10 pairwise-misaligned windows need all 20.
fn c09_iterator_law() -> String {
    let shared = share_tail(&[WindowSpec::sliding(60_000), WindowSpec::sliding(300_000)]);
    assert_eq!(shared.total(), 3, "two sliding sizes share one tail");
    assert_eq!(shared.tail_edges, vec![0]);
    let misaligned = plan_iterators(&misaligned_shapes(10));
    assert_eq!(misaligned.total(), 20, "misaligned windows share nothing");
    format!("shared={} misaligned={}", shared.total(), misaligned.total())
}

// -- criterion 10 -------------------------------------------------------------

/// A run whose expiry scans must reload evicted chunks still performs zero
/// synchronous disk operations on the append/advance path.
fn c10_critical_path() -> String {
    let dir = tempfile::tempdir().unwrap();
    let stream = bench_stream(
        vec![count_metric("card_count_2m", WindowSpec::sliding(120_000))],
        1,
    );
    let cfg = EngineConfig {
        data_root: dir.path().to_path_buf(),
        units: 1,
        cache_capacity: 4, // far below the chunk count, so loads must happen
        chunk_events: 128,
        ..EngineConfig::default()
    };
    let engine = Engine::start(cfg, stream).expect("engine");
    let mut rng = ChaCha8Rng::seed_from_u64(0xC10);
    for i in 0..5_000u64 {
        let fields: BTreeMap<String, Value> = [
            ("card".to_string(), Value::Str(format!("c{}", rng.gen_range(0..20)))),
            ("merchant".to_string(), Value::Str("m1".to_string())),
            ("amount".to_string(), Value::Float(rng.gen_range(1..500) as f64)),
        ]
        .into();
        engine.ingest(i as i64 * 100, fields).expect("ingest");
    }
    assert!(engine.drain(Duration::from_secs(60)), "drain timed out");
    let stats = engine.reservoir_stats();
    let loads: u64 = stats.iter().map(|(_, s)| s.chunk_loads).sum();
    let sync_ops: u64 = stats.iter().map(|(_, s)| s.critical_path_disk_ops).sum();
    engine.shutdown();
    assert!(loads > 0, "run never exercised chunk loading");
    assert_eq!(sync_ops, 0, "synchronous disk ops leaked onto the hot path");
    format!("{loads} async chunk loads, 0 synchronous hot-path disk ops")
}

// -- smoke benchmark ----------------------------------------------------------

/// 500 ev/s for 60 s end to end; the corrected p99.9 must come out finite.
fn smoke_benchmark() -> String {
    let dir = tempfile::tempdir().unwrap();
    let stream = bench_stream(
        vec![count_metric("card_count_1m", WindowSpec::sliding(60_000))],
        2,
    );
    let cfg = EngineConfig {
        data_root: dir.path().to_path_buf(),
        ..EngineConfig::default()
    };
    let engine = Engine::start(cfg, stream).expect("engine");
    let inj = InjectorConfig::default(); // 500 ev/s, 60 s, 10 s warmup
    let (report, _) = run_injection(&engine, &inj, "smoke");
    engine.shutdown();
    assert!(report.measured > 0, "no measured responses");
    assert!(report.p999_ms.is_finite(), "p99.9 not finite");
    format!(
        "p99.9={:.2}ms p99={:.2}ms achieved={:.0}ev/s valid={}",
        report.p999_ms, report.p99_ms, report.achieved_throughput, report.valid
    )
}

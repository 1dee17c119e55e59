//! Why real sliding windows matter: five card transactions that a 5-minute
//! sliding count sees in full, while every 5-minute hopping window (1-minute
//! hop) sees at most four.
//!
//! Run: cargo run --example sliding_vs_hopping

use std::collections::BTreeMap;

use slipstream::engine::{Engine, EngineConfig};
use slipstream::model::{
    Aggregation, MetricSpec, StreamConfig, TopicSpec, Value, ValueType, WindowSpec,
};

fn metric(id: &str, window: WindowSpec) -> MetricSpec {
    MetricSpec {
        metric_id: id.to_string(),
        window,
        filter: None,
        group_by: vec!["card".to_string()],
        aggregation: Aggregation::Count,
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let stream = StreamConfig {
        stream_id: "payments".to_string(),
        schema: [("card".to_string(), ValueType::Str)].into(),
        metrics: vec![
            metric("sliding_5m", WindowSpec::sliding(300_000)),
            metric("hopping_5m_1m", WindowSpec::hopping(300_000, 60_000)),
        ],
        topics: vec![TopicSpec {
            name: "by-card".to_string(),
            routing_keys: vec!["card".to_string()],
            partitions: 1,
        }],
    };
    let cfg = EngineConfig {
        data_root: dir.path().to_path_buf(),
        units: 1,
        ..EngineConfig::default()
    };
    let engine = Engine::start(cfg, stream).expect("engine");
    let rx = engine.responses();

    // same card, 50s 120s 180s 240s 345s: all five inside (45s, 345s]
    println!("ts(s)  sliding_5m  hopping_5m_1m (best live window)");
    for ts in [50_000i64, 120_000, 180_000, 240_000, 345_000] {
        let fields: BTreeMap<String, Value> =
            [("card".to_string(), Value::Str("c42".to_string()))].into();
        engine.ingest(ts, fields).expect("ingest");
        let r = rx.recv().expect("response");
        let get = |id: &str| match r.metrics.get(id) {
            Some(Value::Int(n)) => *n,
            other => panic!("unexpected {other:?}"),
        };
        println!(
            "{:>5}  {:>10}  {:>13}",
            ts / 1000,
            get("sliding_5m"),
            get("hopping_5m_1m")
        );
    }
    println!("\nThe sliding window reports 5; no hopping window ever holds more than 4.");
    engine.shutdown();
}

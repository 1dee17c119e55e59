//! The full pipeline: one stream, two routed topics, filtered and
//! unfiltered metrics with shared plan prefixes, per-event responses joined
//! across topics, and a metric registered live without a restart.
//!
//! Run: cargo run --example pipeline

use std::collections::BTreeMap;

use slipstream::engine::{Engine, EngineConfig};
use slipstream::model::{
    Aggregation, CmpOp, Comparison, MetricSpec, Predicate, StreamConfig, TopicSpec, Value,
    ValueType, WindowSpec,
};

fn main() {
    let stream = StreamConfig {
        stream_id: "payments".to_string(),
        schema: [
            ("card".to_string(), ValueType::Str),
            ("merchant".to_string(), ValueType::Str),
            ("amount".to_string(), ValueType::Float),
        ]
        .into(),
        metrics: vec![
            MetricSpec {
                metric_id: "card_spend_5m".to_string(),
                window: WindowSpec::sliding(300_000),
                filter: None,
                group_by: vec!["card".to_string()],
                aggregation: Aggregation::Sum("amount".to_string()),
            },
            MetricSpec {
                metric_id: "card_large_txns_5m".to_string(),
                window: WindowSpec::sliding(300_000), // shares the window node
                filter: Some(Predicate {
                    clauses: vec![Comparison {
                        field: "amount".to_string(),
                        op: CmpOp::Gt,
                        value: Value::Float(100.0),
                    }],
                }),
                group_by: vec!["card".to_string()],
                aggregation: Aggregation::Count,
            },
            MetricSpec {
                metric_id: "merchant_cards_1h".to_string(),
                window: WindowSpec::sliding(3_600_000),
                filter: None,
                group_by: vec!["merchant".to_string()],
                aggregation: Aggregation::DistinctCount("card".to_string()),
            },
        ],
        topics: vec![
            TopicSpec {
                name: "by-card".to_string(),
                routing_keys: vec!["card".to_string()],
                partitions: 2,
            },
            TopicSpec {
                name: "by-merchant".to_string(),
                routing_keys: vec!["merchant".to_string()],
                partitions: 2,
            },
        ],
    };
    // the config round-trips through TOML; this is the deployable form
    println!("--- stream config (TOML) ---\n{}", stream.to_toml());
    let stream = StreamConfig::from_toml(&stream.to_toml()).expect("round trip");

    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = EngineConfig {
        data_root: dir.path().to_path_buf(),
        ..EngineConfig::default()
    };
    let engine = Engine::start(cfg, stream).expect("engine");
    let rx = engine.responses();

    let txns = [
        (10_000i64, "c1", "groceries", 42.0),
        (20_000, "c1", "electronics", 640.0),
        (30_000, "c2", "electronics", 120.0),
        (40_000, "c1", "electronics", 9.5),
    ];
    for (ts, card, merchant, amount) in txns {
        let fields: BTreeMap<String, Value> = [
            ("card".to_string(), Value::Str(card.to_string())),
            ("merchant".to_string(), Value::Str(merchant.to_string())),
            ("amount".to_string(), Value::Float(amount)),
        ]
        .into();
        engine.ingest(ts, fields).expect("ingest");
        let r = rx.recv().expect("response");
        // one response joins the fragments from both topics
        println!("t={:>2}s {card}@{merchant} {amount:>6.2} -> {:?}", ts / 1000, r.metrics);
    }

    // register a new metric on the running engine; it sees events from its
    // registration on (no backfill)
    engine
        .add_metric(MetricSpec {
            metric_id: "card_avg_5m".to_string(),
            window: WindowSpec::sliding(300_000),
            filter: None,
            group_by: vec!["card".to_string()],
            aggregation: Aggregation::Avg("amount".to_string()),
        })
        .expect("add metric");
    let fields: BTreeMap<String, Value> = [
        ("card".to_string(), Value::Str("c1".to_string())),
        ("merchant".to_string(), Value::Str("groceries".to_string())),
        ("amount".to_string(), Value::Float(30.0)),
    ]
    .into();
    engine.ingest(50_000, fields).expect("ingest");
    let r = rx.recv().expect("response");
    println!("after live add_metric      -> {:?}", r.metrics);
    engine.shutdown();
}

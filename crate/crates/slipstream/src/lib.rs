//! Slipstream: a single-process streaming-aggregation engine computing
//! accurate per-event metrics over real sliding windows, backed by a
//! disk-based event reservoir, an operator DAG with prefix sharing, and an
//! embedded pull-based partitioned log. Includes a hopping-window baseline
//! and a latency benchmark harness.

pub mod bench;
pub mod engine;
pub mod messaging;
pub mod model;
pub mod plan;
pub mod reservoir;
pub mod state_store;

//! The embedded partitioned log: durable appends, consumer-group partition
//! ownership, committed offsets, and replay after a member leaves.
//!
//! Run: cargo run --example partitioned_log

use std::sync::Arc;
use std::time::Duration;

use slipstream::messaging::{FsyncPolicy, GroupCoordinator, Log, Record, TopicPartition};

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let log = Arc::new(Log::open(dir.path(), FsyncPolicy::default()).expect("log"));
    log.create_topic("orders", 4).expect("topic");

    for i in 0..100u32 {
        let tp = TopicPartition::new("orders", i % 4);
        log.append(&tp, &Record::new(i.to_le_bytes().to_vec(), format!("order-{i}")))
            .expect("append");
    }

    let coordinator = Arc::new(GroupCoordinator::new(Arc::clone(&log)));
    let topics = vec!["orders".to_string()];
    let a = coordinator.join("readers", "reader-a", &topics).expect("join");
    let b = coordinator.join("readers", "reader-b", &topics).expect("join");

    // partitions are dealt round-robin over the sorted member list
    let mut seen = 0usize;
    for m in [&a, &b] {
        let records = m.poll(1_000, Duration::from_millis(50)).expect("poll");
        println!("{} owns {:?}, read {} records", m.member_id(), m.assignment(), records.len());
        for r in &records {
            m.commit(&r.tp, r.offset + 1).expect("commit");
        }
        seen += records.len();
    }
    assert_eq!(seen, 100);

    // b leaves; its partitions move to a, which resumes at the committed
    // offsets instead of replaying from zero
    b.leave().expect("leave");
    for i in 100..120u32 {
        let tp = TopicPartition::new("orders", i % 4);
        log.append(&tp, &Record::new(Vec::from(i.to_le_bytes()), format!("order-{i}")))
            .expect("append");
    }
    let records = a.poll(1_000, Duration::from_millis(50)).expect("poll");
    println!(
        "after handoff {} owns {:?} and read {} new records (no replay)",
        a.member_id(),
        a.assignment(),
        records.len()
    );
    assert_eq!(records.len(), 20);
}

//! Embedded, durable, partitioned append-only log with pull-based consumption:
//! per-partition offsets, committed restart positions, rewind/replay, and
//! consumer groups with single-owner partition assignment and rebalance
//! callbacks.

mod group;
mod log;

pub use group::{AssignmentDelta, GroupCoordinator, Member};
pub use log::{FsyncPolicy, Log, PolledRecord, Record};

use std::fmt;

/// A (topic, partition) pair; the unit of assignment and ordering.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicPartition {
    pub topic: String,
    pub partition: u32,
}

impl TopicPartition {
    pub fn new(topic: impl Into<String>, partition: u32) -> Self {
        TopicPartition {
            topic: topic.into(),
            partition,
        }
    }
}

impl fmt::Display for TopicPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.topic, self.partition)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("topic `{0}` already exists")]
    DuplicateTopic(String),
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("partition {0} out of range")]
    UnknownPartition(u32),
    #[error("offset {offset} out of range for {tp} (next offset {next})")]
    OffsetOutOfRange {
        tp: TopicPartition,
        offset: u64,
        next: u64,
    },
    #[error("commit regression for {tp}: {attempted} < committed {committed}")]
    CommitRegression {
        tp: TopicPartition,
        attempted: u64,
        committed: u64,
    },
    #[error("empty payload")]
    EmptyPayload,
    #[error("corrupt segment for {tp} at file position {pos}")]
    CorruptSegment { tp: TopicPartition, pos: u64 },
    #[error("storage failure: {0}")]
    Io(#[from] std::io::Error),
}

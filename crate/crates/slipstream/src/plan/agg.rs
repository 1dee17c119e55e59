//! Incremental, invertible aggregation accumulators. Expiry is subtraction,
//! so every kind here supports remove() exactly; distinct counting is a
//! value-to-refcount map, not a sketch.

use std::collections::BTreeMap;

use crate::model::Value;

/// Per-group accumulator. `n` counts contributing events so emptiness is
/// detectable; `updates` drives periodic float re-baselining.
#[derive(Debug, Clone, PartialEq)]
pub enum AggState {
    Count {
        n: i64,
    },
    Sum {
        total: f64,
        n: i64,
        updates: u32,
    },
    Avg {
        total: f64,
        n: i64,
        updates: u32,
    },
    Distinct {
        /// canonical value bytes -> number of in-window occurrences
        counts: BTreeMap<Vec<u8>, u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggKind {
    Count,
    Sum,
    Avg,
    Distinct,
}

impl AggState {
    pub fn new(kind: AggKind) -> Self {
        match kind {
            AggKind::Count => AggState::Count { n: 0 },
            AggKind::Sum => AggState::Sum {
                total: 0.0,
                n: 0,
                updates: 0,
            },
            AggKind::Avg => AggState::Avg {
                total: 0.0,
                n: 0,
                updates: 0,
            },
            AggKind::Distinct => AggState::Distinct {
                counts: BTreeMap::new(),
            },
        }
    }

    pub fn kind(&self) -> AggKind {
        match self {
            AggState::Count { .. } => AggKind::Count,
            AggState::Sum { .. } => AggKind::Sum,
            AggState::Avg { .. } => AggKind::Avg,
            AggState::Distinct { .. } => AggKind::Distinct,
        }
    }

    /// Applies one arriving event. `input` is the aggregation's input field
    /// value; count ignores it, the numeric kinds skip non-numeric values.
    pub fn add(&mut self, input: Option<&Value>) {
        match self {
            AggState::Count { n } => *n += 1,
            AggState::Sum { total, n, updates } | AggState::Avg { total, n, updates } => {
                if let Some(x) = numeric(input) {
                    *total += x;
                    *n += 1;
                    *updates += 1;
                }
            }
            AggState::Distinct { counts } => {
                if let Some(v) = input {
                    let mut key = Vec::new();
                    v.write_canonical(&mut key);
                    *counts.entry(key).or_insert(0) += 1;
                }
            }
        }
    }

    /// Applies one expiring event; exact inverse of add() for the same event.
    pub fn remove(&mut self, input: Option<&Value>) {
        match self {
            AggState::Count { n } => *n -= 1,
            AggState::Sum { total, n, updates } | AggState::Avg { total, n, updates } => {
                if let Some(x) = numeric(input) {
                    *total -= x;
                    *n -= 1;
                    *updates += 1;
                }
            }
            AggState::Distinct { counts } => {
                if let Some(v) = input {
                    let mut key = Vec::new();
                    v.write_canonical(&mut key);
                    if let Some(c) = counts.get_mut(&key) {
                        *c -= 1;
                        if *c == 0 {
                            counts.remove(&key);
                        }
                    }
                }
            }
        }
    }

    /// Current value; None when the aggregate is undefined (avg of nothing).
    pub fn value(&self) -> Option<Value> {
        match self {
            AggState::Count { n } => Some(Value::Int(*n)),
            AggState::Sum { total, .. } => Some(Value::Float(*total)),
            AggState::Avg { total, n, .. } => {
                (*n > 0).then(|| Value::Float(*total / *n as f64))
            }
            AggState::Distinct { counts } => Some(Value::Int(counts.len() as i64)),
        }
    }

    /// Empty states are deleted from the store to bound it by live groups.
    pub fn is_empty(&self) -> bool {
        match self {
            AggState::Count { n } => *n == 0,
            AggState::Sum { n, .. } | AggState::Avg { n, .. } => *n == 0,
            AggState::Distinct { counts } => counts.is_empty(),
        }
    }

    /// True when accumulated float drift warrants recomputing from scratch.
    pub fn needs_rebaseline(&self, interval: u32) -> bool {
        match self {
            AggState::Sum { updates, .. } | AggState::Avg { updates, .. } => *updates >= interval,
            _ => false,
        }
    }

    /// Replaces the float accumulator with a freshly recomputed one.
    pub fn rebaseline(&mut self, fresh_total: f64, fresh_n: i64) {
        match self {
            AggState::Sum { total, n, updates } | AggState::Avg { total, n, updates } => {
                *total = fresh_total;
                *n = fresh_n;
                *updates = 0;
            }
            _ => {}
        }
    }

    // -- versioned binary codec (state snapshots) ---------------------------

    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            AggState::Count { n } => {
                out.push(1);
                out.extend_from_slice(&n.to_le_bytes());
            }
            AggState::Sum { total, n, updates } => {
                out.push(2);
                out.extend_from_slice(&total.to_bits().to_le_bytes());
                out.extend_from_slice(&n.to_le_bytes());
                out.extend_from_slice(&updates.to_le_bytes());
            }
            AggState::Avg { total, n, updates } => {
                out.push(3);
                out.extend_from_slice(&total.to_bits().to_le_bytes());
                out.extend_from_slice(&n.to_le_bytes());
                out.extend_from_slice(&updates.to_le_bytes());
            }
            AggState::Distinct { counts } => {
                out.push(4);
                out.extend_from_slice(&(counts.len() as u32).to_le_bytes());
                for (key, refs) in counts {
                    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
                    out.extend_from_slice(key);
                    out.extend_from_slice(&refs.to_le_bytes());
                }
            }
        }
    }

    pub fn decode(buf: &[u8], pos: &mut usize) -> Option<AggState> {
        let tag = *buf.get(*pos)?;
        *pos += 1;
        Some(match tag {
            1 => AggState::Count {
                n: read_i64(buf, pos)?,
            },
            2 => AggState::Sum {
                total: f64::from_bits(read_i64(buf, pos)? as u64),
                n: read_i64(buf, pos)?,
                updates: read_u32(buf, pos)?,
            },
            3 => AggState::Avg {
                total: f64::from_bits(read_i64(buf, pos)? as u64),
                n: read_i64(buf, pos)?,
                updates: read_u32(buf, pos)?,
            },
            4 => {
                let len = read_u32(buf, pos)? as usize;
                let mut counts = BTreeMap::new();
                for _ in 0..len {
                    let klen = read_u32(buf, pos)? as usize;
                    let key = buf.get(*pos..*pos + klen)?.to_vec();
                    *pos += klen;
                    let refs = read_i64(buf, pos)? as u64;
                    counts.insert(key, refs);
                }
                AggState::Distinct { counts }
            }
            _ => return None,
        })
    }
}

fn numeric(v: Option<&Value>) -> Option<f64> {
    match v {
        Some(Value::Int(i)) => Some(*i as f64),
        Some(Value::Float(f)) => Some(*f),
        _ => None,
    }
}

fn read_i64(buf: &[u8], pos: &mut usize) -> Option<i64> {
    let v = i64::from_le_bytes(buf.get(*pos..*pos + 8)?.try_into().unwrap());
    *pos += 8;
    Some(v)
}

fn read_u32(buf: &[u8], pos: &mut usize) -> Option<u32> {
    let v = u32::from_le_bytes(buf.get(*pos..*pos + 4)?.try_into().unwrap());
    *pos += 4;
    Some(v)
}

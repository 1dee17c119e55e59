//! Domain vocabulary: events, scalar values, window and metric specifications,
//! stream configuration, and the window-membership predicate that every other
//! layer defers to.
//!
//! Time is event time in integer milliseconds throughout the engine.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Event-time instant, milliseconds.
pub type Timestamp = i64;

/// Scalar field value carried by events and filter constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Bool(_) => ValueType::Bool,
            Value::Int(_) => ValueType::Int,
            Value::Float(_) => ValueType::Float,
            Value::Str(_) => ValueType::Str,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(n) => Some(*n as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// Appends an injective byte encoding of the value. Distinct values map to
    /// distinct byte strings, so concatenations of length-prefixed encodings
    /// are usable as map keys and hash inputs.
    pub fn write_canonical(&self, out: &mut Vec<u8>) {
        match self {
            Value::Bool(b) => {
                out.push(0x01);
                out.push(*b as u8);
            }
            Value::Int(n) => {
                out.push(0x02);
                out.extend_from_slice(&n.to_le_bytes());
            }
            Value::Float(f) => {
                out.push(0x03);
                out.extend_from_slice(&f.to_bits().to_le_bytes());
            }
            Value::Str(s) => {
                out.push(0x04);
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
    }

    pub fn canonical(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_canonical(&mut out);
        out
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(n) => write!(f, "{n}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Bool,
    Int,
    Float,
    Str,
}

/// A timestamped record of named fields; the unit flowing through every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub timestamp: Timestamp,
    /// Unique monotonically assigned sequence per front-end, for reply
    /// correlation and replay dedup.
    pub ingest_id: u64,
    pub fields: BTreeMap<String, Value>,
}

impl Event {
    pub fn new(timestamp: Timestamp, ingest_id: u64, fields: BTreeMap<String, Value>) -> Self {
        Event {
            timestamp,
            ingest_id,
            fields,
        }
    }

    pub fn field(&self, name: &str) -> Option<&Value> {
        self.fields.get(name)
    }

    /// Binary codec used for log payloads. Length-prefixed, deterministic
    /// (fields in name order).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32);
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        out.extend_from_slice(&self.ingest_id.to_le_bytes());
        out.extend_from_slice(&(self.fields.len() as u16).to_le_bytes());
        for (name, value) in &self.fields {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            value.write_canonical(&mut out);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Event, DecodeError> {
        let mut cur = Cursor { buf, pos: 0 };
        let timestamp = i64::from_le_bytes(cur.take_array()?);
        let ingest_id = u64::from_le_bytes(cur.take_array()?);
        let n = u16::from_le_bytes(cur.take_array()?) as usize;
        let mut fields = BTreeMap::new();
        for _ in 0..n {
            let name_len = u16::from_le_bytes(cur.take_array()?) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| DecodeError::Malformed("field name not utf-8"))?
                .to_owned();
            let value = cur.take_value()?;
            fields.insert(name, value);
        }
        if cur.pos != buf.len() {
            return Err(DecodeError::Malformed("trailing bytes"));
        }
        Ok(Event {
            timestamp,
            ingest_id,
            fields,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated buffer")]
    Truncated,
    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn take_value(&mut self) -> Result<Value, DecodeError> {
        let tag = self.take(1)?[0];
        Ok(match tag {
            0x01 => Value::Bool(self.take(1)?[0] != 0),
            0x02 => Value::Int(i64::from_le_bytes(self.take_array()?)),
            0x03 => Value::Float(f64::from_bits(u64::from_le_bytes(self.take_array()?))),
            0x04 => {
                let len = u32::from_le_bytes(self.take_array()?) as usize;
                let s = std::str::from_utf8(self.take(len)?)
                    .map_err(|_| DecodeError::Malformed("string not utf-8"))?;
                Value::Str(s.to_owned())
            }
            _ => return Err(DecodeError::Malformed("unknown value tag")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Sliding,
    Hopping,
    Tumbling,
}

/// Declarative window description: kind, length, and (for hopping) the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub kind: WindowKind,
    pub size_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop_ms: Option<i64>,
}

impl WindowSpec {
    pub fn sliding(size_ms: i64) -> Self {
        WindowSpec {
            kind: WindowKind::Sliding,
            size_ms,
            hop_ms: None,
        }
    }

    pub fn hopping(size_ms: i64, hop_ms: i64) -> Self {
        WindowSpec {
            kind: WindowKind::Hopping,
            size_ms,
            hop_ms: Some(hop_ms),
        }
    }

    pub fn tumbling(size_ms: i64) -> Self {
        WindowSpec {
            kind: WindowKind::Tumbling,
            size_ms,
            hop_ms: None,
        }
    }

    /// Tumbling is hopping with the step equal to the window length.
    pub fn effective_hop_ms(&self) -> Option<i64> {
        match self.kind {
            WindowKind::Sliding => None,
            WindowKind::Hopping => self.hop_ms,
            WindowKind::Tumbling => Some(self.size_ms),
        }
    }
}

/// Comparison operator for filter predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// A single field-vs-constant comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub field: String,
    pub op: CmpOp,
    pub value: Value,
}

impl Comparison {
    /// Missing or type-mismatched fields compare as non-matching.
    pub fn matches(&self, event: &Event) -> bool {
        let Some(actual) = event.field(&self.field) else {
            return false;
        };
        let ord = match (actual, &self.value) {
            (Value::Int(a), Value::Int(b)) => a.partial_cmp(b),
            (Value::Float(a), Value::Float(b)) => a.partial_cmp(b),
            (Value::Int(a), Value::Float(b)) => (*a as f64).partial_cmp(b),
            (Value::Float(a), Value::Int(b)) => a.partial_cmp(&(*b as f64)),
            (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
            (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(b)),
            _ => None,
        };
        let Some(ord) = ord else {
            return matches!(self.op, CmpOp::Ne);
        };
        match self.op {
            CmpOp::Eq => ord.is_eq(),
            CmpOp::Ne => !ord.is_eq(),
            CmpOp::Lt => ord.is_lt(),
            CmpOp::Le => ord.is_le(),
            CmpOp::Gt => ord.is_gt(),
            CmpOp::Ge => ord.is_ge(),
        }
    }
}

/// Conjunction of field comparisons.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Predicate {
    pub clauses: Vec<Comparison>,
}

impl Predicate {
    pub fn matches(&self, event: &Event) -> bool {
        self.clauses.iter().all(|c| c.matches(event))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Count,
    Sum(String),
    Avg(String),
    DistinctCount(String),
}

impl Aggregation {
    pub fn input_field(&self) -> Option<&str> {
        match self {
            Aggregation::Count => None,
            Aggregation::Sum(f) | Aggregation::Avg(f) | Aggregation::DistinctCount(f) => Some(f),
        }
    }
}

/// One metric: window + optional filter + grouping + aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric_id: String,
    pub window: WindowSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<Predicate>,
    pub group_by: Vec<String>,
    pub aggregation: Aggregation,
}

/// A topic the front-end routes to: events are hashed by the values of
/// `routing_keys` and appended to one of `partitions` partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSpec {
    pub name: String,
    pub routing_keys: Vec<String>,
    pub partitions: u32,
}

/// Per-stream configuration: schema, metrics, and topic assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub stream_id: String,
    pub schema: BTreeMap<String, ValueType>,
    pub metrics: Vec<MetricSpec>,
    pub topics: Vec<TopicSpec>,
}

impl StreamConfig {
    pub fn from_toml(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("stream config serializes")
    }

    /// The topic a metric's events route through: the first topic whose
    /// routing keys are a subset of the metric's group-by fields.
    pub fn covering_topic(&self, metric: &MetricSpec) -> Option<&TopicSpec> {
        self.topics.iter().find(|t| {
            !t.routing_keys.is_empty()
                && t.routing_keys.iter().all(|k| metric.group_by.contains(k))
        })
    }
}

/// Membership predicate: event at `t_i` belongs to the evaluation at `t_eval`
/// of a window of length `w_s` iff `t_eval - w_s <= t_i < t_eval`.
pub fn window_contains(t_i: Timestamp, t_eval: Timestamp, w_s: i64) -> bool {
    debug_assert!(w_s > 0);
    t_eval - w_s <= t_i && t_i < t_eval
}

/// Evaluation point of a sliding window triggered by an event at `t_new`:
/// the moment right after the arrival, at 1 ms granularity. The resulting
/// window covers the half-open interval `(t_new - w_s, t_new]`.
pub fn sliding_eval_point(t_new: Timestamp) -> Timestamp {
    t_new + 1
}

/// One broken configuration rule, naming the metric/topic involved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigViolation {
    pub subject: String,
    pub rule: String,
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.rule)
    }
}

/// Checks every StreamConfig invariant; returns all violations found.
pub fn validate_config(cfg: &StreamConfig) -> Vec<ConfigViolation> {
    let mut violations = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();

    for topic in &cfg.topics {
        if topic.partitions == 0 {
            violations.push(ConfigViolation {
                subject: format!("topic {}", topic.name),
                rule: "partition count must be >= 1".into(),
            });
        }
        for key in &topic.routing_keys {
            if !cfg.schema.contains_key(key) {
                violations.push(ConfigViolation {
                    subject: format!("topic {}", topic.name),
                    rule: format!("routing key `{key}` not in stream schema"),
                });
            }
        }
    }

    for metric in &cfg.metrics {
        let subject = format!("metric {}", metric.metric_id);
        if !seen_ids.insert(metric.metric_id.clone()) {
            violations.push(ConfigViolation {
                subject: subject.clone(),
                rule: "duplicate metric_id".into(),
            });
        }
        if metric.group_by.is_empty() {
            violations.push(ConfigViolation {
                subject: subject.clone(),
                rule: "group_by must be non-empty".into(),
            });
        }
        for field in &metric.group_by {
            if !cfg.schema.contains_key(field) {
                violations.push(ConfigViolation {
                    subject: subject.clone(),
                    rule: format!("group_by field `{field}` not in stream schema"),
                });
            }
        }
        if let Some(field) = metric.aggregation.input_field() {
            if !cfg.schema.contains_key(field) {
                violations.push(ConfigViolation {
                    subject: subject.clone(),
                    rule: format!("aggregated field `{field}` not in stream schema"),
                });
            }
        }
        if let Some(pred) = &metric.filter {
            for clause in &pred.clauses {
                if !cfg.schema.contains_key(&clause.field) {
                    violations.push(ConfigViolation {
                        subject: subject.clone(),
                        rule: format!("filter field `{}` not in stream schema", clause.field),
                    });
                }
            }
        }
        if metric.window.size_ms <= 0 {
            violations.push(ConfigViolation {
                subject: subject.clone(),
                rule: "window size_ms must be > 0".into(),
            });
        }
        match metric.window.kind {
            WindowKind::Hopping => match metric.window.hop_ms {
                None => violations.push(ConfigViolation {
                    subject: subject.clone(),
                    rule: "hopping window requires hop_ms".into(),
                }),
                Some(hop) if hop <= 0 || hop > metric.window.size_ms => {
                    violations.push(ConfigViolation {
                        subject: subject.clone(),
                        rule: "hop_ms must satisfy 0 < hop_ms <= size_ms".into(),
                    })
                }
                Some(_) => {}
            },
            WindowKind::Sliding | WindowKind::Tumbling => {
                if metric.window.hop_ms.is_some() {
                    violations.push(ConfigViolation {
                        subject: subject.clone(),
                        rule: "hop_ms only applies to hopping windows".into(),
                    });
                }
            }
        }
        if cfg.covering_topic(metric).is_none() {
            violations.push(ConfigViolation {
                subject,
                rule: "no topic whose routing_keys are a subset of group_by".into(),
            });
        }
    }

    violations
}

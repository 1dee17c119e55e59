//! The per-partition operator DAG: Window -> Filter -> GroupBy -> Aggregator,
//! with structurally equal prefixes shared across metrics.
//!
//! Sliding windows are evaluated at every event arrival: the window node
//! expires events through its head iterator over the reservoir, applies the
//! arrival, and downstream aggregators update incrementally. Hopping and
//! tumbling windows keep per-live-window accumulators instead and never store
//! events.

pub mod agg;

use std::collections::BTreeMap;
use std::collections::VecDeque;

use crate::model::{
    Aggregation, Event, MetricSpec, Predicate, Timestamp, Value, WindowKind, WindowSpec,
};
use crate::reservoir::{IterRole, IterStart, IteratorId, Reservoir, ReservoirError};
use agg::{AggKind, AggState};

/// Re-baseline float accumulators after this many updates per group; the
/// window is recounted from the reservoir to cancel subtraction drift.
pub const DEFAULT_REBASELINE_INTERVAL: u32 = 1 << 16;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("plan is not attached to a reservoir")]
    NotAttached,
    #[error(transparent)]
    Reservoir(#[from] ReservoirError),
}

/// One metric evaluation produced by an advance. Sliding metrics carry no
/// window bounds (the window is implicit in the event time); hopping metrics
/// carry the bounds of the live window evaluated, and `closed` marks a final
/// emitted when a hop window ends.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricOutput {
    pub metric_id: String,
    /// Canonical group key of the evaluated group.
    pub group: Vec<u8>,
    pub value: Value,
    pub window: Option<(Timestamp, Timestamp)>,
    pub closed: bool,
}

struct WindowNode {
    spec: WindowSpec,
    head: Option<IteratorId>,
    hopping: Option<HoppingState>,
    filters: Vec<usize>,
}

struct FilterNode {
    predicate: Option<Predicate>,
    groups: Vec<usize>,
}

struct GroupNode {
    fields: Vec<String>,
    leaves: Vec<usize>,
}

struct AggLeaf {
    group: usize,
    aggregation: Aggregation,
    /// All metric ids aliasing this leaf (identical chains merge here).
    metric_ids: Vec<String>,
    states: BTreeMap<Vec<u8>, AggState>,
    /// Leaves added mid-stream count only events at or after this instant, so
    /// arrivals and expirations stay symmetric without backfill.
    active_from: Option<Timestamp>,
}

/// Live accumulators for one hopping/tumbling window node. Events contribute
/// on arrival and are never stored; each live window spans
/// [start, start + size) and closes when an event at or past its end arrives.
pub struct HoppingState {
    live: VecDeque<LiveWindow>,
}

struct LiveWindow {
    start: Timestamp,
    end: Timestamp,
    states: BTreeMap<(usize, Vec<u8>), AggState>,
}

impl HoppingState {
    fn new() -> Self {
        HoppingState {
            live: VecDeque::new(),
        }
    }

    pub fn live_windows(&self) -> usize {
        self.live.len()
    }
}

struct Contribution {
    leaf: usize,
    key: Vec<u8>,
    input: Option<Value>,
}

pub struct PlanDag {
    windows: Vec<WindowNode>,
    filters: Vec<FilterNode>,
    groups: Vec<GroupNode>,
    leaves: Vec<AggLeaf>,
    rebaseline_interval: u32,
    last_event_ts: Option<Timestamp>,
    /// Events rejected by a filter because a predicate field was absent.
    missing_field_filtered: u64,
    attached: bool,
}

impl PlanDag {
    /// Builds the DAG with maximal prefix sharing: one window node per
    /// distinct WindowSpec, filters and group-bys merged when structurally
    /// equal, identical full chains aliasing one aggregator leaf.
    pub fn build(metrics: &[MetricSpec]) -> PlanDag {
        Self::build_inner(metrics, true)
    }

    /// Same semantics with sharing disabled: every metric gets a private
    /// chain. Exists so equivalence with the shared build is testable.
    pub fn build_unshared(metrics: &[MetricSpec]) -> PlanDag {
        Self::build_inner(metrics, false)
    }

    fn build_inner(metrics: &[MetricSpec], share: bool) -> PlanDag {
        let mut dag = PlanDag {
            windows: Vec::new(),
            filters: Vec::new(),
            groups: Vec::new(),
            leaves: Vec::new(),
            rebaseline_interval: DEFAULT_REBASELINE_INTERVAL,
            last_event_ts: None,
            missing_field_filtered: 0,
            attached: false,
        };
        for m in metrics {
            dag.register(m, share);
        }
        dag
    }

    pub fn set_rebaseline_interval(&mut self, interval: u32) {
        self.rebaseline_interval = interval.max(1);
    }

    fn register(&mut self, m: &MetricSpec, share: bool) {
        let w = if share {
            self.windows.iter().position(|n| n.spec == m.window)
        } else {
            None
        }
        .unwrap_or_else(|| {
            self.windows.push(WindowNode {
                spec: m.window,
                head: None,
                hopping: None,
                filters: Vec::new(),
            });
            self.windows.len() - 1
        });

        let f = if share {
            self.windows[w]
                .filters
                .iter()
                .copied()
                .find(|&f| self.filters[f].predicate == m.filter)
        } else {
            None
        }
        .unwrap_or_else(|| {
            self.filters.push(FilterNode {
                predicate: m.filter.clone(),
                groups: Vec::new(),
            });
            let f = self.filters.len() - 1;
            self.windows[w].filters.push(f);
            f
        });

        let g = if share {
            self.filters[f]
                .groups
                .iter()
                .copied()
                .find(|&g| self.groups[g].fields == m.group_by)
        } else {
            None
        }
        .unwrap_or_else(|| {
            self.groups.push(GroupNode {
                fields: m.group_by.clone(),
                leaves: Vec::new(),
            });
            let g = self.groups.len() - 1;
            self.filters[f].groups.push(g);
            g
        });

        let existing = if share {
            self.groups[g]
                .leaves
                .iter()
                .copied()
                .find(|&l| self.leaves[l].aggregation == m.aggregation)
        } else {
            None
        };
        match existing {
            Some(l) => {
                // a second identical metric aliases the same leaf
                if !self.leaves[l].metric_ids.contains(&m.metric_id) {
                    self.leaves[l].metric_ids.push(m.metric_id.clone());
                }
            }
            None => {
                self.leaves.push(AggLeaf {
                    group: g,
                    aggregation: m.aggregation.clone(),
                    metric_ids: vec![m.metric_id.clone()],
                    states: BTreeMap::new(),
                    active_from: None,
                });
                let l = self.leaves.len() - 1;
                self.groups[g].leaves.push(l);
            }
        }
    }

    pub fn window_node_count(&self) -> usize {
        self.windows.len()
    }

    pub fn filter_node_count(&self) -> usize {
        self.filters.len()
    }

    pub fn group_node_count(&self) -> usize {
        self.groups.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Window specs in node order; aligns with snapshot hopping entries.
    pub fn window_specs(&self) -> Vec<WindowSpec> {
        self.windows.iter().map(|n| n.spec).collect()
    }

    /// Metric id lists per leaf, in leaf order (empty for removed metrics).
    pub fn leaf_metric_ids(&self) -> Vec<Vec<String>> {
        self.leaves.iter().map(|l| l.metric_ids.clone()).collect()
    }

    pub fn sliding_specs(&self) -> Vec<WindowSpec> {
        self.windows
            .iter()
            .filter(|n| n.spec.kind == WindowKind::Sliding)
            .map(|n| n.spec)
            .collect()
    }

    /// Largest window length across all nodes; the engine's retention and
    /// too-old-event floor derive from it.
    pub fn largest_window_ms(&self) -> i64 {
        self.windows.iter().map(|n| n.spec.size_ms).max().unwrap_or(0)
    }

    pub fn live_hop_windows(&self, window_node: usize) -> usize {
        self.windows[window_node]
            .hopping
            .as_ref()
            .map_or(0, |h| h.live_windows())
    }

    pub fn missing_field_filtered(&self) -> u64 {
        self.missing_field_filtered
    }

    pub fn last_event_ts(&self) -> Option<Timestamp> {
        self.last_event_ts
    }

    /// Opens head iterators over the reservoir for every sliding window node.
    /// On a cold start heads open at the end; after a restore they open at
    /// the exact expiry frontier implied by the last processed event.
    pub fn attach(&mut self, r: &mut Reservoir) -> Result<(), PlanError> {
        for node in &mut self.windows {
            if node.spec.kind != WindowKind::Sliding || node.head.is_some() {
                continue;
            }
            let start = match self.last_event_ts {
                // first event not yet expired: ts >= t_eval - w_s
                Some(ts) => IterStart::Time(ts + 1 - node.spec.size_ms),
                None => IterStart::End,
            };
            node.head = Some(r.open_iterator(IterRole::Head, start)?);
        }
        self.attached = true;
        Ok(())
    }

    /// Opens every sliding head at an explicit start instead of the frontier
    /// implied by last_event_ts. Used when the reservoir holds events the plan
    /// has not seen yet (replay after a crash that predates any checkpoint).
    pub fn attach_at(&mut self, r: &mut Reservoir, start: IterStart) -> Result<(), PlanError> {
        for node in &mut self.windows {
            if node.spec.kind != WindowKind::Sliding || node.head.is_some() {
                continue;
            }
            node.head = Some(r.open_iterator(IterRole::Head, start)?);
        }
        self.attached = true;
        Ok(())
    }

    /// Registers one more metric on a live plan. No backfill: the metric's
    /// leaf (if new) counts only events from the current frontier on, and a
    /// new window node's head opens at the end of the reservoir. A metric
    /// aliasing an existing leaf shares its full history immediately.
    pub fn add_metric(&mut self, m: &MetricSpec, r: &mut Reservoir) -> Result<(), PlanError> {
        if self.leaves.iter().any(|l| l.metric_ids.contains(&m.metric_id)) {
            return Ok(()); // duplicate add
        }
        let windows_before = self.windows.len();
        let leaves_before = self.leaves.len();
        self.register(m, true);
        if self.leaves.len() > leaves_before {
            self.leaves.last_mut().unwrap().active_from = self.last_event_ts.map(|t| t + 1);
        }
        if self.windows.len() > windows_before && self.attached {
            let node = self.windows.last_mut().unwrap();
            if node.spec.kind == WindowKind::Sliding {
                node.head = Some(r.open_iterator(IterRole::Head, IterStart::End)?);
            }
        }
        Ok(())
    }

    /// Unregisters a metric. A leaf left without metric ids is detached from
    /// its group node and its states are dropped; shared prefixes survive for
    /// the remaining metrics.
    pub fn remove_metric(&mut self, metric_id: &str) {
        for li in 0..self.leaves.len() {
            if let Some(p) = self.leaves[li].metric_ids.iter().position(|id| id == metric_id) {
                self.leaves[li].metric_ids.remove(p);
                if self.leaves[li].metric_ids.is_empty() {
                    self.leaves[li].states.clear();
                    let g = self.leaves[li].group;
                    self.groups[g].leaves.retain(|&l| l != li);
                }
                return;
            }
        }
    }

    /// Closes all iterators; the plan can re-attach later (ownership handoff).
    pub fn detach(&mut self, r: &mut Reservoir) {
        for node in &mut self.windows {
            if let Some(it) = node.head.take() {
                r.close_iterator(it);
            }
        }
        self.attached = false;
    }

    /// Oldest event-time instant any window still needs, given the last
    /// processed event; safe truncation watermark for the reservoir.
    pub fn retention_floor(&self) -> Option<Timestamp> {
        self.last_event_ts
            .map(|ts| ts + 1 - self.largest_window_ms())
    }

    /// Advances every window node with one arriving event. The event must
    /// already be in the reservoir and timestamps must be non-decreasing.
    pub fn advance(
        &mut self,
        r: &mut Reservoir,
        e: &Event,
    ) -> Result<Vec<MetricOutput>, PlanError> {
        if !self.attached {
            return Err(PlanError::NotAttached);
        }
        debug_assert!(self.last_event_ts.is_none_or(|t| e.timestamp >= t));
        let mut outputs = Vec::new();
        for w in 0..self.windows.len() {
            match self.windows[w].spec.kind {
                WindowKind::Sliding => self.advance_sliding(w, r, e, &mut outputs)?,
                WindowKind::Hopping | WindowKind::Tumbling => {
                    self.advance_hopping(w, e, &mut outputs)
                }
            }
        }
        self.last_event_ts = Some(e.timestamp);
        Ok(outputs)
    }

    /// Sliding evaluation at t_eval = e.timestamp + 1: the window covers
    /// (e.timestamp - w_s, e.timestamp]. Expirations are applied before the
    /// arrival, so an event at exactly t - w_s is gone from the reply.
    fn advance_sliding(
        &mut self,
        w: usize,
        r: &mut Reservoir,
        e: &Event,
        outputs: &mut Vec<MetricOutput>,
    ) -> Result<(), PlanError> {
        let t_eval = e.timestamp + 1;
        let low = t_eval - self.windows[w].spec.size_ms;
        let head = self.windows[w].head.ok_or(PlanError::NotAttached)?;

        while let Some(ts) = r.iterator_peek_ts(head)? {
            if ts >= low {
                break;
            }
            let expired = r.iterator_next(head)?.expect("peeked event exists");
            let (contribs, missing) = self.contributions(w, &expired);
            self.missing_field_filtered += missing;
            for c in contribs {
                let leaf = &mut self.leaves[c.leaf];
                if let Some(state) = leaf.states.get_mut(&c.key) {
                    state.remove(c.input.as_ref());
                    if state.is_empty() {
                        leaf.states.remove(&c.key);
                    }
                }
            }
        }

        let (contribs, missing) = self.contributions(w, e);
        self.missing_field_filtered += missing;
        for c in contribs {
            let kind = agg_kind(&self.leaves[c.leaf].aggregation);
            let state = self.leaves[c.leaf]
                .states
                .entry(c.key.clone())
                .or_insert_with(|| AggState::new(kind));
            state.add(c.input.as_ref());
            let still_empty = state.is_empty();
            let rebaseline = state.needs_rebaseline(self.rebaseline_interval);
            if still_empty {
                // a skipped non-numeric input must not leave a zero entry
                self.leaves[c.leaf].states.remove(&c.key);
                continue;
            }
            if rebaseline {
                let (total, n) = self.recount(r, w, c.leaf, &c.key, low, t_eval)?;
                self.leaves[c.leaf]
                    .states
                    .get_mut(&c.key)
                    .unwrap()
                    .rebaseline(total, n);
            }
        }

        // reply set: current values for the arriving event's groups only
        for &f in &self.windows[w].filters {
            for &g in &self.filters[f].groups {
                let key = group_key(&self.groups[g].fields, e);
                for &l in &self.groups[g].leaves {
                    let leaf = &self.leaves[l];
                    let value = match leaf.states.get(&key) {
                        Some(s) => s.value(),
                        None => AggState::new(agg_kind(&leaf.aggregation)).value(),
                    };
                    // undefined aggregates (avg of nothing) emit no value
                    if let Some(value) = value {
                        for id in &leaf.metric_ids {
                            outputs.push(MetricOutput {
                                metric_id: id.clone(),
                                group: key.clone(),
                                value: value.clone(),
                                window: None,
                                closed: false,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Recomputes a float accumulator by rescanning the window interval
    /// [low, t_eval) from the reservoir, restricted to this leaf's filter and
    /// group. Runs once per re-baseline interval per group.
    fn recount(
        &mut self,
        r: &mut Reservoir,
        w: usize,
        leaf: usize,
        key: &[u8],
        low: Timestamp,
        t_eval: Timestamp,
    ) -> Result<(f64, i64), PlanError> {
        let g = self.leaves[leaf].group;
        let f = self.windows[w]
            .filters
            .iter()
            .copied()
            .find(|&f| self.filters[f].groups.contains(&g))
            .expect("leaf reachable from its window");
        let it = r.open_iterator(IterRole::Head, IterStart::Time(low))?;
        let mut total = 0.0f64;
        let mut n = 0i64;
        while let Some(ts) = r.iterator_peek_ts(it)? {
            if ts >= t_eval {
                break;
            }
            let e = r.iterator_next(it)?.expect("peeked event exists");
            if self.leaves[leaf].active_from.is_some_and(|af| e.timestamp < af) {
                continue;
            }
            if !passes(&self.filters[f].predicate, &e).0 {
                continue;
            }
            if group_key(&self.groups[g].fields, &e) != key {
                continue;
            }
            let input = self.leaves[leaf]
                .aggregation
                .input_field()
                .and_then(|fld| e.field(fld));
            if let Some(Value::Int(i)) = input {
                total += *i as f64;
                n += 1;
            } else if let Some(Value::Float(x)) = input {
                total += *x;
                n += 1;
            }
        }
        r.close_iterator(it);
        Ok((total, n))
    }

    /// Hopping evaluation: close windows the event has passed (emitting their
    /// finals), open windows up to the one starting at the current hop
    /// boundary, fold the event into every live window, then report each live
    /// window's value for the event's groups.
    fn advance_hopping(&mut self, w: usize, e: &Event, outputs: &mut Vec<MetricOutput>) {
        let spec = self.windows[w].spec;
        let hop = spec.effective_hop_ms().unwrap_or(spec.size_ms);
        let size = spec.size_ms;
        let k = (size / hop).max(1);
        let newest_start = e.timestamp.div_euclid(hop) * hop;

        let (contribs, missing) = self.contributions(w, e);
        self.missing_field_filtered += missing;

        let mut hs = self.windows[w]
            .hopping
            .take()
            .unwrap_or_else(HoppingState::new);

        while let Some(front) = hs.live.front() {
            if front.end > e.timestamp {
                break;
            }
            let closing = hs.live.pop_front().unwrap();
            for ((leaf, key), state) in &closing.states {
                if let Some(value) = state.value() {
                    for id in &self.leaves[*leaf].metric_ids {
                        outputs.push(MetricOutput {
                            metric_id: id.clone(),
                            group: key.clone(),
                            value: value.clone(),
                            window: Some((closing.start, closing.end)),
                            closed: true,
                        });
                    }
                }
            }
        }
        if hs.live.is_empty() {
            for i in (0..k).rev() {
                let start = newest_start - i * hop;
                hs.live.push_back(LiveWindow {
                    start,
                    end: start + size,
                    states: BTreeMap::new(),
                });
            }
        } else {
            while hs.live.back().unwrap().start < newest_start {
                let start = hs.live.back().unwrap().start + hop;
                hs.live.push_back(LiveWindow {
                    start,
                    end: start + size,
                    states: BTreeMap::new(),
                });
            }
        }
        debug_assert_eq!(hs.live.len() as i64, k);

        for win in hs.live.iter_mut() {
            debug_assert!(win.start <= e.timestamp && e.timestamp < win.end);
            for c in &contribs {
                let kind = agg_kind(&self.leaves[c.leaf].aggregation);
                win.states
                    .entry((c.leaf, c.key.clone()))
                    .or_insert_with(|| AggState::new(kind))
                    .add(c.input.as_ref());
            }
        }

        // one evaluation per live window for the arriving event's groups
        for &f in &self.windows[w].filters {
            for &g in &self.filters[f].groups {
                let key = group_key(&self.groups[g].fields, e);
                for &l in &self.groups[g].leaves {
                    for win in &hs.live {
                        let value = match win.states.get(&(l, key.clone())) {
                            Some(s) => s.value(),
                            None => AggState::new(agg_kind(&self.leaves[l].aggregation)).value(),
                        };
                        if let Some(value) = value {
                            for id in &self.leaves[l].metric_ids {
                                outputs.push(MetricOutput {
                                    metric_id: id.clone(),
                                    group: key.clone(),
                                    value: value.clone(),
                                    window: Some((win.start, win.end)),
                                    closed: false,
                                });
                            }
                        }
                    }
                }
            }
        }
        self.windows[w].hopping = Some(hs);
    }

    /// Routes one event through a window node's filters and group-bys,
    /// yielding the (leaf, group key, input value) triples it contributes to.
    /// The second result counts filter rejections caused by absent fields.
    fn contributions(&self, w: usize, e: &Event) -> (Vec<Contribution>, u64) {
        let mut out = Vec::new();
        let mut missing = 0;
        for &f in &self.windows[w].filters {
            let (pass, field_absent) = passes(&self.filters[f].predicate, e);
            if !pass {
                if field_absent {
                    missing += 1;
                }
                continue;
            }
            for &g in &self.filters[f].groups {
                let key = group_key(&self.groups[g].fields, e);
                for &l in &self.groups[g].leaves {
                    // mid-stream leaves ignore events from before their birth
                    if self.leaves[l].active_from.is_some_and(|af| e.timestamp < af) {
                        continue;
                    }
                    let input = self.leaves[l]
                        .aggregation
                        .input_field()
                        .and_then(|fld| e.field(fld))
                        .cloned();
                    out.push(Contribution {
                        leaf: l,
                        key: key.clone(),
                        input,
                    });
                }
            }
        }
        (out, missing)
    }

    // -- snapshot / restore -------------------------------------------------

    pub fn export(&self) -> PlanSnapshot {
        PlanSnapshot {
            last_event_ts: self.last_event_ts,
            leaves: self
                .leaves
                .iter()
                .map(|l| LeafSnapshot {
                    metric_ids: l.metric_ids.clone(),
                    groups: l
                        .states
                        .iter()
                        .map(|(k, s)| (k.clone(), s.clone()))
                        .collect(),
                    active_from: l.active_from,
                })
                .collect(),
            hopping: self
                .windows
                .iter()
                .map(|n| {
                    n.hopping.as_ref().map(|h| HoppingSnapshot {
                        live: h
                            .live
                            .iter()
                            .map(|w| LiveWindowSnapshot {
                                start: w.start,
                                end: w.end,
                                states: w
                                    .states
                                    .iter()
                                    .map(|((l, k), s)| (*l, k.clone(), s.clone()))
                                    .collect(),
                            })
                            .collect(),
                    })
                })
                .collect(),
        }
    }

    /// Restores states exported from a structurally identical plan. Call
    /// before attach() so head iterators open at the restored frontier.
    pub fn restore(&mut self, snap: PlanSnapshot) {
        assert_eq!(snap.leaves.len(), self.leaves.len(), "plan shape changed");
        self.last_event_ts = snap.last_event_ts;
        for (leaf, ls) in self.leaves.iter_mut().zip(snap.leaves) {
            assert_eq!(leaf.metric_ids, ls.metric_ids, "plan shape changed");
            leaf.states = ls.groups.into_iter().collect();
            leaf.active_from = ls.active_from;
        }
        for (node, hs) in self.windows.iter_mut().zip(snap.hopping) {
            node.hopping = hs.map(|h| HoppingState {
                live: h
                    .live
                    .into_iter()
                    .map(|w| LiveWindow {
                        start: w.start,
                        end: w.end,
                        states: w.states.into_iter().map(|(l, k, s)| ((l, k), s)).collect(),
                    })
                    .collect(),
            });
        }
    }
}

/// Portable image of all plan state, index-aligned with the plan built from
/// the same metric list.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSnapshot {
    pub last_event_ts: Option<Timestamp>,
    pub leaves: Vec<LeafSnapshot>,
    pub hopping: Vec<Option<HoppingSnapshot>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafSnapshot {
    pub metric_ids: Vec<String>,
    pub groups: Vec<(Vec<u8>, AggState)>,
    pub active_from: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoppingSnapshot {
    pub live: Vec<LiveWindowSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveWindowSnapshot {
    pub start: Timestamp,
    pub end: Timestamp,
    pub states: Vec<(usize, Vec<u8>, AggState)>,
}

fn agg_kind(a: &Aggregation) -> AggKind {
    match a {
        Aggregation::Count => AggKind::Count,
        Aggregation::Sum(_) => AggKind::Sum,
        Aggregation::Avg(_) => AggKind::Avg,
        Aggregation::DistinctCount(_) => AggKind::Distinct,
    }
}

/// (matched, rejected-because-a-field-was-absent)
fn passes(predicate: &Option<Predicate>, e: &Event) -> (bool, bool) {
    match predicate {
        None => (true, false),
        Some(p) => {
            if p.matches(e) {
                (true, false)
            } else {
                let absent = p.clauses.iter().any(|c| e.field(&c.field).is_none());
                (false, absent)
            }
        }
    }
}

/// Canonical group key: per field, a presence byte then the canonical value.
/// Injective for a fixed field list.
pub fn group_key(fields: &[String], e: &Event) -> Vec<u8> {
    let mut key = Vec::new();
    for f in fields {
        match e.field(f) {
            Some(v) => {
                key.push(1);
                v.write_canonical(&mut key);
            }
            None => key.push(0),
        }
    }
    key
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CmpOp, Comparison};
    use crate::reservoir::{IoPool, ReservoirConfig};
    use std::collections::BTreeMap;

    fn card_event(ts: Timestamp, id: u64, card: &str, amount: f64) -> Event {
        let mut fields = BTreeMap::new();
        fields.insert("card".to_string(), Value::Str(card.to_string()));
        fields.insert("amount".to_string(), Value::Float(amount));
        Event::new(ts, id, fields)
    }

    fn metric(id: &str, window: WindowSpec, group: &str, agg: Aggregation) -> MetricSpec {
        MetricSpec {
            metric_id: id.to_string(),
            window,
            filter: None,
            group_by: vec![group.to_string()],
            aggregation: agg,
        }
    }

    fn test_reservoir() -> (tempfile::TempDir, Reservoir) {
        let dir = tempfile::tempdir().unwrap();
        let pool = IoPool::new(2);
        let cfg = ReservoirConfig {
            chunk_events: 64,
            chunk_bytes: usize::MAX,
            cache_capacity: 8,
            prefetch_depth: 1,
        };
        let (r, _) = Reservoir::open(dir.path(), cfg, pool).unwrap();
        (dir, r)
    }

    fn feed(dag: &mut PlanDag, r: &mut Reservoir, e: Event) -> Vec<MetricOutput> {
        r.append(e.clone()).unwrap();
        dag.advance(r, &e).unwrap()
    }

    #[test]
    fn prefix_sharing_merges_common_chains() {
        // two queries over the same 5-min window: sum+count by card, avg by
        // merchant; one window node, two group nodes, three leaves
        let w = WindowSpec::sliding(300_000);
        let metrics = [
            metric("q1_sum", w, "card", Aggregation::Sum("amount".into())),
            metric("q1_count", w, "card", Aggregation::Count),
            metric("q2_avg", w, "merchant", Aggregation::Avg("amount".into())),
        ];
        let dag = PlanDag::build(&metrics);
        assert_eq!(dag.window_node_count(), 1);
        assert_eq!(dag.filter_node_count(), 1);
        assert_eq!(dag.group_node_count(), 2);
        assert_eq!(dag.leaf_count(), 3);
    }

    #[test]
    fn identical_metric_aliases_one_leaf() {
        let w = WindowSpec::sliding(60_000);
        let m1 = metric("a", w, "card", Aggregation::Count);
        let mut m2 = m1.clone();
        m2.metric_id = "b".to_string();
        let dag = PlanDag::build(&[m1.clone(), m1, m2]);
        assert_eq!(dag.leaf_count(), 1);
        // both ids reply from the same leaf
        let (_d, mut r) = test_reservoir();
        let mut dag = dag;
        dag.attach(&mut r).unwrap();
        let out = feed(&mut dag, &mut r, card_event(1000, 0, "c1", 5.0));
        let ids: Vec<&str> = out.iter().map(|o| o.metric_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
    }

    #[test]
    fn distinct_windows_get_distinct_nodes() {
        let metrics = [
            metric("m1", WindowSpec::sliding(60_000), "card", Aggregation::Count),
            metric("m5", WindowSpec::sliding(300_000), "card", Aggregation::Count),
        ];
        assert_eq!(PlanDag::build(&metrics).window_node_count(), 2);
    }

    #[test]
    fn sliding_window_sees_all_five_events() {
        // events at 50s..345s on one card; the 5-min window at the last
        // arrival covers (45s, 345s] and counts every one of them
        let metrics = [metric(
            "cnt",
            WindowSpec::sliding(300_000),
            "card",
            Aggregation::Count,
        )];
        let mut dag = PlanDag::build(&metrics);
        let (_d, mut r) = test_reservoir();
        dag.attach(&mut r).unwrap();
        let mut last = Vec::new();
        for (i, ts) in [50_000i64, 120_000, 180_000, 240_000, 345_000]
            .into_iter()
            .enumerate()
        {
            last = feed(&mut dag, &mut r, card_event(ts, i as u64, "c1", 10.0));
        }
        assert_eq!(last.len(), 1);
        assert_eq!(last[0].value, Value::Int(5));
    }

    #[test]
    fn event_at_exact_window_length_expires_in_same_advance() {
        let metrics = [metric(
            "cnt",
            WindowSpec::sliding(60_000),
            "card",
            Aggregation::Count,
        )];
        let mut dag = PlanDag::build(&metrics);
        let (_d, mut r) = test_reservoir();
        dag.attach(&mut r).unwrap();
        feed(&mut dag, &mut r, card_event(0, 0, "c1", 1.0));
        let out = feed(&mut dag, &mut r, card_event(60_000, 1, "c1", 1.0));
        // the event at t - w_s is already outside (t - w_s, t]
        assert_eq!(out[0].value, Value::Int(1));
        // one millisecond earlier and both would be in
        let out = feed(&mut dag, &mut r, card_event(60_000, 2, "c1", 1.0));
        assert_eq!(out[0].value, Value::Int(2));
    }

    #[test]
    fn hopping_keeps_exactly_size_over_hop_windows() {
        let metrics = [metric(
            "cnt",
            WindowSpec::hopping(300_000, 60_000),
            "card",
            Aggregation::Count,
        )];
        let mut dag = PlanDag::build(&metrics);
        let (_d, mut r) = test_reservoir();
        dag.attach(&mut r).unwrap();
        for (i, ts) in [10_000i64, 70_000, 400_000, 900_000].into_iter().enumerate() {
            let out = feed(&mut dag, &mut r, card_event(ts, i as u64, "c1", 1.0));
            assert_eq!(dag.live_hop_windows(0), 5);
            // the arriving event is in all five live windows
            assert_eq!(out.iter().filter(|o| !o.closed).count(), 5);
        }
    }

    #[test]
    fn tumbling_event_contributes_to_one_window() {
        let metrics = [metric(
            "cnt",
            WindowSpec::tumbling(60_000),
            "card",
            Aggregation::Count,
        )];
        let mut dag = PlanDag::build(&metrics);
        let (_d, mut r) = test_reservoir();
        dag.attach(&mut r).unwrap();
        let out = feed(&mut dag, &mut r, card_event(65_000, 0, "c1", 1.0));
        let evals: Vec<_> = out.iter().filter(|o| !o.closed).collect();
        assert_eq!(evals.len(), 1);
        assert_eq!(evals[0].window, Some((60_000, 120_000)));
    }

    #[test]
    fn no_hop_window_sees_all_five_events() {
        // same five arrivals as the sliding test, but a 1-min hop, 5-min
        // window baseline: the best any live window ever reports is 4
        let metrics = [metric(
            "cnt",
            WindowSpec::hopping(300_000, 60_000),
            "card",
            Aggregation::Count,
        )];
        let mut dag = PlanDag::build(&metrics);
        let (_d, mut r) = test_reservoir();
        dag.attach(&mut r).unwrap();
        let mut best = 0i64;
        for (i, ts) in [50_000i64, 120_000, 180_000, 240_000, 345_000]
            .into_iter()
            .enumerate()
        {
            let out = feed(&mut dag, &mut r, card_event(ts, i as u64, "c1", 10.0));
            for o in out {
                if let Value::Int(n) = o.value {
                    best = best.max(n);
                }
            }
        }
        assert_eq!(best, 4);
    }

    #[test]
    fn avg_of_empty_group_emits_nothing() {
        let metrics = [metric(
            "avg",
            WindowSpec::sliding(60_000),
            "card",
            Aggregation::Avg("amount".into()),
        )];
        let mut dag = PlanDag::build(&metrics);
        let (_d, mut r) = test_reservoir();
        dag.attach(&mut r).unwrap();
        // the arriving event has no numeric amount, so the group stays empty
        let mut fields = BTreeMap::new();
        fields.insert("card".to_string(), Value::Str("c1".into()));
        let out = feed(&mut dag, &mut r, Event::new(1000, 0, fields));
        assert!(out.is_empty());
    }

    #[test]
    fn missing_filter_field_is_counted() {
        let mut m = metric("cnt", WindowSpec::sliding(60_000), "card", Aggregation::Count);
        m.filter = Some(Predicate {
            clauses: vec![Comparison {
                field: "amount".to_string(),
                op: CmpOp::Gt,
                value: Value::Float(100.0),
            }],
        });
        let mut dag = PlanDag::build(&[m]);
        let (_d, mut r) = test_reservoir();
        dag.attach(&mut r).unwrap();
        let mut fields = BTreeMap::new();
        fields.insert("card".to_string(), Value::Str("c1".into()));
        feed(&mut dag, &mut r, Event::new(1000, 0, fields));
        assert_eq!(dag.missing_field_filtered(), 1);
        // a present-but-failing field is not a missing-field rejection
        feed(&mut dag, &mut r, card_event(2000, 1, "c1", 50.0));
        assert_eq!(dag.missing_field_filtered(), 1);
    }

    #[test]
    fn filtered_out_arrival_never_expires_downstream() {
        let mut m = metric("sum", WindowSpec::sliding(10_000), "card", Aggregation::Sum("amount".into()));
        m.filter = Some(Predicate {
            clauses: vec![Comparison {
                field: "amount".to_string(),
                op: CmpOp::Gt,
                value: Value::Float(100.0),
            }],
        });
        let mut dag = PlanDag::build(&[m]);
        let (_d, mut r) = test_reservoir();
        dag.attach(&mut r).unwrap();
        feed(&mut dag, &mut r, card_event(0, 0, "c1", 50.0)); // filtered out
        feed(&mut dag, &mut r, card_event(1000, 1, "c1", 150.0)); // in
        // both previous events leave the window here; only the filtered-in
        // one may be subtracted
        let out = feed(&mut dag, &mut r, card_event(20_000, 2, "c1", 150.0));
        assert_eq!(out[0].value, Value::Float(150.0));
    }

    #[test]
    fn snapshot_restore_resumes_identically() {
        let metrics = [
            metric("cnt", WindowSpec::sliding(60_000), "card", Aggregation::Count),
            metric("hop", WindowSpec::hopping(60_000, 20_000), "card", Aggregation::Count),
        ];
        let (_d, mut r) = test_reservoir();
        let mut live = PlanDag::build(&metrics);
        live.attach(&mut r).unwrap();
        for i in 0..10u64 {
            feed(&mut live, &mut r, card_event(i as i64 * 5_000, i, "c1", 1.0));
        }
        let snap = live.export();
        live.detach(&mut r);

        let mut restored = PlanDag::build(&metrics);
        restored.restore(snap.clone());
        assert_eq!(restored.export(), snap);
        restored.attach(&mut r).unwrap();

        let mut reference = PlanDag::build(&metrics);
        reference.restore(snap);
        reference.attach(&mut r).unwrap();
        let e = card_event(55_000, 10, "c1", 1.0);
        r.append(e.clone()).unwrap();
        let a = restored.advance(&mut r, &e).unwrap();
        restored.detach(&mut r);
        let b = reference.advance(&mut r, &e).unwrap();
        assert_eq!(a, b);
    }
}

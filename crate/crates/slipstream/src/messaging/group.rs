//! Consumer groups: partition assignment, rebalance deltas, and the member
//! polling surface.
//!
//! Assignment is deterministic round-robin: partitions sorted by
//! (topic, partition) are dealt over members sorted by member_id. A partition
//! moving between two live members is granted to the new owner only after the
//! old owner has observed the revocation at its next poll, so at no instant do
//! two live members hold the same partition. Dead members release ownership
//! immediately.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::log::{Log, PolledRecord};
use super::{LogError, TopicPartition};

/// Partitions revoked from and granted to one member by a rebalance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentDelta {
    pub revoked: Vec<TopicPartition>,
    pub granted: Vec<TopicPartition>,
}

impl AssignmentDelta {
    pub fn is_empty(&self) -> bool {
        self.revoked.is_empty() && self.granted.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ownership {
    /// Held by the named member index.
    Held,
    /// Old owner has not yet acknowledged the revocation.
    PendingRevoke,
}

struct MemberState {
    member_id: String,
    alive: bool,
    /// Delta queued for delivery at the member's next poll.
    pending: AssignmentDelta,
}

struct GroupState {
    group_id: String,
    subscribed_topics: BTreeSet<String>,
    members: Vec<MemberState>,
    /// Current owner (member index) and handoff state per partition.
    owners: HashMap<TopicPartition, (usize, Ownership)>,
    /// Target assignment from the latest rebalance.
    target: BTreeMap<TopicPartition, usize>,
}

impl GroupState {
    fn live_member_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.members.len())
            .filter(|i| self.members[*i].alive)
            .collect();
        idx.sort_by(|a, b| self.members[*a].member_id.cmp(&self.members[*b].member_id));
        idx
    }

    /// Recomputes the target assignment and queues revoke/grant deltas.
    fn rebalance(&mut self, log: &Log) -> Result<(), LogError> {
        let mut partitions: Vec<TopicPartition> = Vec::new();
        for topic in &self.subscribed_topics {
            for p in 0..log.partition_count(topic)? {
                partitions.push(TopicPartition::new(topic.clone(), p));
            }
        }
        partitions.sort();
        let live = self.live_member_indices();
        let mut target = BTreeMap::new();
        if !live.is_empty() {
            for (i, tp) in partitions.iter().enumerate() {
                target.insert(tp.clone(), live[i % live.len()]);
            }
        }

        // Queue revocations for partitions leaving a live owner. A grant the
        // owner never observed is cancelled in place instead.
        let mut released = Vec::new();
        for (tp, (owner, state)) in self.owners.iter_mut() {
            let wanted = target.get(tp).copied();
            if wanted != Some(*owner) && *state == Ownership::Held {
                let pending = &mut self.members[*owner].pending;
                if let Some(i) = pending.granted.iter().position(|g| g == tp) {
                    pending.granted.remove(i);
                    released.push(tp.clone());
                } else if self.members[*owner].alive {
                    *state = Ownership::PendingRevoke;
                    self.members[*owner].pending.revoked.push(tp.clone());
                }
            }
        }
        for tp in released {
            self.owners.remove(&tp);
        }
        // Dead owners release immediately.
        let dead: Vec<TopicPartition> = self
            .owners
            .iter()
            .filter(|(_, (owner, _))| !self.members[*owner].alive)
            .map(|(tp, _)| tp.clone())
            .collect();
        for tp in dead {
            self.owners.remove(&tp);
        }

        self.target = target;
        self.deliver_grants();
        Ok(())
    }

    /// Grants any unowned partition to its target member.
    fn deliver_grants(&mut self) {
        for (tp, member) in self.target.clone() {
            if !self.owners.contains_key(&tp) {
                self.owners.insert(tp.clone(), (member, Ownership::Held));
                self.members[member].pending.granted.push(tp);
            }
        }
    }

    /// Called when a member's poll observes its pending revocations.
    fn acknowledge_revokes(&mut self, member: usize, revoked: &[TopicPartition]) {
        for tp in revoked {
            if let Some((owner, state)) = self.owners.get(tp) {
                if *owner == member && *state == Ownership::PendingRevoke {
                    self.owners.remove(tp);
                }
            }
        }
        self.deliver_grants();
    }
}

/// In-process coordinator for all consumer groups over one log.
pub struct GroupCoordinator {
    log: Arc<Log>,
    groups: Mutex<HashMap<String, Arc<Mutex<GroupState>>>>,
}

impl GroupCoordinator {
    pub fn new(log: Arc<Log>) -> Self {
        GroupCoordinator {
            log,
            groups: Mutex::new(HashMap::new()),
        }
    }

    pub fn log(&self) -> &Arc<Log> {
        &self.log
    }

    /// Adds a member to a group subscribed to `topics` and rebalances.
    pub fn join(
        self: &Arc<Self>,
        group_id: &str,
        member_id: &str,
        topics: &[String],
    ) -> Result<Member, LogError> {
        let group = {
            let mut groups = self.groups.lock();
            groups
                .entry(group_id.to_string())
                .or_insert_with(|| {
                    Arc::new(Mutex::new(GroupState {
                        group_id: group_id.to_string(),
                        subscribed_topics: BTreeSet::new(),
                        members: Vec::new(),
                        owners: HashMap::new(),
                        target: BTreeMap::new(),
                    }))
                })
                .clone()
        };
        let index = {
            let mut g = group.lock();
            g.subscribed_topics.extend(topics.iter().cloned());
            g.members.push(MemberState {
                member_id: member_id.to_string(),
                alive: true,
                pending: AssignmentDelta::default(),
            });
            let index = g.members.len() - 1;
            g.rebalance(&self.log)?;
            index
        };
        Ok(Member {
            coordinator: Arc::clone(self),
            group,
            index,
            member_id: member_id.to_string(),
            positions: Mutex::new(HashMap::new()),
            owned: Mutex::new(BTreeSet::new()),
            listener: Mutex::new(None),
        })
    }

    /// Marks a member dead without graceful revocation (simulated crash or
    /// detected failure) and reassigns its partitions.
    pub fn remove_member(&self, group_id: &str, member_id: &str) -> Result<(), LogError> {
        let group = self
            .groups
            .lock()
            .get(group_id)
            .cloned()
            .ok_or_else(|| LogError::UnknownTopic(format!("group {group_id}")))?;
        let mut g = group.lock();
        for m in g.members.iter_mut() {
            if m.member_id == member_id {
                m.alive = false;
                m.pending = AssignmentDelta::default();
            }
        }
        g.rebalance(&self.log)
    }
}

/// A consumer-group member. Polling applies pending rebalance deltas on the
/// member's own thread before any records for newly granted partitions are
/// returned.
pub struct Member {
    coordinator: Arc<GroupCoordinator>,
    group: Arc<Mutex<GroupState>>,
    index: usize,
    member_id: String,
    /// Next offset to read per owned partition (in-memory position).
    positions: Mutex<HashMap<TopicPartition, u64>>,
    owned: Mutex<BTreeSet<TopicPartition>>,
    listener: Mutex<Option<Box<dyn FnMut(&AssignmentDelta) + Send>>>,
}

impl Member {
    pub fn member_id(&self) -> &str {
        &self.member_id
    }

    pub fn group_id(&self) -> String {
        self.group.lock().group_id.clone()
    }

    /// Registers a callback invoked (on the polling thread, between polls)
    /// whenever an assignment delta is applied.
    pub fn set_rebalance_listener(&self, f: impl FnMut(&AssignmentDelta) + Send + 'static) {
        *self.listener.lock() = Some(Box::new(f));
    }

    pub fn assignment(&self) -> Vec<TopicPartition> {
        self.owned.lock().iter().cloned().collect()
    }

    /// Applies any pending delta: drops revoked partitions, initializes
    /// positions of granted partitions from the committed offset.
    ///
    /// Ordering matters: the listener runs after revoked partitions are
    /// dropped locally but BEFORE the revocation is acknowledged to the
    /// coordinator. Acknowledgement is what releases the partition to its
    /// next owner, so a listener that snapshots and frees per-partition
    /// resources finishes before the successor can be granted them.
    fn apply_pending(&self) -> Result<Option<AssignmentDelta>, LogError> {
        let delta = {
            let mut g = self.group.lock();
            let pending = std::mem::take(&mut g.members[self.index].pending);
            if pending.is_empty() {
                return Ok(None);
            }
            pending
        };
        {
            let mut owned = self.owned.lock();
            let mut positions = self.positions.lock();
            for tp in &delta.revoked {
                owned.remove(tp);
                positions.remove(tp);
            }
        }
        if let Some(listener) = self.listener.lock().as_mut() {
            listener(&delta);
        }
        {
            let mut g = self.group.lock();
            g.acknowledge_revokes(self.index, &delta.revoked);
        }
        {
            let mut owned = self.owned.lock();
            let mut positions = self.positions.lock();
            for tp in &delta.granted {
                let start = self
                    .coordinator
                    .log
                    .committed(&self.group_id(), tp)?
                    .unwrap_or(0);
                owned.insert(tp.clone());
                positions.insert(tp.clone(), start);
            }
        }
        Ok(Some(delta))
    }

    /// Pulls up to `max_records` records strictly after the member's current
    /// position, per partition in offset order. Blocks up to `timeout` when
    /// nothing is available; returns early once at least one record exists.
    pub fn poll(
        &self,
        max_records: usize,
        timeout: Duration,
    ) -> Result<Vec<PolledRecord>, LogError> {
        let deadline = Instant::now() + timeout;
        loop {
            let seen = self.coordinator.log.append_count();
            self.apply_pending()?;
            let mut out = Vec::new();
            {
                let owned: Vec<TopicPartition> = self.owned.lock().iter().cloned().collect();
                let mut positions = self.positions.lock();
                for tp in owned {
                    if out.len() >= max_records {
                        break;
                    }
                    let pos = positions.get(&tp).copied().unwrap_or(0);
                    let batch =
                        self.coordinator
                            .log
                            .read_from(&tp, pos, max_records - out.len())?;
                    if let Some((last, _)) = batch.last() {
                        positions.insert(tp.clone(), last + 1);
                    }
                    for (offset, record) in batch {
                        out.push(PolledRecord {
                            tp: tp.clone(),
                            offset,
                            record,
                        });
                    }
                }
            }
            if !out.is_empty() || Instant::now() >= deadline {
                return Ok(out);
            }
            self.coordinator.log.wait_for_append(seen, deadline);
        }
    }

    /// Sets the next poll position for an owned partition.
    pub fn seek(&self, tp: &TopicPartition, offset: u64) -> Result<(), LogError> {
        let next = self.coordinator.log.next_offset(tp)?;
        if offset > next {
            return Err(LogError::OffsetOutOfRange {
                tp: tp.clone(),
                offset,
                next,
            });
        }
        self.positions.lock().insert(tp.clone(), offset);
        Ok(())
    }

    /// Durably commits the restart position for this member's group.
    pub fn commit(&self, tp: &TopicPartition, offset: u64) -> Result<(), LogError> {
        self.coordinator.log.commit(&self.group_id(), tp, offset)
    }

    /// Leaves the group gracefully, releasing owned partitions.
    pub fn leave(&self) -> Result<(), LogError> {
        self.coordinator
            .remove_member(&self.group_id(), &self.member_id)?;
        // A dead member's pending revokes are dropped by remove_member; clear
        // local ownership so later polls return nothing.
        self.owned.lock().clear();
        self.positions.lock().clear();
        Ok(())
    }
}

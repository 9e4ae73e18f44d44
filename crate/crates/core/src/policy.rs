//! Cost and memory models, and the planners that act on them.
//!
//! Costs are simulated latencies in seconds. The defaults are the measured
//! container operation times from a Raspberry Pi 3 running Docker with CRIU.
//! Planning functions are pure and work on [`InstanceView`] snapshots.

use std::cmp::Reverse;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::lifecycle::StateKind;
use crate::types::{FunctionId, InstanceId, NodeId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub start_cold: f64,
    pub pause: f64,
    pub unpause: f64,
    pub checkpoint: f64,
    pub create_container: f64,
    pub start_from_checkpoint: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            start_cold: 1.463,
            pause: 0.857,
            unpause: 0.850,
            checkpoint: 1.716,
            create_container: 0.438,
            start_from_checkpoint: 1.763,
        }
    }
}

impl CostModel {
    /// Charge for bringing a checkpointed instance back: a fresh container
    /// plus starting it from the checkpoint.
    pub fn restore(&self) -> f64 {
        self.create_container + self.start_from_checkpoint
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let fields = [
            ("start_cold", self.start_cold),
            ("pause", self.pause),
            ("unpause", self.unpause),
            ("checkpoint", self.checkpoint),
            ("create_container", self.create_container),
            ("start_from_checkpoint", self.start_from_checkpoint),
        ];
        for (name, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(PolicyError::InvalidCost { name, value });
            }
        }
        Ok(())
    }
}

pub const DEFAULT_HIGH_WATERMARK: f64 = 0.8;

/// Per-state memory charges. Running and paused charges default to the
/// function's declared memory; checkpointed instances default to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryModel {
    pub per_instance_running: Option<u64>,
    pub per_instance_paused: Option<u64>,
    pub per_instance_checkpointed: u64,
    pub capacity: u64,
    pub high_watermark: f64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        MemoryModel {
            per_instance_running: None,
            per_instance_paused: None,
            per_instance_checkpointed: 0,
            capacity: 1 << 30,
            high_watermark: DEFAULT_HIGH_WATERMARK,
        }
    }
}

impl MemoryModel {
    pub fn with_capacity(capacity: u64) -> Self {
        MemoryModel { capacity, ..Self::default() }
    }

    pub fn running_charge(&self, declared: u64) -> u64 {
        self.per_instance_running.unwrap_or(declared)
    }

    pub fn paused_charge(&self, declared: u64) -> u64 {
        self.per_instance_paused.unwrap_or_else(|| self.running_charge(declared))
    }

    /// Memory an instance in `state` holds.
    pub fn charge(&self, state: StateKind, declared: u64) -> u64 {
        use StateKind as S;
        match state {
            S::ColdStarting | S::Running | S::Blocked | S::Checkpointing | S::Restoring => {
                self.running_charge(declared)
            }
            S::Paused => self.paused_charge(declared),
            S::Checkpointed | S::MigratingOut => self.per_instance_checkpointed,
            S::Registered | S::Terminated | S::Failed => 0,
        }
    }

    /// Usage above which offloading kicks in.
    pub fn watermark_bytes(&self) -> f64 {
        self.high_watermark * self.capacity as f64
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.high_watermark > 0.0 && self.high_watermark <= 1.0) {
            return Err(PolicyError::InvalidWatermark(self.high_watermark));
        }
        Ok(())
    }
}

/// What the planners need to know about one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceView {
    pub instance_id: InstanceId,
    pub function_id: FunctionId,
    pub state: StateKind,
    pub memory_declared: u64,
    pub image_digest: String,
    pub last_active_at: SimTime,
    pub idle_timeout: SimTime,
    /// The instance was suspended while waiting on something, so dropping
    /// it would lose a pending wake.
    pub has_block_context: bool,
}

/// A peer as advertised in the node's peer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub node_id: NodeId,
    pub address: String,
    pub free_capacity: u64,
    pub base_images: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "action", content = "instance_id", rename_all = "snake_case")]
pub enum PlanAction {
    Checkpoint(InstanceId),
    Reap(InstanceId),
}

impl PlanAction {
    pub fn instance_id(&self) -> &InstanceId {
        match self {
            PlanAction::Checkpoint(id) | PlanAction::Reap(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("cannot free {needed} bytes; at most {available} bytes are reclaimable")]
    InsufficientCandidates { needed: u64, available: u64 },
    #[error("cost {name} must be a finite non-negative number of seconds, got {value}")]
    InvalidCost { name: &'static str, value: f64 },
    #[error("high watermark must be in (0, 1], got {0}")]
    InvalidWatermark(f64),
}

/// Sum of per-state charges.
pub fn memory_usage(instances: &[InstanceView], model: &MemoryModel) -> u64 {
    instances.iter().map(|i| model.charge(i.state, i.memory_declared)).sum()
}

/// Memory freed by each action on `view`, if the action applies to it.
pub fn reclaimable(view: &InstanceView, model: &MemoryModel, now: SimTime) -> (Option<u64>, Option<u64>) {
    use StateKind as S;
    let held = model.charge(view.state, view.memory_declared);
    let checkpoint = matches!(view.state, S::Blocked | S::Running | S::Paused)
        .then(|| held.saturating_sub(model.per_instance_checkpointed));
    let idle = now.saturating_sub(view.last_active_at) >= view.idle_timeout;
    let reap = (matches!(view.state, S::Running | S::Paused) && idle && !view.has_block_context).then_some(held);
    (checkpoint, reap)
}

fn priority(state: StateKind) -> u8 {
    match state {
        StateKind::Blocked => 0,
        StateKind::Running => 1,
        _ => 2,
    }
}

/// Eviction candidates in the order they are considered: blocked first, then
/// running, then paused, least recently active first within each group.
pub fn eviction_order(instances: &[InstanceView]) -> Vec<&InstanceView> {
    let mut order: Vec<&InstanceView> = instances
        .iter()
        .filter(|v| matches!(v.state, StateKind::Blocked | StateKind::Running | StateKind::Paused))
        .collect();
    order.sort_by(|a, b| {
        (priority(a.state), a.last_active_at, &a.instance_id).cmp(&(
            priority(b.state),
            b.last_active_at,
            &b.instance_id,
        ))
    });
    order
}

/// Total charged latency of a plan.
pub fn plan_cost(plan: &[PlanAction], costs: &CostModel) -> f64 {
    plan.iter()
        .map(|a| match a {
            PlanAction::Checkpoint(_) => costs.checkpoint,
            PlanAction::Reap(_) => 0.0,
        })
        .sum()
}

/// Cheapest set of actions freeing at least `needed` bytes.
///
/// Reaping costs nothing and frees at least as much as checkpointing, so
/// reapable instances are used first and the number of checkpoints is
/// minimised. Among plans of equal cost the one earliest in
/// [`eviction_order`] wins. Pausing is never planned since it frees nothing.
pub fn plan_eviction(
    instances: &[InstanceView],
    model: &MemoryModel,
    needed: u64,
    _costs: &CostModel,
    now: SimTime,
) -> Result<Vec<PlanAction>, PolicyError> {
    if needed == 0 {
        return Ok(Vec::new());
    }
    let order = eviction_order(instances);
    let options: Vec<(Option<u64>, Option<u64>)> = order.iter().map(|v| reclaimable(v, model, now)).collect();

    let reap_total: u64 = options.iter().filter_map(|o| o.1).sum();
    let residual = needed.saturating_sub(reap_total);

    // instances that can only be checkpointed
    let ckpt: Vec<(usize, u64)> =
        options.iter().enumerate().filter(|(_, o)| o.1.is_none()).filter_map(|(i, o)| o.0.map(|f| (i, f))).collect();
    let mut sorted: Vec<u64> = ckpt.iter().map(|c| c.1).collect();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let available = reap_total + sorted.iter().sum::<u64>();
    let Some(k) = (0..=sorted.len()).find(|&k| sorted[..k].iter().sum::<u64>() >= residual) else {
        return Err(PolicyError::InsufficientCandidates { needed, available });
    };

    // lexicographically first k-subset in priority order that still reaches the residual
    let mut chosen = Vec::with_capacity(k);
    let mut freed = 0u64;
    for (pos, &(idx, f)) in ckpt.iter().enumerate() {
        if chosen.len() == k {
            break;
        }
        let left = k - chosen.len() - 1;
        let mut rest: Vec<u64> = ckpt[pos + 1..].iter().map(|c| c.1).collect();
        rest.sort_unstable_by(|a, b| b.cmp(a));
        if freed + f + rest.iter().take(left).sum::<u64>() >= residual {
            chosen.push(idx);
            freed += f;
        }
    }

    // drop reaps that are not needed, latest in priority order first
    let mut reaps: Vec<usize> = options.iter().enumerate().filter_map(|(i, o)| o.1.map(|_| i)).collect();
    let mut total = freed + reap_total;
    for i in (0..reaps.len()).rev() {
        let f = options[reaps[i]].1.expect("reapable");
        if total - f >= needed {
            total -= f;
            reaps.remove(i);
        }
    }

    let mut plan: Vec<(usize, PlanAction)> = chosen
        .into_iter()
        .map(|i| (i, PlanAction::Checkpoint(order[i].instance_id.clone())))
        .chain(reaps.into_iter().map(|i| (i, PlanAction::Reap(order[i].instance_id.clone()))))
        .collect();
    plan.sort_by_key(|(i, _)| *i);
    Ok(plan.into_iter().map(|(_, a)| a).collect())
}

/// Picks an instance to move to a peer when usage is above the watermark.
///
/// Only blocked or checkpointed instances qualify, and only peers that hold
/// the instance's base image and have room for its running charge. The
/// largest instance wins, then the peer with the most free capacity; ties go
/// to the lexicographically smaller node id, then instance id.
pub fn plan_offload(
    instances: &[InstanceView],
    peers: &[NodeInfo],
    model: &MemoryModel,
) -> Option<(InstanceId, NodeId)> {
    let usage = memory_usage(instances, model);
    if usage as f64 <= model.watermark_bytes() {
        return None;
    }
    instances
        .iter()
        .filter(|v| matches!(v.state, StateKind::Blocked | StateKind::Checkpointed))
        .filter_map(|v| {
            let charge = model.running_charge(v.memory_declared);
            let peer = peers
                .iter()
                .filter(|p| p.free_capacity >= charge && p.base_images.contains(&v.image_digest))
                .max_by_key(|p| (p.free_capacity, Reverse(&p.node_id)))?;
            Some(((charge, peer.free_capacity, Reverse(&peer.node_id), Reverse(&v.instance_id)), v, peer))
        })
        .max_by(|a, b| a.0.cmp(&b.0))
        .map(|(_, v, p)| (v.instance_id.clone(), p.node_id.clone()))
}

/// How a node treats an instance whose program has blocked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuspendPolicy {
    /// Stay resident in `Blocked`; the sleep proxy still watches for the wake.
    Keep,
    Pause,
    #[default]
    Checkpoint,
    /// Pause while usage is at or below the watermark, checkpoint above it.
    Adaptive,
}

/// `None` means keep the instance resident.
pub fn suspend_verdict(
    policy: SuspendPolicy,
    usage: u64,
    model: &MemoryModel,
) -> Option<crate::lifecycle::SuspendMode> {
    use crate::lifecycle::SuspendMode;
    match policy {
        SuspendPolicy::Keep => None,
        SuspendPolicy::Pause => Some(SuspendMode::Pause),
        SuspendPolicy::Checkpoint => Some(SuspendMode::Checkpoint),
        SuspendPolicy::Adaptive if usage as f64 > model.watermark_bytes() => Some(SuspendMode::Checkpoint),
        SuspendPolicy::Adaptive => Some(SuspendMode::Pause),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1 << 20;

    fn view(id: &str, state: StateKind, mem: u64, last: u64) -> InstanceView {
        InstanceView {
            instance_id: InstanceId::new(id),
            function_id: FunctionId::new("f"),
            state,
            memory_declared: mem,
            image_digest: "img".into(),
            last_active_at: SimTime::from_secs(last),
            idle_timeout: SimTime::from_secs(600),
            has_block_context: false,
        }
    }

    fn peer(id: &str, free: u64) -> NodeInfo {
        NodeInfo {
            node_id: NodeId::new(id),
            address: format!("{id}:7000"),
            free_capacity: free,
            base_images: BTreeSet::from(["img".to_owned()]),
        }
    }

    #[test]
    fn defaults_are_valid() {
        CostModel::default().validate().unwrap();
        MemoryModel::default().validate().unwrap();
        let bad = CostModel { pause: -1.0, ..CostModel::default() };
        assert!(matches!(bad.validate(), Err(PolicyError::InvalidCost { name: "pause", .. })));
    }

    #[test]
    fn running_and_checkpointed_usage() {
        let model = MemoryModel::default();
        let mut fleet: Vec<_> = (0..5).map(|i| view(&format!("r{i}"), StateKind::Running, 10 * MB, 0)).collect();
        fleet.extend((0..3).map(|i| view(&format!("c{i}"), StateKind::Checkpointed, 10 * MB, 0)));
        assert_eq!(memory_usage(&fleet, &model), 50 * MB);
        assert_eq!(memory_usage(&[], &model), 0);
    }

    #[test]
    fn single_blocked_instance_is_checkpointed() {
        let fleet = [view("b", StateKind::Blocked, 10 * MB, 0)];
        let plan =
            plan_eviction(&fleet, &MemoryModel::default(), 10 * MB, &CostModel::default(), SimTime::ZERO).unwrap();
        assert_eq!(plan, vec![PlanAction::Checkpoint(InstanceId::new("b"))]);
    }

    #[test]
    fn paused_instances_are_checkpointed_not_paused() {
        let fleet = [view("p1", StateKind::Paused, 10 * MB, 1), view("p2", StateKind::Paused, 10 * MB, 0)];
        let plan =
            plan_eviction(&fleet, &MemoryModel::default(), 10 * MB, &CostModel::default(), SimTime::ZERO).unwrap();
        assert_eq!(plan, vec![PlanAction::Checkpoint(InstanceId::new("p2"))]);
    }

    #[test]
    fn idle_instances_are_reaped_for_free() {
        let fleet = [view("b", StateKind::Blocked, 10 * MB, 0), view("old", StateKind::Paused, 10 * MB, 0)];
        let plan =
            plan_eviction(&fleet, &MemoryModel::default(), 10 * MB, &CostModel::default(), SimTime::from_secs(601))
                .unwrap();
        assert_eq!(plan, vec![PlanAction::Reap(InstanceId::new("old"))]);
    }

    #[test]
    fn unreachable_target_is_reported() {
        let fleet = [view("b", StateKind::Blocked, 10 * MB, 0), view("c", StateKind::Checkpointed, 10 * MB, 0)];
        let err =
            plan_eviction(&fleet, &MemoryModel::default(), 11 * MB, &CostModel::default(), SimTime::ZERO).unwrap_err();
        assert_eq!(err, PolicyError::InsufficientCandidates { needed: 11 * MB, available: 10 * MB });
    }

    #[test]
    fn offload_single_option() {
        let model = MemoryModel::with_capacity(100 * MB);
        let mut fleet: Vec<_> = (0..8).map(|i| view(&format!("r{i}"), StateKind::Running, 10 * MB, 0)).collect();
        fleet.push(view("b", StateKind::Blocked, 10 * MB, 0));
        let choice = plan_offload(&fleet, &[peer("B", 100 * MB)], &model);
        assert_eq!(choice, Some((InstanceId::new("b"), NodeId::new("B"))));
    }

    #[test]
    fn offload_below_watermark_does_nothing() {
        let model = MemoryModel::with_capacity(100 * MB);
        let fleet: Vec<_> = (0..5).map(|i| view(&format!("b{i}"), StateKind::Blocked, 10 * MB, 0)).collect();
        assert_eq!(plan_offload(&fleet, &[peer("B", 100 * MB)], &model), None);
    }

    #[test]
    fn offload_requires_base_image() {
        let model = MemoryModel::with_capacity(10 * MB);
        let fleet = [view("b", StateKind::Blocked, 10 * MB, 0)];
        let mut p = peer("B", 100 * MB);
        p.base_images.clear();
        assert_eq!(plan_offload(&fleet, &[p], &model), None);
    }

    #[test]
    fn adaptive_verdict_follows_watermark() {
        use crate::lifecycle::SuspendMode;
        let model = MemoryModel::with_capacity(100);
        assert_eq!(suspend_verdict(SuspendPolicy::Adaptive, 80, &model), Some(SuspendMode::Pause));
        assert_eq!(suspend_verdict(SuspendPolicy::Adaptive, 81, &model), Some(SuspendMode::Checkpoint));
        assert_eq!(suspend_verdict(SuspendPolicy::Keep, 81, &model), None);
    }
}

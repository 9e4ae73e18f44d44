//! One edge node: registry, instances, checkpoint store and sleep proxy.
//!
//! A [`Node`] is the single writer for every instance it hosts. All entry
//! points take `&mut self` and run to completion, including any wakes they
//! cause, so callers that share a node across threads wrap it in a mutex.
//!
//! Charged latency follows the cost model: a cold start charges
//! `start_cold`, pausing and unpausing charge `pause` and `unpause`, a
//! checkpoint charges `checkpoint` and a restore charges `create_container +
//! start_from_checkpoint`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::NodeConfig;
use crate::lifecycle::{wake_rules_for, Instance, InstanceState, LifecycleError, StateKind, TransitionEvent};
use crate::policy::{self, InstanceView, NodeInfo, PlanAction, PolicyError};
use crate::proxy::{Delivery, ProxyError, SimPacket, SleepProxy, WakeAction, WakeCause};
use crate::registry::{FunctionSpec, Registry};
use crate::sim::{self, BlockReason, CorruptSnapshot, Outcome, SimState, DEFAULT_PORT_BASE};
use crate::store::{
    ArchiveManifest, BackupSchedule, CheckpointArchive, CheckpointStore, StoreError, DIGEST_ALGORITHM,
    MANIFEST_FORMAT_VERSION,
};
use crate::types::{ArchiveId, Endpoint, FunctionId, InstanceId, NodeId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationPath {
    Cold,
    WarmResume,
    RestoreFromCheckpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationOutcome {
    Responded,
    Suspended,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub request_id: u64,
    pub function_id: FunctionId,
    pub instance_id: InstanceId,
    pub path_taken: InvocationPath,
    /// Seconds, summed over the cost-model charges of the transitions taken.
    pub charged_latency: f64,
    pub outcome: InvocationOutcome,
    pub at: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerResult {
    pub record: InvocationRecord,
    pub response: Option<Vec<u8>>,
}

/// A suspended instance resumed by the sleep proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WakeRecord {
    pub at: SimTime,
    pub instance_id: InstanceId,
    pub cause: WakeCause,
    pub charged_latency: f64,
    /// `None` while the instance stays blocked after the wake.
    pub outcome: Option<InvocationOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    Transition {
        at: SimTime,
        node: NodeId,
        instance: InstanceId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        event: Option<TransitionEvent>,
        from: InstanceState,
        to: InstanceState,
    },
    Blocked {
        at: SimTime,
        node: NodeId,
        instance: InstanceId,
        reason: BlockReason,
    },
    Completed {
        at: SimTime,
        node: NodeId,
        instance: InstanceId,
        response: String,
    },
    Wake {
        at: SimTime,
        node: NodeId,
        instance: InstanceId,
        cause: WakeCause,
    },
    Adopted {
        at: SimTime,
        node: NodeId,
        instance: InstanceId,
        archive: ArchiveId,
    },
    Wire {
        from: NodeId,
        to: NodeId,
        message: String,
        bytes: usize,
    },
    Note {
        at: SimTime,
        node: NodeId,
        text: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub instance_id: InstanceId,
    pub function_id: FunctionId,
    pub state: InstanceState,
    pub memory_charge: u64,
    pub created_at: SimTime,
    pub last_active_at: SimTime,
    pub block: Option<BlockReason>,
    pub archive_id: Option<ArchiveId>,
    /// Empty while the instance's state lives only in a checkpoint.
    pub vars: BTreeMap<String, i64>,
    pub response: Option<String>,
    /// The last run finished and nothing is pending.
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node_id: NodeId,
    pub clock: SimTime,
    pub invocations: Vec<InvocationRecord>,
    pub wakes: Vec<WakeRecord>,
    pub memory_usage: u64,
    pub memory_capacity: u64,
    pub instances_by_state: BTreeMap<String, usize>,
    pub archives: usize,
    pub packets_ingested: u64,
    pub packets_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReaperAction {
    Reaped { instance_id: InstanceId },
    Checkpointed { instance_id: InstanceId, archive_id: ArchiveId },
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvanceReport {
    pub wakes: Vec<WakeRecord>,
    pub reaped: Vec<ReaperAction>,
    pub backups: Vec<ArchiveId>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum InjectResult {
    /// The sleep proxy matched the packet and woke the instance.
    Woke {
        instance_id: InstanceId,
        wake: Box<WakeRecord>,
    },
    /// The proxy buffered the packet for an instance whose epoch already fired
    /// or whose suspension is still in progress.
    Buffered {
        instance_id: InstanceId,
    },
    /// Delivered straight into a resident instance's socket.
    Delivered {
        instance_id: InstanceId,
    },
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JournalPhase {
    Transferring,
    /// The target may or may not have restored the instance.
    InDoubt,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub archive_id: ArchiveId,
    pub target: NodeId,
    pub phase: JournalPhase,
}

/// What the source side of a migration sends.
#[derive(Debug, Clone)]
pub struct OutboundTransfer {
    pub instance_id: InstanceId,
    pub archive: CheckpointArchive,
    pub memory_required: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("no function is routed at /{0}")]
    RouteNotFound(String),
    #[error("route /{route} moved to node {node}")]
    RouteMoved { route: String, node: NodeId },
    #[error("instance {0} is suspended mid-run and the function is not re-entrant")]
    InstanceBusy(InstanceId),
    #[error("instance {instance} failed: {cause}")]
    InstanceFailed { instance: InstanceId, cause: String },
    #[error("not enough memory: {0}")]
    InsufficientCapacity(PolicyError),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("no instance is checkpointed as {0}")]
    ArchiveNotOwned(ArchiveId),
    #[error("instance {instance} cannot migrate from state {state}")]
    NotMigratable { instance: InstanceId, state: StateKind },
    #[error("function {function} with image {digest} is not installed")]
    ImageMissing { function: FunctionId, digest: String },
    #[error("instance {0} already lives here")]
    InstanceExists(InstanceId),
    #[error("unknown peer {0}")]
    UnknownPeer(NodeId),
    #[error("clock cannot move back from {now} to {requested}")]
    ClockWentBackwards { now: SimTime, requested: SimTime },
    #[error("registry can only be deployed to an empty node")]
    AlreadyDeployed,
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
    #[error(transparent)]
    Corrupt(#[from] CorruptSnapshot),
}

impl NodeError {
    /// HTTP status the gateway answers with.
    pub fn status(&self) -> u16 {
        match self {
            NodeError::RouteNotFound(_)
            | NodeError::UnknownInstance(_)
            | NodeError::ArchiveNotOwned(_)
            | NodeError::UnknownPeer(_)
            | NodeError::Store(StoreError::NotFound(_))
            | NodeError::Lifecycle(LifecycleError::UnknownInstance(_)) => 404,
            NodeError::RouteMoved { .. } => 421,
            NodeError::InstanceBusy(_)
            | NodeError::NotMigratable { .. }
            | NodeError::ImageMissing { .. }
            | NodeError::InstanceExists(_)
            | NodeError::AlreadyDeployed
            | NodeError::Lifecycle(_) => 409,
            NodeError::ClockWentBackwards { .. } => 400,
            NodeError::InsufficientCapacity(_) | NodeError::Store(StoreError::StorageFull { .. }) => 503,
            NodeError::InstanceFailed { .. } | NodeError::Store(_) | NodeError::Proxy(_) | NodeError::Corrupt(_) => 500,
        }
    }
}

enum RunResult {
    Responded(Option<Vec<u8>>),
    Suspended,
}

#[derive(Debug)]
pub struct Node {
    id: NodeId,
    config: NodeConfig,
    registry: Registry,
    instances: BTreeMap<InstanceId, Instance>,
    store: CheckpointStore,
    proxy: SleepProxy,
    clock: SimTime,
    records: Vec<InvocationRecord>,
    wakes: Vec<WakeRecord>,
    trace: Vec<TraceEvent>,
    backups: BackupSchedule,
    moved: BTreeMap<FunctionId, NodeId>,
    adopted: BTreeMap<ArchiveId, InstanceId>,
    journal: BTreeMap<InstanceId, JournalEntry>,
    inbound_sessions: u64,
    tombstones: BTreeMap<ArchiveId, u64>,
    next_instance: u64,
    next_request: u64,
    next_packet: u64,
}

impl Node {
    pub fn new(id: NodeId, config: NodeConfig, registry: Registry, store: CheckpointStore) -> Self {
        Node {
            id,
            config,
            registry,
            instances: BTreeMap::new(),
            store,
            proxy: SleepProxy::new(),
            clock: SimTime::ZERO,
            records: Vec::new(),
            wakes: Vec::new(),
            trace: Vec::new(),
            backups: BackupSchedule::default(),
            moved: BTreeMap::new(),
            adopted: BTreeMap::new(),
            journal: BTreeMap::new(),
            inbound_sessions: 0,
            tombstones: BTreeMap::new(),
            next_instance: 0,
            next_request: 0,
            next_packet: 0,
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn store(&self) -> &CheckpointStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut CheckpointStore {
        &mut self.store
    }

    pub fn proxy(&self) -> &SleepProxy {
        &self.proxy
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn instance(&self, id: &InstanceId) -> Option<&Instance> {
        self.instances.get(id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values()
    }

    pub fn records(&self) -> &[InvocationRecord] {
        &self.records
    }

    pub fn wakes(&self) -> &[WakeRecord] {
        &self.wakes
    }

    pub fn journal(&self) -> &BTreeMap<InstanceId, JournalEntry> {
        &self.journal
    }

    /// Removes and returns trace events recorded so far.
    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn record_wire(&mut self, from: &NodeId, to: &NodeId, message: String, bytes: usize) {
        self.trace.push(TraceEvent::Wire { from: from.clone(), to: to.clone(), message, bytes });
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.trace.push(TraceEvent::Note { at: self.clock, node: self.id.clone(), text: text.into() });
    }

    /// Installs a registry on a node that has none yet.
    pub fn deploy(&mut self, registry: Registry) -> Result<(), NodeError> {
        if !self.registry.is_empty() {
            return Err(NodeError::AlreadyDeployed);
        }
        self.registry = registry;
        Ok(())
    }

    fn spec_of(&self, id: &InstanceId) -> Result<&FunctionSpec, NodeError> {
        let inst = self.instances.get(id).ok_or_else(|| NodeError::UnknownInstance(id.clone()))?;
        self.registry
            .get(&inst.function_id)
            .ok_or_else(|| NodeError::ImageMissing { function: inst.function_id.clone(), digest: String::new() })
    }

    fn inst_mut(&mut self, id: &InstanceId) -> Result<&mut Instance, NodeError> {
        self.instances.get_mut(id).ok_or_else(|| NodeError::UnknownInstance(id.clone()))
    }

    fn inst(&self, id: &InstanceId) -> Result<&Instance, NodeError> {
        self.instances.get(id).ok_or_else(|| NodeError::UnknownInstance(id.clone()))
    }

    // ---- lifecycle plumbing -------------------------------------------------

    /// Applies `event`, records it and returns the latency it is charged.
    fn apply(&mut self, id: &InstanceId, event: TransitionEvent) -> Result<f64, NodeError> {
        let now = self.clock;
        let costs = self.config.costs;
        let inst = self.inst_mut(id)?;
        let from = inst.state.clone();
        inst.apply(event, now)?;
        let to = inst.state.clone();
        let charge = match (event, from.kind()) {
            (TransitionEvent::Complete, StateKind::ColdStarting) => costs.start_cold,
            (TransitionEvent::Pause, _) => costs.pause,
            (TransitionEvent::Unpause, _) => costs.unpause,
            (TransitionEvent::Checkpoint, _) => costs.checkpoint,
            (TransitionEvent::Restore, _) => costs.restore(),
            _ => 0.0,
        };
        self.push_transition(id, Some(event), from, to);
        Ok(charge)
    }

    fn push_transition(
        &mut self,
        id: &InstanceId,
        event: Option<TransitionEvent>,
        from: InstanceState,
        to: InstanceState,
    ) {
        self.trace.push(TraceEvent::Transition {
            at: self.clock,
            node: self.id.clone(),
            instance: id.clone(),
            event,
            from,
            to,
        });
    }

    fn enter_block(&mut self, id: &InstanceId, reason: BlockReason) -> Result<(), NodeError> {
        let inst = self.inst_mut(id)?;
        let from = inst.state.clone();
        inst.enter_block(reason)?;
        inst.block = Some(reason);
        let to = inst.state.clone();
        self.trace.push(TraceEvent::Blocked { at: self.clock, node: self.id.clone(), instance: id.clone(), reason });
        if from != to {
            self.push_transition(id, None, from, to);
        }
        Ok(())
    }

    fn leave_block(&mut self, id: &InstanceId) -> Result<(), NodeError> {
        let now = self.clock;
        let inst = self.inst_mut(id)?;
        let from = inst.state.clone();
        inst.leave_block(now)?;
        let to = inst.state.clone();
        if from != to {
            self.push_transition(id, None, from, to);
        }
        Ok(())
    }

    fn fail(&mut self, id: &InstanceId, cause: String) -> NodeError {
        if let Ok(inst) = self.inst_mut(id) {
            let from = inst.state.clone();
            if inst.fail(cause.clone()).is_ok() {
                let to = inst.state.clone();
                self.push_transition(id, Some(TransitionEvent::Fail), from, to);
            }
        }
        self.proxy.release(id);
        self.backups.forget(id);
        tracing::warn!(instance = %id, %cause, "instance failed");
        NodeError::InstanceFailed { instance: id.clone(), cause }
    }

    // ---- memory -------------------------------------------------------------

    pub fn views(&self) -> Vec<InstanceView> {
        self.instances
            .values()
            .filter(|i| !i.state.is_absorbing())
            .filter_map(|i| {
                let spec = self.registry.get(&i.function_id)?;
                Some(InstanceView {
                    instance_id: i.instance_id.clone(),
                    function_id: i.function_id.clone(),
                    state: i.state.kind(),
                    memory_declared: spec.memory_declared,
                    image_digest: spec.image_digest.clone(),
                    last_active_at: i.last_active_at,
                    idle_timeout: spec.idle_timeout.unwrap_or(self.config.policy.idle_timeout_default),
                    has_block_context: i.block.is_some(),
                })
            })
            .collect()
    }

    pub fn memory_usage(&self) -> u64 {
        policy::memory_usage(&self.views(), &self.config.memory)
    }

    fn memory_charge(&self, inst: &Instance) -> u64 {
        self.registry
            .get(&inst.function_id)
            .map_or(0, |s| self.config.memory.charge(inst.state.kind(), s.memory_declared))
    }

    /// This node as a migration peer would see it.
    pub fn node_info(&self, address: impl Into<String>) -> NodeInfo {
        NodeInfo {
            node_id: self.id.clone(),
            address: address.into(),
            free_capacity: self.config.memory.capacity.saturating_sub(self.memory_usage()),
            base_images: self.registry.functions().map(|f| f.image_digest.clone()).collect(),
        }
    }

    /// Frees memory so that `extra` more bytes fit, never touching `protect`.
    fn ensure_capacity(&mut self, extra: u64, protect: Option<&InstanceId>) -> Result<(), NodeError> {
        let views: Vec<_> = self.views().into_iter().filter(|v| Some(&v.instance_id) != protect).collect();
        let mut usage = policy::memory_usage(&views, &self.config.memory);
        if let Some(p) = protect.and_then(|p| self.instances.get(p)) {
            usage += self.memory_charge(p);
        }
        let capacity = self.config.memory.capacity;
        if usage + extra <= capacity {
            return Ok(());
        }
        let needed = usage + extra - capacity;
        let plan = policy::plan_eviction(&views, &self.config.memory, needed, &self.config.costs, self.clock)
            .map_err(NodeError::InsufficientCapacity)?;
        for action in plan {
            match action {
                PlanAction::Checkpoint(id) => {
                    self.checkpoint(&id)?;
                }
                PlanAction::Reap(id) => self.reap(&id)?,
            }
        }
        Ok(())
    }

    // ---- triggers -----------------------------------------------------------

    /// Routes a trigger to an instance and runs it until it responds or blocks.
    pub fn trigger(&mut self, route: &str, payload: Vec<u8>) -> Result<TriggerResult, NodeError> {
        let spec = self
            .registry
            .resolve(route)
            .cloned()
            .ok_or_else(|| NodeError::RouteNotFound(route.trim_matches('/').to_owned()))?;
        if let Some(node) = self.moved.get(&spec.function_id) {
            return Err(NodeError::RouteMoved { route: spec.route.clone(), node: node.clone() });
        }
        self.next_request += 1;
        let request_id = self.next_request;

        let running_charge = self.config.memory.running_charge(spec.memory_declared);
        let (id, path, mut charge) = match self.select_instance(&spec)? {
            Some((id, InvocationPath::WarmResume)) => {
                let charge = if self.inst(&id)?.state.kind() == StateKind::Paused {
                    self.apply(&id, TransitionEvent::Unpause)?
                } else {
                    0.0
                };
                (id, InvocationPath::WarmResume, charge)
            }
            Some((id, _)) => {
                self.ensure_capacity(running_charge, Some(&id))?;
                let charge = self.restore_instance(&id)?;
                (id, InvocationPath::RestoreFromCheckpoint, charge)
            }
            None => {
                self.ensure_capacity(running_charge, None)?;
                let id = self.create_instance(&spec);
                let mut charge = self.apply(&id, TransitionEvent::Invoke)?;
                charge += self.apply(&id, TransitionEvent::Complete)?;
                (id, InvocationPath::Cold, charge)
            }
        };

        let now = self.clock;
        let inst = self.inst_mut(&id)?;
        inst.touch(now);
        inst.sim.restart(payload);
        inst.block = None;

        let mut record = InvocationRecord {
            request_id,
            function_id: spec.function_id.clone(),
            instance_id: id.clone(),
            path_taken: path,
            charged_latency: 0.0,
            outcome: InvocationOutcome::Failed,
            at: now,
        };
        let result = self.run(&id, &mut charge);
        record.charged_latency = charge;
        let response = match result {
            Ok(RunResult::Responded(body)) => {
                record.outcome = InvocationOutcome::Responded;
                body
            }
            Ok(RunResult::Suspended) => {
                record.outcome = InvocationOutcome::Suspended;
                None
            }
            Err(e) => {
                self.records.push(record);
                return Err(e);
            }
        };
        self.records.push(record.clone());
        Ok(TriggerResult { record, response })
    }

    /// Picks the cheapest idle instance: resident, then paused, then checkpointed.
    fn select_instance(&self, spec: &FunctionSpec) -> Result<Option<(InstanceId, InvocationPath)>, NodeError> {
        let mut busy = None;
        let mut best: Option<(u8, std::cmp::Reverse<SimTime>, &InstanceId)> = None;
        for inst in self.instances.values().filter(|i| i.function_id == spec.function_id && i.is_owner()) {
            let rank = match inst.state.kind() {
                StateKind::Running if inst.block.is_none() => 0,
                StateKind::Paused if inst.block.is_none() => 1,
                StateKind::Checkpointed if inst.block.is_none() => 2,
                _ => {
                    busy.get_or_insert(&inst.instance_id);
                    continue;
                }
            };
            let key = (rank, std::cmp::Reverse(inst.last_active_at), &inst.instance_id);
            if best.as_ref().is_none_or(|b| key < *b) {
                best = Some(key);
            }
        }
        match (best, busy) {
            (Some((rank, _, id)), _) => {
                let path = if rank == 2 { InvocationPath::RestoreFromCheckpoint } else { InvocationPath::WarmResume };
                Ok(Some((id.clone(), path)))
            }
            (None, Some(id)) if !spec.reentrant => Err(NodeError::InstanceBusy(id.clone())),
            (None, _) => Ok(None),
        }
    }

    fn create_instance(&mut self, spec: &FunctionSpec) -> InstanceId {
        self.next_instance += 1;
        let n = self.next_instance;
        let id = InstanceId::new(format!("{}-{}", self.id, n));
        let port_base = DEFAULT_PORT_BASE + ((n - 1) % 1500) as u16 * 16;
        let sim = SimState::new(n, self.id.as_str(), port_base);
        let inst = Instance::new(id.clone(), spec.function_id.clone(), sim, self.id.clone(), self.clock);
        self.instances.insert(id.clone(), inst);
        id
    }

    /// Runs a resident instance from its current program counter and handles
    /// the outcome. `charge` accumulates latency of suspension transitions.
    fn run(&mut self, id: &InstanceId, charge: &mut f64) -> Result<RunResult, NodeError> {
        let program = self.spec_of(id)?.program.clone();
        let (clock, limit) = (self.clock, self.config.step_limit);
        let inst = self.inst_mut(id)?;
        match sim::run_until_block(&mut inst.sim, &program, clock, limit) {
            Ok(Outcome::Completed) => {
                inst.block = None;
                inst.wake_rules.clear();
                let response = inst.sim.response.clone();
                let text = response.as_deref().map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default();
                self.trace.push(TraceEvent::Completed {
                    at: clock,
                    node: self.id.clone(),
                    instance: id.clone(),
                    response: text,
                });
                Ok(RunResult::Responded(response))
            }
            Ok(Outcome::Blocked(reason)) => {
                self.enter_block(id, reason)?;
                *charge += self.suspend_blocked(id, reason)?;
                Ok(RunResult::Suspended)
            }
            Err(e) => Err(self.fail(id, e.to_string())),
        }
    }

    /// Suspends a freshly blocked instance according to the node's policy.
    fn suspend_blocked(&mut self, id: &InstanceId, reason: BlockReason) -> Result<f64, NodeError> {
        use crate::lifecycle::SuspendMode;
        let usage = self.memory_usage();
        match policy::suspend_verdict(self.config.policy.suspend_mode, usage, &self.config.memory) {
            None => {
                self.watch_resident(id, reason)?;
                Ok(0.0)
            }
            Some(SuspendMode::Pause) => self.pause_blocked(id),
            Some(SuspendMode::Checkpoint) => {
                let mut charge = self.begin_checkpoint(id)?;
                charge += self.finish_checkpoint(id)?.1;
                Ok(charge)
            }
        }
    }

    /// Registers wake rules for an instance that stays resident while blocked.
    fn watch_resident(&mut self, id: &InstanceId, reason: BlockReason) -> Result<(), NodeError> {
        let inst = self.inst_mut(id)?;
        let rules = wake_rules_for(id, &reason, &inst.sim)?;
        inst.wake_rules = rules.clone();
        if let Err(e) = self.proxy.register(id, rules) {
            self.fail(id, e.to_string());
            return Err(NodeError::Proxy(e));
        }
        Ok(())
    }

    fn pause_blocked(&mut self, id: &InstanceId) -> Result<f64, NodeError> {
        let inst = self.inst(id)?;
        if let InstanceState::Blocked(reason) = inst.state {
            let rules = wake_rules_for(id, &reason, &inst.sim)?;
            self.proxy.register_pending(id, rules.clone())?;
            let inst = self.inst_mut(id)?;
            inst.wake_rules = rules;
            inst.block = Some(reason);
            self.leave_block(id)?;
        }
        let charge = self.apply(id, TransitionEvent::Pause)?;
        self.arm(id);
        Ok(charge)
    }

    fn arm(&mut self, id: &InstanceId) {
        if let Some(action) = self.proxy.arm(id) {
            if let Err(e) = self.process_wake(action) {
                tracing::warn!(instance = %id, error = %e, "deferred wake failed");
            }
        }
    }

    // ---- checkpoint / restore ----------------------------------------------

    /// First half of a checkpoint: wake rules are registered (held back) and
    /// the instance enters `Checkpointing`. Packets arriving before
    /// [`finish_checkpoint`](Self::finish_checkpoint) are buffered.
    pub fn begin_checkpoint(&mut self, id: &InstanceId) -> Result<f64, NodeError> {
        let inst = self.inst(id)?;
        match inst.state.clone() {
            InstanceState::Blocked(reason) => {
                let rules = wake_rules_for(id, &reason, &inst.sim)?;
                self.proxy.register_pending(id, rules.clone())?;
                let inst = self.inst_mut(id)?;
                inst.block = Some(reason);
                inst.wake_rules = rules;
            }
            InstanceState::Running => {
                let inst = self.inst_mut(id)?;
                inst.block = None;
                inst.wake_rules.clear();
            }
            InstanceState::Paused => self.proxy.disarm(id),
            _ => {}
        }
        self.apply(id, TransitionEvent::Checkpoint)
    }

    /// Second half of a checkpoint: writes the archive and completes the
    /// transition. A wake that arrived in between is processed right away.
    pub fn finish_checkpoint(&mut self, id: &InstanceId) -> Result<(ArchiveId, f64), NodeError> {
        let inst = self.inst(id)?;
        if inst.state.kind() != StateKind::Checkpointing {
            return Err(LifecycleError::IllegalTransition {
                state: inst.state.kind(),
                event: TransitionEvent::Complete,
            }
            .into());
        }
        let spec = self.spec_of(id)?;
        let manifest = ArchiveManifest {
            function_id: inst.function_id.clone(),
            instance_id: id.clone(),
            image_digest: spec.image_digest.clone(),
            wake_rules: inst.wake_rules.clone(),
            block: inst.block,
            created_at: self.clock,
            origin_node: self.id.clone(),
            format_version: MANIFEST_FORMAT_VERSION,
            digest_algorithm: DIGEST_ALGORITHM.to_owned(),
        };
        let blob = sim::snapshot(&inst.sim);
        let archive_id = match self.store.write_archive(&manifest, &blob) {
            Ok(a) => a,
            Err(e) => {
                self.fail(id, format!("checkpoint write failed: {e}"));
                return Err(e.into());
            }
        };
        let inst = self.inst_mut(id)?;
        inst.archive_id = Some(archive_id.clone());
        // the running image is gone; only the archive holds the state now
        inst.sim = SimState::new(0, "", 0);
        let charge = self.apply(id, TransitionEvent::Complete)?;
        self.arm(id);
        Ok((archive_id, charge))
    }

    /// Checkpoints a running, blocked or paused instance in one go.
    pub fn checkpoint(&mut self, id: &InstanceId) -> Result<ArchiveId, NodeError> {
        self.begin_checkpoint(id)?;
        Ok(self.finish_checkpoint(id)?.0)
    }

    /// Restores a checkpointed instance to `Running` or `Blocked`, handing it
    /// whatever the sleep proxy buffered. Does not run the program.
    fn restore_instance(&mut self, id: &InstanceId) -> Result<f64, NodeError> {
        let inst = self.inst(id)?;
        let InstanceState::Checkpointed(archive_id) = inst.state.clone() else {
            return Err(LifecycleError::IllegalTransition {
                state: inst.state.kind(),
                event: TransitionEvent::Restore,
            }
            .into());
        };
        let archive = self.store.read_archive(&archive_id)?;
        let restored = sim::resume(&archive.state_blob)?;
        let mut charge = self.apply(id, TransitionEvent::Restore)?;
        self.inst_mut(id)?.sim = restored;
        self.hand_over(id)?;
        charge += self.apply(id, TransitionEvent::Complete)?;
        Ok(charge)
    }

    /// Ends the proxy epoch and moves buffered payloads into the sockets.
    fn hand_over(&mut self, id: &InstanceId) -> Result<(), NodeError> {
        let deliveries = self.proxy.release(id);
        let inst = self.inst_mut(id)?;
        for Delivery { socket_id, payload, seq } in deliveries {
            if sim::deliver(&mut inst.sim, socket_id, payload).is_err() {
                tracing::warn!(instance = %id, socket = socket_id, seq, "dropping payload for closed socket");
            }
        }
        Ok(())
    }

    /// Carries on with an instance that was just resumed: runs it if its
    /// blocking condition cleared, otherwise keeps watching for the wake.
    fn continue_instance(&mut self, id: &InstanceId) -> Result<(f64, Option<RunResult>), NodeError> {
        let inst = self.inst(id)?;
        let mut charge = 0.0;
        match inst.state.clone() {
            InstanceState::Blocked(reason) if inst.sim.still_blocked(&reason, self.clock) => {
                self.watch_resident(id, reason)?;
                Ok((charge, None))
            }
            InstanceState::Blocked(_) | InstanceState::Running if inst.block.is_some() => {
                self.hand_over(id)?;
                self.leave_block(id)?;
                let r = self.run(id, &mut charge)?;
                Ok((charge, Some(r)))
            }
            _ => Ok((charge, None)),
        }
    }

    /// Restores the instance checkpointed as `archive_id`.
    ///
    /// Returns the instance and whether anything happened; an instance the
    /// sleep proxy already resumed is left alone.
    pub fn restore(&mut self, archive_id: &ArchiveId) -> Result<(InstanceId, bool), NodeError> {
        let owner = self
            .instances
            .values()
            .find(|i| i.archive_id.as_ref() == Some(archive_id) && i.is_owner())
            .map(|i| (i.instance_id.clone(), i.state.kind()));
        let id = match owner {
            Some((id, StateKind::Checkpointed)) => id,
            Some((id, _)) => return Ok((id, false)),
            None => {
                if !self.store.contains(archive_id) {
                    return Err(StoreError::NotFound(archive_id.clone()).into());
                }
                let archive = self.store.read_archive(archive_id)?;
                return Ok((self.adopt(archive)?, true));
            }
        };
        let spec = self.spec_of(&id)?.clone();
        self.ensure_capacity(self.config.memory.running_charge(spec.memory_declared), Some(&id))?;
        self.restore_instance(&id)?;
        self.continue_instance(&id)?;
        Ok((id, true))
    }

    /// Restores the instance checkpointed as `archive_id`, resolving by instance.
    pub fn restore_instance_by_id(&mut self, id: &InstanceId) -> Result<bool, NodeError> {
        let archive = match &self.inst(id)?.state {
            InstanceState::Checkpointed(a) => a.clone(),
            _ => return Ok(false),
        };
        self.restore(&archive).map(|(_, did)| did)
    }

    // ---- wakes and packets --------------------------------------------------

    fn process_wake(&mut self, action: WakeAction) -> Result<WakeRecord, NodeError> {
        let id = action.instance_id.clone();
        self.trace.push(TraceEvent::Wake {
            at: self.clock,
            node: self.id.clone(),
            instance: id.clone(),
            cause: action.cause,
        });
        let mut charge = 0.0;
        let state = self.inst(&id)?.state.kind();
        let result = (|| {
            match state {
                StateKind::Paused => {
                    charge += self.apply(&id, TransitionEvent::Unpause)?;
                    self.hand_over(&id)?;
                }
                StateKind::Checkpointed => {
                    let spec = self.spec_of(&id)?.clone();
                    self.ensure_capacity(self.config.memory.running_charge(spec.memory_declared), Some(&id))?;
                    charge += self.restore_instance(&id)?;
                }
                StateKind::Blocked => self.hand_over(&id)?,
                other => {
                    tracing::warn!(instance = %id, state = %other, "ignoring wake");
                    return Ok(None);
                }
            }
            let (c, run) = self.continue_instance(&id)?;
            charge += c;
            Ok(run)
        })();
        let (outcome, response) = match result {
            Ok(Some(RunResult::Responded(body))) => {
                (Some(InvocationOutcome::Responded), body.map(|b| String::from_utf8_lossy(&b).into_owned()))
            }
            Ok(Some(RunResult::Suspended)) => (Some(InvocationOutcome::Suspended), None),
            Ok(None) => (None, None),
            Err(NodeError::InstanceFailed { .. }) => (Some(InvocationOutcome::Failed), None),
            Err(e) => return Err(e),
        };
        let record = WakeRecord {
            at: self.clock,
            instance_id: id,
            cause: action.cause,
            charged_latency: charge,
            outcome,
            response,
        };
        self.wakes.push(record.clone());
        Ok(record)
    }

    /// Hands a packet to the node as if it had arrived on the network.
    pub fn inject_packet(&mut self, src: Endpoint, dst: Endpoint, payload: Vec<u8>) -> Result<InjectResult, NodeError> {
        self.next_packet += 1;
        let packet = SimPacket { src, dst, payload, seq: self.next_packet };
        if let Some((instance_id, _)) = self.proxy.match_packet(&packet) {
            return match self.proxy.ingest(packet, self.clock) {
                Some(action) => {
                    let wake = self.process_wake(action)?;
                    Ok(InjectResult::Woke { instance_id, wake: Box::new(wake) })
                }
                None => Ok(InjectResult::Buffered { instance_id }),
            };
        }
        let resident = self.instances.values().find_map(|i| {
            let resident = matches!(i.state, InstanceState::Running | InstanceState::Blocked(_));
            let socket = i.sim.socket_by_flow(&packet.src, &packet.dst)?;
            resident.then(|| (i.instance_id.clone(), socket))
        });
        let Some((id, socket)) = resident else {
            self.proxy.ingest(packet, self.clock);
            return Ok(InjectResult::Dropped);
        };
        let inst = self.inst_mut(&id)?;
        if let Err(e) = sim::deliver(&mut inst.sim, socket, packet.payload) {
            return Err(self.fail(&id, e.to_string()));
        }
        if self.inst(&id)?.state == InstanceState::Blocked(BlockReason::NetRecv { socket }) {
            self.continue_instance(&id)?;
        }
        Ok(InjectResult::Delivered { instance_id: id })
    }

    /// Moves the clock forward, firing timers at their deadlines, then runs
    /// the idle reaper and periodic backups.
    pub fn advance_clock(&mut self, to: SimTime) -> Result<AdvanceReport, NodeError> {
        if to < self.clock {
            return Err(NodeError::ClockWentBackwards { now: self.clock, requested: to });
        }
        let mut report = AdvanceReport::default();
        while let Some(deadline) = self.proxy.next_timer().filter(|d| *d <= to) {
            self.clock = self.clock.max(deadline);
            for action in self.proxy.timer_tick(self.clock) {
                let id = action.instance_id.clone();
                match self.process_wake(action) {
                    Ok(w) => report.wakes.push(w),
                    Err(e) => report.errors.push(format!("wake {id}: {e}")),
                }
            }
        }
        self.clock = to;
        report.reaped = self.idle_reaper();
        if let Some(interval) = self.config.backup.interval {
            let (ids, errors) = self.backup_tick(interval);
            report.backups = ids;
            report.errors.extend(errors);
        }
        Ok(report)
    }

    // ---- housekeeping -------------------------------------------------------

    fn reap(&mut self, id: &InstanceId) -> Result<(), NodeError> {
        if self.inst(id)?.state.kind() == StateKind::Running {
            self.apply(id, TransitionEvent::Pause)?;
        }
        self.apply(id, TransitionEvent::Reap)?;
        self.proxy.release(id);
        self.backups.forget(id);
        Ok(())
    }

    /// Terminates idle instances past their timeout. Paused instances that
    /// are still waiting on something are checkpointed instead so the wake is
    /// not lost; checkpointed instances hold no memory and are left alone.
    pub fn idle_reaper(&mut self) -> Vec<ReaperAction> {
        let due: Vec<_> = self
            .views()
            .into_iter()
            .filter(|v| self.clock.saturating_sub(v.last_active_at) > v.idle_timeout)
            .filter(|v| matches!(v.state, StateKind::Running | StateKind::Paused))
            .collect();
        let mut actions = Vec::new();
        for v in due {
            let id = v.instance_id;
            if v.has_block_context {
                if v.state == StateKind::Paused {
                    match self.checkpoint(&id) {
                        Ok(archive_id) => actions.push(ReaperAction::Checkpointed { instance_id: id, archive_id }),
                        Err(e) => tracing::warn!(instance = %id, error = %e, "idle checkpoint failed"),
                    }
                }
                continue;
            }
            match self.reap(&id) {
                Ok(()) => actions.push(ReaperAction::Reaped { instance_id: id }),
                Err(e) => tracing::warn!(instance = %id, error = %e, "reap failed"),
            }
        }
        actions
    }

    /// Writes a backup archive of every resident instance whose last backup is
    /// older than `interval`, without changing its state.
    pub fn backup_tick(&mut self, interval: SimTime) -> (Vec<ArchiveId>, Vec<String>) {
        let now = self.clock;
        let due: Vec<InstanceId> = self
            .instances
            .values()
            .filter(|i| matches!(i.state.kind(), StateKind::Running | StateKind::Blocked | StateKind::Paused))
            .filter(|i| self.backups.is_due(&i.instance_id, i.created_at, now, interval))
            .map(|i| i.instance_id.clone())
            .collect();
        let (mut ids, mut errors) = (Vec::new(), Vec::new());
        for id in due {
            let Some(inst) = self.instances.get(&id) else { continue };
            let Some(spec) = self.registry.get(&inst.function_id) else { continue };
            let mut rules = inst.wake_rules.clone();
            let block = match inst.state {
                InstanceState::Blocked(r) => {
                    rules = wake_rules_for(&id, &r, &inst.sim).unwrap_or_default();
                    Some(r)
                }
                _ => inst.block,
            };
            let manifest = ArchiveManifest {
                function_id: inst.function_id.clone(),
                instance_id: id.clone(),
                image_digest: spec.image_digest.clone(),
                wake_rules: rules,
                block,
                created_at: now,
                origin_node: self.id.clone(),
                format_version: MANIFEST_FORMAT_VERSION,
                digest_algorithm: DIGEST_ALGORITHM.to_owned(),
            };
            match self.store.write_archive(&manifest, &sim::snapshot(&inst.sim)) {
                Ok(a) => {
                    self.backups.mark(&id, now);
                    ids.push(a);
                }
                Err(e) => errors.push(format!("backup {id}: {e}")),
            }
        }
        if let Some(retain) = self.config.backup.retain {
            if let Err(e) = self.store.gc(retain.max(1), &self.pinned_archives()) {
                errors.push(format!("gc: {e}"));
            }
        }
        (ids, errors)
    }

    /// Archives a live instance depends on.
    pub fn pinned_archives(&self) -> BTreeSet<ArchiveId> {
        self.instances.values().filter(|i| !i.state.is_absorbing()).filter_map(|i| i.archive_id.clone()).collect()
    }

    // ---- admin views --------------------------------------------------------

    pub fn summary(&self, inst: &Instance) -> InstanceSummary {
        let program_len = self.registry.get(&inst.function_id).map_or(0, |s| s.program.len());
        let resident = matches!(inst.state, InstanceState::Running | InstanceState::Blocked(_) | InstanceState::Paused);
        InstanceSummary {
            instance_id: inst.instance_id.clone(),
            function_id: inst.function_id.clone(),
            state: inst.state.clone(),
            memory_charge: self.memory_charge(inst),
            created_at: inst.created_at,
            last_active_at: inst.last_active_at,
            block: inst.block,
            archive_id: inst.archive_id.clone(),
            vars: inst.sim.vars.clone(),
            response: inst.sim.response.as_deref().map(|b| String::from_utf8_lossy(b).into_owned()),
            completed: resident && inst.block.is_none() && inst.sim.pc >= program_len,
        }
    }

    pub fn list_instances(&self) -> Vec<InstanceSummary> {
        self.instances.values().map(|i| self.summary(i)).collect()
    }

    pub fn stats(&self) -> NodeStats {
        let mut by_state = BTreeMap::new();
        for i in self.instances.values() {
            *by_state.entry(i.state.kind().to_string()).or_insert(0) += 1;
        }
        let proxy = self.proxy.stats();
        NodeStats {
            node_id: self.id.clone(),
            clock: self.clock,
            invocations: self.records.clone(),
            wakes: self.wakes.clone(),
            memory_usage: self.memory_usage(),
            memory_capacity: self.config.memory.capacity,
            instances_by_state: by_state,
            archives: self.store.list().len(),
            packets_ingested: proxy.ingested,
            packets_dropped: proxy.dropped,
        }
    }

    // ---- migration, source side --------------------------------------------

    /// Checkpoints the instance if needed and moves it to `MigratingOut`.
    /// For an instance already in doubt the existing archive is offered again.
    pub fn prepare_outbound(&mut self, id: &InstanceId, target: &NodeId) -> Result<OutboundTransfer, NodeError> {
        if target == &self.id {
            return Err(NodeError::UnknownPeer(target.clone()));
        }
        let state = self.inst(id)?.state.kind();
        match state {
            StateKind::MigratingOut => {}
            StateKind::Running | StateKind::Blocked | StateKind::Paused => {
                self.checkpoint(id)?;
            }
            StateKind::Checkpointed => {}
            other => return Err(NodeError::NotMigratable { instance: id.clone(), state: other }),
        }
        let inst = self.inst(id)?;
        let archive_id = match &inst.state {
            InstanceState::Checkpointed(a) => a.clone(),
            InstanceState::MigratingOut => match self.journal.get(id) {
                Some(e) if e.phase == JournalPhase::InDoubt && &e.target == target => e.archive_id.clone(),
                _ => return Err(NodeError::NotMigratable { instance: id.clone(), state: StateKind::MigratingOut }),
            },
            other => return Err(NodeError::NotMigratable { instance: id.clone(), state: other.kind() }),
        };
        let archive = self.store.read_archive(&archive_id)?;
        let spec = self.spec_of(id)?;
        let memory_required = self.config.memory.running_charge(spec.memory_declared);
        if state != StateKind::MigratingOut {
            self.apply(id, TransitionEvent::MigrateStart)?;
            self.proxy.disarm(id);
            self.journal.insert(
                id.clone(),
                JournalEntry { archive_id, target: target.clone(), phase: JournalPhase::Transferring },
            );
        }
        Ok(OutboundTransfer { instance_id: id.clone(), archive, memory_required })
    }

    /// The target restored the instance: it is now the owner. Returns packets
    /// the proxy buffered here, which belong to the target now.
    pub fn commit_outbound(&mut self, id: &InstanceId) -> Result<Vec<Delivery>, NodeError> {
        let entry = self.journal.get(id).cloned();
        if entry.as_ref().is_some_and(|e| e.phase == JournalPhase::Committed) {
            return Ok(Vec::new());
        }
        self.apply(id, TransitionEvent::MigrateCommit)?;
        let stranded = self.proxy.release(id);
        self.backups.forget(id);
        if let Some(mut e) = entry {
            let function = self.inst(id)?.function_id.clone();
            self.moved.insert(function, e.target.clone());
            e.phase = JournalPhase::Committed;
            self.journal.insert(id.clone(), e);
        }
        Ok(stranded)
    }

    /// The migration failed before the target took over: the instance is
    /// checkpointed here again and its wake rules are live.
    pub fn abort_outbound(&mut self, id: &InstanceId) -> Result<(), NodeError> {
        if self.inst(id)?.state.kind() != StateKind::MigratingOut {
            return Ok(());
        }
        self.apply(id, TransitionEvent::MigrateAbort)?;
        if let Some(e) = self.journal.get_mut(id) {
            e.phase = JournalPhase::Aborted;
        }
        self.arm(id);
        Ok(())
    }

    pub fn mark_in_doubt(&mut self, id: &InstanceId) {
        if let Some(e) = self.journal.get_mut(id) {
            e.phase = JournalPhase::InDoubt;
        }
    }

    /// Takes packets another node buffered for an instance that now lives here.
    pub fn accept_stranded(&mut self, id: &InstanceId, deliveries: Vec<Delivery>) -> Result<(), NodeError> {
        if deliveries.is_empty() {
            return Ok(());
        }
        let inst = self.inst_mut(id)?;
        if !matches!(inst.state, InstanceState::Running | InstanceState::Blocked(_)) {
            return Err(NodeError::NotMigratable { instance: id.clone(), state: inst.state.kind() });
        }
        for d in deliveries {
            if sim::deliver(&mut inst.sim, d.socket_id, d.payload).is_err() {
                tracing::warn!(instance = %id, socket = d.socket_id, "dropping stranded payload for closed socket");
            }
        }
        self.continue_instance(id)?;
        Ok(())
    }

    // ---- migration, target side --------------------------------------------

    /// Starts an inbound transfer session and returns its number.
    pub fn open_inbound(&mut self) -> u64 {
        self.inbound_sessions += 1;
        self.inbound_sessions
    }

    /// Refuses any transfer of `archive_id` from sessions opened at or before
    /// `session`.
    pub fn tombstone(&mut self, archive_id: &ArchiveId, session: u64) {
        let t = self.tombstones.entry(archive_id.clone()).or_insert(0);
        *t = (*t).max(self.inbound_sessions.max(session));
    }

    pub fn is_tombstoned(&self, archive_id: &ArchiveId, session: u64) -> bool {
        self.tombstones.get(archive_id).is_some_and(|t| session <= *t)
    }

    /// Live instance restored here from `archive_id`, if any.
    pub fn adopted(&self, archive_id: &ArchiveId) -> Option<&InstanceId> {
        self.adopted.get(archive_id).filter(|id| self.instances.get(*id).is_some_and(|i| i.is_owner()))
    }

    /// Whether an offer can be taken: the image is installed and the
    /// instance fits in memory, counting what eviction could free.
    pub fn can_accept(&self, image_digest: &str, memory_required: u64) -> Result<(), NodeError> {
        if !self.registry.functions().any(|f| f.image_digest == image_digest) {
            return Err(NodeError::ImageMissing { function: FunctionId::new(""), digest: image_digest.to_owned() });
        }
        let views = self.views();
        let reclaimable: u64 = views
            .iter()
            .map(|v| {
                let (c, r) = policy::reclaimable(v, &self.config.memory, self.clock);
                r.or(c).unwrap_or(0)
            })
            .sum();
        let usage = policy::memory_usage(&views, &self.config.memory);
        if usage.saturating_sub(reclaimable) + memory_required > self.config.memory.capacity {
            return Err(NodeError::InsufficientCapacity(PolicyError::InsufficientCandidates {
                needed: memory_required,
                available: self.config.memory.capacity.saturating_sub(usage) + reclaimable,
            }));
        }
        Ok(())
    }

    /// Takes over an instance from a verified archive: stores it, restores
    /// it and registers its wake rules again.
    pub fn adopt(&mut self, archive: CheckpointArchive) -> Result<InstanceId, NodeError> {
        let m = archive.manifest.clone();
        let spec = self.registry.get(&m.function_id).cloned().ok_or_else(|| NodeError::ImageMissing {
            function: m.function_id.clone(),
            digest: m.image_digest.clone(),
        })?;
        if spec.image_digest != m.image_digest {
            return Err(NodeError::ImageMissing { function: m.function_id, digest: m.image_digest });
        }
        if self.instances.get(&m.instance_id).is_some_and(|i| i.is_owner()) {
            return Err(NodeError::InstanceExists(m.instance_id));
        }
        self.ensure_capacity(self.config.memory.running_charge(spec.memory_declared), None)?;
        let archive_id = self.store.import(&archive)?;
        let id = m.instance_id.clone();
        let mut inst =
            Instance::new(id.clone(), m.function_id.clone(), SimState::new(0, "", 0), self.id.clone(), self.clock);
        inst.state = InstanceState::Checkpointed(archive_id.clone());
        inst.archive_id = Some(archive_id.clone());
        inst.block = m.block;
        inst.wake_rules = m.wake_rules.clone();
        self.instances.insert(id.clone(), inst);
        self.trace.push(TraceEvent::Adopted {
            at: self.clock,
            node: self.id.clone(),
            instance: id.clone(),
            archive: archive_id.clone(),
        });
        if let Err(e) = self.restore_instance(&id) {
            self.instances.remove(&id);
            self.proxy.release(&id);
            let _ = self.store.remove(&archive_id);
            return Err(e);
        }
        self.adopted.insert(archive_id, id.clone());
        self.moved.remove(&m.function_id);
        if let Err(e) = self.continue_instance(&id) {
            tracing::warn!(instance = %id, error = %e, "adopted instance failed after restore");
        }
        Ok(id)
    }
}

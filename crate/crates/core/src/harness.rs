//! Scripted multi-node scenarios and the reference interpreter they are
//! checked against.
//!
//! A scenario declares its nodes and an ordered list of events:
//!
//! ```json
//! {
//!   "name": "sleep-exhaustion",
//!   "nodes": [{"id": "A", "config": {"policy": {"suspend_mode": "keep"}}, "functions": [...]}],
//!   "events": [
//!     {"event": "trigger", "node": "A", "route": "sleepy", "bind": "s"},
//!     {"event": "advance_clock", "by": 30},
//!     {"event": "checkpoint", "node": "A", "instance": "s"},
//!     {"event": "expect_state", "node": "A", "instance": "s", "state": "Checkpointed"}
//!   ]
//! }
//! ```
//!
//! Instances are named by the alias a `trigger` bound, or by their id. All
//! nodes share one simulated clock; after each event the harness drains every
//! node's trace in node-id order, so the same script always yields the same
//! trace.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::config::NodeConfig;
use crate::lifecycle::TransitionEvent;
use crate::migration::{migrate_out, Fault, MemoryConnector, MigrationOutcome, MigrationReport};
use crate::node::{InstanceSummary, InvocationPath, Node, NodeError, NodeStats, TraceEvent};
use crate::policy::CostModel;
use crate::registry::{FunctionSpec, Registry};
use crate::sim::{BlockReason, SimError, SimState, SimStep, SocketState, SocketStatus};
use crate::store::CheckpointStore;
use crate::types::{ArchiveId, Endpoint, InstanceId, NodeId, SimTime, SocketId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub nodes: Vec<NodeDecl>,
    pub events: Vec<ScriptEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub id: NodeId,
    #[serde(default)]
    pub config: NodeConfig,
    pub functions: Vec<FunctionSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashMode {
    BeforeSend,
    AfterSend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptEvent {
    AdvanceClock {
        by: SimTime,
    },
    Trigger {
        node: NodeId,
        route: String,
        #[serde(default)]
        payload: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bind: Option<String>,
    },
    InjectPacket {
        node: NodeId,
        src: Endpoint,
        dst: Endpoint,
        payload: String,
    },
    Checkpoint {
        node: NodeId,
        instance: String,
    },
    /// Restores the instance if it is still checkpointed; a no-op otherwise.
    Restore {
        node: NodeId,
        instance: String,
    },
    /// `state` is a lifecycle state name, or `completed` for an instance
    /// whose last run finished.
    ExpectState {
        node: NodeId,
        instance: String,
        state: String,
    },
    ExpectVar {
        node: NodeId,
        instance: String,
        name: String,
        value: i64,
    },
    ExpectResponse {
        node: NodeId,
        instance: String,
        value: String,
    },
    Migrate {
        node: NodeId,
        instance: String,
        to: NodeId,
    },
    /// Kills the connection of the next migration involving `node` at
    /// source frame `at_frame`.
    Crash {
        node: NodeId,
        at_frame: usize,
        mode: CrashMode,
    },
}

impl ScriptEvent {
    pub fn name(&self) -> &'static str {
        match self {
            ScriptEvent::AdvanceClock { .. } => "advance_clock",
            ScriptEvent::Trigger { .. } => "trigger",
            ScriptEvent::InjectPacket { .. } => "inject_packet",
            ScriptEvent::Checkpoint { .. } => "checkpoint",
            ScriptEvent::Restore { .. } => "restore",
            ScriptEvent::ExpectState { .. } => "expect_state",
            ScriptEvent::ExpectVar { .. } => "expect_var",
            ScriptEvent::ExpectResponse { .. } => "expect_response",
            ScriptEvent::Migrate { .. } => "migrate",
            ScriptEvent::Crash { .. } => "crash",
        }
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Script(format!("cannot parse scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Script(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

const SLEEP_EXHAUSTION: &str = include_str!("../../../scenarios/sleep-exhaustion.json");
const TCP_AUTHORIZE: &str = include_str!("../../../scenarios/tcp-authorize.json");
const MIGRATE_COUNTER: &str = include_str!("../../../scenarios/migrate-counter.json");

pub const BUILTIN_SCENARIOS: [&str; 3] = ["sleep-exhaustion", "tcp-authorize", "migrate-counter"];

pub fn builtin_scenario(name: &str) -> Option<Scenario> {
    let text = match name {
        "sleep-exhaustion" => SLEEP_EXHAUSTION,
        "tcp-authorize" => TCP_AUTHORIZE,
        "migrate-counter" => MIGRATE_COUNTER,
        _ => return None,
    };
    Some(Scenario::from_json(text).expect("built-in scenarios parse"))
}

/// An error reported by a node, or by the transport in front of it.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct ClusterError {
    /// HTTP-style status; `None` when the node could not be reached.
    pub status: Option<u16>,
    pub message: String,
}

impl ClusterError {
    pub fn transport(message: impl Into<String>) -> Self {
        ClusterError { status: None, message: message.into() }
    }
}

impl From<NodeError> for ClusterError {
    fn from(e: NodeError) -> Self {
        ClusterError { status: Some(e.status()), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub instance_id: InstanceId,
    pub path: InvocationPath,
    pub charged_latency: f64,
    /// `None` while the instance is suspended mid-run.
    pub response: Option<String>,
}

/// The operations a scenario needs from a set of nodes.
pub trait Cluster {
    fn node_ids(&self) -> Vec<NodeId>;
    fn advance_clock(&mut self, to: SimTime) -> Result<(), ClusterError>;
    fn trigger(&mut self, node: &NodeId, route: &str, payload: &[u8]) -> Result<Invocation, ClusterError>;
    fn inject_packet(
        &mut self,
        node: &NodeId,
        src: &Endpoint,
        dst: &Endpoint,
        payload: &[u8],
    ) -> Result<(), ClusterError>;
    fn checkpoint(&mut self, node: &NodeId, instance: &InstanceId) -> Result<ArchiveId, ClusterError>;
    /// Restores a checkpointed instance; `false` if it was not checkpointed.
    fn restore(&mut self, node: &NodeId, instance: &InstanceId) -> Result<bool, ClusterError>;
    fn instance(&mut self, node: &NodeId, instance: &InstanceId) -> Result<Option<InstanceSummary>, ClusterError>;
    fn migrate(
        &mut self,
        node: &NodeId,
        instance: &InstanceId,
        to: &NodeId,
        fault: Option<Fault>,
    ) -> Result<MigrationReport, ClusterError>;
    fn stats(&mut self, node: &NodeId) -> Result<NodeStats, ClusterError>;
    /// Drains trace events recorded since the last call, in node-id order.
    fn take_trace(&mut self) -> Result<Vec<TraceEvent>, ClusterError>;
}

/// Nodes living in this process, each with its own store under one root.
pub struct InProcessCluster {
    nodes: BTreeMap<NodeId, Arc<Mutex<Node>>>,
}

impl InProcessCluster {
    pub fn new(root: &Path, decls: &[NodeDecl]) -> Result<Self, HarnessError> {
        let mut nodes = BTreeMap::new();
        for decl in decls {
            let registry = Registry::new(decl.functions.clone())
                .map_err(|e| HarnessError::Script(format!("node {}: {e}", decl.id)))?;
            decl.config.validate().map_err(|e| HarnessError::Script(format!("node {}: {e}", decl.id)))?;
            let store = CheckpointStore::open(root.join(decl.id.as_str()))
                .map_err(|e| HarnessError::Script(format!("node {}: {e}", decl.id)))?;
            let node = Node::new(decl.id.clone(), decl.config.clone(), registry, store);
            if nodes.insert(decl.id.clone(), Arc::new(Mutex::new(node))).is_some() {
                return Err(HarnessError::Script(format!("node {} declared twice", decl.id)));
            }
        }
        Ok(InProcessCluster { nodes })
    }

    pub fn node(&self, id: &NodeId) -> Option<Arc<Mutex<Node>>> {
        self.nodes.get(id).cloned()
    }

    fn with<T>(&self, id: &NodeId, f: impl FnOnce(&mut Node) -> Result<T, NodeError>) -> Result<T, ClusterError> {
        let node = self.nodes.get(id).ok_or_else(|| ClusterError::transport(format!("unknown node {id}")))?;
        let mut node = node.lock().expect("node lock");
        Ok(f(&mut node)?)
    }
}

impl Cluster for InProcessCluster {
    fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().cloned().collect()
    }

    fn advance_clock(&mut self, to: SimTime) -> Result<(), ClusterError> {
        for id in self.node_ids() {
            self.with(&id, |n| n.advance_clock(to).map(drop))?;
        }
        Ok(())
    }

    fn trigger(&mut self, node: &NodeId, route: &str, payload: &[u8]) -> Result<Invocation, ClusterError> {
        self.with(node, |n| {
            let r = n.trigger(route, payload.to_vec())?;
            Ok(Invocation {
                instance_id: r.record.instance_id,
                path: r.record.path_taken,
                charged_latency: r.record.charged_latency,
                response: r.response.map(|b| String::from_utf8_lossy(&b).into_owned()),
            })
        })
    }

    fn inject_packet(
        &mut self,
        node: &NodeId,
        src: &Endpoint,
        dst: &Endpoint,
        payload: &[u8],
    ) -> Result<(), ClusterError> {
        self.with(node, |n| n.inject_packet(src.clone(), dst.clone(), payload.to_vec()).map(drop))
    }

    fn checkpoint(&mut self, node: &NodeId, instance: &InstanceId) -> Result<ArchiveId, ClusterError> {
        self.with(node, |n| n.checkpoint(instance))
    }

    fn restore(&mut self, node: &NodeId, instance: &InstanceId) -> Result<bool, ClusterError> {
        self.with(node, |n| n.restore_instance_by_id(instance))
    }

    fn instance(&mut self, node: &NodeId, instance: &InstanceId) -> Result<Option<InstanceSummary>, ClusterError> {
        self.with(node, |n| Ok(n.instance(instance).map(|i| n.summary(i))))
    }

    fn migrate(
        &mut self,
        node: &NodeId,
        instance: &InstanceId,
        to: &NodeId,
        fault: Option<Fault>,
    ) -> Result<MigrationReport, ClusterError> {
        if node == to {
            return Err(ClusterError {
                status: Some(400),
                message: "cannot migrate an instance to its own node".into(),
            });
        }
        let source = self.node(node).ok_or_else(|| ClusterError::transport(format!("unknown node {node}")))?;
        let mut connector = MemoryConnector { fault, ..MemoryConnector::default() };
        for (id, n) in &self.nodes {
            if id != node {
                connector.nodes.insert(id.clone(), n.clone());
            }
        }
        let report = {
            let mut source = source.lock().expect("node lock");
            let chunk = source.config().migration.chunk_size;
            migrate_out(&mut source, instance, to, &mut connector, chunk)?
        };
        if matches!(report.outcome, MigrationOutcome::Committed { .. }) && !report.stranded.is_empty() {
            let stranded = report.stranded.clone();
            self.with(to, |n| n.accept_stranded(instance, stranded))?;
        }
        Ok(report)
    }

    fn stats(&mut self, node: &NodeId) -> Result<NodeStats, ClusterError> {
        self.with(node, |n| Ok(n.stats()))
    }

    fn take_trace(&mut self) -> Result<Vec<TraceEvent>, ClusterError> {
        let mut out = Vec::new();
        for node in self.nodes.values() {
            out.extend(node.lock().expect("node lock").take_trace());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Script(String),
    #[error("event {index} ({event}) failed: {error}")]
    Cluster { index: usize, event: &'static str, error: ClusterError },
    #[error("event {index} ({event}): expected {expected}, got {actual}")]
    ExpectationFailed { index: usize, event: &'static str, expected: String, actual: String },
}

/// Everything a script run produced.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ScriptRun {
    pub trace: Vec<TraceEvent>,
    pub invocations: Vec<Invocation>,
    pub migrations: Vec<MigrationReport>,
    /// One human-readable line per event.
    pub log: Vec<String>,
}

impl ScriptRun {
    pub fn trace_json(&self) -> String {
        serde_json::to_string_pretty(&self.trace).expect("trace serializes")
    }
}

/// Runs `scenario` against fresh in-process nodes whose stores live under `root`.
pub fn run_in_process(scenario: &Scenario, root: &Path) -> Result<ScriptRun, HarnessError> {
    let mut cluster = InProcessCluster::new(root, &scenario.nodes)?;
    run_script(&mut cluster, &scenario.events)
}

/// Runs `events` in order, stopping at the first failure.
pub fn run_script(cluster: &mut dyn Cluster, events: &[ScriptEvent]) -> Result<ScriptRun, HarnessError> {
    let mut run = ScriptRun::default();
    let mut aliases: BTreeMap<String, InstanceId> = BTreeMap::new();
    let mut pending_fault: Option<(NodeId, Fault)> = None;
    let mut now = SimTime::ZERO;
    let nodes = cluster.node_ids();

    for (index, event) in events.iter().enumerate() {
        let name = event.name();
        let fail = |error: ClusterError| HarnessError::Cluster { index, event: name, error };
        let expect = |expected: String, actual: String| {
            if expected == actual {
                Ok(())
            } else {
                Err(HarnessError::ExpectationFailed { index, event: name, expected, actual })
            }
        };
        let resolve = |aliases: &BTreeMap<String, InstanceId>, r: &str| {
            aliases.get(r).cloned().unwrap_or_else(|| InstanceId::new(r))
        };
        for node in event_nodes(event) {
            if !nodes.contains(node) {
                return Err(HarnessError::Script(format!("event {index} names unknown node {node}")));
            }
        }

        match event {
            ScriptEvent::AdvanceClock { by } => {
                now = now + *by;
                cluster.advance_clock(now).map_err(fail)?;
                run.log.push(format!("clock -> {now}"));
            }
            ScriptEvent::Trigger { node, route, payload, bind } => {
                let inv = cluster.trigger(node, route, payload.as_bytes()).map_err(fail)?;
                let shown = inv.response.as_deref().map_or("suspended".to_owned(), |r| format!("{r:?}"));
                run.log.push(format!(
                    "trigger {node}/{route} -> {} via {:?} ({:.3} s charged): {shown}",
                    inv.instance_id, inv.path, inv.charged_latency
                ));
                if let Some(alias) = bind {
                    aliases.insert(alias.clone(), inv.instance_id.clone());
                }
                run.invocations.push(inv);
            }
            ScriptEvent::InjectPacket { node, src, dst, payload } => {
                cluster.inject_packet(node, src, dst, payload.as_bytes()).map_err(fail)?;
                run.log.push(format!("packet {src} -> {dst} at {node}: {payload:?}"));
            }
            ScriptEvent::Checkpoint { node, instance } => {
                let id = resolve(&aliases, instance);
                let archive = cluster.checkpoint(node, &id).map_err(fail)?;
                run.log.push(format!("checkpoint {id} on {node} -> archive {}", short(archive.as_str())));
            }
            ScriptEvent::Restore { node, instance } => {
                let id = resolve(&aliases, instance);
                let did = cluster.restore(node, &id).map_err(fail)?;
                let what = if did { "restored" } else { "already resumed" };
                run.log.push(format!("restore {id} on {node}: {what}"));
            }
            ScriptEvent::ExpectState { node, instance, state } => {
                let id = resolve(&aliases, instance);
                let summary = cluster.instance(node, &id).map_err(fail)?;
                let actual = match &summary {
                    None => "absent".to_owned(),
                    Some(s) if state.eq_ignore_ascii_case("completed") && s.completed => "completed".to_owned(),
                    Some(s) if state.eq_ignore_ascii_case("completed") => format!("{} (not completed)", s.state),
                    Some(s) => s.state.kind().to_string(),
                };
                let expected =
                    if state.eq_ignore_ascii_case("completed") { "completed".to_owned() } else { state.clone() };
                expect(format!("{id} on {node} {expected}"), format!("{id} on {node} {actual}"))?;
                run.log.push(format!("expect {id} on {node} is {expected}: ok"));
            }
            ScriptEvent::ExpectVar { node, instance, name: var, value } => {
                let id = resolve(&aliases, instance);
                let summary = cluster.instance(node, &id).map_err(fail)?;
                let actual = summary.as_ref().and_then(|s| s.vars.get(var)).copied();
                let shown = actual.map_or("unset".to_owned(), |v| v.to_string());
                expect(format!("{id}.{var} = {value} on {node}"), format!("{id}.{var} = {shown} on {node}"))?;
                run.log.push(format!("expect {id}.{var} = {value} on {node}: ok"));
            }
            ScriptEvent::ExpectResponse { node, instance, value } => {
                let id = resolve(&aliases, instance);
                let summary = cluster.instance(node, &id).map_err(fail)?;
                let actual = summary.and_then(|s| s.response);
                expect(
                    format!("response {value:?}"),
                    format!("response {}", actual.as_deref().map_or("none".into(), |r| format!("{r:?}"))),
                )?;
                run.log.push(format!("expect response of {id} = {value:?}: ok"));
            }
            ScriptEvent::Migrate { node, instance, to } => {
                let id = resolve(&aliases, instance);
                let fault = match pending_fault.take() {
                    Some((n, f)) if &n == node || &n == to => Some(f),
                    other => {
                        pending_fault = other;
                        None
                    }
                };
                let report = cluster.migrate(node, &id, to, fault).map_err(fail)?;
                run.log.push(format!(
                    "migrate {id} {node} -> {to}: {} ({} wire bytes, {} messages)",
                    outcome_text(&report.outcome),
                    report.wire_bytes,
                    report.messages.len()
                ));
                run.migrations.push(report);
            }
            ScriptEvent::Crash { node, at_frame, mode } => {
                let fault = match mode {
                    CrashMode::BeforeSend => Fault::BeforeSend { frame: *at_frame },
                    CrashMode::AfterSend => Fault::AfterSend { frame: *at_frame },
                };
                pending_fault = Some((node.clone(), fault));
                run.log.push(format!("next migration through {node} dies at frame {at_frame} ({mode:?})"));
            }
        }
        // barrier: everything the event caused is in the trace before the next one starts
        run.trace.extend(cluster.take_trace().map_err(fail)?);
    }
    Ok(run)
}

fn event_nodes(event: &ScriptEvent) -> Vec<&NodeId> {
    match event {
        ScriptEvent::AdvanceClock { .. } => vec![],
        ScriptEvent::Migrate { node, to, .. } => vec![node, to],
        ScriptEvent::Trigger { node, .. }
        | ScriptEvent::InjectPacket { node, .. }
        | ScriptEvent::Checkpoint { node, .. }
        | ScriptEvent::Restore { node, .. }
        | ScriptEvent::ExpectState { node, .. }
        | ScriptEvent::ExpectVar { node, .. }
        | ScriptEvent::ExpectResponse { node, .. }
        | ScriptEvent::Crash { node, .. } => vec![node],
    }
}

fn short(id: &str) -> &str {
    &id[..id.len().min(12)]
}

pub fn outcome_text(outcome: &MigrationOutcome) -> String {
    match outcome {
        MigrationOutcome::Committed { remote_instance } => format!("committed as {remote_instance}"),
        MigrationOutcome::Aborted { reason } => format!("aborted ({reason:?})"),
        MigrationOutcome::InDoubt => "in doubt".to_owned(),
    }
}

/// One row of the charged-latency summary, shaped like the measurement table
/// the cost model was taken from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub task: &'static str,
    pub unit_seconds: f64,
    pub count: usize,
    pub charged_seconds: f64,
}

/// Counts the charged lifecycle operations in `trace`.
pub fn latency_table(trace: &[TraceEvent], costs: &CostModel) -> Vec<LatencyRow> {
    let mut counts = [0usize; 6];
    for ev in trace {
        let TraceEvent::Transition { event: Some(event), from, .. } = ev else { continue };
        match event {
            TransitionEvent::Complete if from.kind() == crate::lifecycle::StateKind::ColdStarting => counts[0] += 1,
            TransitionEvent::Pause => counts[1] += 1,
            TransitionEvent::Unpause => counts[2] += 1,
            TransitionEvent::Checkpoint => counts[3] += 1,
            TransitionEvent::Restore => {
                counts[4] += 1;
                counts[5] += 1;
            }
            _ => {}
        }
    }
    let rows = [
        ("Starting a container", costs.start_cold),
        ("Pause", costs.pause),
        ("Unpause", costs.unpause),
        ("Create a checkpoint and save it to disk", costs.checkpoint),
        ("Create a new container", costs.create_container),
        ("Start container from the checkpoint", costs.start_from_checkpoint),
    ];
    rows.iter()
        .zip(counts)
        .map(|(&(task, unit), count)| LatencyRow {
            task,
            unit_seconds: unit,
            count,
            charged_seconds: unit * count as f64,
        })
        .collect()
}

pub struct LatencyTable<'a>(pub &'a [LatencyRow]);

impl fmt::Display for LatencyTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<42} {:>8} {:>6} {:>10}", "Task", "Time (s)", "Count", "Charged")?;
        for r in self.0 {
            writeln!(f, "{:<42} {:>8.3} {:>6} {:>10.3}", r.task, r.unit_seconds, r.count, r.charged_seconds)?;
        }
        let total: f64 = self.0.iter().map(|r| r.charged_seconds).sum();
        write!(f, "{:<42} {:>8} {:>6} {:>10.3}", "Total", "", "", total)
    }
}

/// Runs `program` once per request with no suspension at all: sleeps end
/// immediately, and each `Recv` on an empty socket takes the next scheduled
/// delivery for that socket. Written independently of the backend so the two
/// can be compared.
///
/// Returns the final state; its `pc` stops short of the program's end if a
/// `Recv` ran out of scheduled deliveries.
pub fn oracle_uninterrupted(
    initial: SimState,
    program: &[SimStep],
    requests: &[Vec<u8>],
    deliveries: &[(SocketId, Vec<u8>)],
) -> Result<SimState, SimError> {
    let mut st = initial;
    let mut schedule: BTreeMap<SocketId, VecDeque<Vec<u8>>> = BTreeMap::new();
    for (socket, payload) in deliveries {
        schedule.entry(*socket).or_default().push_back(payload.clone());
    }
    for request in requests {
        st.pc = 0;
        st.sleep_deadline = None;
        st.request = request.clone();
        st.response = None;
        while st.pc < program.len() {
            match &program[st.pc] {
                SimStep::Compute(_) | SimStep::Sleep(_) => {}
                SimStep::Open { socket, peer } => {
                    let live = st.sockets.get(socket).is_some_and(|s| s.status == SocketStatus::Open);
                    if !live {
                        let port = st.next_port;
                        st.next_port = port.checked_add(1).ok_or(SimError::PortsExhausted(*socket))?;
                        let local = Endpoint::new(st.local_host.clone(), port);
                        st.sockets.insert(
                            *socket,
                            SocketState {
                                id: *socket,
                                local,
                                remote: peer.clone(),
                                status: SocketStatus::Open,
                                recv_buffer: VecDeque::new(),
                                sent_log: Vec::new(),
                                received: Vec::new(),
                            },
                        );
                    }
                }
                SimStep::Send { socket, payload } => {
                    let bytes = oracle_render(&st, payload);
                    live_socket(&mut st, *socket)?.sent_log.extend(bytes);
                }
                SimStep::Recv { socket } => {
                    let next = schedule.get_mut(socket).and_then(VecDeque::pop_front);
                    let sock = live_socket(&mut st, *socket)?;
                    match next {
                        Some(payload) => sock.received.push(payload),
                        None => return Ok(st),
                    }
                }
                SimStep::IncrCounter(name) => {
                    let v = st.vars.entry(name.clone()).or_insert(0);
                    *v = v.wrapping_add(1);
                }
                SimStep::Respond(template) => st.response = Some(oracle_render(&st, template)),
                SimStep::Close(socket) => {
                    let sock = live_socket(&mut st, *socket)?;
                    sock.status = SocketStatus::Closed;
                    sock.recv_buffer.clear();
                }
            }
            st.pc += 1;
        }
    }
    Ok(st)
}

fn live_socket(st: &mut SimState, id: SocketId) -> Result<&mut SocketState, SimError> {
    st.sockets.get_mut(&id).filter(|s| s.status == SocketStatus::Open).ok_or(SimError::InvalidSocket(id))
}

fn oracle_render(st: &SimState, template: &str) -> Vec<u8> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some((head, tail)) = rest.split_once('{') {
        out.extend_from_slice(head.as_bytes());
        let Some((key, after)) = tail.split_once('}') else {
            out.push(b'{');
            rest = tail;
            break;
        };
        let value = if key == "payload" {
            Some(st.request.clone())
        } else if let Some(var) = key.strip_prefix("var:") {
            Some(st.vars.get(var).copied().unwrap_or(0).to_string().into_bytes())
        } else {
            key.strip_prefix("recv:")
                .and_then(|s| s.parse::<SocketId>().ok())
                .map(|s| st.sockets.get(&s).and_then(|s| s.received.last().cloned()).unwrap_or_default())
        };
        match value {
            Some(v) => out.extend(v),
            None => out.extend_from_slice(format!("{{{key}}}").as_bytes()),
        }
        rest = after;
    }
    out.extend_from_slice(rest.as_bytes());
    out
}

/// Whether `trace` shows `instance` blocking on a sleep after `from` events.
pub fn blocked_on_sleep_after(trace: &[TraceEvent], instance: &InstanceId, from: usize) -> bool {
    trace[from.min(trace.len())..].iter().any(
        |e| matches!(e, TraceEvent::Blocked { instance: i, reason: BlockReason::Sleep { .. }, .. } if i == instance),
    )
}

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use edgefaas_core::config::NodeConfig;
use edgefaas_core::lifecycle::{InstanceState, StateKind, TransitionEvent};
use edgefaas_core::migration::{migrate_out, Fault, MemoryConnector, MigrationOutcome, MigrationReport};
use edgefaas_core::node::Node;
use edgefaas_core::policy::SuspendPolicy;
use edgefaas_core::proxy::WakeRule;
use edgefaas_core::registry::{FunctionSpec, Registry};
use edgefaas_core::sim::{BlockReason, SimState, SimStep, DEFAULT_PORT_BASE};
use edgefaas_core::store::CheckpointStore;
use edgefaas_core::{Endpoint, FunctionId, InstanceId, NodeId, SimTime, SocketId};
use rand::Rng;

/// Image size of the reference function: 257 MB.
pub const REFERENCE_IMAGE_SIZE: u64 = 257 * 1024 * 1024;

pub fn spec(id: &str, program: Vec<SimStep>) -> FunctionSpec {
    FunctionSpec {
        function_id: FunctionId::new(id),
        route: id.into(),
        image_digest: format!("sha256:{id}"),
        image_size: REFERENCE_IMAGE_SIZE,
        program,
        idle_timeout: None,
        memory_declared: 50 << 20,
        reentrant: false,
    }
}

pub fn counter() -> FunctionSpec {
    spec("counter", vec![SimStep::IncrCounter("c".into()), SimStep::Respond("{var:c}".into())])
}

/// The door function: asks a remote authorizer and answers with its reply.
pub fn authorize() -> FunctionSpec {
    spec(
        "door",
        vec![
            SimStep::Open { socket: 1, peer: Endpoint::new("authz", 80) },
            SimStep::Send { socket: 1, payload: "authorize {payload}".into() },
            SimStep::Recv { socket: 1 },
            SimStep::Respond("{recv:1}".into()),
        ],
    )
}

pub struct Fleet {
    pub nodes: BTreeMap<NodeId, Arc<Mutex<Node>>>,
    _dirs: Vec<tempfile::TempDir>,
}

impl Fleet {
    pub fn new(ids: &[&str], specs: Vec<FunctionSpec>, policy: SuspendPolicy) -> Self {
        let mut config = NodeConfig::default();
        config.policy.suspend_mode = policy;
        Self::with_config(ids, specs, config)
    }

    pub fn with_config(ids: &[&str], specs: Vec<FunctionSpec>, config: NodeConfig) -> Self {
        let mut nodes = BTreeMap::new();
        let mut dirs = Vec::new();
        for id in ids {
            let dir = tempfile::tempdir().unwrap();
            let store = CheckpointStore::open(dir.path()).unwrap();
            let node = Node::new(NodeId::new(*id), config.clone(), Registry::new(specs.clone()).unwrap(), store);
            nodes.insert(NodeId::new(*id), Arc::new(Mutex::new(node)));
            dirs.push(dir);
        }
        Fleet { nodes, _dirs: dirs }
    }

    pub fn node(&self, id: &str) -> std::sync::MutexGuard<'_, Node> {
        self.nodes[&NodeId::new(id)].lock().unwrap()
    }

    pub fn advance_all(&self, to: SimTime) {
        for n in self.nodes.values() {
            n.lock().unwrap().advance_clock(to).unwrap();
        }
    }

    pub fn connector(&self, except: &str, fault: Option<Fault>) -> MemoryConnector {
        let mut c = MemoryConnector { fault, ..MemoryConnector::default() };
        for (id, n) in &self.nodes {
            if id.as_str() != except {
                c.nodes.insert(id.clone(), n.clone());
            }
        }
        c
    }

    /// Migrates and hands any stranded packets to the target.
    pub fn migrate(
        &self,
        from: &str,
        id: &InstanceId,
        to: &str,
        fault: Option<Fault>,
        chunk: usize,
    ) -> MigrationReport {
        let mut conn = self.connector(from, fault);
        let report = migrate_out(&mut self.node(from), id, &NodeId::new(to), &mut conn, chunk).unwrap();
        if matches!(report.outcome, MigrationOutcome::Committed { .. }) && !report.stranded.is_empty() {
            self.node(to).accept_stranded(id, report.stranded.clone()).unwrap();
        }
        report
    }

    /// Nodes on which `id` is live.
    pub fn owners(&self, id: &InstanceId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.lock().unwrap().instance(id).is_some_and(|i| i.is_owner()))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// The sim state a node gives its first instance.
pub fn first_instance_state(node: &str) -> SimState {
    SimState::new(1, node, DEFAULT_PORT_BASE)
}

/// A random program whose sockets are opened before use and never used
/// after they are closed.
pub fn random_program(rng: &mut impl Rng) -> Vec<SimStep> {
    let len = rng.random_range(1..=12);
    let mut unopened: Vec<SocketId> = vec![1, 2, 3];
    let mut open: Vec<SocketId> = Vec::new();
    let mut program = Vec::with_capacity(len);
    let vars = ["a", "b", "c"];
    while program.len() < len {
        let step = match rng.random_range(0..9) {
            0 => SimStep::Compute(rng.random_range(0..50)),
            1 => SimStep::Sleep(SimTime::from_millis(rng.random_range(1..=20_000))),
            2 if !unopened.is_empty() => {
                let s = unopened.remove(rng.random_range(0..unopened.len()));
                open.push(s);
                SimStep::Open { socket: s, peer: Endpoint::new(format!("peer{s}"), 80 + s as u16) }
            }
            3 if !open.is_empty() => {
                let s = open[rng.random_range(0..open.len())];
                let templates = ["ping", "{payload}", "{var:a}", "got {recv:1}"];
                SimStep::Send { socket: s, payload: templates[rng.random_range(0..templates.len())].into() }
            }
            4 | 5 if !open.is_empty() => SimStep::Recv { socket: open[rng.random_range(0..open.len())] },
            6 => SimStep::IncrCounter(vars[rng.random_range(0..vars.len())].into()),
            7 => {
                let templates = ["ok", "{var:a}/{var:b}/{var:c}", "{payload}:{recv:1}:{recv:2}", "{recv:3}{zz}"];
                SimStep::Respond(templates[rng.random_range(0..templates.len())].into())
            }
            8 if !open.is_empty() && rng.random_bool(0.3) => {
                SimStep::Close(open.remove(rng.random_range(0..open.len())))
            }
            _ => continue,
        };
        program.push(step);
    }
    program
}

pub fn random_payload(rng: &mut impl Rng) -> Vec<u8> {
    let n = rng.random_range(0..12);
    (0..n).map(|_| rng.random()).collect()
}

/// Endpoints (remote, local) of `socket`, from resident state or the wake rules.
pub fn flow(node: &Node, id: &InstanceId, socket: SocketId) -> Option<(Endpoint, Endpoint)> {
    let inst = node.instance(id)?;
    if let Some(s) = inst.sim.socket(socket) {
        return Some((s.remote.clone(), s.local.clone()));
    }
    inst.wake_rules.iter().find_map(|r| match r {
        WakeRule::Packet { src: Some(src), dst, socket_id, .. } if *socket_id == socket => {
            Some((src.clone(), dst.clone()))
        }
        _ => None,
    })
}

/// What a suspended execution was fed, for replay through the oracle.
pub struct Driven {
    pub final_state: SimState,
    pub requests: Vec<Vec<u8>>,
    pub deliveries: Vec<(SocketId, Vec<u8>)>,
    pub suspensions: usize,
    pub migrations: usize,
}

/// Runs the `route` function once per request on node A of a two-node fleet,
/// interleaving random checkpoints, restores, migrations, clock moves and
/// packet deliveries until each run completes.
pub fn drive(rng: &mut impl Rng, fleet: &Fleet, route: &str, requests: Vec<Vec<u8>>) -> Result<Driven, String> {
    let mut owner = "A".to_owned();
    let mut now = SimTime::ZERO;
    let mut deliveries = Vec::new();
    let mut suspensions = 0;
    let mut migrations = 0;
    let mut id = None;
    for req in &requests {
        let r = fleet.node(&owner).trigger(route, req.clone()).map_err(|e| format!("trigger: {e}"))?;
        let inst_id = r.record.instance_id.clone();
        if id.get_or_insert(inst_id.clone()) != &inst_id {
            return Err(format!("second instance {inst_id} appeared"));
        }
        let mut steps = 0;
        loop {
            steps += 1;
            if steps > 400 {
                return Err("no progress".into());
            }
            let (state, block, completed) = {
                let n = fleet.node(&owner);
                let inst = n.instance(&inst_id).ok_or("instance vanished")?;
                let s = n.summary(inst);
                (inst.state.clone(), inst.block, s.completed)
            };
            if completed {
                break;
            }
            if let InstanceState::Failed(c) = &state {
                return Err(format!("instance failed: {c}"));
            }
            match rng.random_range(0..6) {
                0 if matches!(state.kind(), StateKind::Running | StateKind::Blocked | StateKind::Paused) => {
                    fleet.node(&owner).checkpoint(&inst_id).map_err(|e| format!("checkpoint: {e}"))?;
                    suspensions += 1;
                }
                1 if matches!(
                    state.kind(),
                    StateKind::Running | StateKind::Blocked | StateKind::Paused | StateKind::Checkpointed
                ) =>
                {
                    let to = if owner == "A" { "B" } else { "A" };
                    let report = fleet.migrate(&owner, &inst_id, to, None, rng.random_range(1..=4096));
                    match report.outcome {
                        MigrationOutcome::Committed { .. } => {
                            owner = to.to_owned();
                            migrations += 1;
                        }
                        other => return Err(format!("migration failed: {other:?}")),
                    }
                }
                2 if state.kind() == StateKind::Checkpointed => {
                    fleet.node(&owner).restore_instance_by_id(&inst_id).map_err(|e| format!("restore: {e}"))?;
                }
                _ => match block {
                    Some(BlockReason::Sleep { wake_at }) => {
                        let target = if rng.random_bool(0.5) {
                            wake_at
                        } else {
                            now + (wake_at - now).min(SimTime::from_millis(rng.random_range(1..=5000)))
                        };
                        now = now.max(target);
                        fleet.advance_all(now);
                    }
                    Some(BlockReason::NetRecv { socket }) => {
                        let (remote, local) =
                            flow(&fleet.node(&owner), &inst_id, socket).ok_or("no flow for socket")?;
                        let payload = random_payload(rng);
                        fleet
                            .node(&owner)
                            .inject_packet(remote, local, payload.clone())
                            .map_err(|e| format!("inject: {e}"))?;
                        deliveries.push((socket, payload));
                    }
                    None => return Err(format!("not completed but nothing pending in {state}")),
                },
            }
        }
    }
    let n = fleet.node(&owner);
    let final_state = n.instance(id.as_ref().ok_or("no requests")?).ok_or("instance vanished")?.sim.clone();
    Ok(Driven { final_state, requests, deliveries, suspensions, migrations })
}

/// Field-by-field comparison, ignoring only the clock observed at the last run.
pub fn same_state(actual: &SimState, expected: &SimState) -> Result<(), String> {
    let mut a = actual.clone();
    let mut e = expected.clone();
    a.clock_at_snapshot = SimTime::ZERO;
    e.clock_at_snapshot = SimTime::ZERO;
    if a == e {
        Ok(())
    } else {
        Err(format!("diverged:\n actual   {a:?}\n expected {e:?}"))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Move {
    Event(TransitionEvent),
    Block(BlockReason),
    Unblock,
}

pub const EVENTS: [TransitionEvent; 11] = [
    TransitionEvent::Invoke,
    TransitionEvent::Pause,
    TransitionEvent::Unpause,
    TransitionEvent::Checkpoint,
    TransitionEvent::Restore,
    TransitionEvent::MigrateStart,
    TransitionEvent::MigrateCommit,
    TransitionEvent::MigrateAbort,
    TransitionEvent::Reap,
    TransitionEvent::Fail,
    TransitionEvent::Complete,
];

/// The declared table, restated.
pub fn table(from: StateKind, m: Move, restoring_blocks: bool) -> Option<StateKind> {
    use StateKind as S;
    use TransitionEvent as E;
    Some(match (from, m) {
        (S::Terminated | S::Failed, _) => return None,
        (_, Move::Event(E::Fail)) => S::Failed,
        (S::Registered, Move::Event(E::Invoke)) => S::ColdStarting,
        (S::ColdStarting, Move::Event(E::Complete)) => S::Running,
        (S::Running, Move::Event(E::Pause)) => S::Paused,
        (S::Paused, Move::Event(E::Unpause)) => S::Running,
        (S::Running, Move::Event(E::Checkpoint)) => S::Checkpointing,
        (S::Blocked, Move::Event(E::Checkpoint)) => S::Checkpointing,
        (S::Paused, Move::Event(E::Checkpoint)) => S::Checkpointing,
        (S::Checkpointing, Move::Event(E::Complete)) => S::Checkpointed,
        (S::Checkpointed, Move::Event(E::Restore)) => S::Restoring,
        (S::Restoring, Move::Event(E::Complete)) => {
            if restoring_blocks {
                S::Blocked
            } else {
                S::Running
            }
        }
        (S::Checkpointed, Move::Event(E::MigrateStart)) => S::MigratingOut,
        (S::MigratingOut, Move::Event(E::MigrateCommit)) => S::Terminated,
        (S::MigratingOut, Move::Event(E::MigrateAbort)) => S::Checkpointed,
        (S::Paused, Move::Event(E::Reap)) => S::Terminated,
        (S::Checkpointed, Move::Event(E::Reap)) => S::Terminated,
        (S::Running | S::Blocked, Move::Block(_)) => S::Blocked,
        (S::Running | S::Blocked, Move::Unblock) => S::Running,
        _ => return None,
    })
}

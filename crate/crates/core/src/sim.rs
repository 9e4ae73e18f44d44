//! Deterministic step-program backend standing in for a container plus its
//! process checkpoints.
//!
//! A function is an ordered list of [`SimStep`]s. [`run_until_block`] executes
//! steps against a harness-owned clock until the program either finishes or
//! has to wait for a timer or a socket. Execution only ever stops on those
//! boundaries, so a [`SimState`] is always in a consistent, snapshottable
//! shape.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::types::{Endpoint, SimTime, SocketId};

/// Default guard against runaway programs, in ticks per `run_until_block` call.
pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

/// First local port handed out when an instance opens a socket.
pub const DEFAULT_PORT_BASE: u16 = 40_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStep {
    /// Burn `units` ticks of abstract CPU work.
    Compute(u64),
    /// Sleep until `clock + duration`; the deadline is absolute, so time spent
    /// suspended counts toward it.
    Sleep(SimTime),
    Open {
        socket: SocketId,
        peer: Endpoint,
    },
    /// Append the rendered template to the socket's outbound log.
    Send {
        socket: SocketId,
        payload: String,
    },
    /// Consume one buffered message, or block until one arrives.
    Recv {
        socket: SocketId,
    },
    IncrCounter(String),
    /// Set the invocation's response to the rendered template.
    Respond(String),
    Close(SocketId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BlockReason {
    Sleep { wake_at: SimTime },
    NetRecv { socket: SocketId },
}

impl fmt::Display for BlockReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockReason::Sleep { wake_at } => write!(f, "Sleep(wake_at={wake_at})"),
            BlockReason::NetRecv { socket } => write!(f, "NetRecv(s{socket})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Blocked(BlockReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SocketStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SocketState {
    pub id: SocketId,
    pub local: Endpoint,
    pub remote: Endpoint,
    pub status: SocketStatus,
    /// Delivered but not yet consumed messages, oldest first.
    pub recv_buffer: VecDeque<Vec<u8>>,
    pub sent_log: Vec<u8>,
    /// Messages consumed by `Recv`, in order.
    pub received: Vec<Vec<u8>>,
}

impl SocketState {
    pub fn is_open(&self) -> bool {
        self.status == SocketStatus::Open
    }

    /// Total buffered bytes.
    pub fn buffered_len(&self) -> usize {
        self.recv_buffer.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimState {
    pub pc: usize,
    pub vars: BTreeMap<String, i64>,
    pub sockets: BTreeMap<SocketId, SocketState>,
    /// Clock observed by the most recent `run_until_block`.
    pub clock_at_snapshot: SimTime,
    pub rng_seed: u64,
    /// Absolute deadline of the sleep at `pc`, once that sleep has started.
    pub sleep_deadline: Option<SimTime>,
    pub local_host: String,
    pub next_port: u16,
    /// Payload of the trigger that started the current run.
    pub request: Vec<u8>,
    pub response: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("socket s{0} is unknown or closed")]
    InvalidSocket(SocketId),
    #[error("step limit of {limit} ticks exceeded")]
    StepLimitExceeded { limit: u64 },
    #[error("program counter {pc} is past the end of a {len}-step program")]
    PcOutOfRange { pc: usize, len: usize },
    #[error("no local ports left for socket s{0}")]
    PortsExhausted(SocketId),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("step {step} uses socket s{socket} before it is opened")]
    SocketNotOpened { step: usize, socket: SocketId },
    #[error("step {step} opens socket s{socket} a second time")]
    SocketReopened { step: usize, socket: SocketId },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("corrupt snapshot: {0}")]
pub struct CorruptSnapshot(pub String);

/// Checks that every socket referenced by `Send`/`Recv`/`Close` is produced by
/// an earlier `Open` in program order.
pub fn validate_program(program: &[SimStep]) -> Result<(), ProgramError> {
    let mut opened = std::collections::BTreeSet::new();
    for (step, s) in program.iter().enumerate() {
        match s {
            SimStep::Open { socket, .. } => {
                if !opened.insert(*socket) {
                    return Err(ProgramError::SocketReopened { step, socket: *socket });
                }
            }
            SimStep::Send { socket, .. } | SimStep::Recv { socket } | SimStep::Close(socket)
                if !opened.contains(socket) =>
            {
                return Err(ProgramError::SocketNotOpened { step, socket: *socket });
            }
            _ => {}
        }
    }
    Ok(())
}

impl SimState {
    pub fn new(rng_seed: u64, local_host: impl Into<String>, port_base: u16) -> Self {
        SimState {
            pc: 0,
            vars: BTreeMap::new(),
            sockets: BTreeMap::new(),
            clock_at_snapshot: SimTime::ZERO,
            rng_seed,
            sleep_deadline: None,
            local_host: local_host.into(),
            next_port: port_base,
            request: Vec::new(),
            response: None,
        }
    }

    pub fn is_completed(&self, program: &[SimStep]) -> bool {
        self.pc >= program.len()
    }

    /// Starts another pass over the program for a new trigger. Variables and
    /// sockets persist; that is what makes the function stateful.
    pub fn restart(&mut self, request: Vec<u8>) {
        self.pc = 0;
        self.sleep_deadline = None;
        self.request = request;
        self.response = None;
    }

    pub fn socket(&self, id: SocketId) -> Option<&SocketState> {
        self.sockets.get(&id)
    }

    /// Returns the open socket whose local end is `local` and remote end is `remote`.
    pub fn socket_by_flow(&self, remote: &Endpoint, local: &Endpoint) -> Option<SocketId> {
        self.sockets.values().find(|s| s.is_open() && &s.local == local && &s.remote == remote).map(|s| s.id)
    }

    /// Whether `reason` would still block right now.
    pub fn still_blocked(&self, reason: &BlockReason, now: SimTime) -> bool {
        match reason {
            BlockReason::Sleep { wake_at } => now < *wake_at,
            BlockReason::NetRecv { socket } => {
                self.sockets.get(socket).is_some_and(|s| s.is_open() && s.recv_buffer.is_empty())
            }
        }
    }

    fn render(&self, template: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(template.len());
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            out.extend_from_slice(&rest.as_bytes()[..open]);
            let after = &rest[open + 1..];
            let Some(close) = after.find('}') else {
                out.extend_from_slice(&rest.as_bytes()[open..]);
                return out;
            };
            let key = &after[..close];
            match self.placeholder(key) {
                Some(bytes) => out.extend_from_slice(&bytes),
                None => {
                    out.push(b'{');
                    out.extend_from_slice(key.as_bytes());
                    out.push(b'}');
                }
            }
            rest = &after[close + 1..];
        }
        out.extend_from_slice(rest.as_bytes());
        out
    }

    fn placeholder(&self, key: &str) -> Option<Vec<u8>> {
        if key == "payload" {
            return Some(self.request.clone());
        }
        if let Some(name) = key.strip_prefix("var:") {
            return Some(self.vars.get(name).copied().unwrap_or(0).to_string().into_bytes());
        }
        if let Some(id) = key.strip_prefix("recv:") {
            let id: SocketId = id.parse().ok()?;
            let last = self.sockets.get(&id).and_then(|s| s.received.last());
            return Some(last.cloned().unwrap_or_default());
        }
        None
    }
}

/// Runs `program` from `state.pc` until it completes or blocks.
pub fn run_until_block(
    state: &mut SimState,
    program: &[SimStep],
    clock: SimTime,
    step_limit: u64,
) -> Result<Outcome, SimError> {
    state.clock_at_snapshot = clock;
    let mut ticks: u64 = 0;
    loop {
        if state.pc > program.len() {
            return Err(SimError::PcOutOfRange { pc: state.pc, len: program.len() });
        }
        let Some(step) = program.get(state.pc) else {
            return Ok(Outcome::Completed);
        };
        let cost = match step {
            SimStep::Compute(units) => units.saturating_add(1),
            _ => 1,
        };
        ticks = ticks.saturating_add(cost);
        if ticks > step_limit {
            return Err(SimError::StepLimitExceeded { limit: step_limit });
        }
        match step {
            SimStep::Compute(_) => {}
            SimStep::Sleep(duration) => {
                let wake_at = *state.sleep_deadline.get_or_insert(clock + *duration);
                if clock < wake_at {
                    return Ok(Outcome::Blocked(BlockReason::Sleep { wake_at }));
                }
                state.sleep_deadline = None;
            }
            SimStep::Open { socket, peer } => {
                // a later run reuses a live connection and reconnects a closed one
                if state.sockets.get(socket).is_some_and(|s| s.is_open()) {
                    state.pc += 1;
                    continue;
                }
                let port = state.next_port;
                state.next_port = port.checked_add(1).ok_or(SimError::PortsExhausted(*socket))?;
                state.sockets.insert(
                    *socket,
                    SocketState {
                        id: *socket,
                        local: Endpoint::new(state.local_host.clone(), port),
                        remote: peer.clone(),
                        status: SocketStatus::Open,
                        recv_buffer: VecDeque::new(),
                        sent_log: Vec::new(),
                        received: Vec::new(),
                    },
                );
            }
            SimStep::Send { socket, payload } => {
                let bytes = state.render(payload);
                let sock = open_socket(state, *socket)?;
                sock.sent_log.extend_from_slice(&bytes);
            }
            SimStep::Recv { socket } => {
                let sock = open_socket(state, *socket)?;
                match sock.recv_buffer.pop_front() {
                    Some(msg) => sock.received.push(msg),
                    None => return Ok(Outcome::Blocked(BlockReason::NetRecv { socket: *socket })),
                }
            }
            SimStep::IncrCounter(var) => {
                let v = state.vars.entry(var.clone()).or_insert(0);
                *v = v.wrapping_add(1);
            }
            SimStep::Respond(template) => {
                state.response = Some(state.render(template));
            }
            SimStep::Close(socket) => {
                let sock = open_socket(state, *socket)?;
                sock.status = SocketStatus::Closed;
                sock.recv_buffer.clear();
            }
        }
        state.pc += 1;
    }
}

fn open_socket(state: &mut SimState, id: SocketId) -> Result<&mut SocketState, SimError> {
    match state.sockets.get_mut(&id) {
        Some(s) if s.is_open() => Ok(s),
        _ => Err(SimError::InvalidSocket(id)),
    }
}

/// Appends `payload` to the socket's receive buffer.
pub fn deliver(state: &mut SimState, socket: SocketId, payload: Vec<u8>) -> Result<(), SimError> {
    open_socket(state, socket)?.recv_buffer.push_back(payload);
    Ok(())
}

const MAGIC: &[u8; 4] = b"EFSS";
pub const SNAPSHOT_VERSION: u8 = 1;
const TRAILER_LEN: usize = 8;

/// Canonical byte encoding of `state`.
///
/// Layout: magic `EFSS`, version byte, then six sections (pc, vars, sockets,
/// clock, seed, run context), each prefixed by its little-endian `u32`
/// length, then the first 8 bytes of the SHA-256 of everything before it.
/// All integers are little-endian and fixed width; maps are written in key
/// order, so equal states always encode to equal bytes.
pub fn snapshot(state: &SimState) -> Vec<u8> {
    let mut out = Vec::with_capacity(128);
    out.extend_from_slice(MAGIC);
    out.push(SNAPSHOT_VERSION);

    section(&mut out, |b| put_u64(b, state.pc as u64));
    section(&mut out, |b| {
        put_u32(b, state.vars.len() as u32);
        for (name, value) in &state.vars {
            put_bytes(b, name.as_bytes());
            b.extend_from_slice(&value.to_le_bytes());
        }
    });
    section(&mut out, |b| {
        put_u32(b, state.sockets.len() as u32);
        for sock in state.sockets.values() {
            put_u32(b, sock.id);
            put_endpoint(b, &sock.local);
            put_endpoint(b, &sock.remote);
            b.push(match sock.status {
                SocketStatus::Open => 0,
                SocketStatus::Closed => 1,
            });
            put_u32(b, sock.recv_buffer.len() as u32);
            for msg in &sock.recv_buffer {
                put_bytes(b, msg);
            }
            put_bytes(b, &sock.sent_log);
            put_u32(b, sock.received.len() as u32);
            for msg in &sock.received {
                put_bytes(b, msg);
            }
        }
    });
    section(&mut out, |b| put_u64(b, state.clock_at_snapshot.as_millis()));
    section(&mut out, |b| put_u64(b, state.rng_seed));
    section(&mut out, |b| {
        match state.sleep_deadline {
            Some(t) => {
                b.push(1);
                put_u64(b, t.as_millis());
            }
            None => b.push(0),
        }
        put_bytes(b, state.local_host.as_bytes());
        b.extend_from_slice(&state.next_port.to_le_bytes());
        put_bytes(b, &state.request);
        match &state.response {
            Some(r) => {
                b.push(1);
                put_bytes(b, r);
            }
            None => b.push(0),
        }
    });

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..TRAILER_LEN]);
    out
}

/// Exact inverse of [`snapshot`].
pub fn resume(blob: &[u8]) -> Result<SimState, CorruptSnapshot> {
    let corrupt = |m: &str| CorruptSnapshot(m.to_owned());
    if blob.len() < MAGIC.len() + 1 + TRAILER_LEN {
        return Err(corrupt("too short"));
    }
    if &blob[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    if blob[4] != SNAPSHOT_VERSION {
        return Err(CorruptSnapshot(format!("unsupported format version {}", blob[4])));
    }
    let (body, trailer) = blob.split_at(blob.len() - TRAILER_LEN);
    if Sha256::digest(body)[..TRAILER_LEN] != *trailer {
        return Err(corrupt("integrity trailer mismatch"));
    }

    let mut r = Reader { buf: &body[5..] };
    let mut s = r.section()?;
    let pc = usize::try_from(s.u64()?).map_err(|_| corrupt("pc overflow"))?;
    s.finish()?;

    let mut s = r.section()?;
    let mut vars = BTreeMap::new();
    for _ in 0..s.u32()? {
        let name = s.string()?;
        let value = i64::from_le_bytes(s.array()?);
        if vars.last_key_value().is_some_and(|(k, _)| *k >= name) {
            return Err(corrupt("vars not strictly sorted"));
        }
        vars.insert(name, value);
    }
    s.finish()?;

    let mut s = r.section()?;
    let mut sockets = BTreeMap::new();
    for _ in 0..s.u32()? {
        let id = s.u32()?;
        let local = s.endpoint()?;
        let remote = s.endpoint()?;
        let status = match s.u8()? {
            0 => SocketStatus::Open,
            1 => SocketStatus::Closed,
            _ => return Err(corrupt("bad socket status")),
        };
        let mut recv_buffer = VecDeque::new();
        for _ in 0..s.u32()? {
            recv_buffer.push_back(s.bytes()?);
        }
        let sent_log = s.bytes()?;
        let mut received = Vec::new();
        for _ in 0..s.u32()? {
            received.push(s.bytes()?);
        }
        if sockets.last_key_value().is_some_and(|(k, _)| *k >= id) {
            return Err(corrupt("sockets not strictly sorted"));
        }
        sockets.insert(id, SocketState { id, local, remote, status, recv_buffer, sent_log, received });
    }
    s.finish()?;

    let mut s = r.section()?;
    let clock_at_snapshot = SimTime::from_millis(s.u64()?);
    s.finish()?;

    let mut s = r.section()?;
    let rng_seed = s.u64()?;
    s.finish()?;

    let mut s = r.section()?;
    let sleep_deadline = match s.u8()? {
        0 => None,
        1 => Some(SimTime::from_millis(s.u64()?)),
        _ => return Err(corrupt("bad deadline flag")),
    };
    let local_host = s.string()?;
    let next_port = u16::from_le_bytes(s.array()?);
    let request = s.bytes()?;
    let response = match s.u8()? {
        0 => None,
        1 => Some(s.bytes()?),
        _ => return Err(corrupt("bad response flag")),
    };
    s.finish()?;
    r.finish()?;

    Ok(SimState {
        pc,
        vars,
        sockets,
        clock_at_snapshot,
        rng_seed,
        sleep_deadline,
        local_host,
        next_port,
        request,
        response,
    })
}

fn section(out: &mut Vec<u8>, fill: impl FnOnce(&mut Vec<u8>)) {
    let mut body = Vec::new();
    fill(&mut body);
    put_u32(out, body.len() as u32);
    out.extend_from_slice(&body);
}

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(b: &mut Vec<u8>, v: u64) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(b: &mut Vec<u8>, data: &[u8]) {
    put_u32(b, data.len() as u32);
    b.extend_from_slice(data);
}

fn put_endpoint(b: &mut Vec<u8>, e: &Endpoint) {
    put_bytes(b, e.host.as_bytes());
    b.extend_from_slice(&e.port.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CorruptSnapshot> {
        if self.buf.len() < n {
            return Err(CorruptSnapshot("truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CorruptSnapshot> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CorruptSnapshot> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CorruptSnapshot> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CorruptSnapshot> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, CorruptSnapshot> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn string(&mut self) -> Result<String, CorruptSnapshot> {
        String::from_utf8(self.bytes()?).map_err(|_| CorruptSnapshot("invalid utf-8".into()))
    }

    fn endpoint(&mut self) -> Result<Endpoint, CorruptSnapshot> {
        let host = self.string()?;
        let port = u16::from_le_bytes(self.array()?);
        Ok(Endpoint { host, port })
    }

    fn section(&mut self) -> Result<Reader<'a>, CorruptSnapshot> {
        let n = self.u32()? as usize;
        Ok(Reader { buf: self.take(n)? })
    }

    fn finish(&self) -> Result<(), CorruptSnapshot> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(CorruptSnapshot("trailing bytes".into()))
        }
    }
}

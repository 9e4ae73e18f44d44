//! Moving a checkpointed instance to another node.
//!
//! Frames are a 1-byte tag, a 4-byte big-endian payload length and the
//! payload:
//!
//! | tag | message        | payload                                                                    |
//! |-----|----------------|----------------------------------------------------------------------------|
//! | 1   | Offer          | archive id (32 bytes), image digest (u16 length + UTF-8), blob size (u64), memory required (u64) |
//! | 2   | Accept         | empty                                                                      |
//! | 3   | RejectNoImage  | empty                                                                      |
//! | 4   | RejectCapacity | empty                                                                      |
//! | 5   | Chunk          | offset (u64), bytes                                                        |
//! | 6   | Complete       | checksum (32 bytes)                                                        |
//! | 7   | Restored       | instance id (UTF-8)                                                        |
//! | 8   | Abort          | reason (UTF-8)                                                             |
//!
//! All integers are big-endian. The transferred blob is the archive's
//! manifest length (u32), manifest and state blob; chunk offsets run
//! contiguously from zero.
//!
//! The target commits first: once it has restored the instance it answers
//! `Restored`, and only then does the source terminate its copy. If the
//! connection dies after `Complete` went out, the source cannot tell whether
//! the target restored. It reconnects and offers the same archive again; a
//! target that already holds the instance answers `Restored`, one that does
//! not answers `Accept` and is told to `Abort`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::node::{JournalPhase, Node, NodeError};
use crate::proxy::Delivery;
use crate::store::{archive_checksum, archive_id_for, ArchiveManifest, CheckpointArchive};
use crate::types::{ArchiveId, InstanceId, NodeId};

pub const TAG_OFFER: u8 = 1;
pub const TAG_ACCEPT: u8 = 2;
pub const TAG_REJECT_NO_IMAGE: u8 = 3;
pub const TAG_REJECT_CAPACITY: u8 = 4;
pub const TAG_CHUNK: u8 = 5;
pub const TAG_COMPLETE: u8 = 6;
pub const TAG_RESTORED: u8 = 7;
pub const TAG_ABORT: u8 = 8;

pub const FRAME_HEADER_LEN: usize = 5;
/// Largest payload a peer will accept in one frame.
pub const MAX_FRAME_PAYLOAD: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MigrationMessage {
    Offer { archive_id: [u8; 32], image_digest: String, blob_size: u64, memory_required: u64 },
    Accept,
    RejectNoImage,
    RejectCapacity,
    Chunk { offset: u64, bytes: Vec<u8> },
    Complete { checksum: [u8; 32] },
    Restored { instance_id: String },
    Abort { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("unknown frame tag {0}")]
    UnknownTag(u8),
    #[error("frame payload of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("malformed {0} payload")]
    Malformed(&'static str),
}

impl MigrationMessage {
    pub fn tag(&self) -> u8 {
        match self {
            MigrationMessage::Offer { .. } => TAG_OFFER,
            MigrationMessage::Accept => TAG_ACCEPT,
            MigrationMessage::RejectNoImage => TAG_REJECT_NO_IMAGE,
            MigrationMessage::RejectCapacity => TAG_REJECT_CAPACITY,
            MigrationMessage::Chunk { .. } => TAG_CHUNK,
            MigrationMessage::Complete { .. } => TAG_COMPLETE,
            MigrationMessage::Restored { .. } => TAG_RESTORED,
            MigrationMessage::Abort { .. } => TAG_ABORT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MigrationMessage::Offer { .. } => "Offer",
            MigrationMessage::Accept => "Accept",
            MigrationMessage::RejectNoImage => "RejectNoImage",
            MigrationMessage::RejectCapacity => "RejectCapacity",
            MigrationMessage::Chunk { .. } => "Chunk",
            MigrationMessage::Complete { .. } => "Complete",
            MigrationMessage::Restored { .. } => "Restored",
            MigrationMessage::Abort { .. } => "Abort",
        }
    }

    /// Short human-readable form for traces.
    pub fn summary(&self) -> String {
        match self {
            MigrationMessage::Offer { archive_id, blob_size, .. } => {
                format!("Offer({}, {blob_size} bytes)", &hex::encode(archive_id)[..12])
            }
            MigrationMessage::Chunk { offset, bytes } => format!("Chunk(@{offset}, {} bytes)", bytes.len()),
            MigrationMessage::Complete { checksum } => format!("Complete({})", &hex::encode(checksum)[..12]),
            MigrationMessage::Restored { instance_id } => format!("Restored({instance_id})"),
            MigrationMessage::Abort { reason } => format!("Abort({reason})"),
            other => other.name().to_owned(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        match self {
            MigrationMessage::Offer { archive_id, image_digest, blob_size, memory_required } => {
                payload.extend_from_slice(archive_id);
                let digest = image_digest.as_bytes();
                let len = u16::try_from(digest.len()).expect("image digest shorter than 64 KiB");
                payload.extend_from_slice(&len.to_be_bytes());
                payload.extend_from_slice(digest);
                payload.extend_from_slice(&blob_size.to_be_bytes());
                payload.extend_from_slice(&memory_required.to_be_bytes());
            }
            MigrationMessage::Accept | MigrationMessage::RejectNoImage | MigrationMessage::RejectCapacity => {}
            MigrationMessage::Chunk { offset, bytes } => {
                payload.extend_from_slice(&offset.to_be_bytes());
                payload.extend_from_slice(bytes);
            }
            MigrationMessage::Complete { checksum } => payload.extend_from_slice(checksum),
            MigrationMessage::Restored { instance_id } => payload.extend_from_slice(instance_id.as_bytes()),
            MigrationMessage::Abort { reason } => payload.extend_from_slice(reason.as_bytes()),
        }
        let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
        frame.push(self.tag());
        frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        frame.extend_from_slice(&payload);
        frame
    }

    /// Decodes one frame from the front of `buf`, returning the message and
    /// the number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), FrameError> {
        if buf.len() < FRAME_HEADER_LEN {
            return Err(FrameError::Truncated { needed: FRAME_HEADER_LEN, have: buf.len() });
        }
        let tag = buf[0];
        let len = u32::from_be_bytes(buf[1..5].try_into().expect("4 bytes"));
        if len > MAX_FRAME_PAYLOAD {
            return Err(FrameError::TooLarge(len));
        }
        let total = FRAME_HEADER_LEN + len as usize;
        if buf.len() < total {
            return Err(FrameError::Truncated { needed: total, have: buf.len() });
        }
        Ok((Self::decode_payload(tag, &buf[FRAME_HEADER_LEN..total])?, total))
    }

    fn decode_payload(tag: u8, p: &[u8]) -> Result<Self, FrameError> {
        let empty = |name, msg| if p.is_empty() { Ok(msg) } else { Err(FrameError::Malformed(name)) };
        match tag {
            TAG_OFFER => {
                let bad = FrameError::Malformed("Offer");
                let archive_id: [u8; 32] = p.get(..32).ok_or(bad.clone())?.try_into().expect("32 bytes");
                let dlen = u16::from_be_bytes(p.get(32..34).ok_or(bad.clone())?.try_into().expect("2 bytes")) as usize;
                let digest = p.get(34..34 + dlen).ok_or(bad.clone())?;
                let image_digest = String::from_utf8(digest.to_vec()).map_err(|_| bad.clone())?;
                let rest = &p[34 + dlen..];
                if rest.len() != 16 {
                    return Err(bad);
                }
                let blob_size = u64::from_be_bytes(rest[..8].try_into().expect("8 bytes"));
                let memory_required = u64::from_be_bytes(rest[8..].try_into().expect("8 bytes"));
                Ok(MigrationMessage::Offer { archive_id, image_digest, blob_size, memory_required })
            }
            TAG_ACCEPT => empty("Accept", MigrationMessage::Accept),
            TAG_REJECT_NO_IMAGE => empty("RejectNoImage", MigrationMessage::RejectNoImage),
            TAG_REJECT_CAPACITY => empty("RejectCapacity", MigrationMessage::RejectCapacity),
            TAG_CHUNK => {
                let offset = p.get(..8).ok_or(FrameError::Malformed("Chunk"))?;
                Ok(MigrationMessage::Chunk {
                    offset: u64::from_be_bytes(offset.try_into().expect("8 bytes")),
                    bytes: p[8..].to_vec(),
                })
            }
            TAG_COMPLETE => {
                let checksum = p.try_into().map_err(|_| FrameError::Malformed("Complete"))?;
                Ok(MigrationMessage::Complete { checksum })
            }
            TAG_RESTORED => Ok(MigrationMessage::Restored {
                instance_id: String::from_utf8(p.to_vec()).map_err(|_| FrameError::Malformed("Restored"))?,
            }),
            TAG_ABORT => Ok(MigrationMessage::Abort {
                reason: String::from_utf8(p.to_vec()).map_err(|_| FrameError::Malformed("Abort"))?,
            }),
            other => Err(FrameError::UnknownTag(other)),
        }
    }

    /// Reads exactly one frame.
    pub fn read_from(r: &mut impl Read) -> Result<Self, LinkError> {
        let mut header = [0u8; FRAME_HEADER_LEN];
        r.read_exact(&mut header).map_err(LinkError::from_io)?;
        let len = u32::from_be_bytes(header[1..].try_into().expect("4 bytes"));
        if len > MAX_FRAME_PAYLOAD {
            return Err(LinkError::Frame(FrameError::TooLarge(len)));
        }
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload).map_err(LinkError::from_io)?;
        Ok(Self::decode_payload(header[0], &payload)?)
    }
}

/// The bytes streamed in chunks: manifest length, manifest, state blob.
pub fn encode_transfer(archive: &CheckpointArchive) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + archive.manifest_bytes.len() + archive.state_blob.len());
    out.extend_from_slice(&(archive.manifest_bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(&archive.manifest_bytes);
    out.extend_from_slice(&archive.state_blob);
    out
}

/// Parses a transfer and checks it against the checksum the source claimed.
pub fn decode_transfer(bytes: &[u8], claimed: &[u8; 32]) -> Result<CheckpointArchive, String> {
    let len = bytes.get(..4).ok_or("transfer shorter than its header")?;
    let len = u32::from_be_bytes(len.try_into().expect("4 bytes")) as usize;
    let manifest_bytes = bytes.get(4..4 + len).ok_or("transfer shorter than its manifest")?.to_vec();
    let state_blob = bytes[4 + len..].to_vec();
    let checksum = archive_checksum(&manifest_bytes, &state_blob);
    if &checksum != claimed {
        return Err("checksum mismatch".into());
    }
    let manifest: ArchiveManifest =
        serde_json::from_slice(&manifest_bytes).map_err(|e| format!("unreadable manifest: {e}"))?;
    Ok(CheckpointArchive { archive_id: archive_id_for(&checksum), manifest, manifest_bytes, state_blob, checksum })
}

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("peer unreachable: {0}")]
    Unreachable(String),
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("I/O error: {0}")]
    Io(io::Error),
}

impl LinkError {
    fn from_io(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => LinkError::Timeout,
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::NotConnected => LinkError::Closed,
            _ => LinkError::Io(e),
        }
    }
}

/// One connection to a peer, seen from the source.
pub trait MigrationLink {
    fn send(&mut self, msg: &MigrationMessage) -> Result<(), LinkError>;
    fn recv(&mut self) -> Result<MigrationMessage, LinkError>;
}

pub trait Connector {
    fn connect(&mut self, target: &NodeId) -> Result<Box<dyn MigrationLink>, LinkError>;
}

/// Where an injected connection failure strikes. Frames are numbered in the
/// order the source sends them: the offer is 0, chunks follow, `Complete`
/// is last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kill", rename_all = "snake_case")]
pub enum Fault {
    /// Frame `frame` never reaches the target.
    BeforeSend { frame: usize },
    /// Frame `frame` is delivered and handled, but the connection dies
    /// before any reply gets back.
    AfterSend { frame: usize },
}

impl Fault {
    /// Every failure point of a transfer that sends `frames` frames.
    pub fn all(frames: usize) -> Vec<Fault> {
        (0..frames).flat_map(|frame| [Fault::BeforeSend { frame }, Fault::AfterSend { frame }]).collect()
    }
}

// ---- target side ---------------------------------------------------------------

enum Inbound {
    AwaitOffer,
    Receiving {
        archive_id: [u8; 32],
        blob_size: u64,
        buf: Vec<u8>,
    },
    /// The offered archive is already restored here.
    Settled,
    Done,
}

/// Target-side protocol state for one connection, independent of transport.
/// Nothing is written to the store until a complete, verified transfer has
/// arrived, so a dropped session leaves nothing behind.
pub struct InboundSession {
    session: u64,
    state: Inbound,
}

/// What the target does after handling one frame.
#[derive(Debug, Default)]
pub struct Reply {
    pub message: Option<MigrationMessage>,
    pub close: bool,
}

impl Reply {
    fn send(message: MigrationMessage) -> Self {
        Reply { message: Some(message), close: false }
    }

    fn last(message: MigrationMessage) -> Self {
        Reply { message: Some(message), close: true }
    }
}

fn protocol_error(what: &str) -> Reply {
    Reply::last(MigrationMessage::Abort { reason: format!("protocol-error: {what}") })
}

impl InboundSession {
    pub fn open(node: &mut Node) -> Self {
        InboundSession { session: node.open_inbound(), state: Inbound::AwaitOffer }
    }

    pub fn is_done(&self) -> bool {
        matches!(self.state, Inbound::Done)
    }

    pub fn handle(&mut self, node: &mut Node, msg: MigrationMessage) -> Reply {
        let state = std::mem::replace(&mut self.state, Inbound::Done);
        match (state, msg) {
            (Inbound::AwaitOffer, MigrationMessage::Offer { archive_id, image_digest, blob_size, memory_required }) => {
                let id = ArchiveId(hex::encode(archive_id));
                if let Some(instance) = node.adopted(&id) {
                    self.state = Inbound::Settled;
                    return Reply::send(MigrationMessage::Restored { instance_id: instance.to_string() });
                }
                match node.can_accept(&image_digest, memory_required) {
                    Err(NodeError::ImageMissing { .. }) => Reply::last(MigrationMessage::RejectNoImage),
                    Err(_) => Reply::last(MigrationMessage::RejectCapacity),
                    Ok(()) if blob_size > u64::from(u32::MAX) => protocol_error("blob too large"),
                    Ok(()) => {
                        self.state = Inbound::Receiving { archive_id, blob_size, buf: Vec::new() };
                        Reply::send(MigrationMessage::Accept)
                    }
                }
            }
            (Inbound::Receiving { archive_id, blob_size, mut buf }, MigrationMessage::Chunk { offset, bytes }) => {
                if offset != buf.len() as u64 || buf.len() as u64 + bytes.len() as u64 > blob_size {
                    return protocol_error("non-contiguous chunk");
                }
                buf.extend_from_slice(&bytes);
                self.state = Inbound::Receiving { archive_id, blob_size, buf };
                Reply::default()
            }
            (Inbound::Receiving { archive_id, blob_size, buf }, MigrationMessage::Complete { checksum }) => {
                if buf.len() as u64 != blob_size {
                    return protocol_error("transfer incomplete");
                }
                if checksum != archive_id {
                    return Reply::last(MigrationMessage::Abort { reason: "checksum mismatch".into() });
                }
                let id = ArchiveId(hex::encode(archive_id));
                if node.is_tombstoned(&id, self.session) {
                    return Reply::last(MigrationMessage::Abort { reason: "transfer superseded".into() });
                }
                let archive = match decode_transfer(&buf, &checksum) {
                    Ok(a) => a,
                    Err(reason) => return Reply::last(MigrationMessage::Abort { reason }),
                };
                match node.adopt(archive) {
                    Ok(instance) => Reply::last(MigrationMessage::Restored { instance_id: instance.to_string() }),
                    Err(e) => Reply::last(MigrationMessage::Abort { reason: e.to_string() }),
                }
            }
            (Inbound::Receiving { archive_id, .. }, MigrationMessage::Abort { .. }) => {
                node.tombstone(&ArchiveId(hex::encode(archive_id)), self.session);
                Reply { message: None, close: true }
            }
            (Inbound::Settled | Inbound::AwaitOffer, MigrationMessage::Abort { .. }) => {
                Reply { message: None, close: true }
            }
            (_, other) => protocol_error(&format!("unexpected {}", other.name())),
        }
    }
}

// ---- source side ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum AbortReason {
    TargetUnreachable(String),
    RejectNoImage,
    RejectCapacity,
    TransferChecksumMismatch,
    Timeout,
    ConnectionLost,
    Remote(String),
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum MigrationOutcome {
    Committed {
        remote_instance: InstanceId,
    },
    Aborted {
        reason: AbortReason,
    },
    /// The target could not be asked whether it restored the instance. The
    /// instance stays `MigratingOut` here until a later attempt settles it.
    InDoubt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MigrationReport {
    pub instance_id: InstanceId,
    pub target: NodeId,
    pub outcome: MigrationOutcome,
    /// Frame bytes exchanged in both directions, all connections included.
    pub wire_bytes: u64,
    pub messages: Vec<String>,
    /// Payloads that reached the source after the transfer began; they
    /// belong to the target now.
    #[serde(default)]
    pub stranded: Vec<Delivery>,
}

struct Wire<'a> {
    node: &'a mut Node,
    target: NodeId,
    bytes: u64,
    messages: Vec<String>,
}

impl Wire<'_> {
    fn send(&mut self, link: &mut dyn MigrationLink, msg: &MigrationMessage) -> Result<(), LinkError> {
        let len = FRAME_HEADER_LEN + msg.encode().len() - FRAME_HEADER_LEN;
        let result = link.send(msg);
        if result.is_ok() {
            self.bytes += len as u64;
            let (from, to) = (self.node.id().clone(), self.target.clone());
            self.messages.push(format!("{from} -> {to}: {}", msg.summary()));
            self.node.record_wire(&from, &to, msg.summary(), len);
        }
        result
    }

    fn recv(&mut self, link: &mut dyn MigrationLink) -> Result<MigrationMessage, LinkError> {
        let msg = link.recv()?;
        let len = msg.encode().len();
        self.bytes += len as u64;
        let (from, to) = (self.target.clone(), self.node.id().clone());
        self.messages.push(format!("{from} -> {to}: {}", msg.summary()));
        self.node.record_wire(&from, &to, msg.summary(), len);
        Ok(msg)
    }
}

enum Step {
    Commit(InstanceId),
    Abort(AbortReason),
    Unknown,
}

fn reply_step(msg: MigrationMessage) -> Step {
    match msg {
        MigrationMessage::Restored { instance_id } => Step::Commit(InstanceId(instance_id)),
        MigrationMessage::RejectNoImage => Step::Abort(AbortReason::RejectNoImage),
        MigrationMessage::RejectCapacity => Step::Abort(AbortReason::RejectCapacity),
        MigrationMessage::Abort { reason } if reason.contains("checksum") => {
            Step::Abort(AbortReason::TransferChecksumMismatch)
        }
        MigrationMessage::Abort { reason } => Step::Abort(AbortReason::Remote(reason)),
        other => Step::Abort(AbortReason::Protocol(format!("unexpected {}", other.name()))),
    }
}

fn link_abort(e: LinkError) -> AbortReason {
    match e {
        LinkError::Timeout => AbortReason::Timeout,
        LinkError::Unreachable(s) => AbortReason::TargetUnreachable(s),
        LinkError::Frame(f) => AbortReason::Protocol(f.to_string()),
        LinkError::Closed | LinkError::Io(_) => AbortReason::ConnectionLost,
    }
}

/// Moves `instance` to `target`: checkpoint if needed, offer, stream, and
/// commit or abort locally depending on the target's answer.
pub fn migrate_out(
    node: &mut Node,
    instance: &InstanceId,
    target: &NodeId,
    connector: &mut dyn Connector,
    chunk_size: usize,
) -> Result<MigrationReport, NodeError> {
    let resolving = node.journal().get(instance).is_some_and(|e| e.phase == JournalPhase::InDoubt);
    let transfer = node.prepare_outbound(instance, target)?;
    let blob = encode_transfer(&transfer.archive);
    let image_digest = transfer.archive.manifest.image_digest.clone();
    let offer = MigrationMessage::Offer {
        archive_id: transfer.archive.checksum,
        image_digest,
        blob_size: blob.len() as u64,
        memory_required: transfer.memory_required,
    };
    let mut wire = Wire { node, target: target.clone(), bytes: 0, messages: Vec::new() };

    let step = if resolving {
        Step::Unknown
    } else {
        transfer_once(&mut wire, connector, &offer, &blob, transfer.archive.checksum, chunk_size.max(1))
    };
    let step = match step {
        Step::Unknown => {
            wire.node.mark_in_doubt(instance);
            resolve(&mut wire, connector, &offer)
        }
        settled => settled,
    };

    let Wire { node, bytes, messages, .. } = wire;
    let (outcome, stranded) = match step {
        Step::Commit(remote_instance) => {
            let stranded = node.commit_outbound(instance)?;
            (MigrationOutcome::Committed { remote_instance }, stranded)
        }
        Step::Abort(reason) => {
            node.abort_outbound(instance)?;
            (MigrationOutcome::Aborted { reason }, Vec::new())
        }
        Step::Unknown => (MigrationOutcome::InDoubt, Vec::new()),
    };
    tracing::info!(instance = %instance, target = %target, ?outcome, wire_bytes = bytes, "migration finished");
    Ok(MigrationReport {
        instance_id: instance.clone(),
        target: target.clone(),
        outcome,
        wire_bytes: bytes,
        messages,
        stranded,
    })
}

fn transfer_once(
    wire: &mut Wire<'_>,
    connector: &mut dyn Connector,
    offer: &MigrationMessage,
    blob: &[u8],
    checksum: [u8; 32],
    chunk_size: usize,
) -> Step {
    let mut link = match connector.connect(&wire.target) {
        Ok(l) => l,
        Err(e) => return Step::Abort(link_abort(e)),
    };
    if let Err(e) = wire.send(link.as_mut(), offer) {
        return Step::Abort(link_abort(e));
    }
    match wire.recv(link.as_mut()) {
        Ok(MigrationMessage::Accept) => {}
        Ok(other) => return reply_step(other),
        Err(e) => return Step::Abort(link_abort(e)),
    }
    let mut offset = 0usize;
    for chunk in blob.chunks(chunk_size) {
        let msg = MigrationMessage::Chunk { offset: offset as u64, bytes: chunk.to_vec() };
        if let Err(e) = wire.send(link.as_mut(), &msg) {
            return Step::Abort(link_abort(e));
        }
        offset += chunk.len();
    }
    // from here on the target may restore at any moment
    if wire.send(link.as_mut(), &MigrationMessage::Complete { checksum }).is_err() {
        return Step::Unknown;
    }
    match wire.recv(link.as_mut()) {
        Ok(msg) => reply_step(msg),
        Err(_) => Step::Unknown,
    }
}

/// Asks the target whether it holds the instance by offering the archive
/// again.
fn resolve(wire: &mut Wire<'_>, connector: &mut dyn Connector, offer: &MigrationMessage) -> Step {
    let Ok(mut link) = connector.connect(&wire.target) else {
        return Step::Unknown;
    };
    if wire.send(link.as_mut(), offer).is_err() {
        return Step::Unknown;
    }
    match wire.recv(link.as_mut()) {
        Ok(MigrationMessage::Restored { instance_id }) => Step::Commit(InstanceId(instance_id)),
        Ok(MigrationMessage::Accept) => {
            // the target does not have it; make sure the earlier transfer can never land
            match wire.send(link.as_mut(), &MigrationMessage::Abort { reason: "superseded".into() }) {
                Ok(()) => Step::Abort(AbortReason::ConnectionLost),
                Err(_) => Step::Unknown,
            }
        }
        Ok(MigrationMessage::RejectNoImage) => Step::Abort(AbortReason::RejectNoImage),
        Ok(MigrationMessage::RejectCapacity) => Step::Abort(AbortReason::RejectCapacity),
        Ok(_) | Err(_) => Step::Unknown,
    }
}

// ---- in-memory transport --------------------------------------------------------

/// A link straight into another in-process node.
pub struct MemoryLink {
    target: Arc<Mutex<Node>>,
    session: Option<InboundSession>,
    replies: VecDeque<MigrationMessage>,
    fault: Option<Fault>,
    sent: usize,
    dead: bool,
}

impl MemoryLink {
    pub fn new(target: Arc<Mutex<Node>>, fault: Option<Fault>) -> Self {
        let session = InboundSession::open(&mut target.lock().expect("node lock"));
        MemoryLink { target, session: Some(session), replies: VecDeque::new(), fault, sent: 0, dead: false }
    }

    fn kill(&mut self) {
        self.dead = true;
        self.session = None;
        self.replies.clear();
    }
}

impl MigrationLink for MemoryLink {
    fn send(&mut self, msg: &MigrationMessage) -> Result<(), LinkError> {
        if self.dead {
            return Err(LinkError::Closed);
        }
        let frame = self.sent;
        if self.fault == Some(Fault::BeforeSend { frame }) {
            self.kill();
            return Err(LinkError::Closed);
        }
        self.sent += 1;
        // round-trip through the codec so the target sees exactly what a socket would carry
        let (decoded, _) = MigrationMessage::decode(&msg.encode())?;
        let session = self.session.as_mut().ok_or(LinkError::Closed)?;
        let reply = session.handle(&mut self.target.lock().expect("node lock"), decoded);
        if let Some(m) = reply.message {
            self.replies.push_back(m);
        }
        if reply.close {
            self.session = None;
        }
        if self.fault == Some(Fault::AfterSend { frame }) {
            self.kill();
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<MigrationMessage, LinkError> {
        match self.replies.pop_front() {
            Some(m) => Ok(m),
            None if self.dead || self.session.is_none() => Err(LinkError::Closed),
            None => Err(LinkError::Timeout),
        }
    }
}

/// Connects to in-process nodes. A fault, if set, applies to the next
/// connection only.
#[derive(Default)]
pub struct MemoryConnector {
    pub nodes: BTreeMap<NodeId, Arc<Mutex<Node>>>,
    pub fault: Option<Fault>,
    pub unreachable: BTreeSet<NodeId>,
}

impl Connector for MemoryConnector {
    fn connect(&mut self, target: &NodeId) -> Result<Box<dyn MigrationLink>, LinkError> {
        if self.unreachable.contains(target) {
            return Err(LinkError::Unreachable(target.to_string()));
        }
        let node = self.nodes.get(target).ok_or_else(|| LinkError::Unreachable(target.to_string()))?;
        Ok(Box::new(MemoryLink::new(node.clone(), self.fault.take())))
    }
}

// ---- TCP transport -------------------------------------------------------------

pub struct TcpLink {
    stream: TcpStream,
    fault: Option<Fault>,
    sent: usize,
    dead: bool,
}

impl TcpLink {
    fn kill(&mut self) {
        self.dead = true;
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

impl MigrationLink for TcpLink {
    fn send(&mut self, msg: &MigrationMessage) -> Result<(), LinkError> {
        if self.dead {
            return Err(LinkError::Closed);
        }
        let frame = self.sent;
        if self.fault == Some(Fault::BeforeSend { frame }) {
            self.kill();
            return Err(LinkError::Closed);
        }
        self.stream.write_all(&msg.encode()).map_err(LinkError::from_io)?;
        self.stream.flush().map_err(LinkError::from_io)?;
        self.sent += 1;
        if self.fault == Some(Fault::AfterSend { frame }) {
            // let the target read the frame before the connection goes away
            let _ = self.stream.shutdown(Shutdown::Write);
            let mut sink = Vec::new();
            let _ = self.stream.read_to_end(&mut sink);
            self.kill();
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<MigrationMessage, LinkError> {
        if self.dead {
            return Err(LinkError::Closed);
        }
        MigrationMessage::read_from(&mut self.stream)
    }
}

pub struct TcpConnector {
    pub peers: BTreeMap<NodeId, String>,
    pub timeout: Duration,
    pub fault: Option<Fault>,
}

impl TcpConnector {
    pub fn new(peers: BTreeMap<NodeId, String>, timeout: Duration) -> Self {
        TcpConnector { peers, timeout, fault: None }
    }
}

impl Connector for TcpConnector {
    fn connect(&mut self, target: &NodeId) -> Result<Box<dyn MigrationLink>, LinkError> {
        let addr = self.peers.get(target).ok_or_else(|| LinkError::Unreachable(format!("{target} is not a peer")))?;
        let resolved = addr
            .to_socket_addrs()
            .map_err(|e| LinkError::Unreachable(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| LinkError::Unreachable(addr.clone()))?;
        let stream = TcpStream::connect_timeout(&resolved, self.timeout)
            .map_err(|e| LinkError::Unreachable(format!("{addr}: {e}")))?;
        stream.set_read_timeout(Some(self.timeout)).map_err(LinkError::Io)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(LinkError::Io)?;
        stream.set_nodelay(true).map_err(LinkError::Io)?;
        Ok(Box::new(TcpLink { stream, fault: self.fault.take(), sent: 0, dead: false }))
    }
}

/// Accepts migration connections forever, one thread per connection.
pub fn serve_migration(listener: TcpListener, node: Arc<Mutex<Node>>) {
    for stream in listener.incoming() {
        match stream {
            Ok(stream) => {
                let node = node.clone();
                thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, &node) {
                        tracing::debug!(error = %e, "migration connection ended");
                    }
                });
            }
            Err(e) => tracing::warn!(error = %e, "accepting migration connection failed"),
        }
    }
}

/// Binds `addr` and serves migrations on a background thread; returns the
/// bound address.
pub fn spawn_migration_server(addr: &str, node: Arc<Mutex<Node>>) -> io::Result<std::net::SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    thread::spawn(move || serve_migration(listener, node));
    Ok(local)
}

fn handle_connection(mut stream: TcpStream, node: &Mutex<Node>) -> Result<(), LinkError> {
    stream.set_nodelay(true).map_err(LinkError::Io)?;
    let mut session = InboundSession::open(&mut node.lock().expect("node lock"));
    loop {
        let msg = match MigrationMessage::read_from(&mut stream) {
            Ok(m) => m,
            Err(LinkError::Frame(e)) => {
                let abort = MigrationMessage::Abort { reason: format!("protocol-error: {e}") };
                let _ = stream.write_all(&abort.encode());
                return Err(LinkError::Frame(e));
            }
            Err(e) => return Err(e),
        };
        let reply = session.handle(&mut node.lock().expect("node lock"), msg);
        if let Some(m) = reply.message {
            if stream.write_all(&m.encode()).is_err() {
                return Err(LinkError::Closed);
            }
        }
        if reply.close {
            let _ = stream.shutdown(Shutdown::Both);
            return Ok(());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let msgs = [
            MigrationMessage::Offer {
                archive_id: [7; 32],
                image_digest: "sha256:abc".into(),
                blob_size: 9,
                memory_required: 3,
            },
            MigrationMessage::Accept,
            MigrationMessage::RejectNoImage,
            MigrationMessage::RejectCapacity,
            MigrationMessage::Chunk { offset: 65536, bytes: vec![1, 2, 3] },
            MigrationMessage::Complete { checksum: [9; 32] },
            MigrationMessage::Restored { instance_id: "A-1".into() },
            MigrationMessage::Abort { reason: "nope".into() },
        ];
        for m in msgs {
            let bytes = m.encode();
            assert_eq!(MigrationMessage::decode(&bytes).unwrap(), (m.clone(), bytes.len()));
            assert_eq!(MigrationMessage::read_from(&mut &bytes[..]).unwrap(), m);
        }
    }

    #[test]
    fn frame_layout_is_tag_length_payload() {
        let bytes = MigrationMessage::Chunk { offset: 1, bytes: vec![0xAA] }.encode();
        assert_eq!(bytes, [5, 0, 0, 0, 9, 0, 0, 0, 0, 0, 0, 0, 1, 0xAA]);
        assert_eq!(MigrationMessage::Accept.encode(), [2, 0, 0, 0, 0]);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        assert!(matches!(MigrationMessage::decode(&[9, 0, 0, 0, 0]), Err(FrameError::UnknownTag(9))));
        assert!(matches!(MigrationMessage::decode(&[2, 0, 0, 0, 1, 0]), Err(FrameError::Malformed("Accept"))));
        assert!(matches!(MigrationMessage::decode(&[6, 0, 0, 0, 2, 0, 0]), Err(FrameError::Malformed("Complete"))));
        assert!(matches!(MigrationMessage::decode(&[5, 0, 0]), Err(FrameError::Truncated { .. })));
        assert!(matches!(MigrationMessage::decode(&[5, 0xFF, 0, 0, 0]), Err(FrameError::TooLarge(_))));
    }

    #[test]
    fn fault_points_cover_both_sides_of_every_frame() {
        let all = Fault::all(3);
        assert_eq!(all.len(), 6);
        assert!(all.contains(&Fault::AfterSend { frame: 2 }));
    }

    mod end_to_end {
        use super::super::*;
        use crate::config::NodeConfig;
        use crate::lifecycle::StateKind;
        use crate::registry::{FunctionSpec, Registry};
        use crate::sim::SimStep;
        use crate::store::CheckpointStore;
        use crate::types::FunctionId;

        fn counter() -> FunctionSpec {
            FunctionSpec {
                function_id: FunctionId::new("counter"),
                route: "counter".into(),
                image_digest: "sha256:counter".into(),
                image_size: 1 << 20,
                program: vec![SimStep::IncrCounter("c".into()), SimStep::Respond("{var:c}".into())],
                idle_timeout: None,
                memory_declared: 1 << 20,
                reentrant: false,
            }
        }

        fn pair() -> (Node, Arc<Mutex<Node>>, MemoryConnector, Vec<tempfile::TempDir>) {
            let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
            let mk = |id: &str, dir: &tempfile::TempDir| {
                let store = CheckpointStore::open(dir.path()).unwrap();
                Node::new(NodeId::new(id), NodeConfig::default(), Registry::new(vec![counter()]).unwrap(), store)
            };
            let a = mk("A", &da);
            let b = Arc::new(Mutex::new(mk("B", &db)));
            let mut connector = MemoryConnector::default();
            connector.nodes.insert(NodeId::new("B"), b.clone());
            (a, b, connector, vec![da, db])
        }

        #[test]
        fn counter_survives_migration() {
            let (mut a, b, mut conn, _dirs) = pair();
            let id = a.trigger("counter", vec![]).unwrap().record.instance_id;
            a.trigger("counter", vec![]).unwrap();
            let report = migrate_out(&mut a, &id, &NodeId::new("B"), &mut conn, 16).unwrap();
            assert_eq!(report.outcome, MigrationOutcome::Committed { remote_instance: id.clone() });
            assert_eq!(a.instance(&id).unwrap().state.kind(), StateKind::Terminated);
            assert!(matches!(a.trigger("counter", vec![]), Err(NodeError::RouteMoved { .. })));
            let r = b.lock().unwrap().trigger("counter", vec![]).unwrap();
            assert_eq!(r.response.as_deref(), Some(&b"3"[..]));
        }

        #[test]
        fn missing_image_aborts_and_keeps_source() {
            let (mut a, _b, mut conn, dirs) = pair();
            let mut other = counter();
            other.image_digest = "sha256:other".into();
            let store = CheckpointStore::open(dirs[1].path().join("b2")).unwrap();
            let b2 = Node::new(NodeId::new("B"), NodeConfig::default(), Registry::new(vec![other]).unwrap(), store);
            conn.nodes.insert(NodeId::new("B"), Arc::new(Mutex::new(b2)));
            let id = a.trigger("counter", vec![]).unwrap().record.instance_id;
            let report = migrate_out(&mut a, &id, &NodeId::new("B"), &mut conn, 16).unwrap();
            assert_eq!(report.outcome, MigrationOutcome::Aborted { reason: AbortReason::RejectNoImage });
            assert_eq!(a.instance(&id).unwrap().state.kind(), StateKind::Checkpointed);
            assert_eq!(a.trigger("counter", vec![]).unwrap().response.as_deref(), Some(&b"2"[..]));
        }

        #[test]
        fn every_crash_point_leaves_exactly_one_owner() {
            let probe = {
                let (mut a, _b, mut conn, _dirs) = pair();
                let id = a.trigger("counter", vec![]).unwrap().record.instance_id;
                migrate_out(&mut a, &id, &NodeId::new("B"), &mut conn, 16).unwrap().messages.len()
            };
            for fault in Fault::all(probe) {
                let (mut a, b, mut conn, _dirs) = pair();
                let id = a.trigger("counter", vec![]).unwrap().record.instance_id;
                conn.fault = Some(fault);
                let report = migrate_out(&mut a, &id, &NodeId::new("B"), &mut conn, 16).unwrap();
                let source_owns = a.instance(&id).unwrap().is_owner();
                let target_owns = b.lock().unwrap().instance(&id).is_some_and(|i| i.is_owner());
                assert!(source_owns ^ target_owns, "{fault:?}: {:?}", report.outcome);
                let next = if source_owns {
                    a.trigger("counter", vec![])
                } else {
                    b.lock().unwrap().trigger("counter", vec![])
                };
                assert_eq!(next.unwrap().response.as_deref(), Some(&b"2"[..]), "{fault:?}");
            }
        }
    }
}

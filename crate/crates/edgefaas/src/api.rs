//! JSON bodies of the admin API, shared by the daemon and the client.

use edgefaas_core::migration::Fault;
use edgefaas_core::node::InvocationPath;
use edgefaas_core::{ArchiveId, Endpoint, InstanceId, NodeId, SimTime};
use serde::{Deserialize, Serialize};

pub const HEADER_INSTANCE: &str = "x-edgefaas-instance";
pub const HEADER_PATH: &str = "x-edgefaas-path";
pub const HEADER_LATENCY: &str = "x-edgefaas-charged-latency";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub status: u16,
    /// Set when a route has moved to another node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
}

/// Answer to a trigger whose instance blocked before responding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suspended {
    pub status: String,
    pub instance_id: InstanceId,
    pub path: InvocationPath,
    pub charged_latency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRequest {
    pub instance_id: InstanceId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointResponse {
    pub instance_id: InstanceId,
    pub archive_id: ArchiveId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestoreRequest {
    pub archive_id: ArchiveId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestoreResponse {
    pub instance_id: InstanceId,
    /// `false` when the instance had already been resumed.
    pub restored: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MigrateRequest {
    pub instance_id: InstanceId,
    pub target: NodeId,
    /// Injected connection failure; accepted only by `--sim-clock` daemons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InjectRequest {
    pub src: Endpoint,
    pub dst: Endpoint,
    #[serde(with = "edgefaas_core::util::base64_bytes")]
    pub payload: Vec<u8>,
}

/// Exactly one of `to` and `by`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdvanceRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<SimTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by: Option<SimTime>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeployResponse {
    pub functions: usize,
}

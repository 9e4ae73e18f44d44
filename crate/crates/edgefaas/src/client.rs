//! Blocking client for the daemon's HTTP API.

use std::collections::BTreeMap;
use std::time::Duration;

use edgefaas_core::harness::{Cluster, ClusterError, Invocation, Scenario};
use edgefaas_core::lifecycle::InstanceState;
use edgefaas_core::migration::{Fault, MigrationReport};
use edgefaas_core::node::{InstanceSummary, InvocationPath, NodeStats, TraceEvent};
use edgefaas_core::registry::FunctionSpec;
use edgefaas_core::{ArchiveId, Endpoint, InstanceId, NodeId, SimTime};
use reqwest::blocking::{Client as Http, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::api::*;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The daemon answered with an error status; `body` is its error body.
    #[error("HTTP {status}: {body}")]
    Api { status: u16, body: String },
    #[error("cannot reach daemon: {0}")]
    Transport(String),
}

impl ClientError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Api { .. } => 1,
            ClientError::Transport(_) => 2,
        }
    }
}

impl From<ClientError> for ClusterError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Api { status, body } => {
                let message = serde_json::from_str::<ErrorBody>(&body).map(|b| b.error).unwrap_or(body);
                ClusterError { status: Some(status), message }
            }
            ClientError::Transport(message) => ClusterError::transport(message),
        }
    }
}

/// What a trigger returned.
#[derive(Debug, Clone, Serialize)]
pub struct Invoked {
    pub status: u16,
    pub instance_id: InstanceId,
    pub path: InvocationPath,
    pub charged_latency: f64,
    /// `None` while the instance is suspended.
    pub response: Option<String>,
}

pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    pub fn new(addr: &str, timeout: Duration) -> Result<Self, ClientError> {
        let base = if addr.starts_with("http://") || addr.starts_with("https://") {
            addr.trim_end_matches('/').to_owned()
        } else {
            format!("http://{}", addr.trim_end_matches('/'))
        };
        let http = Http::builder().timeout(timeout).build().map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Client { base, http })
    }

    fn check(resp: Result<Response, reqwest::Error>) -> Result<Response, ClientError> {
        let resp = resp.map_err(|e| ClientError::Transport(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let body = resp.text().unwrap_or_default();
        Err(ClientError::Api { status, body })
    }

    fn parse<T: DeserializeOwned>(resp: Response) -> Result<T, ClientError> {
        resp.json().map_err(|e| ClientError::Transport(format!("unexpected response: {e}")))
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        Self::parse(Self::check(self.http.get(format!("{}{path}", self.base)).send())?)
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        Self::parse(Self::check(self.http.post(format!("{}{path}", self.base)).json(body).send())?)
    }

    pub fn invoke(&self, route: &str, payload: &[u8]) -> Result<Invoked, ClientError> {
        let url = format!("{}/fn/{}", self.base, route.trim_start_matches('/'));
        let resp = Self::check(self.http.post(url).body(payload.to_vec()).send())?;
        let status = resp.status().as_u16();
        if status == 202 {
            let s: Suspended = Self::parse(resp)?;
            return Ok(Invoked {
                status,
                instance_id: s.instance_id,
                path: s.path,
                charged_latency: s.charged_latency,
                response: None,
            });
        }
        let header = |name: &str| resp.headers().get(name).and_then(|v| v.to_str().ok()).unwrap_or_default().to_owned();
        let instance_id = InstanceId::new(header(HEADER_INSTANCE));
        let path = serde_json::from_value(serde_json::Value::String(header(HEADER_PATH)))
            .map_err(|e| ClientError::Transport(format!("bad {HEADER_PATH} header: {e}")))?;
        let charged_latency = header(HEADER_LATENCY).parse().unwrap_or(0.0);
        let body = resp.bytes().map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Invoked {
            status,
            instance_id,
            path,
            charged_latency,
            response: Some(String::from_utf8_lossy(&body).into_owned()),
        })
    }

    pub fn deploy(&self, registry_json: String) -> Result<DeployResponse, ClientError> {
        let req = self
            .http
            .post(format!("{}/admin/deploy", self.base))
            .header("content-type", "application/json")
            .body(registry_json)
            .send();
        Self::parse(Self::check(req)?)
    }

    pub fn instances(&self) -> Result<Vec<InstanceSummary>, ClientError> {
        self.get("/admin/instances")
    }

    pub fn instance(&self, id: &InstanceId) -> Result<InstanceSummary, ClientError> {
        self.get(&format!("/admin/instances/{id}"))
    }

    pub fn checkpoint(&self, id: &InstanceId) -> Result<CheckpointResponse, ClientError> {
        self.post("/admin/checkpoint", &CheckpointRequest { instance_id: id.clone() })
    }

    pub fn restore(&self, archive: &ArchiveId) -> Result<RestoreResponse, ClientError> {
        self.post("/admin/restore", &RestoreRequest { archive_id: archive.clone() })
    }

    pub fn migrate(
        &self,
        id: &InstanceId,
        target: &NodeId,
        fault: Option<Fault>,
    ) -> Result<MigrationReport, ClientError> {
        self.post("/admin/migrate", &MigrateRequest { instance_id: id.clone(), target: target.clone(), fault })
    }

    pub fn inject(
        &self,
        src: &Endpoint,
        dst: &Endpoint,
        payload: &[u8],
    ) -> Result<edgefaas_core::node::InjectResult, ClientError> {
        self.post(
            "/admin/inject-packet",
            &InjectRequest { src: src.clone(), dst: dst.clone(), payload: payload.to_vec() },
        )
    }

    pub fn stats(&self) -> Result<NodeStats, ClientError> {
        self.get("/admin/stats")
    }

    pub fn advance_clock(&self, req: &AdvanceRequest) -> Result<edgefaas_core::node::AdvanceReport, ClientError> {
        self.post("/admin/advance-clock", req)
    }

    pub fn drain_trace(&self) -> Result<Vec<TraceEvent>, ClientError> {
        self.post("/admin/trace", &())
    }
}

/// Scenario nodes reached over HTTP. The daemons must run with `--sim-clock`;
/// scenario time is counted from the latest clock among them.
pub struct HttpCluster {
    nodes: BTreeMap<NodeId, Client>,
    base: SimTime,
}

impl HttpCluster {
    /// Deploys each scenario node's functions to its daemon, unless that
    /// daemon already has a registry.
    pub fn connect(nodes: BTreeMap<NodeId, Client>, scenario: &Scenario) -> Result<Self, ClusterError> {
        for decl in &scenario.nodes {
            let client = nodes
                .get(&decl.id)
                .ok_or_else(|| ClusterError::transport(format!("no --node address for scenario node {}", decl.id)))?;
            let specs: Vec<&FunctionSpec> = decl.functions.iter().collect();
            match client.deploy(serde_json::to_string(&specs).expect("specs serialize")) {
                Ok(_) | Err(ClientError::Api { status: 409, .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let mut base = SimTime::ZERO;
        for client in nodes.values() {
            base = base.max(client.stats()?.clock);
        }
        Ok(HttpCluster { nodes, base })
    }

    fn client(&self, id: &NodeId) -> Result<&Client, ClusterError> {
        self.nodes.get(id).ok_or_else(|| ClusterError::transport(format!("unknown node {id}")))
    }
}

impl Cluster for HttpCluster {
    fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().cloned().collect()
    }

    fn advance_clock(&mut self, to: SimTime) -> Result<(), ClusterError> {
        let req = AdvanceRequest { to: Some(self.base + to), by: None };
        for client in self.nodes.values() {
            client.advance_clock(&req)?;
        }
        Ok(())
    }

    fn trigger(&mut self, node: &NodeId, route: &str, payload: &[u8]) -> Result<Invocation, ClusterError> {
        let r = self.client(node)?.invoke(route, payload)?;
        Ok(Invocation {
            instance_id: r.instance_id,
            path: r.path,
            charged_latency: r.charged_latency,
            response: r.response,
        })
    }

    fn inject_packet(
        &mut self,
        node: &NodeId,
        src: &Endpoint,
        dst: &Endpoint,
        payload: &[u8],
    ) -> Result<(), ClusterError> {
        self.client(node)?.inject(src, dst, payload)?;
        Ok(())
    }

    fn checkpoint(&mut self, node: &NodeId, instance: &InstanceId) -> Result<ArchiveId, ClusterError> {
        Ok(self.client(node)?.checkpoint(instance)?.archive_id)
    }

    fn restore(&mut self, node: &NodeId, instance: &InstanceId) -> Result<bool, ClusterError> {
        let client = self.client(node)?;
        match client.instance(instance)?.state {
            InstanceState::Checkpointed(archive) => Ok(client.restore(&archive)?.restored),
            _ => Ok(false),
        }
    }

    fn instance(&mut self, node: &NodeId, instance: &InstanceId) -> Result<Option<InstanceSummary>, ClusterError> {
        match self.client(node)?.instance(instance) {
            Ok(s) => Ok(Some(s)),
            Err(ClientError::Api { status: 404, .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn migrate(
        &mut self,
        node: &NodeId,
        instance: &InstanceId,
        to: &NodeId,
        fault: Option<Fault>,
    ) -> Result<MigrationReport, ClusterError> {
        Ok(self.client(node)?.migrate(instance, to, fault)?)
    }

    fn stats(&mut self, node: &NodeId) -> Result<NodeStats, ClusterError> {
        Ok(self.client(node)?.stats()?)
    }

    fn take_trace(&mut self) -> Result<Vec<TraceEvent>, ClusterError> {
        let mut out = Vec::new();
        for client in self.nodes.values() {
            out.extend(client.drain_trace()?);
        }
        Ok(out)
    }
}

//! The node daemon: HTTP gateway and admin API in front of one [`Node`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use edgefaas_core::config::NodeConfig;
use edgefaas_core::migration::{migrate_out, spawn_migration_server, TcpConnector};
use edgefaas_core::node::{Node, NodeError};
use edgefaas_core::registry::Registry;
use edgefaas_core::store::CheckpointStore;
use edgefaas_core::{InstanceId, NodeId, SimTime};

use crate::api::*;

pub struct DaemonOptions {
    pub node_id: NodeId,
    pub listen: String,
    pub migrate_port: u16,
    pub data_dir: PathBuf,
    pub registry: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub sim_clock: bool,
}

#[derive(Clone)]
struct App {
    node: Arc<Mutex<Node>>,
    sim_clock: bool,
    started: Instant,
}

impl App {
    /// Locks the node, first catching its clock up with wall time unless the
    /// clock is driven through the admin API.
    fn node(&self) -> MutexGuard<'_, Node> {
        let mut node = self.node.lock().expect("node lock");
        if !self.sim_clock {
            let now = SimTime::from_millis(self.started.elapsed().as_millis() as u64);
            if now > node.clock() {
                if let Err(e) = node.advance_clock(now) {
                    tracing::warn!(error = %e, "advancing clock failed");
                }
            }
        }
        node
    }
}

struct ApiError(StatusCode, ErrorBody);

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        let node = match &e {
            NodeError::RouteMoved { node, .. } => Some(node.clone()),
            _ => None,
        };
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        ApiError(status, ErrorBody { error: e.to_string(), status: status.as_u16(), node })
    }
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError(status, ErrorBody { error: error.into(), status: status.as_u16(), node: None })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn routes(app: App) -> Router {
    Router::new()
        .route("/fn/{*route}", post(invoke))
        .route("/admin/instances", get(list_instances))
        .route("/admin/instances/{id}", get(get_instance))
        .route("/admin/checkpoint", post(checkpoint))
        .route("/admin/restore", post(restore))
        .route("/admin/migrate", post(migrate))
        .route("/admin/inject-packet", post(inject_packet))
        .route("/admin/stats", get(stats))
        .route("/admin/advance-clock", post(advance_clock))
        .route("/admin/deploy", post(deploy))
        .route("/admin/trace", post(drain_trace))
        .with_state(app)
}

async fn invoke(State(app): State<App>, Path(route): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let result = app.node().trigger(&route, body.to_vec())?;
    let record = result.record;
    let path = serde_json::to_value(record.path_taken).expect("path serializes");
    let mut response = match result.response {
        Some(bytes) => (StatusCode::OK, bytes).into_response(),
        None => (
            StatusCode::ACCEPTED,
            Json(Suspended {
                status: "suspended".into(),
                instance_id: record.instance_id.clone(),
                path: record.path_taken,
                charged_latency: record.charged_latency,
            }),
        )
            .into_response(),
    };
    let headers = response.headers_mut();
    let header = |s: &str| HeaderValue::from_str(s).unwrap_or_else(|_| HeaderValue::from_static("?"));
    headers.insert(HEADER_INSTANCE, header(record.instance_id.as_str()));
    headers.insert(HEADER_PATH, header(path.as_str().unwrap_or_default()));
    headers.insert(HEADER_LATENCY, header(&record.charged_latency.to_string()));
    Ok(response)
}

async fn list_instances(State(app): State<App>) -> ApiResult<Vec<edgefaas_core::node::InstanceSummary>> {
    Ok(Json(app.node().list_instances()))
}

async fn get_instance(
    State(app): State<App>,
    Path(id): Path<String>,
) -> ApiResult<edgefaas_core::node::InstanceSummary> {
    let node = app.node();
    let id = InstanceId::new(id);
    let inst = node.instance(&id).ok_or(NodeError::UnknownInstance(id))?;
    Ok(Json(node.summary(inst)))
}

async fn checkpoint(State(app): State<App>, Json(req): Json<CheckpointRequest>) -> ApiResult<CheckpointResponse> {
    let archive_id = app.node().checkpoint(&req.instance_id)?;
    Ok(Json(CheckpointResponse { instance_id: req.instance_id, archive_id }))
}

async fn restore(State(app): State<App>, Json(req): Json<RestoreRequest>) -> ApiResult<RestoreResponse> {
    let (instance_id, restored) = app.node().restore(&req.archive_id)?;
    Ok(Json(RestoreResponse { instance_id, restored }))
}

async fn migrate(
    State(app): State<App>,
    Json(req): Json<MigrateRequest>,
) -> ApiResult<edgefaas_core::migration::MigrationReport> {
    if req.fault.is_some() && !app.sim_clock {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "fault injection needs a --sim-clock daemon"));
    }
    let report = tokio::task::spawn_blocking(move || {
        let mut node = app.node();
        let peer =
            node.config().peer(&req.target).cloned().ok_or_else(|| NodeError::UnknownPeer(req.target.clone()))?;
        let migration = node.config().migration.clone();
        let peers = [(peer.node_id, peer.address)].into_iter().collect();
        let mut connector = TcpConnector::new(peers, Duration::from_secs_f64(migration.timeout));
        connector.fault = req.fault;
        migrate_out(&mut node, &req.instance_id, &req.target, &mut connector, migration.chunk_size)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(report))
}

async fn inject_packet(
    State(app): State<App>,
    Json(req): Json<InjectRequest>,
) -> ApiResult<edgefaas_core::node::InjectResult> {
    Ok(Json(app.node().inject_packet(req.src, req.dst, req.payload)?))
}

async fn stats(State(app): State<App>) -> ApiResult<edgefaas_core::node::NodeStats> {
    Ok(Json(app.node().stats()))
}

async fn advance_clock(
    State(app): State<App>,
    Json(req): Json<AdvanceRequest>,
) -> ApiResult<edgefaas_core::node::AdvanceReport> {
    if !app.sim_clock {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "the clock is only adjustable on a --sim-clock daemon"));
    }
    let mut node = app.node();
    let to = match (req.to, req.by) {
        (Some(to), None) => to,
        (None, Some(by)) => node.clock() + by,
        _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "give exactly one of `to` and `by`")),
    };
    Ok(Json(node.advance_clock(to)?))
}

async fn deploy(State(app): State<App>, body: Bytes) -> ApiResult<DeployResponse> {
    let registry = Registry::from_json(&String::from_utf8_lossy(&body))
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let functions = registry.functions().count();
    app.node().deploy(registry)?;
    Ok(Json(DeployResponse { functions }))
}

async fn drain_trace(State(app): State<App>) -> ApiResult<Vec<edgefaas_core::node::TraceEvent>> {
    Ok(Json(app.node().take_trace()))
}

/// Runs the daemon until interrupted.
pub fn run(opts: DaemonOptions) -> Result<(), String> {
    let config = match &opts.config {
        Some(path) => NodeConfig::load(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => NodeConfig::default(),
    };
    let registry = match &opts.registry {
        Some(path) => Registry::load(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => Registry::default(),
    };
    let store = CheckpointStore::open(&opts.data_dir).map_err(|e| format!("{}: {e}", opts.data_dir.display()))?;
    let node = Arc::new(Mutex::new(Node::new(opts.node_id.clone(), config, registry, store)));

    let listen: SocketAddr = opts.listen.parse().map_err(|e| format!("bad listen address {}: {e}", opts.listen))?;
    let migrate_addr = SocketAddr::new(listen.ip(), opts.migrate_port);
    let migrate_local = spawn_migration_server(&migrate_addr.to_string(), node.clone())
        .map_err(|e| format!("migration listener: {e}"))?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await.map_err(|e| format!("{listen}: {e}"))?;
        let local = listener.local_addr().map_err(|e| e.to_string())?;
        println!("edgefaas node {} listening on http://{local}, migrations on {migrate_local}", opts.node_id);
        tracing::info!(node = %opts.node_id, http = %local, migrate = %migrate_local, sim_clock = opts.sim_clock, "daemon started");
        let app = App { node, sim_clock: opts.sim_clock, started: Instant::now() };
        if !opts.sim_clock {
            let ticker = app.clone();
            tokio::spawn(async move {
                let mut interval = tokio::time::interval(Duration::from_millis(250));
                loop {
                    interval.tick().await;
                    drop(ticker.node());
                }
            });
        }
        axum::serve(listener, routes(app))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}

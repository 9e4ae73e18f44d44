//! `edgefaas`: node daemon and operator CLI.

mod api;
mod client;
mod output;
mod server;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use edgefaas_core::harness::{self, Cluster, HarnessError, InProcessCluster, Scenario};
use edgefaas_core::{ArchiveId, Endpoint, InstanceId, NodeId, SimTime};

use crate::api::AdvanceRequest;
use crate::client::{Client, ClientError, HttpCluster};
use crate::output::Output;

#[derive(Parser)]
#[command(name = "edgefaas", version, about = "Edge function runtime with checkpoint, wake-on-packet and migration")]
struct Cli {
    /// Daemon address as host:port.
    #[arg(long, global = true, env = "EDGEFAAS_ADDR", default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    output: Format,
    /// Request timeout in seconds.
    #[arg(long, global = true, default_value_t = 30.0)]
    timeout: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run a node daemon.
    Daemon {
        /// Function registry (JSON list of function specs).
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, default_value = "edgefaas-data")]
        data_dir: PathBuf,
        /// Node configuration (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Drive the clock through the admin API instead of wall time.
        #[arg(long)]
        sim_clock: bool,
        #[arg(long, env = "EDGEFAAS_LISTEN", default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long, env = "EDGEFAAS_NODE_ID", default_value = "edge-1")]
        node_id: String,
        #[arg(long, env = "EDGEFAAS_MIGRATE_PORT", default_value_t = 7070)]
        migrate_port: u16,
    },
    /// Install a function registry on an empty node.
    Deploy {
        registry: PathBuf,
    },
    /// Trigger the function routed at ROUTE.
    Invoke {
        route: String,
        #[arg(long, default_value = "")]
        payload: String,
    },
    /// List instances.
    Ps,
    Checkpoint {
        instance: String,
    },
    Restore {
        archive: String,
    },
    /// Move an instance to a peer node.
    Migrate {
        instance: String,
        node: String,
    },
    /// Play a packet into the node as if it came from the network.
    Inject {
        #[arg(long)]
        src: Endpoint,
        #[arg(long)]
        dst: Endpoint,
        #[arg(long, default_value = "")]
        payload: String,
    },
    Stats,
    /// Move a `--sim-clock` daemon's clock forward.
    AdvanceClock {
        /// Seconds to add.
        #[arg(long, conflicts_with = "to")]
        by: Option<f64>,
        /// Absolute time in seconds.
        #[arg(long)]
        to: Option<f64>,
    },
    /// Run a named or file-based scenario, in-process or against daemons.
    Scenario {
        /// `sleep-exhaustion`, `tcp-authorize`, `migrate-counter`, or a path to a scenario JSON file.
        name: String,
        /// Run against a daemon: ID=host:port, once per scenario node.
        #[arg(long = "node", value_parser = parse_node)]
        nodes: Vec<(NodeId, String)>,
        /// Also print the full trace.
        #[arg(long)]
        trace: bool,
    },
}

fn parse_node(s: &str) -> Result<(NodeId, String), String> {
    let (id, addr) = s.split_once('=').ok_or_else(|| format!("expected ID=host:port, got {s:?}"))?;
    if id.is_empty() || addr.is_empty() {
        return Err(format!("expected ID=host:port, got {s:?}"));
    }
    Ok((NodeId::new(id), addr.to_owned()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("EDGEFAAS_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let out = Output::new(cli.output == Format::Json);
    let timeout = Duration::from_secs_f64(cli.timeout.max(0.001));
    let result = match cli.command {
        Command::Daemon { registry, data_dir, config, sim_clock, listen, node_id, migrate_port } => {
            let opts = server::DaemonOptions {
                node_id: NodeId::new(node_id),
                listen,
                migrate_port,
                data_dir,
                registry,
                config,
                sim_clock,
            };
            return match server::run(opts) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("edgefaas daemon: {e}");
                    ExitCode::from(1)
                }
            };
        }
        Command::Scenario { name, nodes, trace } => return run_scenario(&out, &name, nodes, trace, timeout),
        command => Client::new(&cli.addr, timeout).and_then(|c| run_command(&c, &out, command)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                ClientError::Api { body, .. } => eprintln!("{body}"),
                ClientError::Transport(msg) => eprintln!("edgefaas: {msg}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_command(client: &Client, out: &Output, command: Command) -> Result<(), ClientError> {
    match command {
        Command::Deploy { registry } => {
            let text = std::fs::read_to_string(&registry).map_err(|e| ClientError::Api {
                status: 0,
                body: format!("cannot read {}: {e}", registry.display()),
            })?;
            out.deployed(&client.deploy(text)?);
        }
        Command::Invoke { route, payload } => out.invoked(&client.invoke(&route, payload.as_bytes())?),
        Command::Ps => out.instances(&client.instances()?),
        Command::Checkpoint { instance } => out.checkpointed(&client.checkpoint(&InstanceId::new(instance))?),
        Command::Restore { archive } => out.restored(&client.restore(&ArchiveId(archive))?),
        Command::Migrate { instance, node } => {
            out.migrated(&client.migrate(&InstanceId::new(instance), &NodeId::new(node), None)?)
        }
        Command::Inject { src, dst, payload } => out.injected(&client.inject(&src, &dst, payload.as_bytes())?),
        Command::Stats => out.stats(&client.stats()?),
        Command::AdvanceClock { by, to } => {
            let req = AdvanceRequest { to: to.map(SimTime::from_secs_f64), by: by.map(SimTime::from_secs_f64) };
            let req = if req.to.is_none() && req.by.is_none() {
                AdvanceRequest { by: Some(SimTime::ZERO), to: None }
            } else {
                req
            };
            out.advanced(&client.advance_clock(&req)?);
        }
        Command::Daemon { .. } | Command::Scenario { .. } => unreachable!("handled in main"),
    }
    Ok(())
}

fn run_scenario(
    out: &Output,
    name: &str,
    nodes: Vec<(NodeId, String)>,
    show_trace: bool,
    timeout: Duration,
) -> ExitCode {
    let scenario = match harness::builtin_scenario(name) {
        Some(s) => Ok(s),
        None => Scenario::load(std::path::Path::new(name)),
    };
    let scenario = match scenario {
        Ok(s) => s,
        Err(e) => {
            eprintln!("edgefaas: {e}");
            return ExitCode::from(1);
        }
    };
    let costs = scenario.nodes.first().map(|n| n.config.costs).unwrap_or_default();

    let tmp;
    let mut cluster: Box<dyn Cluster> = if nodes.is_empty() {
        tmp = match tempfile::tempdir() {
            Ok(t) => t,
            Err(e) => {
                eprintln!("edgefaas: cannot create scratch directory: {e}");
                return ExitCode::from(1);
            }
        };
        match InProcessCluster::new(tmp.path(), &scenario.nodes) {
            Ok(c) => Box::new(c),
            Err(e) => {
                eprintln!("edgefaas: {e}");
                return ExitCode::from(1);
            }
        }
    } else {
        let mut clients = BTreeMap::new();
        for (id, addr) in nodes {
            match Client::new(&addr, timeout) {
                Ok(c) => clients.insert(id, c),
                Err(e) => {
                    eprintln!("edgefaas: {e}");
                    return ExitCode::from(2);
                }
            };
        }
        match HttpCluster::connect(clients, &scenario) {
            Ok(c) => Box::new(c),
            Err(e) => {
                eprintln!("edgefaas: {e}");
                return ExitCode::from(if e.status.is_none() { 2 } else { 1 });
            }
        }
    };

    let result = harness::run_script(cluster.as_mut(), &scenario.events);
    out.scenario(&scenario.name, &result, &costs, show_trace);
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(HarnessError::Cluster { error, .. }) if error.status.is_none() => ExitCode::from(2),
        Err(_) => ExitCode::from(1),
    }
}

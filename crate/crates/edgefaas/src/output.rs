//! Table and JSON rendering of command results.

use edgefaas_core::harness::{latency_table, outcome_text, HarnessError, LatencyTable, ScriptRun};
use edgefaas_core::migration::MigrationReport;
use edgefaas_core::node::{AdvanceReport, InjectResult, InstanceSummary, NodeStats};
use edgefaas_core::policy::CostModel;
use serde::Serialize;

use crate::api::{CheckpointResponse, DeployResponse, RestoreResponse};
use crate::client::Invoked;

pub struct Output {
    json: bool,
}

impl Output {
    pub fn new(json: bool) -> Self {
        Output { json }
    }

    fn json<T: Serialize>(&self, value: &T) {
        println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
    }

    pub fn deployed(&self, r: &DeployResponse) {
        if self.json {
            return self.json(r);
        }
        println!("deployed {} function(s)", r.functions);
    }

    pub fn invoked(&self, r: &Invoked) {
        if self.json {
            return self.json(r);
        }
        match &r.response {
            Some(body) => println!("{body}"),
            None => {
                println!("suspended: instance {} ({:?}, {:.3} s charged)", r.instance_id, r.path, r.charged_latency)
            }
        }
    }

    pub fn instances(&self, list: &[InstanceSummary]) {
        if self.json {
            return self.json(&list);
        }
        println!(
            "{:<16} {:<16} {:<28} {:>12} {:>12}  ARCHIVE",
            "INSTANCE", "FUNCTION", "STATE", "MEMORY", "LAST_ACTIVE"
        );
        for i in list {
            let archive = i.archive_id.as_ref().map(|a| &a.as_str()[..a.as_str().len().min(12)]).unwrap_or("-");
            println!(
                "{:<16} {:<16} {:<28} {:>12} {:>12}  {archive}",
                i.instance_id.as_str(),
                i.function_id.as_str(),
                i.state.to_string(),
                i.memory_charge,
                i.last_active_at.to_string()
            );
        }
    }

    pub fn checkpointed(&self, r: &CheckpointResponse) {
        if self.json {
            return self.json(r);
        }
        println!("{} checkpointed as {}", r.instance_id, r.archive_id);
    }

    pub fn restored(&self, r: &RestoreResponse) {
        if self.json {
            return self.json(r);
        }
        if r.restored {
            println!("{} restored", r.instance_id);
        } else {
            println!("{} was already resumed", r.instance_id);
        }
    }

    pub fn migrated(&self, r: &MigrationReport) {
        if self.json {
            return self.json(r);
        }
        println!("{} -> {}: {}", r.instance_id, r.target, outcome_text(&r.outcome));
        println!("{} wire bytes in {} messages", r.wire_bytes, r.messages.len());
        if !r.stranded.is_empty() {
            println!("{} packet(s) arrived during the transfer and were not forwarded", r.stranded.len());
        }
    }

    pub fn injected(&self, r: &InjectResult) {
        if self.json {
            return self.json(r);
        }
        match r {
            InjectResult::Woke { instance_id, wake } => {
                let outcome =
                    wake.response.as_deref().map_or("suspended again".to_owned(), |r| format!("responded {r:?}"));
                println!("woke {instance_id} ({:.3} s charged), {outcome}", wake.charged_latency);
            }
            InjectResult::Buffered { instance_id } => println!("buffered for {instance_id}"),
            InjectResult::Delivered { instance_id } => println!("delivered to {instance_id}"),
            InjectResult::Dropped => println!("dropped: no instance owns that flow"),
        }
    }

    pub fn stats(&self, s: &NodeStats) {
        if self.json {
            return self.json(s);
        }
        println!("node            {}", s.node_id);
        println!("clock           {}", s.clock);
        println!("memory          {} / {} bytes", s.memory_usage, s.memory_capacity);
        println!("archives        {}", s.archives);
        println!("invocations     {}", s.invocations.len());
        println!("wakes           {}", s.wakes.len());
        println!("packets         {} ingested, {} dropped", s.packets_ingested, s.packets_dropped);
        for (state, n) in &s.instances_by_state {
            println!("  {state:<14}{n}");
        }
    }

    pub fn advanced(&self, r: &AdvanceReport) {
        if self.json {
            return self.json(r);
        }
        println!("{} wake(s), {} reaped, {} backup(s)", r.wakes.len(), r.reaped.len(), r.backups.len());
        for e in &r.errors {
            println!("error: {e}");
        }
    }

    pub fn scenario(&self, name: &str, result: &Result<ScriptRun, HarnessError>, costs: &CostModel, show_trace: bool) {
        let empty = ScriptRun::default();
        let run = result.as_ref().unwrap_or(&empty);
        let rows = latency_table(&run.trace, costs);
        if self.json {
            #[derive(Serialize)]
            struct Report<'a> {
                name: &'a str,
                passed: bool,
                error: Option<String>,
                log: &'a [String],
                latency: &'a [edgefaas_core::harness::LatencyRow],
                #[serde(skip_serializing_if = "Option::is_none")]
                trace: Option<&'a [edgefaas_core::node::TraceEvent]>,
            }
            return self.json(&Report {
                name,
                passed: result.is_ok(),
                error: result.as_ref().err().map(|e| e.to_string()),
                log: &run.log,
                latency: &rows,
                trace: show_trace.then_some(&run.trace[..]),
            });
        }
        for line in &run.log {
            println!("  {line}");
        }
        if show_trace {
            println!("{}", run.trace_json());
        }
        match result {
            Ok(_) => println!("PASS {name}"),
            Err(e) => println!("FAIL {name}: {e}"),
        }
        println!();
        println!("{}", LatencyTable(&rows));
    }
}

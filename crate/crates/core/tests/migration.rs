mod common;

use std::collections::BTreeMap;
use std::time::Duration;

use common::*;
use edgefaas_core::lifecycle::InstanceState;
use edgefaas_core::migration::{
    migrate_out, spawn_migration_server, Connector, Fault, LinkError, MigrationLink, MigrationOutcome, TcpConnector,
};
use edgefaas_core::node::JournalPhase;
use edgefaas_core::policy::SuspendPolicy;
use edgefaas_core::{InstanceId, NodeId};
use proptest::prelude::*;

/// Connects once with a fault, then reports the target unreachable.
struct Flaky {
    inner: edgefaas_core::migration::MemoryConnector,
    used: bool,
}

impl Connector for Flaky {
    fn connect(&mut self, target: &NodeId) -> Result<Box<dyn MigrationLink>, LinkError> {
        if std::mem::replace(&mut self.used, true) {
            return Err(LinkError::Unreachable(target.to_string()));
        }
        self.inner.connect(target)
    }
}

fn counter_at(fleet: &Fleet, n: usize) -> InstanceId {
    let mut id = None;
    for _ in 0..n {
        id = Some(fleet.node("A").trigger("counter", vec![]).unwrap().record.instance_id);
    }
    id.unwrap()
}

#[test]
fn in_doubt_migration_is_settled_by_the_next_attempt() {
    let b = NodeId::new("B");
    let probe = Fleet::new(&["A", "B"], vec![counter()], SuspendPolicy::Checkpoint);
    let id = counter_at(&probe, 1);
    let frames = probe.migrate("A", &id, "B", None, 32).messages.len();

    let mut settled = 0;
    for fault in Fault::all(frames) {
        let fleet = Fleet::new(&["A", "B"], vec![counter()], SuspendPolicy::Checkpoint);
        let id = counter_at(&fleet, 3);
        let mut flaky = Flaky { inner: fleet.connector("A", Some(fault)), used: false };
        let first = migrate_out(&mut fleet.node("A"), &id, &b, &mut flaky, 32).unwrap();
        assert!(fleet.owners(&id).len() <= 1, "{fault:?}: two owners");
        if first.outcome != MigrationOutcome::InDoubt {
            continue;
        }
        assert_eq!(fleet.node("A").journal()[&id].phase, JournalPhase::InDoubt);
        assert_eq!(fleet.node("A").instance(&id).unwrap().state, InstanceState::MigratingOut);
        let second = fleet.migrate("A", &id, "B", None, 32);
        assert!(
            matches!(second.outcome, MigrationOutcome::Committed { .. } | MigrationOutcome::Aborted { .. }),
            "{fault:?}: {:?}",
            second.outcome
        );
        let owners = fleet.owners(&id);
        assert_eq!(owners.len(), 1, "{fault:?}");
        let owner = owners[0].as_str().to_owned();
        if owner == "A" {
            fleet.node("A").restore_instance_by_id(&id).unwrap();
        }
        let r = fleet.node(&owner).trigger("counter", vec![]).unwrap();
        assert_eq!(r.response.as_deref(), Some(&b"4"[..]), "{fault:?}");
        settled += 1;
    }
    assert!(settled > 0, "no fault left the migration in doubt");
}

#[test]
fn blocked_instance_wakes_on_the_target_after_tcp_migration() {
    let fleet = Fleet::new(&["A", "B"], vec![authorize()], SuspendPolicy::Checkpoint);
    let id = fleet.node("A").trigger("door", b"back".to_vec()).unwrap().record.instance_id;
    let (remote, local) = flow(&fleet.node("A"), &id, 1).unwrap();
    let b = NodeId::new("B");
    let addr = spawn_migration_server("127.0.0.1:0", fleet.nodes[&b].clone()).unwrap();
    let mut conn = TcpConnector::new(BTreeMap::from([(b.clone(), addr.to_string())]), Duration::from_secs(5));
    let report = migrate_out(&mut fleet.node("A"), &id, &b, &mut conn, 16).unwrap();
    assert!(matches!(report.outcome, MigrationOutcome::Committed { .. }), "{:?}", report.outcome);
    assert_eq!(fleet.owners(&id), vec![b.clone()]);

    fleet.node("B").inject_packet(remote, local, b"yes".to_vec()).unwrap();
    let node = fleet.node("B");
    let inst = node.instance(&id).unwrap();
    assert_eq!(inst.sim.response.as_deref(), Some(&b"yes"[..]));
    assert_eq!(inst.sim.socket(1).unwrap().sent_log, b"authorize back");
    assert_eq!(node.wakes().len(), 1);
}

#[test]
fn unreachable_tcp_peer_aborts_and_keeps_the_source() {
    let fleet = Fleet::new(&["A", "B"], vec![counter()], SuspendPolicy::Checkpoint);
    let id = counter_at(&fleet, 2);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let b = NodeId::new("B");
    let mut conn = TcpConnector::new(BTreeMap::from([(b.clone(), addr.to_string())]), Duration::from_secs(2));
    let report = migrate_out(&mut fleet.node("A"), &id, &b, &mut conn, 16).unwrap();
    assert!(matches!(report.outcome, MigrationOutcome::Aborted { .. }), "{:?}", report.outcome);
    assert_eq!(fleet.owners(&id), vec![NodeId::new("A")]);
    let r = fleet.node("A").trigger("counter", vec![]).unwrap();
    assert_eq!(r.response.as_deref(), Some(&b"3"[..]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_chunk_size_moves_the_same_state(chunk in 1..1024usize, count in 1..20usize) {
        let fleet = Fleet::new(&["A", "B"], vec![counter()], SuspendPolicy::Checkpoint);
        let id = counter_at(&fleet, count);
        let before = fleet.node("A").instance(&id).unwrap().sim.clone();
        let report = fleet.migrate("A", &id, "B", None, chunk);
        prop_assert!(matches!(report.outcome, MigrationOutcome::Committed { .. }), "{:?}", report.outcome);
        fleet.node("B").restore_instance_by_id(&id).unwrap();
        same_state(&fleet.node("B").instance(&id).unwrap().sim, &before).map_err(TestCaseError::fail)?;
    }
}

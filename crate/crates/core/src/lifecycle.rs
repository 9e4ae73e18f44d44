//! Per-instance lifecycle state machine.
//!
//! | from                         | event         | to                        |
//! |------------------------------|---------------|---------------------------|
//! | Registered                   | Invoke        | ColdStarting              |
//! | ColdStarting                 | Complete      | Running                   |
//! | Running                      | Pause         | Paused                    |
//! | Paused                       | Unpause       | Running                   |
//! | Running, Blocked, Paused     | Checkpoint    | Checkpointing             |
//! | Checkpointing                | Complete      | Checkpointed              |
//! | Checkpointed                 | Restore       | Restoring                 |
//! | Restoring                    | Complete      | Running or Blocked        |
//! | Checkpointed                 | MigrateStart  | MigratingOut              |
//! | MigratingOut                 | MigrateCommit | Terminated                |
//! | MigratingOut                 | MigrateAbort  | Checkpointed              |
//!
//! `Reap` takes `Paused` or `Checkpointed` to `Terminated`, and `Fail` takes
//! any non-absorbing state to `Failed`. Entering and leaving `Blocked` is
//! driven by program execution, not by a [`TransitionEvent`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::proxy::WakeRule;
use crate::sim::{BlockReason, SimState};
use crate::types::{ArchiveId, FunctionId, InstanceId, NodeId, SimTime};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state", content = "detail")]
pub enum InstanceState {
    Registered,
    ColdStarting,
    Running,
    Blocked(BlockReason),
    Paused,
    Checkpointing,
    Checkpointed(ArchiveId),
    Restoring,
    MigratingOut,
    Terminated,
    Failed(String),
}

/// Payload-free view of [`InstanceState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StateKind {
    Registered,
    ColdStarting,
    Running,
    Blocked,
    Paused,
    Checkpointing,
    Checkpointed,
    Restoring,
    MigratingOut,
    Terminated,
    Failed,
}

impl StateKind {
    pub const ALL: [StateKind; 11] = [
        StateKind::Registered,
        StateKind::ColdStarting,
        StateKind::Running,
        StateKind::Blocked,
        StateKind::Paused,
        StateKind::Checkpointing,
        StateKind::Checkpointed,
        StateKind::Restoring,
        StateKind::MigratingOut,
        StateKind::Terminated,
        StateKind::Failed,
    ];

    pub fn is_absorbing(self) -> bool {
        matches!(self, StateKind::Terminated | StateKind::Failed)
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl InstanceState {
    pub fn kind(&self) -> StateKind {
        match self {
            InstanceState::Registered => StateKind::Registered,
            InstanceState::ColdStarting => StateKind::ColdStarting,
            InstanceState::Running => StateKind::Running,
            InstanceState::Blocked(_) => StateKind::Blocked,
            InstanceState::Paused => StateKind::Paused,
            InstanceState::Checkpointing => StateKind::Checkpointing,
            InstanceState::Checkpointed(_) => StateKind::Checkpointed,
            InstanceState::Restoring => StateKind::Restoring,
            InstanceState::MigratingOut => StateKind::MigratingOut,
            InstanceState::Terminated => StateKind::Terminated,
            InstanceState::Failed(_) => StateKind::Failed,
        }
    }

    pub fn is_absorbing(&self) -> bool {
        self.kind().is_absorbing()
    }
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstanceState::Blocked(r) => write!(f, "Blocked({r})"),
            InstanceState::Checkpointed(a) => write!(f, "Checkpointed({})", &a.as_str()[..a.as_str().len().min(12)]),
            InstanceState::Failed(c) => write!(f, "Failed({c})"),
            other => write!(f, "{}", other.kind()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TransitionEvent {
    Invoke,
    Pause,
    Unpause,
    Checkpoint,
    Restore,
    MigrateStart,
    MigrateCommit,
    MigrateAbort,
    Complete,
    Fail,
    Reap,
}

impl TransitionEvent {
    pub const ALL: [TransitionEvent; 11] = [
        TransitionEvent::Invoke,
        TransitionEvent::Pause,
        TransitionEvent::Unpause,
        TransitionEvent::Checkpoint,
        TransitionEvent::Restore,
        TransitionEvent::MigrateStart,
        TransitionEvent::MigrateCommit,
        TransitionEvent::MigrateAbort,
        TransitionEvent::Complete,
        TransitionEvent::Fail,
        TransitionEvent::Reap,
    ];
}

impl fmt::Display for TransitionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for TransitionEvent {
    type Err = LifecycleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransitionEvent::ALL
            .into_iter()
            .find(|e| e.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| LifecycleError::UnknownEvent(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LifecycleError {
    #[error("illegal transition: {event} from {state}")]
    IllegalTransition { state: StateKind, event: TransitionEvent },
    #[error("cannot block from {0}")]
    IllegalBlock(StateKind),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("unknown event {0:?}")]
    UnknownEvent(String),
    #[error("socket s{0} is not an open socket of the instance")]
    UnknownSocket(u32),
    #[error("no archive recorded for instance {0}")]
    MissingArchive(InstanceId),
}

/// Whether `event` is legal from `state`. Pure table lookup.
pub fn is_legal(state: StateKind, event: TransitionEvent) -> bool {
    use StateKind as S;
    use TransitionEvent as E;
    match (state, event) {
        (s, E::Fail) => !s.is_absorbing(),
        (S::Registered, E::Invoke)
        | (S::ColdStarting, E::Complete)
        | (S::Running, E::Pause)
        | (S::Paused, E::Unpause)
        | (S::Running | S::Blocked | S::Paused, E::Checkpoint)
        | (S::Checkpointing, E::Complete)
        | (S::Checkpointed, E::Restore)
        | (S::Restoring, E::Complete)
        | (S::Checkpointed, E::MigrateStart)
        | (S::MigratingOut, E::MigrateCommit | E::MigrateAbort)
        | (S::Paused | S::Checkpointed, E::Reap) => true,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Instance {
    pub instance_id: InstanceId,
    pub function_id: FunctionId,
    pub state: InstanceState,
    pub sim: SimState,
    pub created_at: SimTime,
    pub last_active_at: SimTime,
    pub wake_rules: Vec<WakeRule>,
    pub home_node: NodeId,
    /// What the program was waiting on when it was last suspended.
    pub block: Option<BlockReason>,
    /// Most recent archive written while suspending this instance.
    pub archive_id: Option<ArchiveId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuspendMode {
    Pause,
    Checkpoint,
}

impl Instance {
    pub fn new(
        instance_id: InstanceId,
        function_id: FunctionId,
        sim: SimState,
        home_node: NodeId,
        now: SimTime,
    ) -> Self {
        Instance {
            instance_id,
            function_id,
            state: InstanceState::Registered,
            sim,
            created_at: now,
            last_active_at: now,
            wake_rules: Vec::new(),
            home_node,
            block: None,
            archive_id: None,
        }
    }

    /// Applies `event`, leaving the instance untouched when it is illegal.
    pub fn apply(&mut self, event: TransitionEvent, now: SimTime) -> Result<(), LifecycleError> {
        let next = self.next_state(event, now)?;
        if matches!(event, TransitionEvent::Invoke | TransitionEvent::Unpause | TransitionEvent::Restore) {
            self.touch(now);
        }
        self.state = next;
        Ok(())
    }

    fn next_state(&self, event: TransitionEvent, now: SimTime) -> Result<InstanceState, LifecycleError> {
        use InstanceState as S;
        let kind = self.state.kind();
        if !is_legal(kind, event) {
            return Err(LifecycleError::IllegalTransition { state: kind, event });
        }
        let archive =
            || self.archive_id.clone().ok_or_else(|| LifecycleError::MissingArchive(self.instance_id.clone()));
        Ok(match (event, &self.state) {
            (TransitionEvent::Fail, _) => S::Failed(format!("failed from {kind}")),
            (TransitionEvent::Invoke, _) => S::ColdStarting,
            (TransitionEvent::Complete, S::ColdStarting) => S::Running,
            (TransitionEvent::Pause, _) => S::Paused,
            (TransitionEvent::Unpause, _) => S::Running,
            (TransitionEvent::Checkpoint, _) => S::Checkpointing,
            (TransitionEvent::Complete, S::Checkpointing) => S::Checkpointed(archive()?),
            (TransitionEvent::Restore, _) => S::Restoring,
            (TransitionEvent::Complete, S::Restoring) => match self.block {
                Some(reason) if self.sim.still_blocked(&reason, now) => S::Blocked(reason),
                _ => S::Running,
            },
            (TransitionEvent::MigrateStart, _) => S::MigratingOut,
            (TransitionEvent::MigrateCommit, _) => S::Terminated,
            (TransitionEvent::MigrateAbort, _) => S::Checkpointed(archive()?),
            (TransitionEvent::Reap, _) => S::Terminated,
            (TransitionEvent::Complete, _) => unreachable!("Complete legality is checked above"),
        })
    }

    /// Moves to `Failed(cause)` from any non-absorbing state.
    pub fn fail(&mut self, cause: impl Into<String>) -> Result<(), LifecycleError> {
        let kind = self.state.kind();
        if kind.is_absorbing() {
            return Err(LifecycleError::IllegalTransition { state: kind, event: TransitionEvent::Fail });
        }
        self.state = InstanceState::Failed(cause.into());
        Ok(())
    }

    /// Program execution stopped on `reason`.
    pub fn enter_block(&mut self, reason: BlockReason) -> Result<(), LifecycleError> {
        match self.state {
            InstanceState::Running | InstanceState::Blocked(_) => {
                self.state = InstanceState::Blocked(reason);
                Ok(())
            }
            _ => Err(LifecycleError::IllegalBlock(self.state.kind())),
        }
    }

    /// The blocking condition cleared while the instance stayed resident.
    pub fn leave_block(&mut self, now: SimTime) -> Result<(), LifecycleError> {
        match self.state {
            InstanceState::Blocked(_) => {
                self.state = InstanceState::Running;
                self.touch(now);
                Ok(())
            }
            InstanceState::Running => Ok(()),
            _ => Err(LifecycleError::IllegalBlock(self.state.kind())),
        }
    }

    pub fn touch(&mut self, now: SimTime) {
        self.last_active_at = self.last_active_at.max(now);
    }

    /// Whether this node holds the live copy of the instance.
    pub fn is_owner(&self) -> bool {
        !matches!(self.state, InstanceState::Terminated | InstanceState::Failed(_) | InstanceState::MigratingOut)
    }
}

/// Wake rules that reactivate an instance blocked on `reason`.
pub fn wake_rules_for(
    instance_id: &InstanceId,
    reason: &BlockReason,
    sim: &SimState,
) -> Result<Vec<WakeRule>, LifecycleError> {
    match reason {
        BlockReason::Sleep { wake_at } => {
            Ok(vec![WakeRule::Timer { wake_at: *wake_at, instance_id: instance_id.clone() }])
        }
        BlockReason::NetRecv { socket } => {
            let sock = sim.socket(*socket).filter(|s| s.is_open()).ok_or(LifecycleError::UnknownSocket(*socket))?;
            Ok(vec![WakeRule::Packet {
                src: Some(sock.remote.clone()),
                dst: sock.local.clone(),
                instance_id: instance_id.clone(),
                socket_id: *socket,
            }])
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SuspendError<E> {
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error("writing the checkpoint failed: {0}")]
    Write(E),
}

/// Suspends a running or blocked instance.
///
/// The wake rules derived from `reason` are stored on the instance and
/// returned so the caller can register them with the sleep proxy. For
/// `Checkpoint`, `write` persists the instance and returns the archive id.
/// If writing fails the instance is left `Failed`.
pub fn suspend_for_block<E>(
    instance: &mut Instance,
    reason: Option<BlockReason>,
    mode: SuspendMode,
    now: SimTime,
    write: impl FnOnce(&Instance) -> Result<ArchiveId, E>,
) -> Result<Vec<WakeRule>, SuspendError<E>> {
    match &instance.state {
        InstanceState::Running => {}
        InstanceState::Blocked(current) if Some(*current) == reason => {}
        other => {
            let event = match mode {
                SuspendMode::Pause => TransitionEvent::Pause,
                SuspendMode::Checkpoint => TransitionEvent::Checkpoint,
            };
            return Err(LifecycleError::IllegalTransition { state: other.kind(), event }.into());
        }
    }
    let rules = match &reason {
        Some(r) => wake_rules_for(&instance.instance_id, r, &instance.sim)?,
        None => Vec::new(),
    };
    instance.block = reason;
    instance.wake_rules = rules.clone();
    match mode {
        SuspendMode::Pause => {
            instance.leave_block(now)?;
            instance.apply(TransitionEvent::Pause, now)?;
        }
        SuspendMode::Checkpoint => {
            instance.apply(TransitionEvent::Checkpoint, now)?;
            match write(instance) {
                Ok(id) => instance.archive_id = Some(id),
                Err(e) => {
                    instance.fail("checkpoint write failed")?;
                    return Err(SuspendError::Write(e));
                }
            }
            instance.apply(TransitionEvent::Complete, now)?;
        }
    }
    Ok(rules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_until_block, SimStep, DEFAULT_STEP_LIMIT};
    use crate::types::Endpoint;

    fn instance() -> Instance {
        Instance::new(
            InstanceId::new("i1"),
            FunctionId::new("f"),
            SimState::new(1, "A", 5000),
            NodeId::new("A"),
            SimTime::ZERO,
        )
    }

    fn running() -> Instance {
        let mut i = instance();
        i.apply(TransitionEvent::Invoke, SimTime::ZERO).unwrap();
        i.apply(TransitionEvent::Complete, SimTime::ZERO).unwrap();
        i
    }

    fn no_write(_: &Instance) -> Result<ArchiveId, std::convert::Infallible> {
        unreachable!("pause never writes")
    }

    #[test]
    fn running_pause_gives_paused() {
        let mut i = running();
        i.apply(TransitionEvent::Pause, SimTime::from_secs(1)).unwrap();
        assert_eq!(i.state, InstanceState::Paused);
    }

    #[test]
    fn terminated_is_absorbing() {
        let mut i = running();
        i.apply(TransitionEvent::Pause, SimTime::ZERO).unwrap();
        i.apply(TransitionEvent::Reap, SimTime::ZERO).unwrap();
        assert_eq!(
            i.apply(TransitionEvent::Invoke, SimTime::ZERO),
            Err(LifecycleError::IllegalTransition { state: StateKind::Terminated, event: TransitionEvent::Invoke })
        );
        assert_eq!(i.state, InstanceState::Terminated);
    }

    #[test]
    fn unknown_event_names_are_rejected() {
        assert_eq!("checkpoint".parse::<TransitionEvent>(), Ok(TransitionEvent::Checkpoint));
        assert!(matches!("Hibernate".parse::<TransitionEvent>(), Err(LifecycleError::UnknownEvent(_))));
    }

    #[test]
    fn timestamps_only_move_forward() {
        let mut i = running();
        i.apply(TransitionEvent::Pause, SimTime::from_secs(10)).unwrap();
        i.apply(TransitionEvent::Unpause, SimTime::from_secs(20)).unwrap();
        assert_eq!(i.last_active_at, SimTime::from_secs(20));
        i.apply(TransitionEvent::Pause, SimTime::from_secs(20)).unwrap();
        i.apply(TransitionEvent::Unpause, SimTime::from_secs(5)).unwrap();
        assert_eq!(i.last_active_at, SimTime::from_secs(20));
    }

    #[test]
    fn checkpoint_sleeping_instance_yields_timer_rule() {
        let mut i = running();
        let program = [SimStep::Sleep(SimTime::from_secs(60))];
        let reason = match run_until_block(&mut i.sim, &program, SimTime::ZERO, DEFAULT_STEP_LIMIT).unwrap() {
            crate::sim::Outcome::Blocked(r) => r,
            other => panic!("unexpected {other:?}"),
        };
        i.enter_block(reason).unwrap();
        let rules = suspend_for_block(&mut i, Some(reason), SuspendMode::Checkpoint, SimTime::ZERO, |_| {
            Ok::<_, std::convert::Infallible>(ArchiveId::new("abc"))
        })
        .unwrap();
        assert_eq!(i.state, InstanceState::Checkpointed(ArchiveId::new("abc")));
        assert_eq!(
            rules,
            vec![WakeRule::Timer { wake_at: SimTime::from_secs(60), instance_id: InstanceId::new("i1") }]
        );
        assert_eq!(i.wake_rules, rules);
    }

    #[test]
    fn checkpoint_recv_blocked_instance_yields_packet_rule() {
        let mut i = running();
        let program = [SimStep::Open { socket: 1, peer: "B:80".parse().unwrap() }, SimStep::Recv { socket: 1 }];
        let outcome = run_until_block(&mut i.sim, &program, SimTime::ZERO, DEFAULT_STEP_LIMIT).unwrap();
        let crate::sim::Outcome::Blocked(reason) = outcome else { panic!() };
        i.enter_block(reason).unwrap();
        let rules = suspend_for_block(&mut i, Some(reason), SuspendMode::Checkpoint, SimTime::ZERO, |_| {
            Ok::<_, std::convert::Infallible>(ArchiveId::new("abc"))
        })
        .unwrap();
        assert_eq!(
            rules,
            vec![WakeRule::Packet {
                src: Some(Endpoint::new("B", 80)),
                dst: Endpoint::new("A", 5000),
                instance_id: InstanceId::new("i1"),
                socket_id: 1,
            }]
        );
    }

    #[test]
    fn pause_without_block_has_no_rules() {
        let mut i = running();
        let rules = suspend_for_block(&mut i, None, SuspendMode::Pause, SimTime::ZERO, no_write).unwrap();
        assert!(rules.is_empty());
        assert_eq!(i.state, InstanceState::Paused);
    }

    #[test]
    fn suspend_on_unknown_socket_fails_cleanly() {
        let mut i = running();
        let err = suspend_for_block(
            &mut i,
            Some(BlockReason::NetRecv { socket: 9 }),
            SuspendMode::Pause,
            SimTime::ZERO,
            no_write,
        )
        .unwrap_err();
        assert!(matches!(err, SuspendError::Lifecycle(LifecycleError::UnknownSocket(9))));
        assert_eq!(i.state, InstanceState::Running);
    }

    #[test]
    fn failed_write_leaves_instance_failed() {
        let mut i = running();
        let err =
            suspend_for_block(&mut i, None, SuspendMode::Checkpoint, SimTime::ZERO, |_| Err("disk full")).unwrap_err();
        assert!(matches!(err, SuspendError::Write("disk full")));
        assert_eq!(i.state.kind(), StateKind::Failed);
    }

    #[test]
    fn restore_rechecks_block_condition() {
        let mut i = running();
        let wake_at = SimTime::from_secs(60);
        i.sim.sleep_deadline = Some(wake_at);
        i.enter_block(BlockReason::Sleep { wake_at }).unwrap();
        suspend_for_block(&mut i, Some(BlockReason::Sleep { wake_at }), SuspendMode::Checkpoint, SimTime::ZERO, |_| {
            Ok::<_, std::convert::Infallible>(ArchiveId::new("a"))
        })
        .unwrap();

        let mut early = i.clone();
        early.apply(TransitionEvent::Restore, SimTime::from_secs(30)).unwrap();
        early.apply(TransitionEvent::Complete, SimTime::from_secs(30)).unwrap();
        assert_eq!(early.state, InstanceState::Blocked(BlockReason::Sleep { wake_at }));

        i.apply(TransitionEvent::Restore, SimTime::from_secs(60)).unwrap();
        i.apply(TransitionEvent::Complete, SimTime::from_secs(60)).unwrap();
        assert_eq!(i.state, InstanceState::Running);
    }

    #[test]
    fn migrate_abort_returns_to_checkpointed() {
        let mut i = running();
        suspend_for_block(&mut i, None, SuspendMode::Checkpoint, SimTime::ZERO, |_| {
            Ok::<_, std::convert::Infallible>(ArchiveId::new("a"))
        })
        .unwrap();
        i.apply(TransitionEvent::MigrateStart, SimTime::ZERO).unwrap();
        assert!(!i.is_owner());
        i.apply(TransitionEvent::MigrateAbort, SimTime::ZERO).unwrap();
        assert_eq!(i.state, InstanceState::Checkpointed(ArchiveId::new("a")));
    }
}

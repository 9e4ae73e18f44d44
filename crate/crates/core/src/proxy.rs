//! The shared sleep proxy.
//!
//! One proxy per node holds the wake rules of every suspended instance. It
//! buffers inbound packets addressed to those instances and emits a
//! [`WakeAction`] the first time a rule fires in a suspension epoch. The
//! restored instance then takes the buffered bytes by socket id, which is
//! what stands in for handing file descriptors across container boundaries.
//!
//! Each registration moves through three phases:
//!
//! ```text
//!   register_pending ──► Arming ──arm()──► Armed ──match──► Fired
//!                          │                  ▲
//!                          └── match: buffer, │ disarm()
//!                              defer wake ────┘
//! ```
//!
//! `register` goes straight to `Armed`. A match while `Arming` buffers the
//! payload and remembers the cause; `arm` then emits the deferred action.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{Endpoint, InstanceId, SimTime, SocketId};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WakeRule {
    /// Matches packets from `src` (any source when `None`) to exactly `dst`.
    Packet {
        src: Option<Endpoint>,
        dst: Endpoint,
        instance_id: InstanceId,
        socket_id: SocketId,
    },
    Timer {
        wake_at: SimTime,
        instance_id: InstanceId,
    },
}

impl WakeRule {
    pub fn instance_id(&self) -> &InstanceId {
        match self {
            WakeRule::Packet { instance_id, .. } | WakeRule::Timer { instance_id, .. } => instance_id,
        }
    }

    /// Whether `packet` satisfies this rule. Timer rules match no packets.
    pub fn matches(&self, packet: &SimPacket) -> bool {
        match self {
            WakeRule::Packet { src, dst, .. } => dst == &packet.dst && src.as_ref().is_none_or(|s| s == &packet.src),
            WakeRule::Timer { .. } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimPacket {
    pub src: Endpoint,
    pub dst: Endpoint,
    #[serde(with = "crate::util::base64_bytes")]
    pub payload: Vec<u8>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub socket_id: SocketId,
    #[serde(with = "crate::util::base64_bytes")]
    pub payload: Vec<u8>,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WakeCause {
    Packet { socket_id: SocketId, seq: u64 },
    Timer { wake_at: SimTime },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WakeAction {
    pub instance_id: InstanceId,
    pub watch_id: WatchId,
    pub cause: WakeCause,
    /// Payloads buffered at the moment the wake fired. More may follow before
    /// the instance is restored; [`SleepProxy::release`] returns all of them.
    pub deliveries: Vec<Delivery>,
}

/// Identifies one registration, i.e. one suspension epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WatchId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProxyError {
    #[error("no wake rules given")]
    EmptyRules,
    #[error("rule for {dst} conflicts with a rule held by instance {holder}")]
    ConflictingRule { dst: Endpoint, holder: InstanceId },
    #[error("rule belongs to instance {found}, not {expected}")]
    ForeignRule { expected: InstanceId, found: InstanceId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Arming,
    Armed,
    Fired,
}

#[derive(Debug, Clone)]
struct Registration {
    watch_id: WatchId,
    rules: Vec<WakeRule>,
    phase: Phase,
    deferred: Option<WakeCause>,
    buffer: Vec<Delivery>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ProxyStats {
    pub ingested: u64,
    pub dropped: u64,
    pub wakes: u64,
}

#[derive(Debug, Default)]
pub struct SleepProxy {
    registrations: BTreeMap<InstanceId, Registration>,
    next_watch: u64,
    last_seq: Option<u64>,
    stats: ProxyStats,
}

impl SleepProxy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `rules` for an instance that has finished suspending.
    pub fn register(&mut self, instance_id: &InstanceId, rules: Vec<WakeRule>) -> Result<WatchId, ProxyError> {
        self.insert(instance_id, rules, Phase::Armed)
    }

    /// Registers `rules` ahead of a suspension that is still in progress.
    /// Matches are buffered and the wake is held back until [`arm`](Self::arm).
    pub fn register_pending(&mut self, instance_id: &InstanceId, rules: Vec<WakeRule>) -> Result<WatchId, ProxyError> {
        self.insert(instance_id, rules, Phase::Arming)
    }

    fn insert(&mut self, instance_id: &InstanceId, rules: Vec<WakeRule>, phase: Phase) -> Result<WatchId, ProxyError> {
        if rules.is_empty() {
            return Err(ProxyError::EmptyRules);
        }
        for rule in &rules {
            if rule.instance_id() != instance_id {
                return Err(ProxyError::ForeignRule {
                    expected: instance_id.clone(),
                    found: rule.instance_id().clone(),
                });
            }
            if let WakeRule::Packet { src, dst, .. } = rule {
                if let Some(holder) = self.conflict(instance_id, src.as_ref(), dst) {
                    return Err(ProxyError::ConflictingRule { dst: dst.clone(), holder });
                }
            }
        }
        self.next_watch += 1;
        let watch_id = WatchId(self.next_watch);
        // last writer wins; anything the old epoch buffered is still owed to the instance
        let buffer = self.registrations.remove(instance_id).map(|r| r.buffer).unwrap_or_default();
        self.registrations.insert(instance_id.clone(), Registration { watch_id, rules, phase, deferred: None, buffer });
        Ok(watch_id)
    }

    fn conflict(&self, instance_id: &InstanceId, src: Option<&Endpoint>, dst: &Endpoint) -> Option<InstanceId> {
        self.registrations
            .iter()
            .filter(|(id, _)| *id != instance_id)
            .flat_map(|(id, reg)| reg.rules.iter().map(move |r| (id, r)))
            .find_map(|(id, r)| match r {
                WakeRule::Packet { src: other_src, dst: other_dst, .. } if other_dst == dst => {
                    let overlap = match (src, other_src) {
                        (Some(a), Some(b)) => a == b,
                        _ => true,
                    };
                    overlap.then(|| id.clone())
                }
                _ => None,
            })
    }

    /// The rule matching `packet`, as `(instance, socket)`. Pure.
    pub fn match_packet(&self, packet: &SimPacket) -> Option<(InstanceId, SocketId)> {
        self.registrations.values().flat_map(|r| r.rules.iter()).find_map(|rule| match rule {
            WakeRule::Packet { instance_id, socket_id, .. } if rule.matches(packet) => {
                Some((instance_id.clone(), *socket_id))
            }
            _ => None,
        })
    }

    /// Buffers a matching packet and returns a wake the first time the
    /// instance's current epoch is triggered. Unknown flows are dropped.
    pub fn ingest(&mut self, packet: SimPacket, _now: SimTime) -> Option<WakeAction> {
        self.stats.ingested += 1;
        if let Some(last) = self.last_seq {
            debug_assert!(packet.seq > last, "packet sequence numbers must increase");
        }
        self.last_seq = Some(packet.seq);

        let Some((instance_id, socket_id)) = self.match_packet(&packet) else {
            self.stats.dropped += 1;
            tracing::debug!(src = %packet.src, dst = %packet.dst, "dropping packet for unknown flow");
            return None;
        };
        let reg = self.registrations.get_mut(&instance_id).expect("matched registration exists");
        reg.buffer.push(Delivery { socket_id, payload: packet.payload, seq: packet.seq });
        let cause = WakeCause::Packet { socket_id, seq: packet.seq };
        match reg.phase {
            Phase::Armed => {
                reg.phase = Phase::Fired;
                self.stats.wakes += 1;
                Some(WakeAction { instance_id, watch_id: reg.watch_id, cause, deliveries: reg.buffer.clone() })
            }
            Phase::Arming => {
                reg.deferred.get_or_insert(cause);
                None
            }
            Phase::Fired => None,
        }
    }

    /// Fires every timer rule due at `now`, ordered by deadline then instance.
    pub fn timer_tick(&mut self, now: SimTime) -> Vec<WakeAction> {
        let mut due: Vec<(SimTime, InstanceId)> = Vec::new();
        for (id, reg) in &mut self.registrations {
            let mut fired_at = None;
            reg.rules.retain(|r| match r {
                WakeRule::Timer { wake_at, .. } if *wake_at <= now => {
                    fired_at = Some(fired_at.map_or(*wake_at, |t: SimTime| t.min(*wake_at)));
                    false
                }
                _ => true,
            });
            if let Some(wake_at) = fired_at {
                match reg.phase {
                    Phase::Armed => due.push((wake_at, id.clone())),
                    Phase::Arming => {
                        reg.deferred.get_or_insert(WakeCause::Timer { wake_at });
                    }
                    Phase::Fired => {}
                }
            }
        }
        due.sort();
        due.into_iter()
            .map(|(wake_at, id)| {
                let reg = self.registrations.get_mut(&id).expect("due registration exists");
                reg.phase = Phase::Fired;
                self.stats.wakes += 1;
                WakeAction {
                    instance_id: id,
                    watch_id: reg.watch_id,
                    cause: WakeCause::Timer { wake_at },
                    deliveries: reg.buffer.clone(),
                }
            })
            .collect()
    }

    /// Marks the instance's suspension as complete and returns the wake that
    /// was held back while it was in progress, if any.
    pub fn arm(&mut self, instance_id: &InstanceId) -> Option<WakeAction> {
        let reg = self.registrations.get_mut(instance_id)?;
        if reg.phase != Phase::Arming {
            return None;
        }
        match reg.deferred.take() {
            Some(cause) => {
                reg.phase = Phase::Fired;
                self.stats.wakes += 1;
                Some(WakeAction {
                    instance_id: instance_id.clone(),
                    watch_id: reg.watch_id,
                    cause,
                    deliveries: reg.buffer.clone(),
                })
            }
            None => {
                reg.phase = Phase::Armed;
                None
            }
        }
    }

    /// Holds back wakes again, e.g. while the instance is being migrated.
    pub fn disarm(&mut self, instance_id: &InstanceId) {
        if let Some(reg) = self.registrations.get_mut(instance_id) {
            if reg.phase == Phase::Armed {
                reg.phase = Phase::Arming;
            }
        }
    }

    /// Ends the instance's epoch and hands over everything buffered for it,
    /// in arrival order.
    pub fn release(&mut self, instance_id: &InstanceId) -> Vec<Delivery> {
        let mut buffer = self.registrations.remove(instance_id).map(|r| r.buffer).unwrap_or_default();
        buffer.sort_by_key(|d| d.seq);
        buffer
    }

    /// Earliest pending timer deadline across all registrations.
    pub fn next_timer(&self) -> Option<SimTime> {
        self.registrations
            .values()
            .flat_map(|r| r.rules.iter())
            .filter_map(|r| match r {
                WakeRule::Timer { wake_at, .. } => Some(*wake_at),
                WakeRule::Packet { .. } => None,
            })
            .min()
    }

    pub fn phase(&self, instance_id: &InstanceId) -> Option<Phase> {
        self.registrations.get(instance_id).map(|r| r.phase)
    }

    pub fn rules(&self, instance_id: &InstanceId) -> Option<&[WakeRule]> {
        self.registrations.get(instance_id).map(|r| r.rules.as_slice())
    }

    pub fn is_registered(&self, instance_id: &InstanceId) -> bool {
        self.registrations.contains_key(instance_id)
    }

    pub fn stats(&self) -> ProxyStats {
        self.stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(s: &str) -> Endpoint {
        s.parse().unwrap()
    }

    fn iid(s: &str) -> InstanceId {
        InstanceId::new(s)
    }

    fn pkt(src: &str, dst: &str, payload: &[u8], seq: u64) -> SimPacket {
        SimPacket { src: ep(src), dst: ep(dst), payload: payload.to_vec(), seq }
    }

    fn packet_rule(src: Option<&str>, dst: &str, inst: &str, socket_id: SocketId) -> WakeRule {
        WakeRule::Packet { src: src.map(ep), dst: ep(dst), instance_id: iid(inst), socket_id }
    }

    #[test]
    fn matching_packet_wakes_registered_instance() {
        let mut p = SleepProxy::new();
        p.register(&iid("i1"), vec![packet_rule(Some("B:80"), "A:5000", "i1", 1)]).unwrap();
        assert_eq!(p.match_packet(&pkt("B:80", "A:5000", b"", 1)), Some((iid("i1"), 1)));
        assert_eq!(p.match_packet(&pkt("C:80", "A:5000", b"", 2)), None);
        let wake = p.ingest(pkt("B:80", "A:5000", b"ok", 3), SimTime::ZERO).unwrap();
        assert_eq!(wake.instance_id, iid("i1"));
        assert_eq!(wake.deliveries.len(), 1);
    }

    #[test]
    fn empty_registration_rejected() {
        assert_eq!(SleepProxy::new().register(&iid("i1"), vec![]), Err(ProxyError::EmptyRules));
    }

    #[test]
    fn second_claim_on_same_flow_conflicts() {
        let mut p = SleepProxy::new();
        p.register(&iid("i1"), vec![packet_rule(Some("B:80"), "A:5000", "i1", 1)]).unwrap();
        let err = p.register(&iid("i2"), vec![packet_rule(Some("B:80"), "A:5000", "i2", 1)]).unwrap_err();
        assert!(matches!(err, ProxyError::ConflictingRule { .. }));
        // wildcard overlaps too
        assert!(p.register(&iid("i3"), vec![packet_rule(None, "A:5000", "i3", 1)]).is_err());
        // same instance re-registering replaces its own rule
        p.register(&iid("i1"), vec![packet_rule(Some("B:80"), "A:5000", "i1", 1)]).unwrap();
    }

    #[test]
    fn one_wake_per_epoch() {
        let mut p = SleepProxy::new();
        p.register(&iid("i1"), vec![packet_rule(Some("B:80"), "A:5000", "i1", 1)]).unwrap();
        assert!(p.ingest(pkt("B:80", "A:5000", b"one", 1), SimTime::ZERO).is_some());
        assert!(p.ingest(pkt("B:80", "A:5000", b"two", 2), SimTime::ZERO).is_none());
        let got: Vec<_> = p.release(&iid("i1")).into_iter().map(|d| d.payload).collect();
        assert_eq!(got, vec![b"one".to_vec(), b"two".to_vec()]);

        // re-suspension opens a new epoch
        p.register(&iid("i1"), vec![packet_rule(Some("B:80"), "A:5000", "i1", 1)]).unwrap();
        assert!(p.ingest(pkt("B:80", "A:5000", b"three", 3), SimTime::ZERO).is_some());
    }

    #[test]
    fn unknown_flow_is_dropped() {
        let mut p = SleepProxy::new();
        assert!(p.ingest(pkt("B:80", "A:5000", b"x", 1), SimTime::ZERO).is_none());
        assert_eq!(p.stats().dropped, 1);
    }

    #[test]
    fn wake_during_arming_is_deferred_until_armed() {
        let mut p = SleepProxy::new();
        p.register_pending(&iid("i1"), vec![packet_rule(Some("B:80"), "A:5000", "i1", 1)]).unwrap();
        assert!(p.ingest(pkt("B:80", "A:5000", b"early", 1), SimTime::ZERO).is_none());
        let wake = p.arm(&iid("i1")).expect("deferred wake");
        assert_eq!(wake.cause, WakeCause::Packet { socket_id: 1, seq: 1 });
        assert!(p.arm(&iid("i1")).is_none());
    }

    #[test]
    fn timers_fire_once_at_deadline() {
        let mut p = SleepProxy::new();
        p.register(&iid("i1"), vec![WakeRule::Timer { wake_at: SimTime::from_secs(60), instance_id: iid("i1") }])
            .unwrap();
        assert!(p.timer_tick(SimTime::from_secs(59)).is_empty());
        assert_eq!(p.timer_tick(SimTime::from_secs(60)).len(), 1);
        assert!(p.timer_tick(SimTime::from_secs(60)).is_empty());
    }
}

use std::cmp::Reverse;
use std::collections::BTreeSet;

use edgefaas_core::lifecycle::{StateKind, SuspendMode};
use edgefaas_core::policy::{
    memory_usage, plan_eviction, plan_offload, suspend_verdict, CostModel, InstanceView, MemoryModel, NodeInfo,
    PlanAction, PolicyError, SuspendPolicy,
};
use edgefaas_core::{FunctionId, InstanceId, NodeId, SimTime};
use proptest::prelude::*;

const NOW: SimTime = SimTime::from_millis(5_000);
const IMAGES: [&str; 2] = ["sha256:a", "sha256:b"];

fn views(max: usize) -> impl Strategy<Value = Vec<InstanceView>> {
    prop::collection::vec((0..StateKind::ALL.len(), 1..100u64, 0..6u64, 0..6u64, any::<bool>(), 0..2usize), 0..=max)
        .prop_map(|raw| {
            raw.into_iter()
                .enumerate()
                .map(|(i, (s, declared, last, idle, ctx, img))| InstanceView {
                    instance_id: InstanceId::new(format!("i{i}")),
                    function_id: FunctionId::new("f"),
                    state: StateKind::ALL[s],
                    memory_declared: declared,
                    image_digest: IMAGES[img].into(),
                    last_active_at: SimTime::from_secs(last),
                    idle_timeout: SimTime::from_secs(idle),
                    has_block_context: ctx,
                })
                .collect()
        })
}

fn model() -> impl Strategy<Value = MemoryModel> {
    (prop::option::of(1..100u64), prop::option::of(1..100u64), 0..3u64).prop_map(|(running, paused, ckpt)| {
        MemoryModel {
            per_instance_running: running,
            per_instance_paused: paused,
            per_instance_checkpointed: ckpt,
            capacity: 300,
            high_watermark: 0.5,
        }
    })
}

fn held(v: &InstanceView, m: &MemoryModel) -> u64 {
    let running = m.per_instance_running.unwrap_or(v.memory_declared);
    match v.state {
        StateKind::Paused => m.per_instance_paused.unwrap_or(running),
        StateKind::Checkpointed | StateKind::MigratingOut => m.per_instance_checkpointed,
        StateKind::Registered | StateKind::Terminated | StateKind::Failed => 0,
        _ => running,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Act {
    Keep,
    Checkpoint,
    Reap,
}

/// Tries every assignment of actions and keeps the best by: fewest
/// checkpoints, then the earliest checkpoints in priority order, then the
/// fewest reaps counted from the back of the order.
fn brute_eviction(all: &[InstanceView], m: &MemoryModel, needed: u64) -> Result<Vec<PlanAction>, u64> {
    let rank = |s: StateKind| match s {
        StateKind::Blocked => 0,
        StateKind::Running => 1,
        _ => 2,
    };
    let mut order: Vec<&InstanceView> =
        all.iter().filter(|v| matches!(v.state, StateKind::Blocked | StateKind::Running | StateKind::Paused)).collect();
    order.sort_by_key(|v| (rank(v.state), v.last_active_at, v.instance_id.clone()));
    let options: Vec<Vec<(Act, u64)>> = order
        .iter()
        .map(|v| {
            let h = held(v, m);
            let idle = NOW.saturating_sub(v.last_active_at) >= v.idle_timeout;
            let reapable = matches!(v.state, StateKind::Running | StateKind::Paused) && idle && !v.has_block_context;
            let mut o = vec![(Act::Keep, 0)];
            if reapable {
                o.push((Act::Reap, h));
            } else {
                o.push((Act::Checkpoint, h.saturating_sub(m.per_instance_checkpointed)));
            }
            o
        })
        .collect();
    let available: u64 = options.iter().map(|o| o.iter().map(|x| x.1).max().unwrap()).sum();
    if needed == 0 {
        return Ok(Vec::new());
    }
    let n = order.len();
    type Key = (usize, Vec<usize>, Vec<bool>);
    let mut best: Option<(Key, Vec<Act>)> = None;
    for mask in 0..(1u32 << n) {
        let acts: Vec<(Act, u64)> = (0..n).map(|i| options[i][if mask >> i & 1 == 1 { 1 } else { 0 }]).collect();
        if acts.iter().map(|a| a.1).sum::<u64>() < needed {
            continue;
        }
        let ckpts: Vec<usize> = (0..n).filter(|&i| acts[i].0 == Act::Checkpoint).collect();
        let reaps_from_back: Vec<bool> = (0..n).rev().map(|i| acts[i].0 == Act::Reap).collect();
        let key = (ckpts.len(), ckpts, reaps_from_back);
        if best.as_ref().is_none_or(|(k, _)| key < *k) {
            best = Some((key, acts.iter().map(|a| a.0).collect()));
        }
    }
    let (_, acts) = best.ok_or(available)?;
    Ok(order
        .iter()
        .zip(acts)
        .filter_map(|(v, a)| match a {
            Act::Keep => None,
            Act::Checkpoint => Some(PlanAction::Checkpoint(v.instance_id.clone())),
            Act::Reap => Some(PlanAction::Reap(v.instance_id.clone())),
        })
        .collect())
}

fn peers() -> impl Strategy<Value = Vec<NodeInfo>> {
    prop::collection::vec((0..200u64, 0..4u8), 0..5).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (free, imgs))| NodeInfo {
                node_id: NodeId::new(format!("n{}", i % 3)),
                address: String::new(),
                free_capacity: free,
                base_images: IMAGES
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| imgs >> k & 1 == 1)
                    .map(|(_, s)| s.to_string())
                    .collect::<BTreeSet<_>>(),
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1024))]

    #[test]
    fn eviction_matches_exhaustive_search(all in views(8), m in model(), needed in 0..500u64) {
        let plan = plan_eviction(&all, &m, needed, &CostModel::default(), NOW);
        match brute_eviction(&all, &m, needed) {
            Ok(expected) => prop_assert_eq!(plan, Ok(expected)),
            Err(available) => prop_assert_eq!(plan, Err(PolicyError::InsufficientCandidates { needed, available })),
        }
    }

    #[test]
    fn offload_picks_the_best_pair(all in views(8), ps in peers(), m in model()) {
        let usage: u64 = all.iter().map(|v| held(v, &m)).sum();
        let mut best = None;
        if usage as f64 > m.watermark_bytes() {
            for v in all.iter().filter(|v| matches!(v.state, StateKind::Blocked | StateKind::Checkpointed)) {
                let need = m.per_instance_running.unwrap_or(v.memory_declared);
                for p in ps.iter().filter(|p| p.free_capacity >= need && p.base_images.contains(&v.image_digest)) {
                    let key = (need, p.free_capacity, Reverse(p.node_id.clone()), Reverse(v.instance_id.clone()));
                    if best.as_ref().is_none_or(|(k, _)| key > *k) {
                        best = Some((key, (v.instance_id.clone(), p.node_id.clone())));
                    }
                }
            }
        }
        prop_assert_eq!(plan_offload(&all, &ps, &m), best.map(|b| b.1));
    }

    #[test]
    fn usage_is_additive(a in views(50), b in views(50), m in model()) {
        let mut both = a.clone();
        both.extend(b.iter().cloned());
        prop_assert_eq!(memory_usage(&both, &m), memory_usage(&a, &m) + memory_usage(&b, &m));
        prop_assert_eq!(memory_usage(&a, &m), a.iter().map(|v| held(v, &m)).sum::<u64>());
    }

    #[test]
    fn adaptive_pauses_until_the_watermark(usage in 0..400u64, m in model()) {
        let expected = if usage as f64 <= m.watermark_bytes() { SuspendMode::Pause } else { SuspendMode::Checkpoint };
        prop_assert_eq!(suspend_verdict(SuspendPolicy::Adaptive, usage, &m), Some(expected));
        prop_assert_eq!(suspend_verdict(SuspendPolicy::Keep, usage, &m), None);
        prop_assert_eq!(suspend_verdict(SuspendPolicy::Pause, usage, &m), Some(SuspendMode::Pause));
        prop_assert_eq!(suspend_verdict(SuspendPolicy::Checkpoint, usage, &m), Some(SuspendMode::Checkpoint));
    }
}

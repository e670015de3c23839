//! Built-in decision rules for the schema, recovery and optimization
//! agents. Every function here is pure.

use std::cmp::Reverse;
use std::collections::BTreeSet;

use thiserror::Error;

use super::backend::CandidateAction;
use super::bundle::{IncidentView, ObservationBundle, PipelineInfo, PolicySummary};
use super::memory::MemoryEntry;
use crate::action::{ActionKind, ActionParams, Actor, Target};
use crate::schema::DriftClass;
use crate::sim::{FailureCause, Health, KernelEvent, PipelineTelemetry};
use crate::telemetry::IncidentClass;
use crate::Tick;

/// Utilization below this counts toward a scale-down.
pub const LOW_WATERMARK: f64 = 0.30;
/// Ticks utilization must stay low before scaling down.
pub const LOW_UTIL_TICKS: Tick = 30;
/// Consecutive in-band ticks for streaming input to count as stable.
pub const STABLE_TICKS: Tick = 10;
/// Relative band around the pre-incident arrival mean.
pub const STABLE_BAND: f64 = 0.20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("drift class {0:?} is not a schema incident")]
    NotASchemaIncident(DriftClass),
    #[error("recovery has no strategy for {0}")]
    UnknownIncidentClass(IncidentClass),
}

fn running(t: &PipelineTelemetry) -> bool {
    matches!(t.health, Health::Healthy | Health::Failing)
}

fn candidate(
    kind: ActionKind,
    target: Target,
    rationale: String,
    incident: Option<u64>,
) -> CandidateAction {
    CandidateAction {
        kind,
        target,
        params: ActionParams::default(),
        rationale,
        incident,
    }
}

fn scale(
    kind: ActionKind,
    target: Target,
    delta: i32,
    rationale: String,
    incident: Option<u64>,
) -> CandidateAction {
    CandidateAction {
        params: ActionParams {
            delta_units: Some(delta),
            ..ActionParams::default()
        },
        ..candidate(kind, target, rationale, incident)
    }
}

/// Reconciliation for a drift on `pipeline` affecting `partitions`.
pub fn schema_propose(
    class: &DriftClass,
    pipeline: &str,
    partitions: &[u64],
    policy: &PolicySummary,
    incident: Option<u64>,
) -> Result<CandidateAction, AgentError> {
    match class {
        DriftClass::NoDrift => Err(AgentError::NotASchemaIncident(class.clone())),
        DriftClass::BackwardCompatible => Ok(candidate(
            ActionKind::Resume,
            Target::pipeline(pipeline),
            "backward-compatible drift; columns auto-mapped, no halt needed".into(),
            incident,
        )),
        DriftClass::Incompatible { reasons } => {
            if policy.quarantine_allowed {
                Ok(candidate(
                    ActionKind::QuarantinePartition,
                    Target::partitions(pipeline, partitions.to_vec()),
                    format!(
                        "incompatible drift ({} breaking change(s)); isolating partition(s) {partitions:?}",
                        reasons.len()
                    ),
                    incident,
                ))
            } else {
                Ok(candidate(
                    ActionKind::Halt,
                    Target::pipeline(pipeline),
                    format!(
                        "incompatible drift and quarantine disabled ({:?} mode)",
                        policy.schema_mode
                    ),
                    incident,
                ))
            }
        }
    }
}

fn needs_approval(kind: ActionKind, info: &PipelineInfo, policy: &PolicySummary) -> bool {
    policy
        .approval_required
        .iter()
        .any(|r| r.action == kind && info.tags.contains(&r.tag))
}

fn memory_stats(memory: &[MemoryEntry], class: IncidentClass, kind: ActionKind) -> (f64, f64) {
    match memory.iter().find(|e| e.class == class && e.kind == kind) {
        Some(e) if e.attempts > 0 => (
            e.successes as f64 / e.attempts as f64,
            e.mean_resolution.unwrap_or(f64::INFINITY),
        ),
        _ => (0.5, f64::INFINITY),
    }
}

/// Order strategies: those needing approval last, then by remembered
/// success rate (untried counts as 0.5), then by mean resolution ticks,
/// then by the order given.
pub fn rank_strategies(
    candidates: Vec<CandidateAction>,
    class: IncidentClass,
    memory: &[MemoryEntry],
    approval: impl Fn(ActionKind) -> bool,
) -> Vec<CandidateAction> {
    let mut keyed: Vec<(bool, f64, f64, usize, CandidateAction)> = candidates
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let (rate, mean) = memory_stats(memory, class, c.kind);
            (approval(c.kind), rate, mean, i, c)
        })
        .collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.1.total_cmp(&a.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    keyed.into_iter().map(|k| k.4).collect()
}

/// Next remediation step for an incident the recovery agent owns.
/// `Ok(None)` means wait.
pub fn recovery_propose(
    incident: &IncidentView,
    bundle: &ObservationBundle,
) -> Result<Option<CandidateAction>, AgentError> {
    let class = incident.class;
    if !matches!(
        class,
        IncidentClass::UpstreamDelay | IncidentClass::TransientTaskFailure
    ) {
        return Err(AgentError::UnknownIncidentClass(class));
    }
    if incident.pending {
        return Ok(None);
    }
    let (Some(tel), Some(info)) = (
        bundle.snapshot.pipeline(&incident.pipeline),
        bundle.pipeline(&incident.pipeline),
    ) else {
        return Ok(None);
    };
    let allowed = |k: ActionKind| bundle.policy.allowed_kinds.contains(&k);
    let id = Some(incident.id);
    let pid = incident.pipeline.as_str();

    if class == IncidentClass::UpstreamDelay {
        return Ok(match tel.health {
            Health::Healthy | Health::Failing if allowed(ActionKind::Defer) => {
                Some(CandidateAction {
                    params: ActionParams {
                        condition: Some("arrivals_stable".into()),
                        ..ActionParams::default()
                    },
                    ..candidate(
                        ActionKind::Defer,
                        Target::pipeline(pid),
                        format!(
                        "upstream input missing since tick {}; postponing until arrivals stabilize",
                        incident.detected_tick
                    ),
                        id,
                    )
                })
            }
            Health::Deferred
                if info.input_stable && !tel.input_missing && allowed(ActionKind::Resume) =>
            {
                Some(candidate(
                    ActionKind::Resume,
                    Target::pipeline(pid),
                    "arrivals stable again; resuming and replaying the withheld backlog".into(),
                    id,
                ))
            }
            _ => None,
        });
    }

    if !running(tel) {
        return Ok(None);
    }
    let Some(failed) = tel.failures.iter().find(|f| {
        !f.recovering
            && matches!(
                f.cause,
                FailureCause::Transient | FailureCause::CorruptOutput
            )
    }) else {
        return Ok(None);
    };
    let replay = candidate(
        ActionKind::Replay,
        Target::stage(pid, failed.stage.clone()),
        format!(
            "task {} failed; replaying from its last checkpoint",
            failed.stage
        ),
        id,
    );
    if failed.cause == FailureCause::Transient {
        return Ok(allowed(ActionKind::Replay).then_some(replay));
    }
    let mut options = vec![candidate(
        ActionKind::Rollback,
        Target::pipeline(pid),
        format!(
            "output of {} is suspect; rolling back to the last checkpoint",
            failed.stage
        ),
        id,
    )];
    if !incident.suspect_partitions.is_empty() {
        options.push(candidate(
            ActionKind::PartialRecompute,
            Target::partitions(pid, incident.suspect_partitions.clone()),
            format!(
                "output of {} is suspect; recomputing partition(s) {:?} only",
                failed.stage, incident.suspect_partitions
            ),
            id,
        ));
    }
    options.push(replay);
    let options: Vec<CandidateAction> = options
        .into_iter()
        .filter(|c| allowed(c.kind) && !incident.tried.contains(&c.kind))
        .collect();
    let ranked = rank_strategies(options, class, &bundle.memory, |k| {
        needs_approval(k, info, &bundle.policy)
    });
    Ok(ranked.into_iter().next())
}

fn schema_candidates(b: &ObservationBundle) -> Vec<CandidateAction> {
    let mut out = Vec::new();
    let mut seen: BTreeSet<(String, u64)> = BTreeSet::new();
    let open_schema = |pid: &str| {
        b.incidents
            .iter()
            .find(|i| i.pipeline == pid && i.class == IncidentClass::SchemaIncompatible)
            .map(|i| i.id)
    };
    for ev in &b.events {
        let KernelEvent::SchemaChanged {
            pipeline,
            partition,
            class,
            ..
        } = ev
        else {
            continue;
        };
        match class {
            DriftClass::Incompatible { .. } if b.policy.quarantine_allowed => {
                if seen.insert((pipeline.clone(), *partition)) {
                    if let Ok(c) = schema_propose(
                        class,
                        pipeline,
                        &[*partition],
                        &b.policy,
                        open_schema(pipeline),
                    ) {
                        out.push(c);
                    }
                }
            }
            DriftClass::BackwardCompatible => {
                let deferred = b
                    .snapshot
                    .pipeline(pipeline)
                    .is_some_and(|t| t.health == Health::Deferred && !t.input_missing);
                let delayed = b
                    .incidents
                    .iter()
                    .any(|i| i.pipeline == *pipeline && i.class == IncidentClass::UpstreamDelay);
                if deferred && !delayed {
                    if let Ok(c) = schema_propose(class, pipeline, &[], &b.policy, None) {
                        out.push(c);
                    }
                }
            }
            _ => {}
        }
    }
    for inc in &b.incidents {
        if inc.owner != Some(Actor::SchemaAgent)
            || inc.pending
            || inc.class != IncidentClass::SchemaIncompatible
        {
            continue;
        }
        let fresh: Vec<u64> = inc
            .blocked_partitions
            .iter()
            .copied()
            .filter(|p| !seen.contains(&(inc.pipeline.clone(), *p)))
            .collect();
        if fresh.is_empty() {
            continue;
        }
        let class = DriftClass::Incompatible {
            reasons: Vec::new(),
        };
        if let Ok(c) = schema_propose(&class, &inc.pipeline, &fresh, &b.policy, Some(inc.id)) {
            let halted = b
                .snapshot
                .pipeline(&inc.pipeline)
                .is_some_and(|t| t.health == Health::Halted);
            if c.kind == ActionKind::Halt && (halted || inc.tried.contains(&ActionKind::Halt)) {
                continue;
            }
            out.push(c);
        }
    }
    out
}

fn recovery_candidates(b: &ObservationBundle) -> Vec<CandidateAction> {
    b.incidents
        .iter()
        .filter(|i| i.owner == Some(Actor::RecoveryAgent))
        .filter_map(|i| recovery_propose(i, b).ok().flatten())
        .collect()
}

/// Time to drain the current backlog at the slowest stage's rate.
fn projected_lag(tel: &PipelineTelemetry, info: &PipelineInfo) -> f64 {
    let backlog: u64 = tel.queue_depths.iter().sum();
    if backlog == 0 {
        return tel.freshness_lag as f64;
    }
    let slowest = info
        .stages
        .iter()
        .zip(&tel.allocation)
        .map(|(s, &a)| s.base_rate * a as f64)
        .fold(f64::INFINITY, f64::min);
    tel.freshness_lag as f64 + backlog as f64 / slowest.max(1e-9)
}

/// Resource proposals: shed load from the least critical pipelines under
/// contention or budget pressure, add units where freshness is projected
/// to breach (most critical first), and release units that sit idle.
pub fn optimize_propose(b: &ObservationBundle) -> Vec<CandidateAction> {
    let step = b.policy.max_scale_step as i32;
    let mut out = Vec::new();
    if step == 0 {
        return out;
    }
    let can_up = b.policy.allowed_kinds.contains(&ActionKind::ScaleUp);
    let can_down = b.policy.allowed_kinds.contains(&ActionKind::ScaleDown);
    let mut touched: BTreeSet<&str> = BTreeSet::new();
    let tel = |id: &str| b.snapshot.pipeline(id).filter(|t| running(t));
    let freshness_incident = |pid: &str| {
        b.incidents
            .iter()
            .find(|i| i.pipeline == pid && i.class == IncidentClass::FreshnessBreach)
            .map(|i| i.id)
    };

    let mut least_first: Vec<&PipelineInfo> = b.pipelines.iter().collect();
    least_first.sort_by_key(|p| (Reverse(p.criticality), p.id.as_str()));
    let mut most_first: Vec<&PipelineInfo> = b.pipelines.iter().collect();
    most_first.sort_by_key(|p| (p.criticality, p.id.as_str()));

    let reducible = |info: &PipelineInfo, t: &PipelineTelemetry| -> i64 {
        info.stages
            .iter()
            .zip(&t.allocation)
            .map(|(s, &a)| (a - s.min_alloc).min(step as u32) as i64)
            .sum()
    };

    if can_down {
        let overload = if b.snapshot.contention_factor < 1.0 {
            -b.snapshot.capacity_headroom
        } else {
            0
        };
        let over_budget = b.policy.committed_spend > b.policy.budget_per_window;
        let protect = b
            .pipelines
            .iter()
            .filter(|p| b.snapshot.pipeline(&p.id).is_some_and(|t| t.throttled))
            .map(|p| p.criticality)
            .min();
        let mut freed = 0i64;
        for info in &least_first {
            if freed >= overload && !over_budget {
                break;
            }
            let Some(t) = tel(&info.id) else { continue };
            let shed_for_contention =
                overload > freed && protect.is_some_and(|c| info.criticality > c);
            let shed_for_budget = over_budget && t.utilization < LOW_WATERMARK;
            if !(shed_for_contention || shed_for_budget) {
                continue;
            }
            let r = reducible(info, t);
            if r == 0 {
                continue;
            }
            let why = if shed_for_contention {
                format!(
                    "capacity short by {overload} unit(s) (factor {:.3}); shedding criticality-{} pipeline",
                    b.snapshot.contention_factor, info.criticality
                )
            } else {
                format!(
                    "committed window spend {:.2} above budget {}; utilization {:.2}",
                    b.policy.committed_spend, b.policy.budget_per_window, t.utilization
                )
            };
            out.push(scale(
                ActionKind::ScaleDown,
                Target::pipeline(&info.id),
                -step,
                why,
                None,
            ));
            touched.insert(info.id.as_str());
            freed += r;
        }
    }

    if can_up {
        let mut headroom = b.policy.scale_up_headroom as i64;
        for info in &most_first {
            if touched.contains(info.id.as_str()) || headroom < step as i64 {
                continue;
            }
            let (Some(t), Some(target)) = (tel(&info.id), info.freshness_target) else {
                continue;
            };
            let projected = projected_lag(t, info);
            if projected <= target as f64 {
                continue;
            }
            // slowest-draining stage with room to grow
            let bottleneck = info
                .stages
                .iter()
                .zip(&t.allocation)
                .zip(&t.queue_depths)
                .filter(|((s, &a), _)| a < s.max_alloc)
                .map(|((s, &a), &q)| (q as f64 / (s.base_rate * a.max(1) as f64), s))
                .fold(
                    None::<(f64, &super::bundle::StageInfo)>,
                    |best, (r, s)| match best {
                        Some((br, _)) if br >= r => best,
                        _ => Some((r, s)),
                    },
                );
            let Some((_, stage)) = bottleneck else {
                continue;
            };
            let anomaly = b
                .anomalies
                .iter()
                .find(|a| a.pipeline == info.id)
                .map(|a| {
                    format!(
                        "; {} anomaly {:.0} vs mean {:.1}",
                        a.metric.as_str(),
                        a.value,
                        a.mean
                    )
                })
                .unwrap_or_default();
            out.push(scale(
                ActionKind::ScaleUp,
                Target::stage(&info.id, &stage.id),
                step,
                format!(
                    "projected lag {projected:.1} exceeds target {target} (lag {}, backlog {}){anomaly}",
                    t.freshness_lag,
                    t.queue_depths.iter().sum::<u64>()
                ),
                freshness_incident(&info.id),
            ));
            touched.insert(info.id.as_str());
            headroom -= step as i64;
        }
    }

    if can_down {
        for info in &least_first {
            if touched.contains(info.id.as_str()) || info.low_util_ticks < LOW_UTIL_TICKS {
                continue;
            }
            let Some(t) = tel(&info.id) else { continue };
            if reducible(info, t) == 0 {
                continue;
            }
            out.push(scale(
                ActionKind::ScaleDown,
                Target::pipeline(&info.id),
                -step,
                format!(
                    "utilization {:.2} below {LOW_WATERMARK} for {} ticks",
                    t.utilization, info.low_util_ticks
                ),
                None,
            ));
            touched.insert(info.id.as_str());
        }
    }
    out
}

/// The built-in backend's answer for whichever agent the bundle is for.
pub fn builtin_candidates(b: &ObservationBundle) -> Vec<CandidateAction> {
    match b.agent {
        Actor::SchemaAgent => schema_candidates(b),
        Actor::RecoveryAgent => recovery_candidates(b),
        Actor::OptimizationAgent => optimize_propose(b),
        _ => Vec::new(),
    }
}

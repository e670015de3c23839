//! The agentic control plane: monitoring, optimization, schema and
//! recovery agents proposing actions that the policy engine approves or
//! rejects before anything reaches the world.

mod backend;
mod bundle;
mod heuristics;
mod memory;
mod monitor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use backend::{
    parse_candidates, BackendSpec, BuiltinBackend, CandidateAction, ReasoningBackend,
    RecordingBackend, StubBackend, StubEntry,
};
pub use bundle::{IncidentView, ObservationBundle, PipelineInfo, PolicySummary, StageInfo};
pub use heuristics::{
    builtin_candidates, optimize_propose, rank_strategies, recovery_propose, schema_propose,
    AgentError, LOW_UTIL_TICKS, LOW_WATERMARK, STABLE_BAND, STABLE_TICKS,
};
pub use memory::{MemoryEntry, MemoryStats, OutcomeMemory};
pub use monitor::{ewma_stats, Anomaly, EwmaConfig, EwmaDetector, Monitor};

use crate::action::{ActionKind, Actor, ProposedAction};
use crate::harness::{BaselineConfig, Controller, HarnessError, Orchestrator, RunContext};
use crate::pipeline::{PipelineKind, PipelineSpec};
use crate::policy::{validate_action, PolicyContext, PolicyDecision, Verdict, RULE_APPROVAL};
use crate::scenario::ScenarioSpec;
use crate::schema::DriftClass;
use crate::sim::{ActionOutcome, ApprovedAction, FailureCause, KernelEvent, SimWorld};
use crate::telemetry::{AuditPayload, Incident, IncidentClass, MetricName};
use crate::Tick;

/// Executed remediations before an agent hands an incident to the
/// fallback orchestrator.
pub const MAX_AGENT_ATTEMPTS: u32 = 3;
/// Ticks an agent waits before repeating a denied proposal.
pub const DENY_COOLDOWN: Tick = 10;
/// Smoothing for the pre-incident arrival mean.
const ARRIVAL_ALPHA: f64 = 0.2;

/// Which agents take part. With none enabled the controller behaves
/// exactly like the static baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSet {
    pub monitor: bool,
    pub optimizer: bool,
    pub schema: bool,
    pub recovery: bool,
}

impl AgentSet {
    pub fn all() -> Self {
        Self {
            monitor: true,
            optimizer: true,
            schema: true,
            recovery: true,
        }
    }

    pub fn none() -> Self {
        Self {
            monitor: false,
            optimizer: false,
            schema: false,
            recovery: false,
        }
    }
}

impl Default for AgentSet {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone, Default)]
struct IncidentState {
    owner: Option<Actor>,
    tried: Vec<ActionKind>,
    attempts: u32,
    pending_until: Tick,
    awaiting_approval: bool,
    denied: bool,
    last_applied: Option<(ActionKind, u64)>,
}

#[derive(Debug, Clone)]
struct PendingApproval {
    due: Tick,
    proposal: ProposedAction,
    context: PolicyContext,
}

#[derive(Debug, Clone, Default)]
struct PipelineTrack {
    low_util: Tick,
    arrival_mean: Option<f64>,
    stable: Tick,
}

pub struct AgenticController {
    agents: AgentSet,
    orchestrator: Orchestrator,
    backend: Box<dyn ReasoningBackend>,
    monitor: Monitor,
    memory: OutcomeMemory,
    specs: Vec<PipelineSpec>,
    /// Storage cost per tick if every sink ran flat out.
    storage_bound: f64,
    next_id: u64,
    incidents: BTreeMap<u64, IncidentState>,
    approvals: Vec<PendingApproval>,
    denied: BTreeMap<(Actor, ActionKind, String), Tick>,
    tracks: BTreeMap<String, PipelineTrack>,
    anomalies: Vec<Anomaly>,
}

impl AgenticController {
    pub fn new(
        baseline: BaselineConfig,
        backend: Box<dyn ReasoningBackend>,
        agents: AgentSet,
        scenario: &ScenarioSpec,
    ) -> Self {
        let storage_bound = scenario
            .pipelines
            .iter()
            .flat_map(|p| p.sinks().into_iter().map(move |i| &p.stages[i]))
            .map(|s| s.max_alloc as f64 * s.base_rate)
            .sum::<f64>()
            * scenario.resource_model.storage_price;
        Self {
            agents,
            orchestrator: Orchestrator::new(baseline, Actor::Baseline),
            backend,
            monitor: Monitor::new(EwmaConfig::default()),
            memory: OutcomeMemory::new(),
            specs: scenario.pipelines.clone(),
            storage_bound,
            next_id: 0,
            incidents: BTreeMap::new(),
            approvals: Vec::new(),
            denied: BTreeMap::new(),
            tracks: BTreeMap::new(),
            anomalies: Vec::new(),
        }
    }

    pub fn memory(&self) -> &OutcomeMemory {
        &self.memory
    }

    pub fn backend(&self) -> &dyn ReasoningBackend {
        self.backend.as_ref()
    }

    /// Cost per tick the current allocations commit to.
    fn steady_burn(&self, world: &SimWorld) -> f64 {
        let units: u32 = world.allocations().values().flat_map(|m| m.values()).sum();
        units as f64 * world.resource_model().unit_price + self.storage_bound
    }

    fn policy_context(
        &self,
        world: &SimWorld,
        ctx: &RunContext,
        p: &ProposedAction,
    ) -> PolicyContext {
        let t = ctx.tick;
        let w = ctx.policy.cost.window.max(1);
        let remaining = w - t % w;
        let burn = self.steady_burn(world);
        let spec = world.pipeline_spec(&p.target.pipeline);
        let current_alloc = match &p.target.stage {
            Some(s) => world.allocation(&p.target.pipeline, s).unwrap_or(0),
            None => world
                .allocations()
                .get(&p.target.pipeline)
                .map(|m| m.values().sum())
                .unwrap_or(0),
        };
        PolicyContext {
            windowed_spend: ctx.window_spend(t) + remaining as f64 * burn,
            steady_burn: burn,
            unit_price: world.resource_model().unit_price,
            remaining_ticks: remaining,
            pipeline_tags: spec.map(|s| s.tags.clone()).unwrap_or_default(),
            current_alloc,
        }
    }

    fn allowed_kinds(ctx: &RunContext, agent: Actor) -> Vec<ActionKind> {
        let policy = &ctx.policy;
        policy
            .actions
            .allow_list
            .get(&agent)
            .map(|ks| {
                ks.iter()
                    .copied()
                    .filter(|k| !k.is_recovery() || policy.recovery.allowed_strategies.contains(k))
                    .filter(|&k| {
                        k != ActionKind::QuarantinePartition || policy.schema.quarantine_allowed
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    fn policy_summary(&self, world: &SimWorld, ctx: &RunContext, agent: Actor) -> PolicySummary {
        let t = ctx.tick;
        let p = &ctx.policy;
        let w = p.cost.window.max(1);
        let remaining = w - t % w;
        let burn = self.steady_burn(world);
        let committed = ctx.window_spend(t) + remaining as f64 * burn;
        let price = world.resource_model().unit_price;
        let budget = p.cost.budget_per_window;
        let headroom = if price > 0.0 {
            let this_window = (budget - committed) / (price * remaining as f64);
            let steady = (budget - burn * w as f64) / (price * w as f64);
            this_window.min(steady).floor().clamp(0.0, u32::MAX as f64) as u32
        } else {
            u32::MAX
        };
        PolicySummary {
            version: p.version,
            budget_per_window: budget,
            window: w,
            max_scale_step: p.cost.max_scale_step,
            committed_spend: committed,
            scale_up_headroom: headroom,
            allowed_kinds: Self::allowed_kinds(ctx, agent),
            schema_mode: p.schema.mode,
            quarantine_allowed: p.schema.quarantine_allowed,
            approval_required: p.actions.approval_required.clone(),
        }
    }

    fn pending(&self, id: u64, t: Tick) -> bool {
        self.incidents
            .get(&id)
            .is_some_and(|s| s.pending_until > t || s.awaiting_approval)
    }

    fn bundle(&self, agent: Actor, world: &SimWorld, ctx: &RunContext) -> ObservationBundle {
        let t = ctx.tick;
        let snapshot = world.snapshot();
        let incidents = ctx
            .incidents
            .open_incidents()
            .into_iter()
            .map(|i| {
                let st = self.incidents.get(&i.id).cloned().unwrap_or_default();
                let recovering = snapshot.pipeline(&i.pipeline).is_some_and(|p| {
                    p.failures.iter().any(|f| {
                        f.recovering
                            && match i.class {
                                IncidentClass::TransientTaskFailure => {
                                    matches!(
                                        f.cause,
                                        FailureCause::Transient | FailureCause::CorruptOutput
                                    )
                                }
                                IncidentClass::UpstreamDelay => {
                                    f.cause == FailureCause::InputMissing
                                }
                                IncidentClass::SchemaIncompatible => {
                                    matches!(f.cause, FailureCause::SchemaMismatch { .. })
                                }
                                _ => false,
                            }
                    })
                });
                IncidentView {
                    id: i.id,
                    pipeline: i.pipeline.clone(),
                    class: i.class,
                    detected_tick: i.detected_tick,
                    owner: st.owner,
                    tried: st.tried.clone(),
                    pending: self.pending(i.id, t) || recovering,
                    blocked_partitions: world.blocked_partitions(&i.pipeline).unwrap_or_default(),
                    suspect_partitions: world.suspect_partitions(&i.pipeline).unwrap_or_default(),
                }
            })
            .collect();
        let pipelines = self
            .specs
            .iter()
            .map(|s| {
                let track = self.tracks.get(&s.id).cloned().unwrap_or_default();
                let input_missing = world.input_missing(&s.id).unwrap_or(false);
                PipelineInfo {
                    id: s.id.clone(),
                    kind: s.kind,
                    criticality: s.criticality,
                    freshness_target: s.effective_freshness_target(),
                    tags: s.tags.clone(),
                    stages: s
                        .stages
                        .iter()
                        .map(|st| StageInfo {
                            id: st.id.clone(),
                            base_rate: st.base_rate,
                            min_alloc: st.min_alloc,
                            max_alloc: st.max_alloc,
                        })
                        .collect(),
                    low_util_ticks: track.low_util,
                    input_stable: match s.kind {
                        PipelineKind::Streaming => !input_missing && track.stable >= STABLE_TICKS,
                        PipelineKind::Batch => !input_missing,
                    },
                }
            })
            .collect();
        ObservationBundle {
            tick: t,
            agent,
            snapshot,
            events: ctx.events.clone(),
            incidents,
            anomalies: self.anomalies.clone(),
            policy: self.policy_summary(world, ctx, agent),
            memory: self.memory.entries(),
            pipelines,
        }
    }

    /// Update streaks, arrival baselines and the anomaly detectors from the
    /// previous step.
    fn observe(&mut self, ctx: &mut RunContext) {
        let Some(snap) = ctx.last_snapshot.clone() else {
            return;
        };
        for p in &snap.pipelines {
            let delayed = ctx
                .incidents
                .open_for(&p.pipeline, IncidentClass::UpstreamDelay)
                .is_some();
            let tr = self.tracks.entry(p.pipeline.clone()).or_default();
            let running = matches!(
                p.health,
                crate::sim::Health::Healthy | crate::sim::Health::Failing
            );
            tr.low_util = if running && p.utilization < LOW_WATERMARK {
                tr.low_util + 1
            } else {
                0
            };
            let x = p.arrivals as f64;
            if delayed {
                let in_band = tr
                    .arrival_mean
                    .is_some_and(|m| (x - m).abs() <= STABLE_BAND * m);
                tr.stable = if in_band && !p.input_missing {
                    tr.stable + 1
                } else {
                    0
                };
            } else {
                tr.arrival_mean = Some(match tr.arrival_mean {
                    Some(m) => (1.0 - ARRIVAL_ALPHA) * m + ARRIVAL_ALPHA * x,
                    None => x,
                });
                tr.stable = 0;
            }
        }
        if !self.agents.monitor {
            return;
        }
        self.anomalies.clear();
        for p in &snap.pipelines {
            let samples = [
                (MetricName::FreshnessLag, p.freshness_lag as f64),
                (
                    MetricName::QueueDepth,
                    p.queue_depths.iter().sum::<u64>() as f64,
                ),
                (MetricName::FailureRate, p.failure_events as f64),
            ];
            for (metric, v) in samples {
                if let Some((a, began)) = self.monitor.observe(&p.pipeline, metric, snap.tick, v) {
                    if began {
                        ctx.observe(
                            Actor::MonitoringAgent,
                            "anomaly",
                            Some(&p.pipeline),
                            json!({ "metric": metric, "value": a.value, "mean": a.mean, "deviation": a.deviation }),
                        );
                    }
                    self.anomalies.push(a);
                }
            }
        }
    }

    /// Assign new incidents to agents and hand stuck ones to the fallback.
    fn sync_incidents(&mut self, ctx: &mut RunContext) {
        let t = ctx.tick;
        let open: Vec<Incident> = ctx
            .incidents
            .open_incidents()
            .into_iter()
            .cloned()
            .collect();
        for inc in open {
            let agents = self.agents;
            let st = self
                .incidents
                .entry(inc.id)
                .or_insert_with(|| IncidentState {
                    owner: match inc.class {
                        IncidentClass::SchemaIncompatible if agents.schema => {
                            Some(Actor::SchemaAgent)
                        }
                        IncidentClass::TransientTaskFailure | IncidentClass::UpstreamDelay
                            if agents.recovery =>
                        {
                            Some(Actor::RecoveryAgent)
                        }
                        _ => None,
                    },
                    ..IncidentState::default()
                });
            let Some(owner) = st.owner else { continue };
            if st.pending_until > t || st.awaiting_approval {
                continue;
            }
            let reason = if st.denied {
                "policy denied the remediation"
            } else if st.attempts >= MAX_AGENT_ATTEMPTS {
                "remediation attempts exhausted"
            } else if st.tried.contains(&ActionKind::Halt) {
                "halted pending operator reconciliation"
            } else {
                continue;
            };
            st.owner = None;
            ctx.observe(
                owner,
                "handoff",
                Some(&inc.pipeline),
                json!({ "incident": inc.id, "reason": reason }),
            );
        }
    }

    fn submit(
        &mut self,
        world: &mut SimWorld,
        ctx: &mut RunContext,
        agent: Actor,
        c: CandidateAction,
    ) -> Result<(), HarnessError> {
        let t = ctx.tick;
        let key = (
            agent,
            c.kind,
            serde_json::to_string(&c.target).expect("target serializes"),
        );
        if self.denied.get(&key).is_some_and(|&until| t < until) {
            return Ok(());
        }
        self.next_id += 1;
        let p = ProposedAction {
            id: self.next_id,
            tick: t,
            agent,
            kind: c.kind,
            target: c.target,
            params: c.params,
            justification: c.rationale,
            incident: c.incident,
        };
        ctx.audit(agent, AuditPayload::Proposal { action: p.clone() });
        let context = self.policy_context(world, ctx, &p);
        let decision = validate_action(&p, &ctx.policy, &context);
        let seq = ctx.audit(
            Actor::PolicyEngine,
            AuditPayload::Decision {
                proposal_id: p.id,
                decision: decision.clone(),
                context: context.clone(),
            },
        );
        match decision.verdict {
            Verdict::Allow => self.execute(world, ctx, p, seq),
            Verdict::RequireApproval => {
                ctx.approvals += 1;
                if let Some(st) = p.incident.and_then(|i| self.incidents.get_mut(&i)) {
                    st.awaiting_approval = true;
                }
                self.approvals.push(PendingApproval {
                    due: t + ctx.operator_delay,
                    proposal: p,
                    context,
                });
            }
            Verdict::Deny => {
                self.denied.insert(key, t + DENY_COOLDOWN);
                if let Some(st) = p.incident.and_then(|i| self.incidents.get_mut(&i)) {
                    st.denied = st.owner == Some(agent);
                }
            }
        }
        Ok(())
    }

    fn execute(
        &mut self,
        world: &mut SimWorld,
        ctx: &mut RunContext,
        p: ProposedAction,
        decision_ref: u64,
    ) {
        let t = ctx.tick;
        let approved = ApprovedAction {
            action: p.clone(),
            decision_ref,
        };
        let outcome = world
            .apply_action(&approved)
            .unwrap_or_else(|e| ActionOutcome {
                action_id: p.id,
                kind: p.kind,
                success: false,
                clamped: false,
                summary: e.to_string(),
                ready_tick: None,
            });
        ctx.audit(
            p.agent,
            AuditPayload::Outcome {
                proposal_id: p.id,
                outcome: outcome.clone(),
            },
        );
        let Some(id) = p.incident else { return };
        let class = ctx.incidents.get(id).map(|i| i.class);
        let Some(st) = self.incidents.get_mut(&id) else {
            return;
        };
        st.awaiting_approval = false;
        if st.owner == Some(p.agent) {
            st.attempts += 1;
        }
        if outcome.success {
            st.tried.push(p.kind);
            st.last_applied = Some((p.kind, p.id));
            st.pending_until = outcome.ready_tick.map_or(t + 1, |r| r + 1);
            if let Some(class) = class {
                self.memory.record_attempt(class, p.kind);
            }
        }
    }

    fn run_approvals(&mut self, world: &mut SimWorld, ctx: &mut RunContext) {
        let t = ctx.tick;
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.approvals)
            .into_iter()
            .partition(|a| a.due <= t);
        self.approvals = later;
        for a in due {
            let decision = PolicyDecision {
                verdict: Verdict::Allow,
                rule_citations: vec![RULE_APPROVAL.to_string()],
                policy_version: ctx.policy.version,
                explanation: "approved by operator".into(),
            };
            let seq = ctx.audit(
                Actor::Operator,
                AuditPayload::Decision {
                    proposal_id: a.proposal.id,
                    decision,
                    context: a.context,
                },
            );
            self.execute(world, ctx, a.proposal, seq);
        }
    }
}

impl Controller for AgenticController {
    fn name(&self) -> &'static str {
        "agentic"
    }

    fn monitor_actor(&self) -> Actor {
        Actor::MonitoringAgent
    }

    fn control_tick(
        &mut self,
        world: &mut SimWorld,
        ctx: &mut RunContext,
    ) -> Result<(), HarnessError> {
        self.observe(ctx);
        if self.agents.schema {
            let compatible: Vec<(String, u32, u64)> = ctx
                .events
                .iter()
                .filter_map(|e| match e {
                    KernelEvent::SchemaChanged {
                        pipeline,
                        version,
                        partition,
                        class: DriftClass::BackwardCompatible,
                        ..
                    } => Some((pipeline.clone(), *version, *partition)),
                    _ => None,
                })
                .collect();
            for (pipeline, version, partition) in compatible {
                ctx.observe(
                    Actor::SchemaAgent,
                    "auto_mapped",
                    Some(&pipeline),
                    json!({ "version": version, "partition": partition }),
                );
            }
        }
        self.sync_incidents(ctx);

        let phases = [
            (Actor::SchemaAgent, self.agents.schema),
            (Actor::RecoveryAgent, self.agents.recovery),
            (Actor::OptimizationAgent, self.agents.optimizer),
        ];
        for (agent, enabled) in phases {
            if !enabled {
                continue;
            }
            let bundle = self.bundle(agent, world, ctx);
            let raw = self.backend.decide(&bundle);
            let candidates = match parse_candidates(&raw, agent) {
                Ok(c) => c,
                Err(reason) => {
                    ctx.observe(
                        agent,
                        "backend_violation",
                        None,
                        json!({ "backend": self.backend.name(), "reason": reason }),
                    );
                    builtin_candidates(&bundle)
                }
            };
            for c in candidates {
                self.submit(world, ctx, agent, c)?;
            }
        }
        self.run_approvals(world, ctx);

        let fallback: Vec<u64> = ctx
            .incidents
            .open_incidents()
            .iter()
            .filter(|i| self.incidents.get(&i.id).is_none_or(|s| s.owner.is_none()))
            .map(|i| i.id)
            .collect();
        self.orchestrator.handle(world, ctx, &fallback)
    }

    fn resolution(&self, incident: u64) -> Option<String> {
        match self.incidents.get(&incident) {
            Some(IncidentState {
                owner: Some(_),
                last_applied: Some((kind, id)),
                ..
            }) => Some(format!("{kind} (proposal {id})")),
            _ => self.orchestrator.resolution(incident),
        }
    }

    fn on_incident_closed(&mut self, incident: &Incident, _ctx: &mut RunContext) {
        let Some(st) = self.incidents.get(&incident.id) else {
            return;
        };
        let credited = match (st.owner, st.last_applied) {
            (Some(_), Some((kind, _))) => Some(kind),
            // resource and freshness incidents have no owner; credit the
            // scaling action linked to them
            (None, Some((kind, _)))
                if !self.orchestrator.is_handling(incident.id) || kind.is_scaling() =>
            {
                Some(kind)
            }
            _ => None,
        };
        if let (Some(kind), Some(d)) = (credited, incident.duration()) {
            self.memory.record_success(incident.class, kind, d);
        }
    }
}

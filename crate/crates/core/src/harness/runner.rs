use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{BaselineConfig, Controller, HarnessError, RunContext, StaticController};
use crate::action::Actor;
use crate::agents::{AgentSet, AgenticController, BackendSpec};
use crate::pipeline::PipelineKind;
use crate::policy::PolicyDocument;
use crate::scenario::{generate_arrivals, inject_faults, validate_scenario, ScenarioSpec};
use crate::sim::{Counters, FailureCause, Health, KernelEvent, SimWorld, TelemetrySnapshot};
use crate::telemetry::{
    AuditLog, AuditPayload, Incident, IncidentClass, MetricName, MetricStore, SeriesId,
};
use crate::Tick;

/// Which control plane drives a run.
#[derive(Debug, Clone)]
pub enum ControllerSpec {
    Static(BaselineConfig),
    Agentic {
        baseline: BaselineConfig,
        backend: BackendSpec,
        agents: AgentSet,
    },
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::Static(_) => "static",
            ControllerSpec::Agentic { .. } => "agentic",
        }
    }

    fn baseline(&self) -> &BaselineConfig {
        match self {
            ControllerSpec::Static(b) => b,
            ControllerSpec::Agentic { baseline, .. } => baseline,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every tick's snapshot in the result.
    pub keep_snapshots: bool,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub controller: String,
    pub scenario_hash: String,
    pub policy_version: u32,
    pub seed: u64,
    pub horizon: Tick,
    pub audit: AuditLog,
    pub metrics: MetricStore,
    pub incidents: Vec<Incident>,
    pub counters: Counters,
    pub tick_costs: Vec<f64>,
    pub operator_tasks: u64,
    pub approvals: u64,
    pub streaming_pipelines: Vec<String>,
    /// SHA-256 over every tick's snapshot and kernel events.
    pub telemetry_digest: String,
    pub snapshots: Vec<TelemetrySnapshot>,
    /// Budget window costs, one per window.
    pub window_costs: Vec<f64>,
    /// Record accounting at the end of every tick.
    pub ledger: Vec<LedgerRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LedgerRow {
    pub tick: Tick,
    pub ingress: u64,
    pub materialized: u64,
    pub in_flight: u64,
    pub quarantined: u64,
    pub dropped: u64,
}

impl LedgerRow {
    pub fn balanced(&self) -> bool {
        self.ingress == self.materialized + self.in_flight + self.quarantined + self.dropped
    }
}

impl RunResult {
    pub fn interventions(&self) -> u64 {
        self.operator_tasks + self.approvals
    }
}

#[derive(Serialize)]
struct TickDigest<'a> {
    snapshot: &'a TelemetrySnapshot,
    events: &'a [KernelEvent],
}

fn failure_class(cause: FailureCause) -> IncidentClass {
    match cause {
        FailureCause::Transient | FailureCause::CorruptOutput => {
            IncidentClass::TransientTaskFailure
        }
        FailureCause::InputMissing => IncidentClass::UpstreamDelay,
        FailureCause::SchemaMismatch { .. } => IncidentClass::SchemaIncompatible,
    }
}

fn open(ctx: &mut RunContext, actor: Actor, pipeline: &str, class: IncidentClass, tick: Tick) {
    let (id, fresh) = ctx.incidents.open_incident(pipeline, class, tick);
    if fresh {
        ctx.observe(
            actor,
            "incident_opened",
            Some(pipeline),
            json!({ "incident": id, "class": class, "detected_tick": tick }),
        );
    }
}

/// Open incidents for hard triggers among `events`.
fn detect_events(ctx: &mut RunContext, actor: Actor, events: &[KernelEvent]) {
    for ev in events {
        if let KernelEvent::TaskFailed {
            tick,
            pipeline,
            cause,
            ..
        } = ev
        {
            open(ctx, actor, pipeline, failure_class(*cause), *tick);
        }
    }
}

/// Whether the condition behind an open incident has cleared.
fn cleared(inc: &Incident, snap: &TelemetrySnapshot, world: &SimWorld) -> bool {
    let Some(p) = snap.pipeline(&inc.pipeline) else {
        return true;
    };
    let running = matches!(p.health, Health::Healthy | Health::Failing);
    let none = |f: &dyn Fn(FailureCause) -> bool| !p.failures.iter().any(|s| f(s.cause));
    match inc.class {
        IncidentClass::TransientTaskFailure => {
            running && none(&|c| matches!(c, FailureCause::Transient | FailureCause::CorruptOutput))
        }
        IncidentClass::UpstreamDelay => running && none(&|c| c == FailureCause::InputMissing),
        IncidentClass::SchemaIncompatible => {
            running && none(&|c| matches!(c, FailureCause::SchemaMismatch { .. }))
        }
        IncidentClass::ResourceContention => !p.throttled,
        IncidentClass::FreshnessBreach => {
            let target = world
                .pipeline_spec(&inc.pipeline)
                .and_then(|s| s.effective_freshness_target())
                .unwrap_or(Tick::MAX);
            p.freshness_lag <= target
        }
    }
}

fn build_controller(
    spec: &ControllerSpec,
    scenario: &ScenarioSpec,
) -> Result<Box<dyn Controller>, HarnessError> {
    Ok(match spec {
        ControllerSpec::Static(cfg) => Box::new(StaticController::new(cfg.clone())),
        ControllerSpec::Agentic {
            baseline,
            backend,
            agents,
        } => Box::new(AgenticController::new(
            baseline.clone(),
            backend.build()?,
            *agents,
            scenario,
        )),
    })
}

/// Simulate `scenario` under `policy` with one controller. The scenario's
/// seed is replaced by `seed`.
pub fn run_experiment(
    scenario: &ScenarioSpec,
    policy: &PolicyDocument,
    controller: &ControllerSpec,
    seed: u64,
    options: RunOptions,
) -> Result<RunResult, HarnessError> {
    let problems = validate_scenario(scenario);
    if !problems.is_empty() {
        return Err(HarnessError::Config(problems.join("; ")));
    }
    policy
        .validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let scenario_hash = scenario.hash();
    let scenario = scenario.with_seed(seed);
    let baseline = controller.baseline();
    baseline.validate(&scenario)?;

    let mut world = scenario.build_world(Some(&baseline.allocations))?;
    let mut ctrl = build_controller(controller, &scenario)?;
    let actor = ctrl.monitor_actor();
    let mut ctx = RunContext::new(policy.clone(), baseline.operator_delay);
    ctx.audit(
        Actor::Operator,
        AuditPayload::PolicyChange {
            policy: policy.to_value(),
        },
    );
    for p in &scenario.pipelines {
        ctx.catalog.register(
            &p.id,
            0,
            p.schema.clone(),
            crate::schema::DriftClass::NoDrift,
        );
    }

    let mut digest = Sha256::new();
    let mut snapshots = Vec::new();
    let mut ledger = Vec::with_capacity(scenario.horizon as usize);
    let specs: Vec<_> = scenario.pipelines.clone();

    for t in 0..scenario.horizon {
        ctx.tick = t;
        let arrivals = generate_arrivals(&scenario, t);
        inject_faults(&scenario, &mut world)?;
        let events = world.take_events();
        for ev in &events {
            if let KernelEvent::SchemaChanged {
                pipeline, class, ..
            } = ev
            {
                if let Ok(schema) = world.current_schema(pipeline) {
                    let schema = schema.clone();
                    ctx.catalog.register(pipeline, t, schema, class.clone());
                }
            }
        }
        detect_events(&mut ctx, actor, &events);
        ctx.events.extend(events);

        ctrl.control_tick(&mut world, &mut ctx)?;
        ctx.events.clear();
        world.check_accounting()?;

        let report = world.step(&arrivals)?;
        let events = world.take_events();
        detect_events(&mut ctx, actor, &events);
        ctx.events.extend(events);

        let c = world.counters();
        ledger.push(LedgerRow {
            tick: t,
            ingress: c.ingress,
            materialized: c.materialized,
            in_flight: world.in_flight(),
            quarantined: c.quarantined,
            dropped: c.dropped,
        });
        let snap = &report.snapshot;
        for (spec, p) in specs.iter().zip(&snap.pipelines) {
            if p.throttled {
                open(
                    &mut ctx,
                    actor,
                    &p.pipeline,
                    IncidentClass::ResourceContention,
                    t,
                );
            }
            if let Some(target) = spec.effective_freshness_target() {
                if p.freshness_lag > target + ctx.policy.freshness.breach_tolerance {
                    open(
                        &mut ctx,
                        actor,
                        &p.pipeline,
                        IncidentClass::FreshnessBreach,
                        t,
                    );
                }
            }
            let price = world.resource_model().unit_price;
            let storage = world.resource_model().storage_price;
            let samples = [
                (MetricName::FreshnessLag, p.freshness_lag as f64),
                (
                    MetricName::QueueDepth,
                    p.queue_depths.iter().sum::<u64>() as f64,
                ),
                (MetricName::FailureRate, p.failure_events as f64),
                (MetricName::Utilization, p.utilization),
                (
                    MetricName::Cost,
                    p.charged_alloc as f64 * price + p.materialized as f64 * storage,
                ),
            ];
            for (m, v) in samples {
                ctx.metrics
                    .record_sample(&SeriesId::new(&p.pipeline, m), t, v)?;
            }
        }
        ctx.tick_costs.push(snap.total_cost);

        let open_now: Vec<Incident> = ctx
            .incidents
            .open_incidents()
            .into_iter()
            .cloned()
            .collect();
        for inc in open_now {
            if cleared(&inc, snap, &world) {
                let resolution = ctrl.resolution(inc.id);
                ctx.incidents
                    .close_incident(inc.id, t, resolution.clone())?;
                let closed = ctx.incidents.get(inc.id).cloned().expect("just closed");
                ctx.observe(
                    actor,
                    "incident_closed",
                    Some(&inc.pipeline),
                    json!({
                        "incident": inc.id,
                        "class": inc.class,
                        "resumed_tick": t,
                        "resolution": resolution,
                    }),
                );
                ctrl.on_incident_closed(&closed, &mut ctx);
            }
        }

        let line = serde_json::to_vec(&TickDigest {
            snapshot: snap,
            events: &report.events,
        })
        .expect("snapshot serializes");
        digest.update(&line);
        digest.update(b"\n");
        ctx.last_snapshot = Some(report.snapshot.clone());
        if options.keep_snapshots {
            snapshots.push(report.snapshot);
        }
    }
    world.check_accounting()?;

    let w = policy.cost.window.max(1) as usize;
    let window_costs = ctx.tick_costs.chunks(w).map(|c| c.iter().sum()).collect();
    Ok(RunResult {
        controller: ctrl.name().to_string(),
        scenario_hash,
        policy_version: policy.version,
        seed,
        horizon: scenario.horizon,
        audit: ctx.audit,
        metrics: ctx.metrics,
        incidents: ctx.incidents.all().to_vec(),
        counters: world.counters(),
        tick_costs: ctx.tick_costs,
        operator_tasks: ctx.operator_tasks,
        approvals: ctx.approvals,
        streaming_pipelines: scenario
            .pipelines
            .iter()
            .filter(|p| p.kind == PipelineKind::Streaming)
            .map(|p| p.id.clone())
            .collect(),
        telemetry_digest: hex::encode(digest.finalize()),
        snapshots,
        window_costs,
        ledger,
    })
}

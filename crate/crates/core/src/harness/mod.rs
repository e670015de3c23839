//! Static-orchestration baseline, the experiment runner, metrics and
//! comparison reports.

mod metrics;
mod orchestrator;
mod report;
mod runner;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Actor;
use crate::policy::PolicyDocument;
use crate::scenario::{generate_arrivals, ScenarioSpec};
use crate::sim::{KernelEvent, SimError, SimWorld, TelemetrySnapshot};
use crate::telemetry::{
    AuditLog, Incident, IncidentRegistry, MetricStore, SchemaCatalog, TelemetryError,
};
use crate::Tick;

pub use metrics::{
    compare, compute_metrics, delta_percent, mttr_mean, nearest_rank, ComparisonReport,
    IncidentDuration, MetricsReport, MultiSeedSummary, Stat, UnresolvedIncident,
};
pub use orchestrator::Orchestrator;
pub use report::{emit_report, replay_audit, ReplaySummary, ReportError};
pub use runner::{run_experiment, ControllerSpec, LedgerRow, RunOptions, RunResult};

/// Allocation per pipeline, per stage.
pub type Allocations = BTreeMap<String, BTreeMap<String, u32>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub allocations: Allocations,
    pub max_retries: u32,
    pub retry_backoff: Tick,
    pub operator_delay: Tick,
}

impl BaselineConfig {
    pub const DEFAULT_MAX_RETRIES: u32 = 3;
    pub const DEFAULT_RETRY_BACKOFF: Tick = 5;
    pub const DEFAULT_OPERATOR_DELAY: Tick = 120;

    /// Default retry and operator settings with calibrated allocations.
    pub fn calibrated(scenario: &ScenarioSpec) -> Result<Self, HarnessError> {
        Ok(Self {
            allocations: calibrate_allocations(scenario)?,
            max_retries: Self::DEFAULT_MAX_RETRIES,
            retry_backoff: Self::DEFAULT_RETRY_BACKOFF,
            operator_delay: Self::DEFAULT_OPERATOR_DELAY,
        })
    }

    pub fn validate(&self, scenario: &ScenarioSpec) -> Result<(), HarnessError> {
        for p in &scenario.pipelines {
            for s in &p.stages {
                let a = self
                    .allocations
                    .get(&p.id)
                    .and_then(|m| m.get(&s.id))
                    .ok_or_else(|| {
                        HarnessError::Config(format!("no allocation for {}/{}", p.id, s.id))
                    })?;
                if !(s.min_alloc..=s.max_alloc).contains(a) {
                    return Err(HarnessError::Config(format!(
                        "allocation {a} for {}/{} outside [{}, {}]",
                        p.id, s.id, s.min_alloc, s.max_alloc
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("reports compare different runs: {0}")]
    ScenarioMismatch(String),
    #[error("backend: {0}")]
    Backend(String),
}

/// Peak per-stage demand over a fault-free run with every stage at its
/// maximum allocation, clamped to the stage bounds.
pub fn calibrate_allocations(scenario: &ScenarioSpec) -> Result<Allocations, HarnessError> {
    let clean = scenario.fault_free();
    let mut world = clean.build_world(None)?;
    let mut peak: Vec<Vec<u32>> = clean
        .pipelines
        .iter()
        .map(|p| vec![0; p.stages.len()])
        .collect();
    for t in 0..clean.horizon {
        let arrivals = generate_arrivals(&clean, t);
        let before: Vec<Vec<u64>> = clean
            .pipelines
            .iter()
            .map(|p| world.queue_depths(&p.id).expect("known pipeline"))
            .collect();
        world.step(&arrivals)?;
        for (pi, p) in clean.pipelines.iter().enumerate() {
            for (si, s) in p.stages.iter().enumerate() {
                // records this stage had to handle: its queue plus, for
                // sources, this tick's arrivals
                let mut q = before[pi][si];
                if s.upstream.is_empty() {
                    q += arrivals[pi];
                }
                let units = (q as f64 / s.base_rate).ceil() as u32;
                peak[pi][si] = peak[pi][si].max(units.min(s.max_alloc));
            }
        }
    }
    Ok(clean
        .pipelines
        .iter()
        .zip(peak)
        .map(|(p, pk)| {
            let m = p
                .stages
                .iter()
                .zip(pk)
                .map(|(s, u)| (s.id.clone(), u.clamp(s.min_alloc, s.max_alloc)))
                .collect();
            (p.id.clone(), m)
        })
        .collect())
}

/// Shared state of one run that controllers read and write.
#[derive(Debug)]
pub struct RunContext {
    pub tick: Tick,
    pub policy: PolicyDocument,
    pub audit: AuditLog,
    pub incidents: IncidentRegistry,
    pub metrics: MetricStore,
    pub catalog: SchemaCatalog,
    /// Kernel events raised since the previous control tick.
    pub events: Vec<KernelEvent>,
    /// Snapshot at the end of the previous step.
    pub last_snapshot: Option<TelemetrySnapshot>,
    /// Cost of every completed tick.
    pub tick_costs: Vec<f64>,
    pub operator_tasks: u64,
    pub approvals: u64,
    pub operator_delay: Tick,
}

impl RunContext {
    pub fn new(policy: PolicyDocument, operator_delay: Tick) -> Self {
        Self {
            tick: 0,
            policy,
            audit: AuditLog::new(),
            incidents: IncidentRegistry::new(),
            metrics: MetricStore::new(),
            catalog: SchemaCatalog::default(),
            events: Vec::new(),
            last_snapshot: None,
            tick_costs: Vec::new(),
            operator_tasks: 0,
            approvals: 0,
            operator_delay,
        }
    }

    pub fn audit(&mut self, actor: Actor, payload: crate::telemetry::AuditPayload) -> u64 {
        let v = self.policy.version;
        self.audit.append(self.tick, actor, payload, v)
    }

    pub fn observe(
        &mut self,
        actor: Actor,
        kind: &str,
        pipeline: Option<&str>,
        detail: serde_json::Value,
    ) -> u64 {
        self.audit(
            actor,
            crate::telemetry::AuditPayload::Observation {
                kind: kind.to_string(),
                pipeline: pipeline.map(str::to_string),
                detail,
            },
        )
    }

    /// Actual spend so far in the budget window containing `tick`.
    pub fn window_spend(&self, tick: Tick) -> f64 {
        let w = self.policy.cost.window;
        let start = (tick / w) * w;
        self.tick_costs
            .get(start as usize..tick.min(self.tick_costs.len() as Tick) as usize)
            .map(|s| s.iter().sum())
            .unwrap_or(0.0)
    }

    pub fn interventions(&self) -> u64 {
        self.operator_tasks + self.approvals
    }
}

/// A control plane driving one world.
pub trait Controller {
    fn name(&self) -> &'static str;

    /// Actor that opens incidents on this controller's behalf.
    fn monitor_actor(&self) -> Actor;

    /// Called once per tick after arrivals and faults, before the step.
    fn control_tick(
        &mut self,
        world: &mut SimWorld,
        ctx: &mut RunContext,
    ) -> Result<(), HarnessError>;

    /// How an incident was resolved, for the incident record.
    fn resolution(&self, _incident: u64) -> Option<String> {
        None
    }

    fn on_incident_closed(&mut self, _incident: &Incident, _ctx: &mut RunContext) {}
}

/// The static baseline: fixed allocations, retries, then an operator.
#[derive(Debug)]
pub struct StaticController {
    orchestrator: Orchestrator,
}

impl StaticController {
    pub fn new(config: BaselineConfig) -> Self {
        Self {
            orchestrator: Orchestrator::new(config, Actor::Baseline),
        }
    }
}

impl Controller for StaticController {
    fn name(&self) -> &'static str {
        "static"
    }

    fn monitor_actor(&self) -> Actor {
        Actor::Baseline
    }

    fn control_tick(
        &mut self,
        world: &mut SimWorld,
        ctx: &mut RunContext,
    ) -> Result<(), HarnessError> {
        let open: Vec<u64> = ctx
            .incidents
            .open_incidents()
            .iter()
            .map(|i| i.id)
            .collect();
        self.orchestrator.handle(world, ctx, &open)
    }

    fn resolution(&self, incident: u64) -> Option<String> {
        self.orchestrator.resolution(incident)
    }
}

//! Deterministic tick-based simulator of the data plane.
//!
//! A [`SimWorld`] holds every pipeline's stage queues, allocations and health
//! under one shared resource pool. Each [`SimWorld::step`] admits arrivals,
//! computes proportional contention, drains queues in topological order and
//! emits a [`TickReport`]. Records move one stage per tick.
//!
//! Records are tracked as cohorts (arrival tick, partition, schema version,
//! count), so freshness lag and partition-level quarantine fall out of the
//! queue contents without per-record state.

mod actions;
mod step;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::ProposedAction;
use crate::pipeline::{PipelineKind, PipelineSpec, ResourceModel};
use crate::schema::{DriftClass, Schema};
use crate::Tick;

pub use actions::ActionOutcome;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("record accounting violated at tick {tick}: ingress {ingress} != materialized {materialized} + in-flight {in_flight} + quarantined {quarantined} + dropped {dropped}")]
    InconsistentWorld {
        tick: Tick,
        ingress: u64,
        materialized: u64,
        in_flight: u64,
        quarantined: u64,
        dropped: u64,
    },
    #[error("unknown pipeline `{0}`")]
    UnknownPipeline(String),
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("illegal transition: {0}")]
    IllegalTransition(String),
    #[error("arrivals vector has {got} entries, world has {expected} pipelines")]
    ArrivalShape { expected: usize, got: usize },
}

/// Fixed recovery latencies and release behaviour. All values in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConstants {
    pub replay_latency: Tick,
    pub rollback_latency: Tick,
    /// Charged once per affected partition.
    pub partial_recompute_latency: Tick,
    pub quarantine_latency: Tick,
    /// Withheld records re-enter uniformly over this many ticks.
    pub release_ticks: Tick,
    /// Width of a streaming partition.
    pub partition_ticks: Tick,
}

impl Default for SimConstants {
    fn default() -> Self {
        Self {
            replay_latency: 5,
            rollback_latency: 10,
            partial_recompute_latency: 3,
            quarantine_latency: 1,
            release_ticks: 10,
            partition_ticks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Health {
    Healthy,
    Failing,
    Halted,
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Running,
    Halted,
    Deferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum FailureCause {
    Transient,
    /// Transient failure at the sink; output written since the last
    /// checkpoint is suspect.
    CorruptOutput,
    InputMissing,
    SchemaMismatch {
        partition: u64,
    },
}

/// A batch of records sharing arrival tick, partition and schema version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub arrival: Tick,
    pub partition: u64,
    pub version: u32,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StageRuntime {
    pub alloc: u32,
    pub queue: VecDeque<Cohort>,
    pub failure: Option<FailureCause>,
    /// Tick at which an in-progress recovery completes.
    pub recovering_until: Option<Tick>,
    /// An operator owns this failure; it clears once its cause clears.
    pub operator_managed: bool,
    pub last_checkpoint: Tick,
}

impl StageRuntime {
    fn queued(&self) -> u64 {
        self.queue.iter().map(|c| c.count).sum()
    }

    fn is_available(&self) -> bool {
        self.failure.is_none() && self.recovering_until.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct VersionState {
    pub schema: Schema,
    pub class: DriftClass,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Hold {
    pub until: Tick,
    pub missing_fraction: f64,
    pub held: VecDeque<Cohort>,
}

/// An incompatible schema version delivered for one partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DriftWindow {
    pub version: u32,
    pub partition: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct PipelineTickStats {
    pub arrivals: u64,
    pub materialized: u64,
    pub rates: Vec<u64>,
    pub demand: u32,
    pub throttled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PipelineRuntime {
    pub spec: PipelineSpec,
    pub topo: Vec<usize>,
    pub downstream: Vec<Vec<usize>>,
    pub sources: Vec<usize>,
    pub sink: usize,
    pub stages: Vec<StageRuntime>,
    pub mode: Mode,
    /// Version stamped on records arriving now (outside a drift window).
    pub accepted_version: u32,
    pub versions: BTreeMap<u32, VersionState>,
    pub drift_window: Option<DriftWindow>,
    pub quarantined_partitions: BTreeSet<u64>,
    pub hold: Option<Hold>,
    pub releases: VecDeque<(Tick, Cohort)>,
    pub input_missing: bool,
    /// Cohorts materialized since the sink's last checkpoint.
    pub sink_log: Vec<Cohort>,
    pub batch_runs: u64,
    pub last: PipelineTickStats,
}

impl PipelineRuntime {
    fn new(spec: PipelineSpec, allocs: Option<&BTreeMap<String, u32>>) -> Result<Self, SimError> {
        let report = crate::pipeline::validate_pipeline_spec(&spec);
        if !report.is_valid() {
            return Err(SimError::InvalidTarget(format!(
                "pipeline `{}` is invalid: {}",
                spec.id,
                report
                    .violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            )));
        }
        let topo = spec.topological_order().expect("validated acyclic");
        let mut downstream = vec![Vec::new(); spec.stages.len()];
        for (i, s) in spec.stages.iter().enumerate() {
            for up in &s.upstream {
                let u = spec.stage_index(up).expect("validated upstream");
                downstream[u].push(i);
            }
        }
        let sources = spec.sources();
        let sink = spec.sinks()[0];
        let stages = spec
            .stages
            .iter()
            .map(|s| {
                let alloc = allocs
                    .and_then(|m| m.get(&s.id).copied())
                    .unwrap_or(s.max_alloc)
                    .clamp(s.min_alloc, s.max_alloc);
                StageRuntime {
                    alloc,
                    queue: VecDeque::new(),
                    failure: None,
                    recovering_until: None,
                    operator_managed: false,
                    last_checkpoint: 0,
                }
            })
            .collect();
        let version = spec.schema.version;
        let mut versions = BTreeMap::new();
        versions.insert(
            version,
            VersionState {
                schema: spec.schema.clone(),
                class: DriftClass::NoDrift,
                accepted: true,
            },
        );
        Ok(Self {
            spec,
            topo,
            downstream,
            sources,
            sink,
            stages,
            mode: Mode::Running,
            accepted_version: version,
            versions,
            drift_window: None,
            quarantined_partitions: BTreeSet::new(),
            hold: None,
            releases: VecDeque::new(),
            input_missing: false,
            sink_log: Vec::new(),
            batch_runs: 0,
            last: PipelineTickStats::default(),
        })
    }

    pub fn health(&self) -> Health {
        match self.mode {
            Mode::Halted => Health::Halted,
            Mode::Deferred => Health::Deferred,
            Mode::Running if self.stages.iter().any(|s| !s.is_available()) => Health::Failing,
            Mode::Running => Health::Healthy,
        }
    }

    fn queued(&self) -> u64 {
        self.stages.iter().map(|s| s.queued()).sum()
    }

    fn upstream_pending(&self) -> u64 {
        let held: u64 = self
            .hold
            .as_ref()
            .map(|h| h.held.iter().map(|c| c.count).sum())
            .unwrap_or(0);
        held + self.releases.iter().map(|(_, c)| c.count).sum::<u64>()
    }

    fn oldest_arrival(&self) -> Option<Tick> {
        self.stages
            .iter()
            .flat_map(|s| s.queue.iter().map(|c| c.arrival))
            .min()
    }

    fn configured_alloc(&self) -> u32 {
        self.stages.iter().map(|s| s.alloc).sum()
    }

    fn charged_alloc(&self) -> u32 {
        match self.mode {
            Mode::Running => self.configured_alloc(),
            Mode::Halted | Mode::Deferred => 0,
        }
    }

    fn partition_for(&self, tick: Tick, constants: &SimConstants) -> u64 {
        match self.spec.kind {
            PipelineKind::Streaming => tick / constants.partition_ticks.max(1),
            PipelineKind::Batch => self.batch_runs,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub ingress: u64,
    pub materialized: u64,
    pub quarantined: u64,
    pub dropped: u64,
}

/// Observable state changes, in the order they happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum KernelEvent {
    TaskFailed {
        tick: Tick,
        pipeline: String,
        stage: String,
        #[serde(flatten)]
        cause: FailureCause,
    },
    Recovered {
        tick: Tick,
        pipeline: String,
        stage: String,
    },
    RecoveryFailed {
        tick: Tick,
        pipeline: String,
        stage: String,
    },
    InputDelayed {
        tick: Tick,
        pipeline: String,
        delay_ticks: Tick,
        missing_fraction: f64,
    },
    InputReleased {
        tick: Tick,
        pipeline: String,
        released: u64,
        dropped: u64,
    },
    InputRestored {
        tick: Tick,
        pipeline: String,
    },
    SchemaChanged {
        tick: Tick,
        pipeline: String,
        version: u32,
        partition: u64,
        class: DriftClass,
    },
    CapacityReduced {
        tick: Tick,
        units: u32,
        until: Tick,
    },
    CapacityRestored {
        tick: Tick,
        units: u32,
    },
    BatchTriggered {
        tick: Tick,
        pipeline: String,
        partition: u64,
        records: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub cause: FailureCause,
    pub recovering: bool,
}

/// Per-pipeline view for one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTelemetry {
    pub pipeline: String,
    pub health: Health,
    pub queue_depths: Vec<u64>,
    pub effective_rates: Vec<u64>,
    /// Ticks since the oldest in-flight record arrived; 0 when drained.
    pub freshness_lag: Tick,
    pub failure_events: u32,
    pub allocation: Vec<u32>,
    pub charged_alloc: u32,
    /// Demand over allocation, in [0, 1].
    pub utilization: f64,
    pub arrivals: u64,
    pub materialized: u64,
    pub upstream_pending: u64,
    /// Upstream input is delayed or still being released.
    pub input_missing: bool,
    pub throttled: bool,
    pub failures: Vec<StageFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub tick: Tick,
    pub pipelines: Vec<PipelineTelemetry>,
    pub total_cost: f64,
    pub capacity: u32,
    /// Capacity minus demand; negative under contention.
    pub capacity_headroom: i64,
    pub contention_factor: f64,
}

impl TelemetrySnapshot {
    pub fn pipeline(&self, id: &str) -> Option<&PipelineTelemetry> {
        self.pipelines.iter().find(|p| p.pipeline == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub snapshot: TelemetrySnapshot,
    pub events: Vec<KernelEvent>,
    pub counters: Counters,
}

/// An action that passed policy validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovedAction {
    pub action: ProposedAction,
    /// Audit sequence number of the Allow (or operator approval) record.
    pub decision_ref: u64,
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    pub(crate) tick: Tick,
    pub(crate) pipelines: Vec<PipelineRuntime>,
    pub(crate) index: BTreeMap<String, usize>,
    pub(crate) resource_model: ResourceModel,
    pub(crate) constants: SimConstants,
    /// (until, units) reductions currently in force.
    pub(crate) reductions: Vec<(Tick, u32)>,
    pub(crate) counters: Counters,
    pub(crate) last_cost: f64,
    pub(crate) last_factor: f64,
    pub(crate) last_demand: u32,
    pub(crate) pending_events: Vec<KernelEvent>,
    /// Events raised since the last step began; drained into its report.
    pub(crate) tick_events: Vec<KernelEvent>,
    pub(crate) consumed_faults: BTreeSet<usize>,
}

impl SimWorld {
    /// Build a world with every stage at its max allocation, or at the
    /// allocation given in `allocs` (pipeline -> stage -> units).
    pub fn new(
        pipelines: &[PipelineSpec],
        resource_model: ResourceModel,
        constants: SimConstants,
        allocs: Option<&BTreeMap<String, BTreeMap<String, u32>>>,
    ) -> Result<Self, SimError> {
        resource_model.validate().map_err(SimError::InvalidTarget)?;
        let mut runtimes = Vec::with_capacity(pipelines.len());
        let mut index = BTreeMap::new();
        for (i, spec) in pipelines.iter().enumerate() {
            if index.insert(spec.id.clone(), i).is_some() {
                return Err(SimError::InvalidTarget(format!(
                    "duplicate pipeline id `{}`",
                    spec.id
                )));
            }
            let a = allocs.and_then(|m| m.get(&spec.id));
            runtimes.push(PipelineRuntime::new(spec.clone(), a)?);
        }
        Ok(Self {
            tick: 0,
            pipelines: runtimes,
            index,
            resource_model,
            constants,
            reductions: Vec::new(),
            counters: Counters::default(),
            last_cost: 0.0,
            last_factor: 1.0,
            last_demand: 0,
            pending_events: Vec::new(),
            tick_events: Vec::new(),
            consumed_faults: BTreeSet::new(),
        })
    }

    pub fn tick(&self) -> Tick {
        self.tick
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn constants(&self) -> &SimConstants {
        &self.constants
    }

    pub fn resource_model(&self) -> &ResourceModel {
        &self.resource_model
    }

    pub fn pipeline_ids(&self) -> impl Iterator<Item = &str> {
        self.pipelines.iter().map(|p| p.spec.id.as_str())
    }

    pub fn pipeline_spec(&self, id: &str) -> Option<&PipelineSpec> {
        self.index.get(id).map(|&i| &self.pipelines[i].spec)
    }

    pub fn pipeline_specs(&self) -> impl Iterator<Item = &PipelineSpec> {
        self.pipelines.iter().map(|p| &p.spec)
    }

    pub(crate) fn runtime(&self, id: &str) -> Result<&PipelineRuntime, SimError> {
        self.index
            .get(id)
            .map(|&i| &self.pipelines[i])
            .ok_or_else(|| SimError::UnknownPipeline(id.to_string()))
    }

    pub(crate) fn runtime_mut(&mut self, id: &str) -> Result<&mut PipelineRuntime, SimError> {
        match self.index.get(id) {
            Some(&i) => Ok(&mut self.pipelines[i]),
            None => Err(SimError::UnknownPipeline(id.to_string())),
        }
    }

    pub fn health(&self, pipeline: &str) -> Result<Health, SimError> {
        Ok(self.runtime(pipeline)?.health())
    }

    pub fn allocation(&self, pipeline: &str, stage: &str) -> Result<u32, SimError> {
        let p = self.runtime(pipeline)?;
        let i = p
            .spec
            .stage_index(stage)
            .ok_or_else(|| SimError::InvalidTarget(format!("{pipeline}/{stage}")))?;
        Ok(p.stages[i].alloc)
    }

    /// Per-stage allocations for every pipeline.
    pub fn allocations(&self) -> BTreeMap<String, BTreeMap<String, u32>> {
        self.pipelines
            .iter()
            .map(|p| {
                let m = p
                    .spec
                    .stages
                    .iter()
                    .zip(&p.stages)
                    .map(|(s, r)| (s.id.clone(), r.alloc))
                    .collect();
                (p.spec.id.clone(), m)
            })
            .collect()
    }

    /// Records waiting at each stage of `pipeline`.
    pub fn queue_depths(&self, pipeline: &str) -> Result<Vec<u64>, SimError> {
        Ok(self
            .runtime(pipeline)?
            .stages
            .iter()
            .map(|s| s.queued())
            .collect())
    }

    pub fn stage_failure(
        &self,
        pipeline: &str,
        stage: &str,
    ) -> Result<Option<FailureCause>, SimError> {
        let p = self.runtime(pipeline)?;
        let i = p
            .spec
            .stage_index(stage)
            .ok_or_else(|| SimError::InvalidTarget(format!("{pipeline}/{stage}")))?;
        Ok(p.stages[i].failure)
    }

    pub fn input_missing(&self, pipeline: &str) -> Result<bool, SimError> {
        Ok(self.runtime(pipeline)?.input_missing)
    }

    /// Partitions currently blocked by an unaccepted schema version.
    pub fn blocked_partitions(&self, pipeline: &str) -> Result<Vec<u64>, SimError> {
        let p = self.runtime(pipeline)?;
        let mut out: BTreeSet<u64> = BTreeSet::new();
        for s in &p.stages {
            if let Some(FailureCause::SchemaMismatch { partition }) = s.failure {
                out.insert(partition);
            }
        }
        Ok(out.into_iter().collect())
    }

    /// Partitions materialized since the sink's last checkpoint.
    pub fn suspect_partitions(&self, pipeline: &str) -> Result<Vec<u64>, SimError> {
        let p = self.runtime(pipeline)?;
        let set: BTreeSet<u64> = p.sink_log.iter().map(|c| c.partition).collect();
        Ok(set.into_iter().collect())
    }

    pub fn is_partition_quarantined(
        &self,
        pipeline: &str,
        partition: u64,
    ) -> Result<bool, SimError> {
        Ok(self
            .runtime(pipeline)?
            .quarantined_partitions
            .contains(&partition))
    }

    /// The drift classification of a schema version seen by `pipeline`.
    pub fn version_class(&self, pipeline: &str, version: u32) -> Option<DriftClass> {
        let p = self.runtime(pipeline).ok()?;
        p.versions.get(&version).map(|v| v.class.clone())
    }

    pub fn current_schema(&self, pipeline: &str) -> Result<&Schema, SimError> {
        let p = self.runtime(pipeline)?;
        Ok(&p.versions[&p.accepted_version].schema)
    }

    pub fn effective_capacity(&self) -> u32 {
        let reduced: u32 = self.reductions.iter().map(|&(_, u)| u).sum();
        self.resource_model.capacity.saturating_sub(reduced).max(1)
    }

    /// Sum of every queue plus records withheld upstream.
    pub fn in_flight(&self) -> u64 {
        self.pipelines
            .iter()
            .map(|p| p.queued() + p.upstream_pending())
            .sum()
    }

    pub fn check_accounting(&self) -> Result<(), SimError> {
        let c = self.counters;
        let in_flight = self.in_flight();
        if c.ingress != c.materialized + in_flight + c.quarantined + c.dropped {
            return Err(SimError::InconsistentWorld {
                tick: self.tick,
                ingress: c.ingress,
                materialized: c.materialized,
                in_flight,
                quarantined: c.quarantined,
                dropped: c.dropped,
            });
        }
        Ok(())
    }

    /// Remove and return events raised since the last call.
    pub fn take_events(&mut self) -> Vec<KernelEvent> {
        std::mem::take(&mut self.pending_events)
    }

    /// Live view of the world before the next step. Rates, utilization and
    /// cost come from the most recent step.
    pub fn snapshot(&self) -> TelemetrySnapshot {
        let pipelines = self
            .pipelines
            .iter()
            .map(|p| self.pipeline_telemetry(p, 0))
            .collect();
        let cap = self.effective_capacity();
        TelemetrySnapshot {
            tick: self.tick,
            pipelines,
            total_cost: self.last_cost,
            capacity: cap,
            capacity_headroom: cap as i64 - self.last_demand as i64,
            contention_factor: self.last_factor,
        }
    }

    pub(crate) fn pipeline_telemetry(
        &self,
        p: &PipelineRuntime,
        failure_events: u32,
    ) -> PipelineTelemetry {
        let alloc = p.configured_alloc();
        let utilization = if alloc == 0 || p.mode != Mode::Running {
            0.0
        } else {
            (p.last.demand as f64 / alloc as f64).clamp(0.0, 1.0)
        };
        PipelineTelemetry {
            pipeline: p.spec.id.clone(),
            health: p.health(),
            queue_depths: p.stages.iter().map(|s| s.queued()).collect(),
            effective_rates: if p.last.rates.is_empty() {
                vec![0; p.stages.len()]
            } else {
                p.last.rates.clone()
            },
            freshness_lag: p
                .oldest_arrival()
                .map(|a| self.tick.saturating_sub(a))
                .unwrap_or(0),
            failure_events,
            allocation: p.stages.iter().map(|s| s.alloc).collect(),
            charged_alloc: p.charged_alloc(),
            utilization,
            arrivals: p.last.arrivals,
            materialized: p.last.materialized,
            upstream_pending: p.upstream_pending(),
            input_missing: p.input_missing,
            throttled: p.last.throttled,
            failures: p
                .spec
                .stages
                .iter()
                .zip(&p.stages)
                .filter_map(|(spec, s)| {
                    s.failure.map(|cause| StageFailure {
                        stage: spec.id.clone(),
                        cause,
                        recovering: s.recovering_until.is_some(),
                    })
                })
                .collect(),
        }
    }
}

/// Records per tick for `base_rate` records/tick/unit at `alloc` units,
/// scaled by the contention factor and floored.
pub fn effective_rate(base_rate: f64, alloc: u32, contention_factor: f64) -> u64 {
    let r = base_rate * alloc as f64 * contention_factor;
    // guard against 39.99999 from float scaling of exact products
    (r + 1e-9).floor().max(0.0) as u64
}

/// Cost of the most recent tick: allocated units plus materialized records.
pub fn compute_tick_cost(world: &SimWorld) -> f64 {
    let alloc: u32 = world.pipelines.iter().map(|p| p.charged_alloc()).sum();
    let materialized: u64 = world.pipelines.iter().map(|p| p.last.materialized).sum();
    alloc as f64 * world.resource_model.unit_price
        + materialized as f64 * world.resource_model.storage_price
}

/// Fair-share factor: 1 when demand fits, else capacity over demand.
pub fn contention_factor(capacity: u32, demand: u32) -> f64 {
    if demand <= capacity {
        1.0
    } else {
        capacity as f64 / demand as f64
    }
}

#[cfg(test)]
pub(crate) mod tests;

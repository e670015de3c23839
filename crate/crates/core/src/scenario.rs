//! Workload traces and fault schedules.
//!
//! A scenario is one JSON document. Streaming arrivals are Poisson draws
//! keyed by `(seed, tick, pipeline)`, so any tick can be regenerated without
//! replaying earlier ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{
    validate_pipeline_spec, PipelineKind, PipelineSpec, ResourceModel, StageSpec,
};
use crate::schema::{apply_delta, Change, Column, DataType, Schema, SchemaDelta};
use crate::sim::{SimConstants, SimError, SimWorld};
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub start: Tick,
    /// Exclusive.
    pub end: Tick,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalModel {
    pub pipeline: String,
    pub base_rate: f64,
    #[serde(default)]
    pub bursts: Vec<Burst>,
}

impl ArrivalModel {
    /// Poisson mean at `tick`; overlapping bursts multiply.
    pub fn mean_at(&self, tick: Tick) -> f64 {
        self.bursts
            .iter()
            .filter(|b| b.start <= tick && tick < b.end)
            .fold(self.base_rate, |m, b| m * b.multiplier)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchModel {
    pub pipeline: String,
    pub dataset_size: u64,
    /// First delivery tick; later ones follow every schedule period.
    #[serde(default)]
    pub phase: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultKind {
    SchemaDrift {
        pipeline: String,
        delta: SchemaDelta,
        /// Affected partition; defaults to the one being delivered.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        partition: Option<u64>,
    },
    UpstreamDelay {
        pipeline: String,
        delay_ticks: Tick,
        missing_fraction: f64,
    },
    ResourceContention {
        capacity_reduction: u32,
        duration_ticks: Tick,
    },
    TransientTaskFailure {
        pipeline: String,
        stage: String,
    },
}

impl FaultKind {
    pub fn pipeline(&self) -> Option<&str> {
        match self {
            FaultKind::SchemaDrift { pipeline, .. }
            | FaultKind::UpstreamDelay { pipeline, .. }
            | FaultKind::TransientTaskFailure { pipeline, .. } => Some(pipeline),
            FaultKind::ResourceContention { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub tick: Tick,
    pub fault: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub horizon: Tick,
    pub seed: u64,
    pub resource_model: ResourceModel,
    pub pipelines: Vec<PipelineSpec>,
    #[serde(default)]
    pub arrival_models: Vec<ArrivalModel>,
    #[serde(default)]
    pub batch_models: Vec<BatchModel>,
    #[serde(default)]
    pub fault_schedule: Vec<FaultEvent>,
    #[serde(default)]
    pub sim_constants: SimConstants,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message} at line {line} column {column}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Parse and validate a scenario document.
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let spec: ScenarioSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ScenarioError::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    let problems = validate_scenario(&spec);
    if problems.is_empty() {
        Ok(spec)
    } else {
        Err(ScenarioError::Invalid(problems))
    }
}

/// Every problem with `spec`; empty when valid.
pub fn validate_scenario(spec: &ScenarioSpec) -> Vec<String> {
    let mut out = Vec::new();
    if spec.horizon == 0 {
        out.push("horizon must be > 0".into());
    }
    if let Err(e) = spec.resource_model.validate() {
        out.push(e);
    }
    let mut ids = BTreeSet::new();
    for p in &spec.pipelines {
        if !ids.insert(p.id.as_str()) {
            out.push(format!("duplicate pipeline `{}`", p.id));
        }
        for v in validate_pipeline_spec(p).violations {
            out.push(format!("pipeline `{}`: {v}", p.id));
        }
    }
    let kind_of = |id: &str| spec.pipelines.iter().find(|p| p.id == id).map(|p| p.kind);
    let mut modeled = BTreeSet::new();
    for m in &spec.arrival_models {
        match kind_of(&m.pipeline) {
            Some(PipelineKind::Streaming) => {}
            Some(PipelineKind::Batch) => {
                out.push(format!("arrival model for batch pipeline `{}`", m.pipeline))
            }
            None => out.push(format!(
                "arrival model for unknown pipeline `{}`",
                m.pipeline
            )),
        }
        if !(m.base_rate >= 0.0 && m.base_rate.is_finite()) {
            out.push(format!("`{}`: base_rate must be >= 0", m.pipeline));
        }
        for b in &m.bursts {
            if !(b.multiplier > 0.0 && b.multiplier.is_finite()) {
                out.push(format!("`{}`: burst multiplier must be > 0", m.pipeline));
            }
            if b.end <= b.start {
                out.push(format!("`{}`: burst end must be after start", m.pipeline));
            }
        }
        if !modeled.insert(m.pipeline.as_str()) {
            out.push(format!("duplicate arrival model for `{}`", m.pipeline));
        }
    }
    for m in &spec.batch_models {
        match kind_of(&m.pipeline) {
            Some(PipelineKind::Batch) => {}
            Some(PipelineKind::Streaming) => out.push(format!(
                "batch model for streaming pipeline `{}`",
                m.pipeline
            )),
            None => out.push(format!("batch model for unknown pipeline `{}`", m.pipeline)),
        }
        if !modeled.insert(m.pipeline.as_str()) {
            out.push(format!("duplicate workload model for `{}`", m.pipeline));
        }
    }
    for p in &spec.pipelines {
        if !modeled.contains(p.id.as_str()) {
            out.push(format!("pipeline `{}` has no workload model", p.id));
        }
    }
    // drift deltas apply to the latest accepted schema
    let mut accepted: BTreeMap<&str, Schema> = spec
        .pipelines
        .iter()
        .map(|p| (p.id.as_str(), p.schema.clone()))
        .collect();
    let mut order: Vec<usize> = (0..spec.fault_schedule.len()).collect();
    order.sort_by_key(|&i| spec.fault_schedule[i].tick);
    for i in order {
        let f = &spec.fault_schedule[i];
        let at = format!("fault_schedule[{i}]");
        if f.tick >= spec.horizon {
            out.push(format!(
                "{at}: tick {} is not before horizon {}",
                f.tick, spec.horizon
            ));
        }
        if let Some(pid) = f.fault.pipeline() {
            if kind_of(pid).is_none() {
                out.push(format!("{at}: unknown pipeline `{pid}`"));
                continue;
            }
        }
        match &f.fault {
            FaultKind::SchemaDrift {
                pipeline, delta, ..
            } => {
                match apply_delta(&accepted[pipeline.as_str()], delta) {
                    Ok(next) if !crate::schema::classify_delta(delta).is_incompatible() => {
                        accepted.insert(pipeline.as_str(), next);
                    }
                    Ok(_) => {}
                    Err(e) => out.push(format!("{at}: {e}")),
                }
                if delta.is_empty() {
                    out.push(format!("{at}: empty schema delta"));
                }
            }
            FaultKind::UpstreamDelay {
                delay_ticks,
                missing_fraction,
                ..
            } => {
                if *delay_ticks == 0 {
                    out.push(format!("{at}: delay_ticks must be > 0"));
                }
                if !(0.0..=1.0).contains(missing_fraction) {
                    out.push(format!("{at}: missing_fraction must be in [0, 1]"));
                }
            }
            FaultKind::ResourceContention {
                capacity_reduction,
                duration_ticks,
            } => {
                if *capacity_reduction == 0 || *capacity_reduction >= spec.resource_model.capacity {
                    out.push(format!("{at}: capacity_reduction must be in [1, capacity)"));
                }
                if *duration_ticks == 0 {
                    out.push(format!("{at}: duration_ticks must be > 0"));
                }
            }
            FaultKind::TransientTaskFailure { pipeline, stage } => {
                let p = spec.pipelines.iter().find(|p| &p.id == pipeline).unwrap();
                if p.stage(stage).is_none() {
                    out.push(format!("{at}: unknown stage `{pipeline}/{stage}`"));
                }
            }
        }
    }
    out
}

impl ScenarioSpec {
    /// A fresh world for this scenario.
    pub fn build_world(
        &self,
        allocs: Option<&BTreeMap<String, BTreeMap<String, u32>>>,
    ) -> Result<SimWorld, SimError> {
        SimWorld::new(
            &self.pipelines,
            self.resource_model,
            self.sim_constants,
            allocs,
        )
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Same scenario with every fault removed.
    pub fn fault_free(&self) -> Self {
        Self {
            fault_schedule: Vec::new(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("scenario serializes");
        crate::telemetry::sha256_hex(crate::telemetry::canonical_json(&v).as_bytes())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic Poisson draw for one `(seed, tick, stream)` cell.
pub fn poisson_draw(seed: u64, tick: Tick, stream: u64, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let key =
        splitmix64(splitmix64(seed) ^ splitmix64(tick.wrapping_mul(0x100_0000_01B3)) ^ stream);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let d = Poisson::new(mean).expect("finite positive mean");
    d.sample(&mut rng) as u64
}

/// Records arriving at `tick`, one count per pipeline in declaration order.
pub fn generate_arrivals(spec: &ScenarioSpec, tick: Tick) -> Vec<u64> {
    spec.pipelines
        .iter()
        .enumerate()
        .map(|(i, p)| match p.kind {
            PipelineKind::Streaming => spec
                .arrival_models
                .iter()
                .find(|m| m.pipeline == p.id)
                .map(|m| poisson_draw(spec.seed, tick, i as u64, m.mean_at(tick)))
                .unwrap_or(0),
            PipelineKind::Batch => {
                let period = p.schedule_period.unwrap_or(0);
                spec.batch_models
                    .iter()
                    .find(|m| m.pipeline == p.id)
                    .filter(|m| {
                        period > 0 && tick >= m.phase && (tick - m.phase).is_multiple_of(period)
                    })
                    .map(|m| m.dataset_size)
                    .unwrap_or(0)
            }
        })
        .collect()
}

/// Apply every not-yet-applied fault scheduled for the world's current tick.
pub fn inject_faults(
    spec: &ScenarioSpec,
    world: &mut SimWorld,
) -> Result<Vec<FaultEvent>, SimError> {
    let t = world.tick();
    let mut applied = Vec::new();
    for (i, f) in spec.fault_schedule.iter().enumerate() {
        if f.tick != t || world.consumed_faults.contains(&i) {
            continue;
        }
        world.apply_fault(f)?;
        world.consumed_faults.insert(i);
        applied.push(f.clone());
    }
    Ok(applied)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Compatible,
    Incompatible,
}

#[derive(Debug, Error, PartialEq)]
pub enum MutateError {
    #[error("schema has no columns")]
    EmptySchema,
}

/// Change `schema` by one seeded move of the requested kind.
///
/// Compatible moves add a nullable string column or widen a type.
/// Incompatible moves drop a column (never the last one) or narrow a type;
/// when neither is possible a non-nullable column is added instead.
pub fn mutate_schema(schema: &Schema, kind: DriftKind, seed: u64) -> Result<Schema, MutateError> {
    if schema.columns.is_empty() {
        return Err(MutateError::EmptySchema);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let fresh = (0..)
        .map(|n| format!("c{n}"))
        .find(|n| schema.column(n).is_none())
        .unwrap();
    let add = |nullable: bool| Change::AddColumn {
        column: Column::new(fresh.clone(), DataType::String, nullable),
        position: schema.columns.len(),
    };
    let mut moves = Vec::new();
    match kind {
        DriftKind::Compatible => {
            moves.push(add(true));
            for c in &schema.columns {
                for to in DataType::ALL {
                    if c.dtype.widens_to(to) {
                        moves.push(Change::ChangeType {
                            name: c.name.clone(),
                            from: c.dtype,
                            to,
                        });
                    }
                }
            }
        }
        DriftKind::Incompatible => {
            if schema.columns.len() >= 2 {
                for c in &schema.columns {
                    moves.push(Change::DropColumn {
                        name: c.name.clone(),
                    });
                }
            }
            for c in &schema.columns {
                for to in DataType::ALL {
                    if c.dtype.narrows_to(to) {
                        moves.push(Change::ChangeType {
                            name: c.name.clone(),
                            from: c.dtype,
                            to,
                        });
                    }
                }
            }
            if moves.is_empty() {
                moves.push(add(false));
            }
        }
    }
    let change = moves.choose(&mut rng).expect("at least one move").clone();
    Ok(apply_delta(schema, &SchemaDelta::new(vec![change])).expect("generated move applies"))
}

impl fmt::Display for DriftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftKind::Compatible => f.write_str("compatible"),
            DriftKind::Incompatible => f.write_str("incompatible"),
        }
    }
}

fn stage(id: &str, upstream: &[&str], base_rate: f64, min: u32, max: u32) -> StageSpec {
    StageSpec {
        id: id.into(),
        upstream: upstream.iter().map(|s| s.to_string()).collect(),
        base_rate,
        min_alloc: min,
        max_alloc: max,
        checkpoint_interval: 30,
    }
}

fn cols(spec: &[(&str, DataType, bool)]) -> Schema {
    Schema::new(
        1,
        spec.iter()
            .map(|&(n, t, null)| Column::new(n, t, null))
            .collect(),
    )
    .expect("static schema is valid")
}

fn batch_pipeline(
    id: &str,
    criticality: u8,
    period: Tick,
    rate: f64,
    max: u32,
    tags: &[&str],
    schema: Schema,
) -> PipelineSpec {
    PipelineSpec {
        id: id.into(),
        kind: PipelineKind::Batch,
        stages: vec![
            stage("extract", &[], rate, 1, max),
            stage("transform", &["extract"], rate, 1, max),
            stage("load", &["transform"], rate, 1, max),
        ],
        criticality,
        freshness_target: None,
        schedule_period: Some(period),
        tags: tags.iter().map(|s| s.to_string()).collect(),
        schema,
    }
}

fn streaming_pipeline(
    id: &str,
    criticality: u8,
    target: Tick,
    rate: f64,
    max: u32,
    schema: Schema,
) -> PipelineSpec {
    PipelineSpec {
        id: id.into(),
        kind: PipelineKind::Streaming,
        stages: vec![
            stage("ingest", &[], rate, 1, max),
            stage("enrich", &["ingest"], rate, 1, max),
            stage("sink", &["enrich"], rate, 1, max),
        ],
        criticality,
        freshness_target: Some(target),
        schedule_period: None,
        tags: vec!["realtime".into()],
        schema,
    }
}

fn fault(tick: Tick, fault: FaultKind) -> FaultEvent {
    FaultEvent { tick, fault }
}

/// The fixed evaluation scenario shipped as `scenarios/canonical.json`.
pub fn canonical_scenario() -> ScenarioSpec {
    use DataType::*;
    let orders = cols(&[
        ("order_id", Int64, false),
        ("customer_id", Int64, false),
        ("amount", Float64, false),
        ("placed_at", Timestamp, false),
    ]);
    let inventory = cols(&[
        ("sku", String, false),
        ("warehouse", Int32, false),
        ("on_hand", Int32, false),
    ]);
    let marketing = cols(&[
        ("campaign", String, false),
        ("clicks", Int32, false),
        ("spend", Float64, true),
    ]);
    let archive = cols(&[("line", String, false), ("ts", Timestamp, false)]);
    let clicks = cols(&[
        ("session", String, false),
        ("url", String, false),
        ("dwell_ms", Int32, false),
        ("ts", Timestamp, false),
    ]);
    let sensors = cols(&[
        ("device", Int64, false),
        ("reading", Float64, false),
        ("ts", Timestamp, false),
    ]);

    let pipelines = vec![
        batch_pipeline(
            "orders_daily",
            1,
            240,
            250.0,
            8,
            &["regulated", "finance"],
            orders.clone(),
        ),
        batch_pipeline("inventory_sync", 2, 180, 250.0, 6, &[], inventory.clone()),
        batch_pipeline("marketing_rollup", 4, 360, 200.0, 6, &[], marketing),
        batch_pipeline("log_archive", 5, 300, 300.0, 6, &[], archive),
        streaming_pipeline("clickstream", 1, 5, 100.0, 6, clicks.clone()),
        streaming_pipeline("sensor_feed", 2, 5, 100.0, 5, sensors.clone()),
    ];

    let arrival_models = vec![
        ArrivalModel {
            pipeline: "clickstream".into(),
            base_rate: 300.0,
            bursts: vec![
                Burst {
                    start: 1500,
                    end: 1560,
                    multiplier: 1.5,
                },
                Burst {
                    start: 4200,
                    end: 4300,
                    multiplier: 1.6,
                },
                Burst {
                    start: 7700,
                    end: 7760,
                    multiplier: 1.5,
                },
            ],
        },
        ArrivalModel {
            pipeline: "sensor_feed".into(),
            base_rate: 200.0,
            bursts: vec![
                Burst {
                    start: 2600,
                    end: 2660,
                    multiplier: 1.5,
                },
                Burst {
                    start: 6100,
                    end: 6200,
                    multiplier: 1.5,
                },
            ],
        },
    ];
    let batch_models = vec![
        BatchModel {
            pipeline: "orders_daily".into(),
            dataset_size: 30_000,
            phase: 0,
        },
        BatchModel {
            pipeline: "inventory_sync".into(),
            dataset_size: 18_000,
            phase: 20,
        },
        BatchModel {
            pipeline: "marketing_rollup".into(),
            dataset_size: 20_000,
            phase: 40,
        },
        BatchModel {
            pipeline: "log_archive".into(),
            dataset_size: 24_000,
            phase: 60,
        },
    ];

    let drop = |name: &str| SchemaDelta::new(vec![Change::DropColumn { name: name.into() }]);
    let add_nullable = |s: &Schema, name: &str| {
        SchemaDelta::new(vec![Change::AddColumn {
            column: Column::new(name, String, true),
            position: s.columns.len(),
        }])
    };
    let fault_schedule = vec![
        fault(
            1200,
            FaultKind::SchemaDrift {
                pipeline: "orders_daily".into(),
                delta: add_nullable(&orders, "coupon"),
                partition: None,
            },
        ),
        fault(
            2161,
            FaultKind::SchemaDrift {
                pipeline: "inventory_sync".into(),
                delta: drop("warehouse"),
                partition: None,
            },
        ),
        fault(
            3000,
            FaultKind::UpstreamDelay {
                pipeline: "clickstream".into(),
                delay_ticks: 30,
                missing_fraction: 0.1,
            },
        ),
        fault(
            3361,
            FaultKind::TransientTaskFailure {
                pipeline: "orders_daily".into(),
                stage: "load".into(),
            },
        ),
        fault(
            4320,
            FaultKind::UpstreamDelay {
                pipeline: "orders_daily".into(),
                delay_ticks: 40,
                missing_fraction: 0.05,
            },
        ),
        fault(
            4805,
            FaultKind::SchemaDrift {
                pipeline: "clickstream".into(),
                delta: SchemaDelta::new(vec![Change::ChangeType {
                    name: "dwell_ms".into(),
                    from: Int32,
                    to: Int64,
                }]),
                partition: None,
            },
        ),
        fault(
            5040,
            FaultKind::ResourceContention {
                capacity_reduction: 24,
                duration_ticks: 60,
            },
        ),
        fault(
            5580,
            FaultKind::UpstreamDelay {
                pipeline: "marketing_rollup".into(),
                delay_ticks: 30,
                missing_fraction: 0.0,
            },
        ),
        fault(
            6301,
            FaultKind::SchemaDrift {
                pipeline: "sensor_feed".into(),
                delta: drop("reading"),
                partition: None,
            },
        ),
        fault(
            7020,
            FaultKind::TransientTaskFailure {
                pipeline: "sensor_feed".into(),
                stage: "enrich".into(),
            },
        ),
        fault(
            7800,
            FaultKind::ResourceContention {
                capacity_reduction: 20,
                duration_ticks: 80,
            },
        ),
        fault(
            8400,
            FaultKind::UpstreamDelay {
                pipeline: "log_archive".into(),
                delay_ticks: 60,
                missing_fraction: 0.1,
            },
        ),
    ];

    ScenarioSpec {
        horizon: 10_000,
        seed: 42,
        resource_model: ResourceModel {
            capacity: 64,
            unit_price: 0.01,
            storage_price: 0.00001,
        },
        pipelines,
        arrival_models,
        batch_models,
        fault_schedule,
        sim_constants: SimConstants::default(),
    }
}

/// A randomized scenario for robustness testing: the canonical pipelines
/// with a seeded fault schedule and burst pattern over a shorter horizon.
pub fn fuzz_scenario(seed: u64) -> ScenarioSpec {
    let mut spec = canonical_scenario();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xF022));
    spec.seed = seed;
    spec.horizon = 1_500;
    for m in &mut spec.arrival_models {
        m.bursts.clear();
        for _ in 0..rng.random_range(0..4) {
            let start = rng.random_range(0..spec.horizon - 50);
            let len = rng.random_range(10..120);
            m.bursts.push(Burst {
                start,
                end: start + len,
                multiplier: rng.random_range(0.5..4.0),
            });
        }
    }
    let ids: Vec<String> = spec.pipelines.iter().map(|p| p.id.clone()).collect();
    // drift is applied against the latest accepted schema, so track it
    let mut schemas: BTreeMap<String, Schema> = spec
        .pipelines
        .iter()
        .map(|p| (p.id.clone(), p.schema.clone()))
        .collect();
    let mut faults = Vec::new();
    let n = rng.random_range(4..16);
    let mut ticks: Vec<Tick> = (0..n)
        .map(|_| rng.random_range(1..spec.horizon - 1))
        .collect();
    ticks.sort_unstable();
    for tick in ticks {
        let pid = ids.choose(&mut rng).unwrap().clone();
        let kind = match rng.random_range(0..4) {
            0 => {
                let old = &schemas[&pid];
                let dk = if rng.random_bool(0.5) {
                    DriftKind::Compatible
                } else {
                    DriftKind::Incompatible
                };
                let new = mutate_schema(old, dk, rng.random()).expect("non-empty schema");
                let delta = crate::schema::schema_delta(old, &new);
                if dk == DriftKind::Compatible {
                    schemas.insert(pid.clone(), new);
                }
                FaultKind::SchemaDrift {
                    pipeline: pid,
                    delta,
                    partition: None,
                }
            }
            1 => FaultKind::UpstreamDelay {
                pipeline: pid,
                delay_ticks: rng.random_range(5..90),
                missing_fraction: rng.random_range(0.0..0.5),
            },
            2 => FaultKind::ResourceContention {
                capacity_reduction: rng.random_range(4..40),
                duration_ticks: rng.random_range(10..150),
            },
            _ => {
                let p = spec.pipelines.iter().find(|p| p.id == pid).unwrap();
                let stage = p.stages.choose(&mut rng).unwrap().id.clone();
                FaultKind::TransientTaskFailure {
                    pipeline: pid,
                    stage,
                }
            }
        };
        faults.push(fault(tick, kind));
    }
    spec.fault_schedule = faults;
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{classify_delta, schema_delta, DriftClass};

    #[test]
    fn golden_poisson_draw() {
        // pinned from the reference generator; changing the keying scheme
        // must be a deliberate decision
        assert_eq!(poisson_draw(42, 0, 0, 100.0), GOLDEN_SEED42_TICK0);
    }

    const GOLDEN_SEED42_TICK0: u64 = 103;

    #[test]
    fn draws_are_keyed_not_sequential() {
        let a = poisson_draw(7, 100, 1, 50.0);
        let _ = poisson_draw(7, 99, 1, 50.0);
        assert_eq!(a, poisson_draw(7, 100, 1, 50.0));
        let draws: BTreeSet<u64> = (0..50).map(|t| poisson_draw(7, t, 1, 50.0)).collect();
        assert!(draws.len() > 5);
    }

    #[test]
    fn burst_multiplies_mean() {
        let m = ArrivalModel {
            pipeline: "p".into(),
            base_rate: 100.0,
            bursts: vec![Burst {
                start: 10,
                end: 20,
                multiplier: 5.0,
            }],
        };
        assert_eq!(m.mean_at(9), 100.0);
        assert_eq!(m.mean_at(10), 500.0);
        assert_eq!(m.mean_at(20), 100.0);
    }

    #[test]
    fn canonical_is_valid_and_shaped() {
        let s = canonical_scenario();
        assert!(
            validate_scenario(&s).is_empty(),
            "{:?}",
            validate_scenario(&s)
        );
        assert_eq!(s.pipelines.len(), 6);
        let streaming = s
            .pipelines
            .iter()
            .filter(|p| p.kind == PipelineKind::Streaming)
            .count();
        assert_eq!(streaming, 2);
        assert_eq!(s.horizon, 10_000);
        assert_eq!(s.resource_model.capacity, 64);
        assert_eq!(s.fault_schedule.len(), 12);
        let mut compat = 0;
        let mut incompat = 0;
        let mut delays = 0;
        let mut contention = 0;
        let mut transient = 0;
        for f in &s.fault_schedule {
            match &f.fault {
                FaultKind::SchemaDrift { delta, .. } => match classify_delta(delta) {
                    DriftClass::Incompatible { .. } => incompat += 1,
                    _ => compat += 1,
                },
                FaultKind::UpstreamDelay { .. } => delays += 1,
                FaultKind::ResourceContention { .. } => contention += 1,
                FaultKind::TransientTaskFailure { .. } => transient += 1,
            }
        }
        assert_eq!(
            (compat, incompat, delays, contention, transient),
            (2, 2, 4, 2, 2)
        );
    }

    #[test]
    fn shipped_canonical_matches_generator() {
        let text = include_str!("../../../scenarios/canonical.json");
        let parsed = parse_scenario(text).unwrap();
        assert_eq!(parsed, canonical_scenario());
    }

    #[test]
    fn unknown_key_rejected_with_location() {
        let mut v = serde_json::to_value(canonical_scenario()).unwrap();
        v["resource_model"]["discount"] = serde_json::json!(1);
        let text = serde_json::to_string_pretty(&v).unwrap();
        match parse_scenario(&text) {
            Err(ScenarioError::Parse { path, line, .. }) => {
                assert_eq!(path, "resource_model.discount");
                assert!(line > 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn fault_past_horizon_rejected() {
        let mut s = canonical_scenario();
        s.fault_schedule[0].tick = s.horizon;
        assert!(validate_scenario(&s)
            .iter()
            .any(|e| e.contains("not before horizon")));
    }

    #[test]
    fn batch_delivers_on_schedule() {
        let s = canonical_scenario();
        let orders = s
            .pipelines
            .iter()
            .position(|p| p.id == "orders_daily")
            .unwrap();
        assert_eq!(generate_arrivals(&s, 0)[orders], 30_000);
        assert_eq!(generate_arrivals(&s, 1)[orders], 0);
        assert_eq!(generate_arrivals(&s, 240)[orders], 30_000);
    }

    #[test]
    fn mutate_single_column_examples() {
        let a32 = Schema::new(1, vec![Column::new("a", DataType::Int32, false)]).unwrap();
        for seed in 0..20 {
            let m = mutate_schema(&a32, DriftKind::Compatible, seed).unwrap();
            let widened = m.columns.len() == 1 && DataType::Int32.widens_to(m.columns[0].dtype);
            assert!(m.columns.len() == 2 || widened, "{m:?}");
        }
        let a64 = Schema::new(1, vec![Column::new("a", DataType::Int64, false)]).unwrap();
        for seed in 0..20 {
            let m = mutate_schema(&a64, DriftKind::Incompatible, seed).unwrap();
            assert_eq!(m.columns, vec![Column::new("a", DataType::Int32, false)]);
        }
    }

    #[test]
    fn mutation_round_trips_through_classifier() {
        let mut schema = canonical_scenario().pipelines[0].schema.clone();
        for seed in 0..1000u64 {
            let kind = if seed % 2 == 0 {
                DriftKind::Compatible
            } else {
                DriftKind::Incompatible
            };
            let next = mutate_schema(&schema, kind, seed).unwrap();
            let class = classify_delta(&schema_delta(&schema, &next));
            match kind {
                DriftKind::Compatible => {
                    assert_eq!(class, DriftClass::BackwardCompatible, "seed {seed}")
                }
                DriftKind::Incompatible => assert!(class.is_incompatible(), "seed {seed}"),
            }
            if seed % 7 == 0 && next.columns.len() < 8 {
                schema = next;
            }
        }
    }

    #[test]
    fn inject_is_idempotent_within_tick() {
        let s = canonical_scenario();
        let mut w = s.build_world(None).unwrap();
        for t in 0..3000 {
            let arr = generate_arrivals(&s, t);
            inject_faults(&s, &mut w).unwrap();
            w.step(&arr).unwrap();
        }
        assert_eq!(w.tick(), 3000);
        let once = inject_faults(&s, &mut w).unwrap();
        assert_eq!(once.len(), 1);
        let snap = w.snapshot();
        assert!(inject_faults(&s, &mut w).unwrap().is_empty());
        assert_eq!(snap, w.snapshot());
    }

    #[test]
    fn fuzz_scenarios_are_valid() {
        for seed in 1..=50 {
            let s = fuzz_scenario(seed);
            assert!(
                validate_scenario(&s).is_empty(),
                "seed {seed}: {:?}",
                validate_scenario(&s)
            );
        }
    }
}

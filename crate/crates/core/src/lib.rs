//! Policy-bounded agentic control of simulated data pipelines.
//!
//! The crate is layered bottom-up: [`schema`] and [`pipeline`] describe the
//! data, [`sim`] runs it, [`scenario`] drives it, [`telemetry`] and
//! [`policy`] observe and govern it, [`agents`] propose changes and
//! [`harness`] compares agentic control against a static baseline.

pub mod action;
pub mod agents;
pub mod harness;
pub mod pipeline;
pub mod policy;
pub mod scenario;
pub mod schema;
pub mod sim;
pub mod telemetry;

/// Simulated time. One tick is one simulated minute.
pub type Tick = u64;

pub use action::{ActionKind, ActionParams, Actor, ProposedAction, Target};
pub use agents::{AgentSet, AgenticController, BackendSpec};
pub use harness::{
    compare, compute_metrics, run_experiment, BaselineConfig, ComparisonReport, ControllerSpec,
    MetricsReport, RunOptions, RunResult,
};
pub use pipeline::{PipelineKind, PipelineSpec, ResourceModel, StageSpec};
pub use policy::{
    parse_policy, validate_action, PolicyContext, PolicyDecision, PolicyDocument, Verdict,
};
pub use scenario::{canonical_scenario, parse_scenario, FaultEvent, FaultKind, ScenarioSpec};
pub use schema::{
    apply_delta, classify_delta, schema_delta, Change, Column, DataType, DriftClass, Schema,
    SchemaDelta,
};
pub use sim::{ApprovedAction, Health, SimWorld, TelemetrySnapshot, TickReport};
pub use telemetry::{AuditLog, AuditRecord, Incident, IncidentClass};

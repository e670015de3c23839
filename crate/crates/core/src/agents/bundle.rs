use serde::{Deserialize, Serialize};

use super::memory::MemoryEntry;
use super::monitor::Anomaly;
use crate::action::{ActionKind, Actor};
use crate::pipeline::PipelineKind;
use crate::policy::{ApprovalRule, SchemaMode};
use crate::sim::{KernelEvent, TelemetrySnapshot};
use crate::telemetry::{canonical_json, IncidentClass};
use crate::Tick;

/// Read-only view handed to a reasoning backend. Plain data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBundle {
    pub tick: Tick,
    pub agent: Actor,
    pub snapshot: TelemetrySnapshot,
    /// Kernel events since the previous control tick.
    pub events: Vec<KernelEvent>,
    pub incidents: Vec<IncidentView>,
    pub anomalies: Vec<Anomaly>,
    pub policy: PolicySummary,
    pub memory: Vec<MemoryEntry>,
    pub pipelines: Vec<PipelineInfo>,
}

impl ObservationBundle {
    pub fn to_canonical_json(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("bundle serializes"))
    }

    pub fn pipeline(&self, id: &str) -> Option<&PipelineInfo> {
        self.pipelines.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentView {
    pub id: u64,
    pub pipeline: String,
    pub class: IncidentClass,
    pub detected_tick: Tick,
    /// Agent responsible for remediation; `None` once handed to the
    /// fallback orchestrator.
    pub owner: Option<Actor>,
    /// Kinds already executed for this incident, in order.
    pub tried: Vec<ActionKind>,
    /// A remediation is in progress or awaiting approval.
    pub pending: bool,
    pub blocked_partitions: Vec<u64>,
    pub suspect_partitions: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub version: u32,
    pub budget_per_window: f64,
    pub window: Tick,
    pub max_scale_step: u32,
    /// Spend so far this window plus what the current configuration
    /// commits to for the rest of it.
    pub committed_spend: f64,
    /// Units a ScaleUp may add without breaching either budget check.
    pub scale_up_headroom: u32,
    /// Kinds this agent may propose under the current policy.
    pub allowed_kinds: Vec<ActionKind>,
    pub schema_mode: SchemaMode,
    pub quarantine_allowed: bool,
    pub approval_required: Vec<ApprovalRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInfo {
    pub id: String,
    pub base_rate: f64,
    pub min_alloc: u32,
    pub max_alloc: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineInfo {
    pub id: String,
    pub kind: PipelineKind,
    pub criticality: u8,
    pub freshness_target: Option<Tick>,
    pub tags: Vec<String>,
    pub stages: Vec<StageInfo>,
    /// Consecutive ticks with utilization below the low watermark.
    pub low_util_ticks: Tick,
    /// Upstream input has returned and settled.
    pub input_stable: bool,
}

//! Pipeline and resource descriptions, and structural validation of a
//! pipeline's stage graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::schema::Schema;
use crate::Tick;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub id: String,
    #[serde(default)]
    pub upstream: Vec<String>,
    /// Records per tick per resource unit.
    pub base_rate: f64,
    pub min_alloc: u32,
    pub max_alloc: u32,
    pub checkpoint_interval: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Batch,
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub id: String,
    pub kind: PipelineKind,
    pub stages: Vec<StageSpec>,
    /// 1 is most critical, 5 least.
    pub criticality: u8,
    /// Required for streaming pipelines. Optional for batch pipelines, which
    /// default to half their schedule period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freshness_target: Option<Tick>,
    /// Required for batch pipelines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_period: Option<Tick>,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Input schema at the start of a run.
    pub schema: Schema,
}

impl PipelineSpec {
    pub fn stage(&self, id: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.id == id)
    }

    pub fn stage_index(&self, id: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.id == id)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    /// Lag beyond which the pipeline is considered stale.
    pub fn effective_freshness_target(&self) -> Option<Tick> {
        match self.kind {
            PipelineKind::Streaming => self.freshness_target,
            PipelineKind::Batch => self
                .freshness_target
                .or(self.schedule_period.map(|p| (p / 2).max(1))),
        }
    }

    /// Stage indices with no upstream.
    pub fn sources(&self) -> Vec<usize> {
        (0..self.stages.len())
            .filter(|&i| self.stages[i].upstream.is_empty())
            .collect()
    }

    /// Stage indices nothing else depends on.
    pub fn sinks(&self) -> Vec<usize> {
        let referenced: BTreeSet<&str> = self
            .stages
            .iter()
            .flat_map(|s| s.upstream.iter().map(String::as_str))
            .collect();
        (0..self.stages.len())
            .filter(|&i| !referenced.contains(self.stages[i].id.as_str()))
            .collect()
    }

    /// Topological order of stage indices, or `None` when the graph has a
    /// cycle or dangling references. Ties are broken by declaration order.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let index: BTreeMap<&str, usize> = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let n = self.stages.len();
        let mut indegree = vec![0usize; n];
        let mut downstream = vec![Vec::new(); n];
        for (i, s) in self.stages.iter().enumerate() {
            for up in &s.upstream {
                let &u = index.get(up.as_str())?;
                indegree[i] += 1;
                downstream[u].push(i);
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &d in &downstream[i] {
                indegree[d] -= 1;
                if indegree[d] == 0 {
                    ready.insert(d);
                }
            }
        }
        (order.len() == n).then_some(order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceModel {
    /// Total resource units in the shared pool.
    pub capacity: u32,
    /// Cost per allocated unit per tick.
    pub unit_price: f64,
    /// Cost per materialized record.
    pub storage_price: f64,
}

impl ResourceModel {
    pub fn validate(&self) -> Result<(), String> {
        if self.capacity == 0 {
            return Err("resource_model.capacity must be > 0".into());
        }
        if !(self.unit_price >= 0.0 && self.unit_price.is_finite()) {
            return Err("resource_model.unit_price must be >= 0".into());
        }
        if !(self.storage_price >= 0.0 && self.storage_price.is_finite()) {
            return Err("resource_model.storage_price must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    EmptyPipeline,
    DuplicateStage {
        stage: String,
    },
    UnknownUpstream {
        stage: String,
        upstream: String,
    },
    /// Stages participating in a cycle, in declaration order.
    CycleDetected {
        stages: Vec<String>,
    },
    SinkCount {
        found: usize,
    },
    AllocBounds {
        stage: String,
        min: u32,
        max: u32,
    },
    NonPositiveRate {
        stage: String,
    },
    ZeroCheckpointInterval {
        stage: String,
    },
    CriticalityOutOfRange {
        value: u8,
    },
    MissingFreshnessTarget,
    MissingSchedulePeriod,
    InvalidSchema {
        reason: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyPipeline => write!(f, "pipeline has no stages"),
            Violation::DuplicateStage { stage } => write!(f, "duplicate stage id `{stage}`"),
            Violation::UnknownUpstream { stage, upstream } => {
                write!(
                    f,
                    "stage `{stage}` references unknown upstream `{upstream}`"
                )
            }
            Violation::CycleDetected { stages } => {
                write!(f, "cycle detected among stages {}", stages.join(","))
            }
            Violation::SinkCount { found } => write!(f, "expected exactly one sink, found {found}"),
            Violation::AllocBounds { stage, min, max } => {
                write!(
                    f,
                    "stage `{stage}` needs 0 < min_alloc <= max_alloc (got {min}..{max})"
                )
            }
            Violation::NonPositiveRate { stage } => {
                write!(f, "stage `{stage}` base_rate must be > 0")
            }
            Violation::ZeroCheckpointInterval { stage } => {
                write!(f, "stage `{stage}` checkpoint_interval must be > 0")
            }
            Violation::CriticalityOutOfRange { value } => {
                write!(f, "criticality {value} outside 1..=5")
            }
            Violation::MissingFreshnessTarget => {
                write!(f, "streaming pipeline lacks freshness_target")
            }
            Violation::MissingSchedulePeriod => write!(f, "batch pipeline lacks schedule_period"),
            Violation::InvalidSchema { reason } => write!(f, "invalid schema: {reason}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pipeline: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Collect every structural problem with `spec`. An empty report means valid.
pub fn validate_pipeline_spec(spec: &PipelineSpec) -> ValidationReport {
    let mut v = Vec::new();
    if spec.stages.is_empty() {
        v.push(Violation::EmptyPipeline);
    }
    let mut ids = BTreeSet::new();
    for s in &spec.stages {
        if !ids.insert(s.id.as_str()) {
            v.push(Violation::DuplicateStage {
                stage: s.id.clone(),
            });
        }
    }
    let mut dangling = false;
    for s in &spec.stages {
        for up in &s.upstream {
            if !ids.contains(up.as_str()) {
                dangling = true;
                v.push(Violation::UnknownUpstream {
                    stage: s.id.clone(),
                    upstream: up.clone(),
                });
            }
        }
        if s.min_alloc == 0 || s.min_alloc > s.max_alloc {
            v.push(Violation::AllocBounds {
                stage: s.id.clone(),
                min: s.min_alloc,
                max: s.max_alloc,
            });
        }
        if !(s.base_rate > 0.0 && s.base_rate.is_finite()) {
            v.push(Violation::NonPositiveRate {
                stage: s.id.clone(),
            });
        }
        if s.checkpoint_interval == 0 {
            v.push(Violation::ZeroCheckpointInterval {
                stage: s.id.clone(),
            });
        }
    }
    if !dangling && !spec.stages.is_empty() {
        let cyclic = cyclic_stages(spec);
        if !cyclic.is_empty() {
            v.push(Violation::CycleDetected { stages: cyclic });
        }
    }
    if !spec.stages.is_empty() {
        let sinks = spec.sinks().len();
        if sinks != 1 {
            v.push(Violation::SinkCount { found: sinks });
        }
    }
    if !(1..=5).contains(&spec.criticality) {
        v.push(Violation::CriticalityOutOfRange {
            value: spec.criticality,
        });
    }
    match spec.kind {
        PipelineKind::Streaming if spec.freshness_target.is_none() => {
            v.push(Violation::MissingFreshnessTarget)
        }
        PipelineKind::Batch if spec.schedule_period.unwrap_or(0) == 0 => {
            v.push(Violation::MissingSchedulePeriod)
        }
        _ => {}
    }
    if let Err(e) = spec.schema.validate() {
        v.push(Violation::InvalidSchema {
            reason: e.to_string(),
        });
    }
    ValidationReport {
        pipeline: spec.id.clone(),
        violations: v,
    }
}

/// Stages left over after repeatedly peeling off stages with no remaining
/// upstream; exactly the stages on or downstream of a cycle, trimmed to
/// those that can reach themselves.
fn cyclic_stages(spec: &PipelineSpec) -> Vec<String> {
    let index: BTreeMap<&str, usize> = spec
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let n = spec.stages.len();
    let mut adj = vec![Vec::new(); n];
    for (i, s) in spec.stages.iter().enumerate() {
        for up in &s.upstream {
            if let Some(&u) = index.get(up.as_str()) {
                adj[u].push(i);
            }
        }
    }
    let reaches_self = |start: usize| {
        let mut seen = vec![false; n];
        let mut stack = adj[start].clone();
        while let Some(x) = stack.pop() {
            if x == start {
                return true;
            }
            if !seen[x] {
                seen[x] = true;
                stack.extend(adj[x].iter().copied());
            }
        }
        false
    };
    (0..n)
        .filter(|&i| reaches_self(i))
        .map(|i| spec.stages[i].id.clone())
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::schema::{Column, DataType};

    pub fn stage(id: &str, upstream: &[&str]) -> StageSpec {
        StageSpec {
            id: id.into(),
            upstream: upstream.iter().map(|s| s.to_string()).collect(),
            base_rate: 10.0,
            min_alloc: 1,
            max_alloc: 8,
            checkpoint_interval: 10,
        }
    }

    pub fn linear(id: &str, kind: PipelineKind) -> PipelineSpec {
        PipelineSpec {
            id: id.into(),
            kind,
            stages: vec![stage("a", &[]), stage("b", &["a"]), stage("c", &["b"])],
            criticality: 2,
            freshness_target: (kind == PipelineKind::Streaming).then_some(10),
            schedule_period: (kind == PipelineKind::Batch).then_some(100),
            tags: vec![],
            schema: Schema::new(1, vec![Column::new("a", DataType::Int32, false)]).unwrap(),
        }
    }

    #[test]
    fn valid_linear_dag() {
        let spec = linear("p", PipelineKind::Streaming);
        assert!(validate_pipeline_spec(&spec).is_valid());
        assert_eq!(spec.topological_order(), Some(vec![0, 1, 2]));
    }

    #[test]
    fn two_stage_cycle() {
        let mut spec = linear("p", PipelineKind::Batch);
        spec.stages = vec![stage("A", &["B"]), stage("B", &["A"]), stage("C", &["B"])];
        let report = validate_pipeline_spec(&spec);
        assert_eq!(
            report.violations,
            vec![Violation::CycleDetected {
                stages: vec!["A".into(), "B".into()]
            }]
        );
        assert_eq!(spec.topological_order(), None);
    }

    #[test]
    fn streaming_needs_freshness_target() {
        let mut spec = linear("p", PipelineKind::Streaming);
        spec.freshness_target = None;
        assert_eq!(
            validate_pipeline_spec(&spec).violations,
            vec![Violation::MissingFreshnessTarget]
        );
    }

    #[test]
    fn reports_every_violation() {
        let mut spec = linear("p", PipelineKind::Streaming);
        spec.criticality = 0;
        spec.stages[0].min_alloc = 0;
        spec.stages[1].upstream = vec!["ghost".into()];
        let v = validate_pipeline_spec(&spec).violations;
        assert!(v.contains(&Violation::CriticalityOutOfRange { value: 0 }));
        assert!(v.iter().any(|x| matches!(x, Violation::AllocBounds { .. })));
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::UnknownUpstream { .. })));
        // "a" and "b" both become sinks once b's upstream dangles
        assert!(v.contains(&Violation::SinkCount { found: 2 }));
    }

    #[test]
    fn fan_in_has_one_sink() {
        let mut spec = linear("p", PipelineKind::Streaming);
        spec.stages = vec![stage("x", &[]), stage("y", &[]), stage("z", &["x", "y"])];
        assert!(validate_pipeline_spec(&spec).is_valid());
        assert_eq!(spec.sources(), vec![0, 1]);
        assert_eq!(spec.sinks(), vec![2]);
    }
}

//! Observability: metric series, incidents, the schema catalog and the
//! hash-chained audit log.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{Actor, ProposedAction};
use crate::policy::{PolicyContext, PolicyDecision};
use crate::schema::{DriftClass, Schema};
use crate::sim::ActionOutcome;
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    FreshnessLag,
    QueueDepth,
    FailureRate,
    Utilization,
    Cost,
}

impl MetricName {
    pub const ALL: [MetricName; 5] = [
        MetricName::FreshnessLag,
        MetricName::QueueDepth,
        MetricName::FailureRate,
        MetricName::Utilization,
        MetricName::Cost,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::FreshnessLag => "freshness_lag",
            MetricName::QueueDepth => "queue_depth",
            MetricName::FailureRate => "failure_rate",
            MetricName::Utilization => "utilization",
            MetricName::Cost => "cost",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesId {
    pub pipeline: String,
    pub metric: MetricName,
}

impl SeriesId {
    pub fn new(pipeline: impl Into<String>, metric: MetricName) -> Self {
        Self {
            pipeline: pipeline.into(),
            metric,
        }
    }
}

impl fmt::Display for SeriesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.pipeline, self.metric.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TelemetryError {
    #[error("series {series}: tick {tick} is not after last tick {last}")]
    NonMonotonicTick {
        series: String,
        tick: Tick,
        last: Tick,
    },
    #[error("unknown series {0}")]
    UnknownSeries(String),
    #[error("window must be at least 1 tick")]
    EmptyWindow,
    #[error("unknown incident {0}")]
    UnknownIncident(u64),
    #[error("incident {0} is already closed")]
    AlreadyClosed(u64),
    #[error("incident {id} cannot close at tick {tick}, before it opened at {opened}")]
    CloseBeforeOpen { id: u64, tick: Tick, opened: Tick },
}

/// Append-only time series keyed by (pipeline, metric).
#[derive(Debug, Clone, Default)]
pub struct MetricStore {
    series: BTreeMap<SeriesId, Vec<(Tick, f64)>>,
}

impl MetricStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_sample(
        &mut self,
        id: &SeriesId,
        tick: Tick,
        value: f64,
    ) -> Result<(), TelemetryError> {
        let s = self.series.entry(id.clone()).or_default();
        if let Some(&(last, _)) = s.last() {
            if tick <= last {
                return Err(TelemetryError::NonMonotonicTick {
                    series: id.to_string(),
                    tick,
                    last,
                });
            }
        }
        s.push((tick, value));
        Ok(())
    }

    /// Samples with tick in `(now - window, now]`, where `now` is the
    /// series' latest tick.
    pub fn query_window(
        &self,
        id: &SeriesId,
        window: Tick,
    ) -> Result<&[(Tick, f64)], TelemetryError> {
        if window == 0 {
            return Err(TelemetryError::EmptyWindow);
        }
        let s = self
            .series
            .get(id)
            .ok_or_else(|| TelemetryError::UnknownSeries(id.to_string()))?;
        let Some(&(now, _)) = s.last() else {
            return Ok(s);
        };
        let start = s.partition_point(|&(t, _)| t + window <= now);
        Ok(&s[start..])
    }

    pub fn series(&self, id: &SeriesId) -> Option<&[(Tick, f64)]> {
        self.series.get(id).map(|v| v.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = &SeriesId> {
        self.series.keys()
    }

    /// `tick,value` lines with a header.
    pub fn export_csv(&self, id: &SeriesId) -> Result<String, TelemetryError> {
        let s = self
            .series
            .get(id)
            .ok_or_else(|| TelemetryError::UnknownSeries(id.to_string()))?;
        let mut out = String::from("tick,value\n");
        for (t, v) in s {
            out.push_str(&format!("{t},{v}\n"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IncidentClass {
    SchemaIncompatible,
    UpstreamDelay,
    ResourceContention,
    TransientTaskFailure,
    FreshnessBreach,
}

impl IncidentClass {
    pub fn as_str(self) -> &'static str {
        match self {
            IncidentClass::SchemaIncompatible => "SchemaIncompatible",
            IncidentClass::UpstreamDelay => "UpstreamDelay",
            IncidentClass::ResourceContention => "ResourceContention",
            IncidentClass::TransientTaskFailure => "TransientTaskFailure",
            IncidentClass::FreshnessBreach => "FreshnessBreach",
        }
    }
}

impl fmt::Display for IncidentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub id: u64,
    pub pipeline: String,
    pub class: IncidentClass,
    pub detected_tick: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resumed_tick: Option<Tick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<String>,
}

impl Incident {
    pub fn is_open(&self) -> bool {
        self.resumed_tick.is_none()
    }

    pub fn duration(&self) -> Option<Tick> {
        self.resumed_tick.map(|r| r - self.detected_tick)
    }
}

/// Incident lifecycle with one open incident per (pipeline, class).
#[derive(Debug, Clone, Default)]
pub struct IncidentRegistry {
    incidents: Vec<Incident>,
    open: BTreeMap<(String, IncidentClass), u64>,
}

impl IncidentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Open an incident, or return the id of the matching open one. The
    /// flag is true when a new incident was created.
    pub fn open_incident(
        &mut self,
        pipeline: &str,
        class: IncidentClass,
        tick: Tick,
    ) -> (u64, bool) {
        let key = (pipeline.to_string(), class);
        if let Some(&id) = self.open.get(&key) {
            return (id, false);
        }
        let id = self.incidents.len() as u64 + 1;
        self.incidents.push(Incident {
            id,
            pipeline: pipeline.to_string(),
            class,
            detected_tick: tick,
            resumed_tick: None,
            resolution: None,
        });
        self.open.insert(key, id);
        (id, true)
    }

    pub fn close_incident(
        &mut self,
        id: u64,
        tick: Tick,
        resolution: Option<String>,
    ) -> Result<(), TelemetryError> {
        let inc = self
            .incidents
            .get_mut((id as usize).wrapping_sub(1))
            .ok_or(TelemetryError::UnknownIncident(id))?;
        if !inc.is_open() {
            return Err(TelemetryError::AlreadyClosed(id));
        }
        if tick < inc.detected_tick {
            return Err(TelemetryError::CloseBeforeOpen {
                id,
                tick,
                opened: inc.detected_tick,
            });
        }
        inc.resumed_tick = Some(tick);
        inc.resolution = resolution;
        self.open.remove(&(inc.pipeline.clone(), inc.class));
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&Incident> {
        self.incidents.get((id as usize).wrapping_sub(1))
    }

    pub fn open_for(&self, pipeline: &str, class: IncidentClass) -> Option<u64> {
        self.open.get(&(pipeline.to_string(), class)).copied()
    }

    /// Open incidents in id order.
    pub fn open_incidents(&self) -> Vec<&Incident> {
        self.incidents.iter().filter(|i| i.is_open()).collect()
    }

    pub fn all(&self) -> &[Incident] {
        &self.incidents
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub tick: Tick,
    pub schema: Schema,
    pub class: DriftClass,
}

/// Every schema version each pipeline has seen.
#[derive(Debug, Clone, Default)]
pub struct SchemaCatalog {
    entries: BTreeMap<String, Vec<CatalogEntry>>,
}

impl SchemaCatalog {
    pub fn register(&mut self, pipeline: &str, tick: Tick, schema: Schema, class: DriftClass) {
        self.entries
            .entry(pipeline.to_string())
            .or_default()
            .push(CatalogEntry {
                tick,
                schema,
                class,
            });
    }

    pub fn versions(&self, pipeline: &str) -> &[CatalogEntry] {
        self.entries
            .get(pipeline)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }
}

/// JSON with lexicographically sorted keys and no whitespace.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string encodes"));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&serde_json::to_string(scalar).expect("scalar encodes")),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditPayload {
    Proposal {
        action: ProposedAction,
    },
    Decision {
        proposal_id: u64,
        decision: PolicyDecision,
        /// Inputs the verdict was computed from, for replay.
        context: PolicyContext,
    },
    Outcome {
        proposal_id: u64,
        outcome: ActionOutcome,
    },
    PolicyChange {
        policy: Value,
    },
    Observation {
        kind: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pipeline: Option<String>,
        detail: Value,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    pub tick: Tick,
    pub actor: Actor,
    pub payload: AuditPayload,
    pub policy_version: u32,
    pub prev_hash: String,
    pub hash: String,
}

pub const GENESIS_HASH: [u8; 32] = [0; 32];

fn record_hash(
    prev: &[u8],
    seq: u64,
    tick: Tick,
    actor: Actor,
    payload: &Value,
    policy_version: u32,
) -> String {
    let body = serde_json::json!({
        "seq": seq,
        "tick": tick,
        "actor": actor,
        "payload": payload,
        "policy_version": policy_version,
    });
    let mut h = Sha256::new();
    h.update(prev);
    h.update(canonical_json(&body).as_bytes());
    hex::encode(h.finalize())
}

impl AuditRecord {
    pub fn to_canonical_line(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("record serializes"))
    }

    /// Hash this record should carry given its own `prev_hash`.
    pub fn expected_hash(&self) -> Option<String> {
        let prev = hex::decode(&self.prev_hash).ok()?;
        let payload = serde_json::to_value(&self.payload).ok()?;
        Some(record_hash(
            &prev,
            self.seq,
            self.tick,
            self.actor,
            &payload,
            self.policy_version,
        ))
    }
}

/// Append-only, hash-chained decision log.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(
        &mut self,
        tick: Tick,
        actor: Actor,
        payload: AuditPayload,
        policy_version: u32,
    ) -> u64 {
        let seq = self.records.len() as u64 + 1;
        let prev = match self.records.last() {
            Some(r) => r.hash.clone(),
            None => hex::encode(GENESIS_HASH),
        };
        let pv = serde_json::to_value(&payload).expect("payload serializes");
        let hash = record_hash(
            &hex::decode(&prev).expect("own hashes are hex"),
            seq,
            tick,
            actor,
            &pv,
            policy_version,
        );
        self.records.push(AuditRecord {
            seq,
            tick,
            actor,
            payload,
            policy_version,
            prev_hash: prev,
            hash,
        });
        seq
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, seq: u64) -> Option<&AuditRecord> {
        self.records.get((seq as usize).wrapping_sub(1))
    }

    pub fn head_hash(&self) -> String {
        match self.records.last() {
            Some(r) => r.hash.clone(),
            None => hex::encode(GENESIS_HASH),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_canonical_line());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("audit chain broken at seq {seq}: {reason}")]
pub struct ChainError {
    pub seq: u64,
    pub reason: String,
}

/// Check hashes, linkage and sequence numbers of in-memory records.
pub fn verify_chain(records: &[AuditRecord]) -> Result<(), ChainError> {
    let mut prev = hex::encode(GENESIS_HASH);
    for (i, r) in records.iter().enumerate() {
        let seq = i as u64 + 1;
        let bad = |reason: &str| ChainError {
            seq,
            reason: reason.to_string(),
        };
        if r.seq != seq {
            return Err(bad("sequence number out of order"));
        }
        if r.prev_hash != prev {
            return Err(bad("prev_hash does not match previous record"));
        }
        if r.expected_hash().as_deref() != Some(r.hash.as_str()) {
            return Err(bad("hash mismatch"));
        }
        prev = r.hash.clone();
    }
    Ok(())
}

/// Parse and verify a persisted JSONL log. Every line must be the exact
/// canonical encoding of its record, so any byte change is caught at the
/// line it touches.
pub fn verify_jsonl(bytes: &[u8]) -> Result<Vec<AuditRecord>, ChainError> {
    let mut records = Vec::new();
    if bytes.is_empty() {
        return Ok(records);
    }
    let body = bytes.strip_suffix(b"\n");
    let lines: Vec<&[u8]> = body.unwrap_or(bytes).split(|&b| b == b'\n').collect();
    for (i, raw) in lines.iter().enumerate() {
        let seq = i as u64 + 1;
        let bad = |reason: String| ChainError { seq, reason };
        let line = std::str::from_utf8(raw).map_err(|_| bad("record is not UTF-8".into()))?;
        let rec: AuditRecord =
            serde_json::from_str(line).map_err(|e| bad(format!("unparsable record: {e}")))?;
        if rec.to_canonical_line() != line {
            return Err(bad("record is not canonically encoded".into()));
        }
        if body.is_none() && i + 1 == lines.len() {
            return Err(bad("missing trailing newline".into()));
        }
        records.push(rec);
    }
    verify_chain(&records)?;
    Ok(records)
}

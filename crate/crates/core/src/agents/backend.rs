//! Reasoning backends. A backend turns an observation bundle into a JSON
//! candidate list; the controller parses that list strictly before any
//! candidate reaches the policy engine.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::bundle::ObservationBundle;
use super::heuristics::builtin_candidates;
use crate::action::{agent_allowed_kinds, ActionKind, ActionParams, Actor, ProposedAction, Target};
use crate::harness::HarnessError;
use crate::Tick;

/// A proposal as a backend states it, before an id is assigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateAction {
    pub kind: ActionKind,
    pub target: Target,
    #[serde(default)]
    pub params: ActionParams,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incident: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCandidate {
    kind: String,
    target: Target,
    #[serde(default)]
    params: ActionParams,
    rationale: String,
    #[serde(default)]
    incident: Option<u64>,
}

/// Strictly parse a backend response for `agent`. Any bad element rejects
/// the whole response.
pub fn parse_candidates(response: &Value, agent: Actor) -> Result<Vec<CandidateAction>, String> {
    let items = response
        .as_array()
        .ok_or_else(|| "response is not a JSON array".to_string())?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let raw: RawCandidate =
            serde_json::from_value(item.clone()).map_err(|e| format!("candidate {i}: {e}"))?;
        let kind: ActionKind = raw
            .kind
            .parse()
            .map_err(|e| format!("candidate {i}: {e}"))?;
        if !agent_allowed_kinds(agent).contains(&kind) {
            return Err(format!("candidate {i}: {agent} may not propose {kind}"));
        }
        let probe = ProposedAction {
            id: 0,
            tick: 0,
            agent,
            kind,
            target: raw.target.clone(),
            params: raw.params.clone(),
            justification: raw.rationale.clone(),
            incident: raw.incident,
        };
        probe
            .check_params()
            .map_err(|e| format!("candidate {i}: {e}"))?;
        out.push(CandidateAction {
            kind,
            target: raw.target,
            params: raw.params,
            rationale: raw.rationale,
            incident: raw.incident,
        });
    }
    Ok(out)
}

/// Interchangeable decision source. Must be deterministic given the bundle.
pub trait ReasoningBackend {
    fn name(&self) -> &str;
    fn decide(&mut self, bundle: &ObservationBundle) -> Value;
    /// Responses seen so far, when the backend records them.
    fn transcript(&self) -> Option<&[StubEntry]> {
        None
    }
}

/// Rule-based heuristics; a pure function of the bundle.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinBackend;

impl ReasoningBackend for BuiltinBackend {
    fn name(&self) -> &str {
        "builtin"
    }

    fn decide(&mut self, bundle: &ObservationBundle) -> Value {
        serde_json::to_value(builtin_candidates(bundle)).expect("candidates serialize")
    }
}

/// One canned response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubEntry {
    pub tick: Tick,
    pub agent: Actor,
    /// Returned verbatim; it is validated like any other response.
    pub candidates: Value,
}

/// Replays canned responses keyed by (tick, agent); an empty list when no
/// entry matches.
#[derive(Debug, Clone, Default)]
pub struct StubBackend {
    entries: Vec<StubEntry>,
}

impl StubBackend {
    pub fn new(entries: Vec<StubEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let entries: Vec<StubEntry> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(Self::new(entries))
    }
}

impl ReasoningBackend for StubBackend {
    fn name(&self) -> &str {
        "stub"
    }

    fn decide(&mut self, bundle: &ObservationBundle) -> Value {
        self.entries
            .iter()
            .find(|e| e.tick == bundle.tick && e.agent == bundle.agent)
            .map(|e| e.candidates.clone())
            .unwrap_or_else(|| Value::Array(Vec::new()))
    }
}

/// Wraps another backend and keeps every response, in stub format, so a
/// run can be replayed without the inner backend.
pub struct RecordingBackend {
    inner: Box<dyn ReasoningBackend>,
    transcript: Vec<StubEntry>,
}

impl RecordingBackend {
    pub fn new(inner: Box<dyn ReasoningBackend>) -> Self {
        Self {
            inner,
            transcript: Vec::new(),
        }
    }
}

impl ReasoningBackend for RecordingBackend {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn decide(&mut self, bundle: &ObservationBundle) -> Value {
        let v = self.inner.decide(bundle);
        self.transcript.push(StubEntry {
            tick: bundle.tick,
            agent: bundle.agent,
            candidates: v.clone(),
        });
        v
    }

    fn transcript(&self) -> Option<&[StubEntry]> {
        Some(&self.transcript)
    }
}

/// Backend selection from run configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Builtin,
    Stub(Vec<StubEntry>),
}

impl BackendSpec {
    /// `builtin` or `stub:<path>`.
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        if s == "builtin" {
            return Ok(BackendSpec::Builtin);
        }
        let Some(path) = s.strip_prefix("stub:") else {
            return Err(HarnessError::Backend(format!(
                "unknown backend `{s}`; expected `builtin` or `stub:<path>`"
            )));
        };
        let text = std::fs::read_to_string(Path::new(path))
            .map_err(|e| HarnessError::Backend(format!("{path}: {e}")))?;
        let stub = StubBackend::from_json(&text)
            .map_err(|e| HarnessError::Backend(format!("{path}: {e}")))?;
        Ok(BackendSpec::Stub(stub.entries))
    }

    pub fn build(&self) -> Result<Box<dyn ReasoningBackend>, HarnessError> {
        Ok(match self {
            BackendSpec::Builtin => Box::new(BuiltinBackend),
            BackendSpec::Stub(entries) => Box::new(StubBackend::new(entries.clone())),
        })
    }
}

//! The closed vocabulary of control actions and the actors that may issue them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Tick;

/// Every control action an agent can propose. Nothing outside this set is
/// ever executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    ScaleUp,
    ScaleDown,
    Replay,
    Rollback,
    PartialRecompute,
    QuarantinePartition,
    Defer,
    Resume,
    Halt,
}

impl ActionKind {
    pub const ALL: [ActionKind; 9] = [
        ActionKind::ScaleUp,
        ActionKind::ScaleDown,
        ActionKind::Replay,
        ActionKind::Rollback,
        ActionKind::PartialRecompute,
        ActionKind::QuarantinePartition,
        ActionKind::Defer,
        ActionKind::Resume,
        ActionKind::Halt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::ScaleUp => "ScaleUp",
            ActionKind::ScaleDown => "ScaleDown",
            ActionKind::Replay => "Replay",
            ActionKind::Rollback => "Rollback",
            ActionKind::PartialRecompute => "PartialRecompute",
            ActionKind::QuarantinePartition => "QuarantinePartition",
            ActionKind::Defer => "Defer",
            ActionKind::Resume => "Resume",
            ActionKind::Halt => "Halt",
        }
    }

    /// Kinds governed by `recovery.allowed_strategies`.
    pub fn is_recovery(self) -> bool {
        matches!(
            self,
            ActionKind::Replay
                | ActionKind::Rollback
                | ActionKind::PartialRecompute
                | ActionKind::Defer
                | ActionKind::Resume
        )
    }

    pub fn is_scaling(self) -> bool {
        matches!(self, ActionKind::ScaleUp | ActionKind::ScaleDown)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownActionKind(pub String);

impl fmt::Display for UnknownActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}` is not in the action vocabulary", self.0)
    }
}

impl std::error::Error for UnknownActionKind {}

impl FromStr for ActionKind {
    type Err = UnknownActionKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownActionKind(s.to_string()))
    }
}

/// Who wrote an audit record or issued an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Actor {
    MonitoringAgent,
    OptimizationAgent,
    SchemaAgent,
    RecoveryAgent,
    PolicyEngine,
    Operator,
    Baseline,
}

impl Actor {
    pub fn is_agent(self) -> bool {
        matches!(
            self,
            Actor::MonitoringAgent
                | Actor::OptimizationAgent
                | Actor::SchemaAgent
                | Actor::RecoveryAgent
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Actor::MonitoringAgent => "MonitoringAgent",
            Actor::OptimizationAgent => "OptimizationAgent",
            Actor::SchemaAgent => "SchemaAgent",
            Actor::RecoveryAgent => "RecoveryAgent",
            Actor::PolicyEngine => "PolicyEngine",
            Actor::Operator => "Operator",
            Actor::Baseline => "Baseline",
        }
    }
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What an action operates on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub pipeline: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partitions: Vec<u64>,
}

impl Target {
    pub fn pipeline(id: impl Into<String>) -> Self {
        Self {
            pipeline: id.into(),
            stage: None,
            partitions: Vec::new(),
        }
    }

    pub fn stage(pipeline: impl Into<String>, stage: impl Into<String>) -> Self {
        Self {
            pipeline: pipeline.into(),
            stage: Some(stage.into()),
            partitions: Vec::new(),
        }
    }

    pub fn partitions(pipeline: impl Into<String>, partitions: Vec<u64>) -> Self {
        Self {
            pipeline: pipeline.into(),
            stage: None,
            partitions,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionParams {
    /// Signed unit change; positive for ScaleUp, negative for ScaleDown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_units: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<Tick>,
    /// Free-form condition for Defer, e.g. `arrivals_stable`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
}

/// An agent's proposal. Agents never execute; the policy engine decides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposedAction {
    pub id: u64,
    pub tick: Tick,
    pub agent: Actor,
    pub kind: ActionKind,
    pub target: Target,
    #[serde(default)]
    pub params: ActionParams,
    pub justification: String,
    /// Incident this proposal remediates, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incident: Option<u64>,
}

impl ProposedAction {
    /// Check that the parameters the kind needs are present and sane.
    pub fn check_params(&self) -> Result<(), String> {
        match self.kind {
            ActionKind::ScaleUp => match self.params.delta_units {
                Some(d) if d > 0 => Ok(()),
                _ => Err("ScaleUp needs delta_units > 0".into()),
            },
            ActionKind::ScaleDown => match self.params.delta_units {
                Some(d) if d < 0 => Ok(()),
                _ => Err("ScaleDown needs delta_units < 0".into()),
            },
            ActionKind::Replay => match self.target.stage {
                Some(_) => Ok(()),
                None => Err("Replay needs a target stage".into()),
            },
            ActionKind::PartialRecompute | ActionKind::QuarantinePartition => {
                if self.target.partitions.is_empty() {
                    Err(format!("{} needs at least one partition", self.kind))
                } else {
                    Ok(())
                }
            }
            ActionKind::Rollback | ActionKind::Defer | ActionKind::Resume | ActionKind::Halt => {
                Ok(())
            }
        }
    }

    /// Absolute unit change for scaling kinds.
    pub fn scale_magnitude(&self) -> u32 {
        self.params
            .delta_units
            .map(|d| d.unsigned_abs())
            .unwrap_or(0)
    }
}

/// Kinds each agent may propose (least privilege).
pub fn agent_allowed_kinds(agent: Actor) -> &'static [ActionKind] {
    use ActionKind::*;
    match agent {
        Actor::OptimizationAgent => &[ScaleUp, ScaleDown],
        Actor::SchemaAgent => &[Resume, QuarantinePartition, Halt],
        Actor::RecoveryAgent => &[Replay, Rollback, PartialRecompute, Defer, Resume],
        _ => &[],
    }
}

//! Versioned governance policies and the validator every proposal passes
//! through before anything touches the data plane.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::action::{agent_allowed_kinds, ActionKind, Actor, ProposedAction};
use crate::Tick;

pub const RULE_ALLOW_LIST: &str = "actions.allow_list";
pub const RULE_ALLOWED_STRATEGIES: &str = "recovery.allowed_strategies";
pub const RULE_QUARANTINE: &str = "schema.quarantine_allowed";
pub const RULE_SCALE_STEP: &str = "cost.max_scale_step";
pub const RULE_BUDGET: &str = "cost.budget";
pub const RULE_APPROVAL: &str = "actions.approval_required";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostPolicy {
    pub budget_per_window: f64,
    /// Window length in ticks; windows tumble from tick 0.
    pub window: Tick,
    pub max_scale_step: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryPolicy {
    /// Recovery-time objective per criticality level (1..=5).
    pub rto: BTreeMap<u8, Tick>,
    pub allowed_strategies: BTreeSet<ActionKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaMode {
    Strict,
    Permissive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaPolicy {
    pub mode: SchemaMode,
    pub quarantine_allowed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreshnessPolicy {
    pub breach_tolerance: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApprovalRule {
    pub action: ActionKind,
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionsPolicy {
    pub allow_list: BTreeMap<Actor, BTreeSet<ActionKind>>,
    #[serde(default)]
    pub approval_required: Vec<ApprovalRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDocument {
    pub id: String,
    pub version: u32,
    pub cost: CostPolicy,
    pub recovery: RecoveryPolicy,
    pub schema: SchemaPolicy,
    pub freshness: FreshnessPolicy,
    pub actions: ActionsPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("missing field `{path}` (line {line}, column {column})")]
    MissingField {
        path: String,
        line: usize,
        column: usize,
    },
    #[error("unknown key `{path}` (line {line}, column {column})")]
    UnknownKey {
        path: String,
        line: usize,
        column: usize,
    },
    #[error("{path} out of range: {reason}")]
    OutOfRange { path: String, reason: String },
    #[error("{path}: {message} (line {line}, column {column})")]
    Syntax {
        path: String,
        message: String,
        line: usize,
        column: usize,
    },
    #[error("policy ids differ: `{0}` vs `{1}`")]
    IdMismatch(String, String),
}

fn join_path(base: &str, leaf: &str) -> String {
    if base.is_empty() || base == "." {
        leaf.to_string()
    } else {
        format!("{base}.{leaf}")
    }
}

/// Text between the first pair of backticks in a serde message.
fn quoted(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

/// Parse and fully validate a policy document.
pub fn parse_policy(text: &str) -> Result<PolicyDocument, PolicyError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: PolicyDocument = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        let (line, column) = (inner.line(), inner.column());
        if msg.starts_with("missing field") {
            let leaf = quoted(&msg).unwrap_or("?");
            PolicyError::MissingField {
                path: join_path(&path, leaf),
                line,
                column,
            }
        } else if msg.starts_with("unknown field") {
            // the path already ends at the offending key
            let path = if path.ends_with(quoted(&msg).unwrap_or("\u{0}")) {
                path
            } else {
                join_path(&path, quoted(&msg).unwrap_or("?"))
            };
            PolicyError::UnknownKey { path, line, column }
        } else {
            PolicyError::Syntax {
                path,
                message: msg,
                line,
                column,
            }
        }
    })?;
    doc.validate()?;
    Ok(doc)
}

impl PolicyDocument {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let out = |path: &str, reason: &str| {
            Err(PolicyError::OutOfRange {
                path: path.into(),
                reason: reason.into(),
            })
        };
        if self.id.is_empty() {
            return out("id", "must not be empty");
        }
        if self.version < 1 {
            return out("version", "must be >= 1");
        }
        if !(self.cost.budget_per_window > 0.0 && self.cost.budget_per_window.is_finite()) {
            return out("cost.budget_per_window", "must be > 0");
        }
        if self.cost.window == 0 {
            return out("cost.window", "must be > 0");
        }
        if self.cost.max_scale_step < 1 {
            return out("cost.max_scale_step", "must be >= 1");
        }
        for c in self.recovery.rto.keys() {
            if !(1..=5).contains(c) {
                return out(&format!("recovery.rto.{c}"), "criticality must be in 1..=5");
            }
        }
        for k in &self.recovery.allowed_strategies {
            if !k.is_recovery() {
                return out(
                    "recovery.allowed_strategies",
                    &format!("{k} is not a recovery action"),
                );
            }
        }
        for (agent, kinds) in &self.actions.allow_list {
            let path = format!("actions.allow_list.{agent}");
            if !agent.is_agent() {
                return out(&path, "only agents can hold an allow list");
            }
            if kinds.is_empty() {
                return out(&path, "must not be empty");
            }
            if let Some(k) = kinds
                .iter()
                .find(|k| !agent_allowed_kinds(*agent).contains(k))
            {
                return out(&path, &format!("{agent} may never propose {k}"));
            }
        }
        Ok(())
    }

    /// RTO for a criticality level, if the policy sets one.
    pub fn rto(&self, criticality: u8) -> Option<Tick> {
        self.recovery.rto.get(&criticality).copied()
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("policy serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Allow,
    Deny,
    RequireApproval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub verdict: Verdict,
    pub rule_citations: Vec<String>,
    pub policy_version: u32,
    pub explanation: String,
}

/// Everything besides the proposal that a verdict depends on. Recorded in
/// the audit log so decisions can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyContext {
    /// Spend already incurred in the current window plus the spend the
    /// current configuration commits to for the rest of it.
    pub windowed_spend: f64,
    /// Committed cost per tick of the current configuration.
    pub steady_burn: f64,
    pub unit_price: f64,
    pub remaining_ticks: Tick,
    pub pipeline_tags: Vec<String>,
    /// Units currently allocated to the action's target.
    pub current_alloc: u32,
}

/// Evaluate a proposal. Rules run in a fixed order and the first failure
/// decides; a pure function of its inputs.
pub fn validate_action(
    p: &ProposedAction,
    policy: &PolicyDocument,
    ctx: &PolicyContext,
) -> PolicyDecision {
    let mut cited: Vec<String> = Vec::new();
    let decide = |verdict: Verdict, cited: Vec<String>, explanation: String| PolicyDecision {
        verdict,
        rule_citations: cited,
        policy_version: policy.version,
        explanation,
    };
    let deny = |rule: &str, why: String| decide(Verdict::Deny, vec![rule.to_string()], why);

    let allowed = policy
        .actions
        .allow_list
        .get(&p.agent)
        .is_some_and(|ks| ks.contains(&p.kind));
    if !allowed {
        return deny(
            RULE_ALLOW_LIST,
            format!("{} may not propose {}", p.agent, p.kind),
        );
    }
    cited.push(RULE_ALLOW_LIST.into());

    if p.kind.is_recovery() {
        if !policy.recovery.allowed_strategies.contains(&p.kind) {
            return deny(
                RULE_ALLOWED_STRATEGIES,
                format!("{} is not an allowed recovery strategy", p.kind),
            );
        }
        cited.push(RULE_ALLOWED_STRATEGIES.into());
    }
    if p.kind == ActionKind::QuarantinePartition {
        if !policy.schema.quarantine_allowed {
            return deny(RULE_QUARANTINE, "quarantine is disabled".into());
        }
        cited.push(RULE_QUARANTINE.into());
    }

    if p.kind.is_scaling() {
        let step = p.scale_magnitude();
        if step > policy.cost.max_scale_step {
            return deny(
                RULE_SCALE_STEP,
                format!(
                    "step {step} exceeds max_scale_step {}",
                    policy.cost.max_scale_step
                ),
            );
        }
        cited.push(RULE_SCALE_STEP.into());

        if p.kind == ActionKind::ScaleUp {
            let delta = step as f64 * ctx.unit_price;
            let projected = ctx.windowed_spend + delta * ctx.remaining_ticks as f64;
            let budget = policy.cost.budget_per_window;
            if projected > budget {
                return deny(
                    RULE_BUDGET,
                    format!("projected window spend {projected:.4} exceeds budget {budget}"),
                );
            }
            let steady = (ctx.steady_burn + delta) * policy.cost.window as f64;
            if steady > budget {
                return deny(
                    RULE_BUDGET,
                    format!("steady-state window spend {steady:.4} exceeds budget {budget}"),
                );
            }
        }
        cited.push(RULE_BUDGET.into());
    }

    let needs_approval = policy
        .actions
        .approval_required
        .iter()
        .find(|r| r.action == p.kind && ctx.pipeline_tags.contains(&r.tag));
    if let Some(rule) = needs_approval {
        return decide(
            Verdict::RequireApproval,
            vec![RULE_APPROVAL.into()],
            format!(
                "{} on a `{}` pipeline needs operator approval",
                p.kind, rule.tag
            ),
        );
    }

    decide(
        Verdict::Allow,
        cited,
        "all applicable rules satisfied".into(),
    )
}

/// One changed leaf between two policy versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<Value>,
}

impl fmt::Display for FieldChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &Option<Value>| match v {
            Some(v) => v.to_string(),
            None => "(absent)".into(),
        };
        write!(f, "{}: {}→{}", self.path, show(&self.from), show(&self.to))
    }
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<FieldChange>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = join_path(path, k);
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => diff_values(&p, va, vb, out),
                    (va, vb) => out.push(FieldChange {
                        path: p,
                        from: va.cloned(),
                        to: vb.cloned(),
                    }),
                }
            }
        }
        _ if a != b => out.push(FieldChange {
            path: path.to_string(),
            from: Some(a.clone()),
            to: Some(b.clone()),
        }),
        _ => {}
    }
}

/// Field-level changes from `a` to `b`, in path order.
pub fn diff_policies(
    a: &PolicyDocument,
    b: &PolicyDocument,
) -> Result<Vec<FieldChange>, PolicyError> {
    if a.id != b.id {
        return Err(PolicyError::IdMismatch(a.id.clone(), b.id.clone()));
    }
    let mut out = Vec::new();
    diff_values("", &a.to_value(), &b.to_value(), &mut out);
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::action::{ActionParams, Target};

    pub fn default_policy() -> PolicyDocument {
        parse_policy(include_str!("../../../policies/default.json")).unwrap()
    }

    fn minimal() -> Value {
        serde_json::json!({
            "id": "p",
            "version": 1,
            "cost": { "budget_per_window": 100.0, "window": 60, "max_scale_step": 4 },
            "recovery": { "rto": { "1": 30 }, "allowed_strategies": ["Replay", "Rollback", "Defer", "Resume"] },
            "schema": { "mode": "permissive", "quarantine_allowed": true },
            "freshness": { "breach_tolerance": 2 },
            "actions": {
                "allow_list": {
                    "OptimizationAgent": ["ScaleUp", "ScaleDown"],
                    "RecoveryAgent": ["Replay", "Rollback", "Defer", "Resume"],
                    "SchemaAgent": ["QuarantinePartition", "Halt", "Resume"]
                },
                "approval_required": [{ "action": "Rollback", "tag": "regulated" }]
            }
        })
    }

    fn doc(v: &Value) -> Result<PolicyDocument, PolicyError> {
        parse_policy(&serde_json::to_string_pretty(v).unwrap())
    }

    fn proposal(agent: Actor, kind: ActionKind, delta: Option<i32>) -> ProposedAction {
        ProposedAction {
            id: 1,
            tick: 0,
            agent,
            kind,
            target: Target::pipeline("orders"),
            params: ActionParams {
                delta_units: delta,
                ..Default::default()
            },
            justification: String::new(),
            incident: None,
        }
    }

    fn ctx(spend: f64, remaining: Tick) -> PolicyContext {
        PolicyContext {
            windowed_spend: spend,
            steady_burn: 0.0,
            unit_price: 0.5,
            remaining_ticks: remaining,
            pipeline_tags: vec![],
            current_alloc: 4,
        }
    }

    #[test]
    fn minimal_document_parses() {
        let d = doc(&minimal()).unwrap();
        assert_eq!(d.version, 1);
        assert_eq!(d.rto(1), Some(30));
    }

    #[test]
    fn negative_budget_out_of_range() {
        let mut v = minimal();
        v["cost"]["budget_per_window"] = serde_json::json!(-5);
        match doc(&v) {
            Err(PolicyError::OutOfRange { path, .. }) => assert_eq!(path, "cost.budget_per_window"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let mut v = minimal();
        v["autoscale"] = serde_json::json!(true);
        match doc(&v) {
            Err(PolicyError::UnknownKey { path, line, .. }) => {
                assert_eq!(path, "autoscale");
                assert!(line > 1);
            }
            other => panic!("{other:?}"),
        }
        let mut v = minimal();
        v["cost"]["discount"] = serde_json::json!(1);
        assert!(
            matches!(doc(&v), Err(PolicyError::UnknownKey { path, .. }) if path == "cost.discount")
        );
    }

    #[test]
    fn missing_field_named() {
        let mut v = minimal();
        v["cost"].as_object_mut().unwrap().remove("window");
        assert!(
            matches!(doc(&v), Err(PolicyError::MissingField { path, .. }) if path == "cost.window")
        );
    }

    #[test]
    fn empty_allow_list_rejected() {
        let mut v = minimal();
        v["actions"]["allow_list"]["SchemaAgent"] = serde_json::json!([]);
        assert!(matches!(doc(&v), Err(PolicyError::OutOfRange { .. })));
        let mut v = minimal();
        v["actions"]["allow_list"]["RecoveryAgent"] = serde_json::json!(["ScaleUp"]);
        assert!(matches!(doc(&v), Err(PolicyError::OutOfRange { .. })));
    }

    #[test]
    fn scale_up_within_limits_allowed() {
        let d = doc(&minimal()).unwrap();
        // spend 40 + 2 units * 0.5 * 4 ticks = 44
        let dec = validate_action(
            &proposal(Actor::OptimizationAgent, ActionKind::ScaleUp, Some(2)),
            &d,
            &ctx(40.0, 4),
        );
        assert_eq!(dec.verdict, Verdict::Allow);
        assert_eq!(
            dec.rule_citations,
            vec![RULE_ALLOW_LIST, RULE_SCALE_STEP, RULE_BUDGET]
        );
    }

    #[test]
    fn oversized_step_denied() {
        let d = doc(&minimal()).unwrap();
        let dec = validate_action(
            &proposal(Actor::OptimizationAgent, ActionKind::ScaleUp, Some(6)),
            &d,
            &ctx(0.0, 4),
        );
        assert_eq!(dec.verdict, Verdict::Deny);
        assert_eq!(dec.rule_citations, vec![RULE_SCALE_STEP]);
    }

    #[test]
    fn no_headroom_denies_scale_up() {
        let d = doc(&minimal()).unwrap();
        let dec = validate_action(
            &proposal(Actor::OptimizationAgent, ActionKind::ScaleUp, Some(1)),
            &d,
            &ctx(100.0, 10),
        );
        assert_eq!(dec.verdict, Verdict::Deny);
        assert_eq!(dec.rule_citations, vec![RULE_BUDGET]);
        let down = validate_action(
            &proposal(Actor::OptimizationAgent, ActionKind::ScaleDown, Some(-1)),
            &d,
            &ctx(100.0, 10),
        );
        assert_eq!(down.verdict, Verdict::Allow);
    }

    #[test]
    fn regulated_rollback_needs_approval() {
        let d = doc(&minimal()).unwrap();
        let mut c = ctx(0.0, 10);
        c.pipeline_tags = vec!["regulated".into()];
        let dec = validate_action(
            &proposal(Actor::RecoveryAgent, ActionKind::Rollback, None),
            &d,
            &c,
        );
        assert_eq!(dec.verdict, Verdict::RequireApproval);
        assert_eq!(dec.rule_citations, vec![RULE_APPROVAL]);
    }

    #[test]
    fn quarantine_disabled_denied() {
        let mut v = minimal();
        v["schema"]["quarantine_allowed"] = serde_json::json!(false);
        let d = doc(&v).unwrap();
        let mut p = proposal(Actor::SchemaAgent, ActionKind::QuarantinePartition, None);
        p.target.partitions = vec![3];
        let dec = validate_action(&p, &d, &ctx(0.0, 10));
        assert_eq!(dec.verdict, Verdict::Deny);
        assert_eq!(dec.rule_citations, vec![RULE_QUARANTINE]);
    }

    #[test]
    fn agent_outside_allow_list_denied() {
        let d = doc(&minimal()).unwrap();
        let dec = validate_action(
            &proposal(Actor::SchemaAgent, ActionKind::Replay, None),
            &d,
            &ctx(0.0, 10),
        );
        assert_eq!(dec.rule_citations, vec![RULE_ALLOW_LIST]);
    }

    #[test]
    fn diffs() {
        let a = doc(&minimal()).unwrap();
        assert!(diff_policies(&a, &a).unwrap().is_empty());
        let mut b = a.clone();
        b.cost.budget_per_window = 80.0;
        let d = diff_policies(&a, &b).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].to_string(), "cost.budget_per_window: 100.0→80.0");
        b.id = "other".into();
        assert!(matches!(
            diff_policies(&a, &b),
            Err(PolicyError::IdMismatch(..))
        ));
    }

    #[test]
    fn shipped_default_is_valid() {
        let d = default_policy();
        assert!(d.schema.quarantine_allowed);
    }
}

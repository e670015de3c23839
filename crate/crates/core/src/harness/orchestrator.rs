use std::collections::BTreeMap;

use serde_json::json;

use super::{BaselineConfig, HarnessError, RunContext};
use crate::action::Actor;
use crate::sim::{FailureCause, SimWorld};
use crate::telemetry::IncidentClass;
use crate::Tick;

#[derive(Debug, Clone, Default)]
struct Handling {
    /// First tick this orchestrator acted on the incident.
    start: Tick,
    retries: u32,
    task_due: Option<Tick>,
    fixed: bool,
}

/// Retry-then-operator failure handling. Used as the whole static baseline
/// and as the agentic controller's fallback for incidents no agent owns.
#[derive(Debug, Clone)]
pub struct Orchestrator {
    config: BaselineConfig,
    actor: Actor,
    handling: BTreeMap<u64, Handling>,
    resolutions: BTreeMap<u64, String>,
}

fn retryable(class: IncidentClass, cause: FailureCause) -> bool {
    match class {
        IncidentClass::TransientTaskFailure => {
            matches!(cause, FailureCause::Transient | FailureCause::CorruptOutput)
        }
        IncidentClass::UpstreamDelay => cause == FailureCause::InputMissing,
        _ => false,
    }
}

impl Orchestrator {
    pub fn new(config: BaselineConfig, actor: Actor) -> Self {
        Self {
            config,
            actor,
            handling: BTreeMap::new(),
            resolutions: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn resolution(&self, incident: u64) -> Option<String> {
        self.resolutions.get(&incident).cloned()
    }

    /// Whether this orchestrator has started work on `incident`.
    pub fn is_handling(&self, incident: u64) -> bool {
        self.handling.contains_key(&incident)
    }

    /// Advance retries and operator tasks for the given open incidents.
    pub fn handle(
        &mut self,
        world: &mut SimWorld,
        ctx: &mut RunContext,
        incidents: &[u64],
    ) -> Result<(), HarnessError> {
        let t = ctx.tick;
        for &id in incidents {
            let Some(inc) = ctx.incidents.get(id).cloned() else {
                continue;
            };
            if !inc.is_open() {
                continue;
            }
            // incidents raised during a step reach us at the next control
            // tick; their clock still starts at detection
            let start = if t <= inc.detected_tick + 1 {
                inc.detected_tick
            } else {
                t
            };
            let h = self.handling.entry(id).or_insert_with(|| Handling {
                start,
                ..Handling::default()
            });
            if h.fixed {
                continue;
            }
            let pipeline = inc.pipeline.as_str();
            match inc.class {
                IncidentClass::TransientTaskFailure | IncidentClass::UpstreamDelay => {
                    if let Some(due) = h.task_due {
                        if t >= due {
                            let note = world.operator_fix(pipeline)?;
                            h.fixed = true;
                            h.task_due = None;
                            self.resolutions.insert(id, "operator_fix".into());
                            ctx.observe(
                                Actor::Operator,
                                "operator_fix",
                                Some(pipeline),
                                json!({ "incident": id, "note": note }),
                            );
                        }
                        continue;
                    }
                    let due = h.start + Tick::from(h.retries + 1) * self.config.retry_backoff;
                    if h.retries >= self.config.max_retries || t < due {
                        if h.retries >= self.config.max_retries {
                            // no retries configured at all
                            h.task_due = Some(t + self.config.operator_delay);
                            ctx.operator_tasks += 1;
                            ctx.observe(
                                Actor::Operator,
                                "operator_task",
                                Some(pipeline),
                                json!({ "incident": id, "due": t + self.config.operator_delay }),
                            );
                        }
                        continue;
                    }
                    h.retries += 1;
                    let attempt = h.retries;
                    let snap = world.snapshot();
                    let failed: Vec<String> = snap
                        .pipeline(pipeline)
                        .map(|p| {
                            p.failures
                                .iter()
                                .filter(|f| !f.recovering && retryable(inc.class, f.cause))
                                .map(|f| f.stage.clone())
                                .collect()
                        })
                        .unwrap_or_default();
                    let mut ok = true;
                    for stage in &failed {
                        ok &= world.retry_stage(pipeline, stage)?;
                    }
                    ctx.observe(
                        self.actor,
                        "retry",
                        Some(pipeline),
                        json!({ "incident": id, "attempt": attempt, "stages": failed, "ok": ok }),
                    );
                    if ok {
                        self.resolutions.insert(id, format!("retry {attempt}"));
                    } else if attempt >= self.config.max_retries {
                        let h = self.handling.get_mut(&id).expect("inserted above");
                        h.task_due = Some(t + self.config.operator_delay);
                        ctx.operator_tasks += 1;
                        ctx.observe(
                            Actor::Operator,
                            "operator_task",
                            Some(pipeline),
                            json!({ "incident": id, "due": t + self.config.operator_delay }),
                        );
                    }
                }
                IncidentClass::SchemaIncompatible => match h.task_due {
                    None => {
                        h.task_due = Some(h.start + self.config.operator_delay);
                        ctx.operator_tasks += 1;
                        let halted = world.operator_halt(pipeline)?;
                        ctx.observe(
                            Actor::Operator,
                            "operator_task",
                            Some(pipeline),
                            json!({ "incident": id, "due": h.start + self.config.operator_delay, "halted": halted }),
                        );
                    }
                    Some(due) if t >= due => {
                        let note = world.operator_fix(pipeline)?;
                        h.fixed = true;
                        h.task_due = None;
                        self.resolutions.insert(id, "operator_fix".into());
                        ctx.observe(
                            Actor::Operator,
                            "operator_fix",
                            Some(pipeline),
                            json!({ "incident": id, "note": note }),
                        );
                    }
                    Some(_) => {}
                },
                IncidentClass::ResourceContention | IncidentClass::FreshnessBreach => {}
            }
        }
        Ok(())
    }
}

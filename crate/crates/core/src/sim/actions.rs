use serde::{Deserialize, Serialize};

use super::{
    ApprovedAction, Cohort, Counters, FailureCause, KernelEvent, Mode, PipelineRuntime, SimError,
    SimWorld,
};
use crate::action::ActionKind;
use crate::Tick;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionOutcome {
    pub action_id: u64,
    pub kind: ActionKind,
    pub success: bool,
    /// A scale request hit min_alloc or max_alloc.
    pub clamped: bool,
    pub summary: String,
    /// Tick at which a recovery started by this action completes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ready_tick: Option<Tick>,
}

/// Move every record of `partitions` to the quarantine counter and route
/// future arrivals of those partitions there too.
fn quarantine(p: &mut PipelineRuntime, partitions: &[u64], counters: &mut Counters) -> u64 {
    let hit = |c: &Cohort| partitions.contains(&c.partition);
    let mut moved = 0;
    for s in &mut p.stages {
        moved += s
            .queue
            .iter()
            .filter(|c| hit(c))
            .map(|c| c.count)
            .sum::<u64>();
        s.queue.retain(|c| !hit(c));
    }
    if let Some(h) = &mut p.hold {
        moved += h
            .held
            .iter()
            .filter(|c| hit(c))
            .map(|c| c.count)
            .sum::<u64>();
        h.held.retain(|c| !hit(c));
    }
    moved += p
        .releases
        .iter()
        .filter(|(_, c)| hit(c))
        .map(|(_, c)| c.count)
        .sum::<u64>();
    p.releases.retain(|(_, c)| !hit(c));
    p.quarantined_partitions.extend(partitions.iter().copied());
    counters.quarantined += moved;
    moved
}

/// Put sink-log cohorts back on the source queues. Returns records re-queued.
fn requeue(
    p: &mut PipelineRuntime,
    keep: impl Fn(&Cohort) -> bool,
    counters: &mut Counters,
) -> u64 {
    let (back, stay): (Vec<Cohort>, Vec<Cohort>) = p.sink_log.drain(..).partition(|c| keep(c));
    p.sink_log = stay;
    let n: u64 = back.iter().map(|c| c.count).sum();
    counters.materialized -= n;
    let first = p.sources[0];
    for c in back {
        p.stages[first].queue.push_front(c);
    }
    // oldest first
    p.stages[first]
        .queue
        .make_contiguous()
        .sort_by_key(|c| (c.arrival, c.partition, c.version));
    n
}

impl SimWorld {
    /// Execute an approved action.
    pub fn apply_action(&mut self, approved: &ApprovedAction) -> Result<ActionOutcome, SimError> {
        let a = &approved.action;
        if approved.decision_ref == 0 {
            return Err(SimError::IllegalTransition(
                "action carries no decision reference".into(),
            ));
        }
        a.check_params().map_err(SimError::InvalidTarget)?;
        let t = self.tick;
        let c = self.constants;
        let pid = a.target.pipeline.clone();
        let pi = *self
            .index
            .get(&pid)
            .ok_or_else(|| SimError::InvalidTarget(format!("unknown pipeline `{pid}`")))?;
        let stage_idx =
            match &a.target.stage {
                Some(s) => Some(self.pipelines[pi].spec.stage_index(s).ok_or_else(|| {
                    SimError::InvalidTarget(format!("unknown stage `{pid}/{s}`"))
                })?),
                None => None,
            };
        let mut out = ActionOutcome {
            action_id: a.id,
            kind: a.kind,
            success: true,
            clamped: false,
            summary: String::new(),
            ready_tick: None,
        };
        let mut events = Vec::new();
        let p = &mut self.pipelines[pi];
        match a.kind {
            ActionKind::ScaleUp | ActionKind::ScaleDown => {
                let delta = a.params.delta_units.unwrap_or(0) as i64;
                let targets: Vec<usize> = match stage_idx {
                    Some(i) => vec![i],
                    None => (0..p.stages.len()).collect(),
                };
                let mut parts = Vec::new();
                for i in targets {
                    let spec = &p.spec.stages[i];
                    let before = p.stages[i].alloc;
                    let want = before as i64 + delta;
                    let after = want.clamp(spec.min_alloc as i64, spec.max_alloc as i64) as u32;
                    if after as i64 != want {
                        out.clamped = true;
                    }
                    p.stages[i].alloc = after;
                    parts.push(format!("{}: {before}->{after}", spec.id));
                }
                out.summary = parts.join(", ");
                if out.clamped {
                    out.summary.push_str(" (clamped)");
                }
            }
            ActionKind::Replay => {
                let i = stage_idx.expect("checked by check_params");
                if p.mode != Mode::Running {
                    return Err(SimError::IllegalTransition(format!(
                        "Replay on {pid} while {:?}",
                        p.mode
                    )));
                }
                let s = &mut p.stages[i];
                if s.failure.is_none() || s.recovering_until.is_some() {
                    return Err(SimError::IllegalTransition(format!(
                        "Replay on {pid}/{} which is not failed",
                        p.spec.stages[i].id
                    )));
                }
                let ready = t + c.replay_latency;
                s.recovering_until = Some(ready);
                out.ready_tick = Some(ready);
                out.summary = format!("replay from checkpoint {}", s.last_checkpoint);
            }
            ActionKind::Rollback => {
                let n = requeue(p, |_| true, &mut self.counters);
                let ready = t + c.rollback_latency;
                let sink = p.sink;
                p.stages[sink].recovering_until = Some(ready);
                out.ready_tick = Some(ready);
                out.summary = format!(
                    "rolled back to checkpoint {}, {n} records re-queued",
                    p.stages[sink].last_checkpoint
                );
            }
            ActionKind::PartialRecompute => {
                let parts = a.target.partitions.clone();
                let n = requeue(p, |c| parts.contains(&c.partition), &mut self.counters);
                let ready = t + c.partial_recompute_latency * parts.len() as Tick;
                let sink = p.sink;
                p.stages[sink].recovering_until = Some(ready);
                out.ready_tick = Some(ready);
                out.summary = format!(
                    "recomputing {} partition(s), {n} records re-queued",
                    parts.len()
                );
            }
            ActionKind::QuarantinePartition => {
                let parts = a.target.partitions.clone();
                let n = quarantine(p, &parts, &mut self.counters);
                let ready = t + c.quarantine_latency;
                for s in &mut p.stages {
                    if let Some(FailureCause::SchemaMismatch { partition }) = s.failure {
                        if parts.contains(&partition) && s.recovering_until.is_none() {
                            s.recovering_until = Some(ready);
                            out.ready_tick = Some(ready);
                        }
                    }
                }
                out.summary = format!("quarantined {n} records in partition(s) {parts:?}");
            }
            ActionKind::Defer => {
                if p.mode != Mode::Running {
                    return Err(SimError::IllegalTransition(format!(
                        "Defer on {pid} while {:?}",
                        p.mode
                    )));
                }
                p.mode = Mode::Deferred;
                out.summary = format!(
                    "deferred until {}",
                    a.params.condition.as_deref().unwrap_or("resumed")
                );
            }
            ActionKind::Resume => {
                if p.mode != Mode::Deferred {
                    return Err(SimError::IllegalTransition(format!(
                        "Resume on {pid} while {:?}",
                        p.mode
                    )));
                }
                if p.input_missing {
                    return Err(SimError::IllegalTransition(format!(
                        "Resume on {pid} while upstream input is still missing"
                    )));
                }
                p.mode = Mode::Running;
                for (i, s) in p.stages.iter_mut().enumerate() {
                    if s.failure == Some(FailureCause::InputMissing) {
                        s.failure = None;
                        s.recovering_until = None;
                        events.push(KernelEvent::Recovered {
                            tick: t,
                            pipeline: pid.clone(),
                            stage: p.spec.stages[i].id.clone(),
                        });
                    }
                }
                let backlog: u64 = p.stages.iter().map(|s| s.queued()).sum();
                out.summary = format!("resumed with {backlog} records queued");
            }
            ActionKind::Halt => {
                if p.mode == Mode::Halted {
                    return Err(SimError::IllegalTransition(format!(
                        "{pid} is already halted"
                    )));
                }
                p.mode = Mode::Halted;
                out.summary = "halted".into();
            }
        }
        for ev in events {
            self.emit(ev);
        }
        Ok(out)
    }

    /// Re-run a failed stage without any recovery strategy. Succeeds only
    /// when the failure's cause has gone away.
    pub fn retry_stage(&mut self, pipeline: &str, stage: &str) -> Result<bool, SimError> {
        let t = self.tick;
        let p = self.runtime_mut(pipeline)?;
        let i = p.spec.stage_index(stage).ok_or_else(|| {
            SimError::InvalidTarget(format!("unknown stage `{pipeline}/{stage}`"))
        })?;
        let input_missing = p.input_missing;
        let s = &mut p.stages[i];
        let ok = match s.failure {
            None => return Ok(true),
            Some(FailureCause::Transient) | Some(FailureCause::CorruptOutput) => true,
            Some(FailureCause::InputMissing) => !input_missing,
            Some(FailureCause::SchemaMismatch { .. }) => false,
        };
        if ok {
            s.failure = None;
            s.recovering_until = None;
            self.emit(KernelEvent::Recovered {
                tick: t,
                pipeline: pipeline.to_string(),
                stage: stage.to_string(),
            });
        }
        Ok(ok)
    }

    /// Operator stops a running or deferred pipeline.
    pub fn operator_halt(&mut self, pipeline: &str) -> Result<bool, SimError> {
        let p = self.runtime_mut(pipeline)?;
        if p.mode == Mode::Halted {
            return Ok(false);
        }
        p.mode = Mode::Halted;
        Ok(true)
    }

    /// Manual operator remediation: quarantine blocked partitions, clear
    /// transient failures, take ownership of missing-input failures and set
    /// the pipeline running again.
    pub fn operator_fix(&mut self, pipeline: &str) -> Result<String, SimError> {
        let t = self.tick;
        let pi = *self
            .index
            .get(pipeline)
            .ok_or_else(|| SimError::UnknownPipeline(pipeline.to_string()))?;
        let p = &mut self.pipelines[pi];
        let mut notes = Vec::new();
        let mut events = Vec::new();
        let blocked: Vec<u64> = p
            .stages
            .iter()
            .filter_map(|s| match s.failure {
                Some(FailureCause::SchemaMismatch { partition }) => Some(partition),
                _ => None,
            })
            .collect();
        if !blocked.is_empty() {
            let n = quarantine(p, &blocked, &mut self.counters);
            notes.push(format!("quarantined {n} records"));
        }
        let input_missing = p.input_missing;
        for (i, s) in p.stages.iter_mut().enumerate() {
            let Some(cause) = s.failure else { continue };
            if cause == FailureCause::InputMissing && input_missing {
                s.operator_managed = true;
                notes.push(format!("{} waits for input", p.spec.stages[i].id));
                continue;
            }
            s.failure = None;
            s.recovering_until = None;
            events.push(KernelEvent::Recovered {
                tick: t,
                pipeline: pipeline.to_string(),
                stage: p.spec.stages[i].id.clone(),
            });
        }
        if p.mode != Mode::Running {
            p.mode = Mode::Running;
            notes.push("resumed".into());
        }
        for ev in events {
            self.emit(ev);
        }
        Ok(notes.join("; "))
    }
}

use std::collections::VecDeque;

use super::{
    contention_factor, effective_rate, Cohort, DriftWindow, FailureCause, Hold, KernelEvent, Mode,
    PipelineRuntime, PipelineTickStats, SimConstants, SimError, SimWorld, TickReport, VersionState,
};
use crate::pipeline::PipelineKind;
use crate::scenario::{FaultEvent, FaultKind};
use crate::schema::{apply_delta, classify_delta};
use crate::Tick;

/// Take up to `n` records from the front of `queue`, splitting a cohort if
/// needed.
fn take_front(queue: &mut VecDeque<Cohort>, mut n: u64) -> Vec<Cohort> {
    let mut out = Vec::new();
    while n > 0 {
        let Some(front) = queue.front_mut() else {
            break;
        };
        if front.count <= n {
            n -= front.count;
            out.push(queue.pop_front().unwrap());
        } else {
            let mut part = *front;
            part.count = n;
            front.count -= n;
            out.push(part);
            n = 0;
        }
    }
    out
}

/// Split `cohorts` across `k` outputs: even shares, remainder to the first.
fn split_even(cohorts: &[Cohort], k: usize) -> Vec<Vec<Cohort>> {
    let mut outs = vec![Vec::new(); k];
    if k == 1 {
        outs[0] = cohorts.to_vec();
        return outs;
    }
    for c in cohorts {
        let share = c.count / k as u64;
        let rem = c.count % k as u64;
        for (j, out) in outs.iter_mut().enumerate() {
            let n = share + if j == 0 { rem } else { 0 };
            if n > 0 {
                out.push(Cohort { count: n, ..*c });
            }
        }
    }
    outs
}

fn push_merge(queue: &mut VecDeque<Cohort>, c: Cohort) {
    if let Some(back) = queue.back_mut() {
        if back.arrival == c.arrival && back.partition == c.partition && back.version == c.version {
            back.count += c.count;
            return;
        }
    }
    queue.push_back(c);
}

impl PipelineRuntime {
    fn is_accepted(&self, version: u32) -> bool {
        self.versions
            .get(&version)
            .map(|v| v.accepted)
            .unwrap_or(true)
    }

    /// Schema version stamped on input arriving at `tick` in `partition`.
    fn arrival_version(&mut self, partition: u64) -> u32 {
        if let Some(w) = self.drift_window {
            if partition == w.partition {
                return w.version;
            }
            if partition > w.partition {
                self.drift_window = None;
            }
        }
        self.accepted_version
    }

    /// Route a cohort into the source queues or the quarantine counter.
    /// Returns records quarantined.
    fn enqueue_sources(&mut self, c: Cohort) -> u64 {
        if self.quarantined_partitions.contains(&c.partition) {
            return c.count;
        }
        let k = self.sources.len();
        let parts = split_even(&[c], k);
        for (j, part) in parts.into_iter().enumerate() {
            let si = self.sources[j];
            for p in part {
                push_merge(&mut self.stages[si].queue, p);
            }
        }
        0
    }

    /// Records a source stage may process before it hits an unaccepted
    /// schema version.
    fn processable(&self, stage: usize) -> u64 {
        let s = &self.stages[stage];
        if !self.sources.contains(&stage) {
            return s.queued();
        }
        s.queue
            .iter()
            .take_while(|c| self.is_accepted(c.version))
            .map(|c| c.count)
            .sum()
    }
}

impl SimWorld {
    /// Apply one scheduled fault at the current tick.
    pub fn apply_fault(&mut self, fault: &FaultEvent) -> Result<(), SimError> {
        let t = self.tick;
        let constants = self.constants;
        match &fault.fault {
            FaultKind::SchemaDrift {
                pipeline,
                delta,
                partition,
            } => {
                let p = self.runtime_mut(pipeline)?;
                let base = p.versions[&p.accepted_version].schema.clone();
                let schema = apply_delta(&base, delta)
                    .map_err(|e| SimError::InvalidTarget(format!("drift on `{pipeline}`: {e}")))?;
                let version = p.versions.keys().next_back().copied().unwrap_or(0) + 1;
                let schema = crate::schema::Schema { version, ..schema };
                let class = classify_delta(delta);
                let accepted = !class.is_incompatible();
                let target = partition.unwrap_or_else(|| p.partition_for(t, &constants));
                p.versions.insert(
                    version,
                    VersionState {
                        schema,
                        class: class.clone(),
                        accepted,
                    },
                );
                if accepted {
                    p.accepted_version = version;
                } else {
                    p.drift_window = Some(DriftWindow {
                        version,
                        partition: target,
                    });
                }
                let ev = KernelEvent::SchemaChanged {
                    tick: t,
                    pipeline: pipeline.clone(),
                    version,
                    partition: target,
                    class,
                };
                self.emit(ev);
            }
            FaultKind::UpstreamDelay {
                pipeline,
                delay_ticks,
                missing_fraction,
            } => {
                let p = self.runtime_mut(pipeline)?;
                let until = t + delay_ticks;
                match &mut p.hold {
                    Some(h) => {
                        h.until = h.until.max(until);
                        h.missing_fraction = h.missing_fraction.max(*missing_fraction);
                    }
                    None => {
                        p.hold = Some(Hold {
                            until,
                            missing_fraction: *missing_fraction,
                            held: VecDeque::new(),
                        })
                    }
                }
                p.input_missing = true;
                let mut failed = Vec::new();
                for &si in &p.sources.clone() {
                    let s = &mut p.stages[si];
                    if s.failure.is_none() {
                        s.failure = Some(FailureCause::InputMissing);
                        failed.push(p.spec.stages[si].id.clone());
                    }
                }
                self.emit(KernelEvent::InputDelayed {
                    tick: t,
                    pipeline: pipeline.clone(),
                    delay_ticks: *delay_ticks,
                    missing_fraction: *missing_fraction,
                });
                for stage in failed {
                    self.emit(KernelEvent::TaskFailed {
                        tick: t,
                        pipeline: pipeline.clone(),
                        stage,
                        cause: FailureCause::InputMissing,
                    });
                }
            }
            FaultKind::ResourceContention {
                capacity_reduction,
                duration_ticks,
            } => {
                let until = t + duration_ticks;
                self.reductions.push((until, *capacity_reduction));
                self.emit(KernelEvent::CapacityReduced {
                    tick: t,
                    units: *capacity_reduction,
                    until,
                });
            }
            FaultKind::TransientTaskFailure { pipeline, stage } => {
                let p = self.runtime_mut(pipeline)?;
                let i = p.spec.stage_index(stage).ok_or_else(|| {
                    SimError::InvalidTarget(format!("unknown stage `{pipeline}/{stage}`"))
                })?;
                let cause = if i == p.sink {
                    FailureCause::CorruptOutput
                } else {
                    FailureCause::Transient
                };
                let s = &mut p.stages[i];
                if s.failure.is_none() {
                    s.failure = Some(cause);
                    s.operator_managed = false;
                    self.emit(KernelEvent::TaskFailed {
                        tick: t,
                        pipeline: pipeline.clone(),
                        stage: stage.clone(),
                        cause,
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn emit(&mut self, ev: KernelEvent) {
        self.tick_events.push(ev.clone());
        self.pending_events.push(ev);
    }

    /// Advance one tick. `arrivals` holds one count per pipeline, in
    /// declaration order.
    pub fn step(&mut self, arrivals: &[u64]) -> Result<TickReport, SimError> {
        self.check_accounting()?;
        if arrivals.len() != self.pipelines.len() {
            return Err(SimError::ArrivalShape {
                expected: self.pipelines.len(),
                got: arrivals.len(),
            });
        }
        let t = self.tick;
        let constants = self.constants;

        let mut restored = Vec::new();
        self.reductions.retain(|&(until, units)| {
            if until <= t {
                restored.push(units);
                false
            } else {
                true
            }
        });
        for units in restored {
            self.emit(KernelEvent::CapacityRestored { tick: t, units });
        }

        let mut events = Vec::new();
        for (pi, &count) in arrivals.iter().enumerate() {
            let p = &mut self.pipelines[pi];
            p.last = PipelineTickStats::default();
            ingest(p, t, count, &constants, &mut self.counters, &mut events);
        }

        // demand and contention
        let mut demands: Vec<Vec<u32>> = Vec::with_capacity(self.pipelines.len());
        for p in &mut self.pipelines {
            block_on_schema(p, t, &mut events);
            let d: Vec<u32> = (0..p.stages.len())
                .map(|i| {
                    let s = &p.stages[i];
                    if p.mode != Mode::Running || !s.is_available() {
                        return 0;
                    }
                    let q = p.processable(i);
                    let base = p.spec.stages[i].base_rate;
                    let units = (q as f64 / base).ceil() as u64;
                    units.min(s.alloc as u64) as u32
                })
                .collect();
            p.last.demand = d.iter().sum();
            demands.push(d);
        }
        let total_demand: u32 = demands.iter().flatten().sum();
        let cap = self.effective_capacity();
        let factor = contention_factor(cap, total_demand);

        for (p, d) in self.pipelines.iter_mut().zip(&demands) {
            p.last.throttled = factor < 1.0 && p.last.demand > 0;
            process(p, t, factor, d, &mut self.counters);
        }

        for ev in events {
            self.emit(ev);
        }

        let mut failure_counts = vec![0u32; self.pipelines.len()];
        for ev in &self.tick_events {
            if let KernelEvent::TaskFailed { pipeline, .. } = ev {
                failure_counts[self.index[pipeline]] += 1;
            }
        }
        let pipelines = self
            .pipelines
            .iter()
            .zip(&failure_counts)
            .map(|(p, &n)| self.pipeline_telemetry(p, n))
            .collect();
        self.last_factor = factor;
        self.last_demand = total_demand;
        self.last_cost = super::compute_tick_cost(self);
        let snapshot = super::TelemetrySnapshot {
            tick: t,
            pipelines,
            total_cost: self.last_cost,
            capacity: cap,
            capacity_headroom: cap as i64 - total_demand as i64,
            contention_factor: factor,
        };
        let report = TickReport {
            snapshot,
            events: std::mem::take(&mut self.tick_events),
            counters: self.counters,
        };
        self.tick += 1;
        Ok(report)
    }
}

/// Recovery completion, held-input expiry, releases and new arrivals.
fn ingest(
    p: &mut PipelineRuntime,
    t: Tick,
    count: u64,
    constants: &SimConstants,
    counters: &mut super::Counters,
    events: &mut Vec<KernelEvent>,
) {
    let id = p.spec.id.clone();

    if p.hold.as_ref().is_some_and(|h| h.until <= t) {
        let mut h = p.hold.take().unwrap();
        let total: u64 = h.held.iter().map(|c| c.count).sum();
        let dropped = (total as f64 * h.missing_fraction).floor() as u64;
        // the most recent records are the ones that never show up
        let mut to_drop = dropped;
        while to_drop > 0 {
            let back = h.held.back_mut().unwrap();
            if back.count <= to_drop {
                to_drop -= back.count;
                h.held.pop_back();
            } else {
                back.count -= to_drop;
                to_drop = 0;
            }
        }
        counters.dropped += dropped;
        let released = total - dropped;
        let n = constants.release_ticks.max(1);
        for i in 0..n {
            let share = released / n + u64::from(i < released % n);
            for c in take_front(&mut h.held, share) {
                p.releases.push_back((t + i, c));
            }
        }
        events.push(KernelEvent::InputReleased {
            tick: t,
            pipeline: id.clone(),
            released,
            dropped,
        });
    }

    while p.releases.front().is_some_and(|&(due, _)| due <= t) {
        let (_, c) = p.releases.pop_front().unwrap();
        let q = p.enqueue_sources(Cohort { arrival: t, ..c });
        counters.quarantined += q;
        p.last.arrivals += c.count;
    }

    if p.input_missing && p.hold.is_none() && p.releases.is_empty() {
        p.input_missing = false;
        events.push(KernelEvent::InputRestored {
            tick: t,
            pipeline: id.clone(),
        });
        for (i, s) in p.stages.iter_mut().enumerate() {
            if s.operator_managed && s.failure == Some(FailureCause::InputMissing) {
                s.failure = None;
                s.operator_managed = false;
                events.push(KernelEvent::Recovered {
                    tick: t,
                    pipeline: id.clone(),
                    stage: p.spec.stages[i].id.clone(),
                });
            }
        }
    }

    for i in 0..p.stages.len() {
        let s = &mut p.stages[i];
        if s.recovering_until.is_some_and(|r| r <= t) {
            s.recovering_until = None;
            let stage = p.spec.stages[i].id.clone();
            match s.failure {
                Some(FailureCause::InputMissing) if p.input_missing => {
                    events.push(KernelEvent::RecoveryFailed {
                        tick: t,
                        pipeline: id.clone(),
                        stage,
                    });
                }
                _ => {
                    s.failure = None;
                    events.push(KernelEvent::Recovered {
                        tick: t,
                        pipeline: id.clone(),
                        stage,
                    });
                }
            }
        }
    }

    if count == 0 {
        return;
    }
    counters.ingress += count;
    let partition = p.partition_for(t, constants);
    let version = p.arrival_version(partition);
    if p.spec.kind == PipelineKind::Batch {
        p.batch_runs += 1;
        events.push(KernelEvent::BatchTriggered {
            tick: t,
            pipeline: id,
            partition,
            records: count,
        });
    }
    let c = Cohort {
        arrival: t,
        partition,
        version,
        count,
    };
    match &mut p.hold {
        Some(h) => h.held.push_back(c),
        None => {
            counters.quarantined += p.enqueue_sources(c);
            p.last.arrivals += count;
        }
    }
}

/// A running source whose next record carries an unaccepted schema fails.
fn block_on_schema(p: &mut PipelineRuntime, t: Tick, events: &mut Vec<KernelEvent>) {
    if p.mode != Mode::Running {
        return;
    }
    for &si in &p.sources {
        let s = &p.stages[si];
        if !s.is_available() {
            continue;
        }
        let Some(front) = s.queue.front() else {
            continue;
        };
        if p.is_accepted(front.version) {
            continue;
        }
        let cause = FailureCause::SchemaMismatch {
            partition: front.partition,
        };
        let s = &mut p.stages[si];
        s.failure = Some(cause);
        s.operator_managed = false;
        events.push(KernelEvent::TaskFailed {
            tick: t,
            pipeline: p.spec.id.clone(),
            stage: p.spec.stages[si].id.clone(),
            cause,
        });
    }
}

fn process(
    p: &mut PipelineRuntime,
    t: Tick,
    factor: f64,
    demand: &[u32],
    counters: &mut super::Counters,
) {
    let n = p.stages.len();
    let mut rates = vec![0u64; n];
    let mut outputs: Vec<(usize, Cohort)> = Vec::new();
    for &i in &p.topo.clone() {
        if demand[i] == 0 {
            continue;
        }
        let spec = &p.spec.stages[i];
        let rate = effective_rate(spec.base_rate, p.stages[i].alloc, factor);
        rates[i] = rate;
        let n_take = rate.min(p.processable(i));
        let taken = take_front(&mut p.stages[i].queue, n_take);
        if i == p.sink {
            let m: u64 = taken.iter().map(|c| c.count).sum();
            counters.materialized += m;
            p.last.materialized += m;
            p.sink_log.extend(taken);
        } else {
            let downs = &p.downstream[i];
            for (j, part) in split_even(&taken, downs.len()).into_iter().enumerate() {
                for c in part {
                    outputs.push((downs[j], c));
                }
            }
        }
    }
    for (i, c) in outputs {
        push_merge(&mut p.stages[i].queue, c);
    }
    for i in 0..n {
        let interval = p.spec.stages[i].checkpoint_interval.max(1);
        if t.is_multiple_of(interval) {
            p.stages[i].last_checkpoint = t;
            if i == p.sink {
                p.sink_log.clear();
            }
        }
    }
    p.last.rates = rates;
}

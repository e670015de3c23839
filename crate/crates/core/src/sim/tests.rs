use super::*;
use crate::action::{ActionKind, ActionParams, Actor, ProposedAction, Target};
use crate::pipeline::tests::{linear, stage};
use crate::pipeline::PipelineKind;

fn rm(capacity: u32) -> ResourceModel {
    ResourceModel {
        capacity,
        unit_price: 0.5,
        storage_price: 0.01,
    }
}

fn single(base_rate: f64, alloc: u32) -> PipelineSpec {
    let mut p = linear("p", PipelineKind::Streaming);
    let mut s = stage("only", &[]);
    s.base_rate = base_rate;
    s.min_alloc = 1;
    s.max_alloc = alloc.max(8);
    p.stages = vec![s];
    p
}

fn world_with(specs: &[PipelineSpec], capacity: u32, allocs: &[(&str, &str, u32)]) -> SimWorld {
    let mut m: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    for &(p, s, a) in allocs {
        m.entry(p.into()).or_default().insert(s.into(), a);
    }
    SimWorld::new(specs, rm(capacity), SimConstants::default(), Some(&m)).unwrap()
}

pub(crate) fn approve(kind: ActionKind, target: Target, delta: Option<i32>) -> ApprovedAction {
    ApprovedAction {
        action: ProposedAction {
            id: 1,
            tick: 0,
            agent: Actor::RecoveryAgent,
            kind,
            target,
            params: ActionParams {
                delta_units: delta,
                ..Default::default()
            },
            justification: String::new(),
            incident: None,
        },
        decision_ref: 1,
    }
}

#[test]
fn rate_examples() {
    assert_eq!(effective_rate(10.0, 4, 1.0), 40);
    assert_eq!(effective_rate(10.0, 4, 0.8), 32);
    assert_eq!(effective_rate(10.0, 0, 1.0), 0);
}

#[test]
fn single_stage_drains_at_rate() {
    let mut w = world_with(&[single(10.0, 4)], 64, &[("p", "only", 4)]);
    w.step(&[100]).unwrap();
    // first tick: 100 arrive, 40 processed
    assert_eq!(w.queue_depths("p").unwrap(), vec![60]);
    assert_eq!(w.counters().materialized, 40);
}

#[test]
fn halted_pipeline_only_accumulates() {
    let mut w = world_with(&[single(10.0, 4)], 64, &[]);
    w.apply_action(&approve(ActionKind::Halt, Target::pipeline("p"), None))
        .unwrap();
    for _ in 0..3 {
        w.step(&[10]).unwrap();
    }
    assert_eq!(w.queue_depths("p").unwrap(), vec![30]);
    assert_eq!(w.counters().materialized, 0);
    assert_eq!(compute_tick_cost(&w), 0.0);
}

#[test]
fn proportional_contention() {
    let mut a = single(1.0, 48);
    a.id = "a".into();
    a.stages[0].max_alloc = 48;
    let mut b = single(1.0, 32);
    b.id = "b".into();
    b.stages[0].max_alloc = 32;
    let mut w = world_with(&[a, b], 64, &[("a", "only", 48), ("b", "only", 32)]);
    let r = w.step(&[1000, 1000]).unwrap();
    assert_eq!(r.snapshot.contention_factor, 0.8);
    assert_eq!(r.snapshot.pipeline("a").unwrap().effective_rates, vec![38]);
    assert_eq!(r.snapshot.pipeline("b").unwrap().effective_rates, vec![25]);
    assert!(r.snapshot.pipeline("a").unwrap().throttled);
    assert_eq!(contention_factor(64, 64), 1.0);
    assert_eq!(contention_factor(64, 80), 0.8);
}

#[test]
fn tick_cost_examples() {
    let mut w = world_with(&[single(10.0, 4)], 64, &[("p", "only", 4)]);
    w.step(&[0]).unwrap();
    assert_eq!(compute_tick_cost(&w), 2.0);
    w.step(&[100]).unwrap();
    // 40 materialized at 0.01
    assert!((compute_tick_cost(&w) - 2.4).abs() < 1e-12);
    let mut w = world_with(&[single(100.0, 4)], 64, &[("p", "only", 4)]);
    w.step(&[100]).unwrap();
    assert!((compute_tick_cost(&w) - 3.0).abs() < 1e-12);
}

#[test]
fn records_move_one_stage_per_tick() {
    let spec = linear("p", PipelineKind::Streaming);
    let mut w = world_with(&[spec], 64, &[]);
    w.step(&[10]).unwrap();
    assert_eq!(w.queue_depths("p").unwrap(), vec![0, 10, 0]);
    w.step(&[0]).unwrap();
    assert_eq!(w.queue_depths("p").unwrap(), vec![0, 0, 10]);
    let r = w.step(&[0]).unwrap();
    assert_eq!(r.counters.materialized, 10);
}

#[test]
fn freshness_lag_tracks_oldest_record() {
    let spec = linear("p", PipelineKind::Streaming);
    let mut w = world_with(&[spec], 64, &[]);
    w.apply_action(&approve(ActionKind::Halt, Target::pipeline("p"), None))
        .unwrap();
    let mut lags = Vec::new();
    for _ in 0..4 {
        lags.push(w.step(&[1]).unwrap().snapshot.pipelines[0].freshness_lag);
    }
    assert_eq!(lags, vec![0, 1, 2, 3]);
}

#[test]
fn scale_clamps_and_notes_it() {
    let spec = linear("p", PipelineKind::Streaming);
    let mut w = world_with(&[spec], 64, &[("p", "a", 4)]);
    let out = w
        .apply_action(&approve(
            ActionKind::ScaleUp,
            Target::stage("p", "a"),
            Some(2),
        ))
        .unwrap();
    assert!(!out.clamped);
    assert_eq!(w.allocation("p", "a").unwrap(), 6);
    let out = w
        .apply_action(&approve(
            ActionKind::ScaleUp,
            Target::stage("p", "a"),
            Some(6),
        ))
        .unwrap();
    assert!(out.clamped && out.summary.contains("clamped"));
    assert_eq!(w.allocation("p", "a").unwrap(), 8);
}

#[test]
fn unknown_target_and_illegal_resume() {
    let spec = linear("p", PipelineKind::Streaming);
    let mut w = world_with(&[spec], 64, &[]);
    assert!(matches!(
        w.apply_action(&approve(ActionKind::Halt, Target::pipeline("nope"), None)),
        Err(SimError::InvalidTarget(_))
    ));
    assert!(matches!(
        w.apply_action(&approve(ActionKind::Resume, Target::pipeline("p"), None)),
        Err(SimError::IllegalTransition(_))
    ));
    let mut a = approve(ActionKind::Halt, Target::pipeline("p"), None);
    a.decision_ref = 0;
    assert!(w.apply_action(&a).is_err());
}

#[test]
fn quarantine_isolates_partition() {
    use crate::scenario::{FaultEvent, FaultKind};
    use crate::schema::{Change, SchemaDelta};
    let mut spec = linear("p", PipelineKind::Streaming);
    spec.schema = crate::schema::Schema::new(
        1,
        vec![
            crate::schema::Column::new("a", crate::schema::DataType::Int32, false),
            crate::schema::Column::new("b", crate::schema::DataType::String, false),
        ],
    )
    .unwrap();
    let mut w = world_with(&[spec], 64, &[]);
    w.apply_fault(&FaultEvent {
        tick: 0,
        fault: FaultKind::SchemaDrift {
            pipeline: "p".into(),
            delta: SchemaDelta::new(vec![Change::DropColumn { name: "b".into() }]),
            partition: None,
        },
    })
    .unwrap();
    let r = w.step(&[1000]).unwrap();
    assert_eq!(r.snapshot.pipelines[0].health, Health::Failing);
    assert_eq!(w.blocked_partitions("p").unwrap(), vec![0]);
    let out = w
        .apply_action(&approve(
            ActionKind::QuarantinePartition,
            Target::partitions("p", vec![0]),
            None,
        ))
        .unwrap();
    assert_eq!(out.ready_tick, Some(2));
    assert_eq!(w.counters().quarantined, 1000);
    w.step(&[0]).unwrap();
    let r = w.step(&[0]).unwrap();
    assert_eq!(r.snapshot.pipelines[0].health, Health::Healthy);
    w.check_accounting().unwrap();
}

#[test]
fn upstream_delay_release_rule() {
    use crate::scenario::{FaultEvent, FaultKind};
    let mut w = world_with(&[single(1000.0, 1)], 64, &[]);
    w.apply_fault(&FaultEvent {
        tick: 0,
        fault: FaultKind::UpstreamDelay {
            pipeline: "p".into(),
            delay_ticks: 30,
            missing_fraction: 0.1,
        },
    })
    .unwrap();
    let mut arrivals_seen = Vec::new();
    for _ in 0..45 {
        let r = w.step(&[100]).unwrap();
        arrivals_seen.push(r.snapshot.pipelines[0].arrivals);
        w.check_accounting().unwrap();
    }
    assert!(arrivals_seen[..30].iter().all(|&a| a == 0));
    assert_eq!(w.counters().dropped, 300);
    // 2700 withheld records released over ticks 30..40, plus new input
    let released: u64 = arrivals_seen[30..40].iter().map(|a| a - 100).sum();
    assert_eq!(released, 2700);
    assert!(!w.input_missing("p").unwrap());
}

#[test]
fn replay_heals_after_latency() {
    use crate::scenario::{FaultEvent, FaultKind};
    let spec = linear("p", PipelineKind::Streaming);
    let mut w = world_with(&[spec], 64, &[]);
    w.apply_fault(&FaultEvent {
        tick: 0,
        fault: FaultKind::TransientTaskFailure {
            pipeline: "p".into(),
            stage: "b".into(),
        },
    })
    .unwrap();
    let out = w
        .apply_action(&approve(ActionKind::Replay, Target::stage("p", "b"), None))
        .unwrap();
    assert_eq!(out.ready_tick, Some(5));
    for t in 0..5 {
        let r = w.step(&[10]).unwrap();
        assert_eq!(r.snapshot.pipelines[0].health, Health::Failing, "tick {t}");
    }
    let r = w.step(&[10]).unwrap();
    assert_eq!(r.snapshot.pipelines[0].health, Health::Healthy);
}

#[test]
fn accounting_violation_detected() {
    let mut w = world_with(&[single(10.0, 4)], 64, &[]);
    w.step(&[100]).unwrap();
    w.counters.ingress += 1;
    assert!(matches!(
        w.step(&[0]),
        Err(SimError::InconsistentWorld { .. })
    ));
}

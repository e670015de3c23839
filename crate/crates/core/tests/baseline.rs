use governor_core::harness::{run_experiment, BaselineConfig, ControllerSpec, RunOptions};
use governor_core::parse_policy;
use governor_core::scenario::{FaultEvent, FaultKind};
use governor_core::{canonical_scenario, IncidentClass, ScenarioSpec};

fn only(fault: FaultEvent, horizon: u64) -> ScenarioSpec {
    let mut s = canonical_scenario();
    s.horizon = horizon;
    s.fault_schedule = vec![fault];
    s
}

fn run_static(s: &ScenarioSpec) -> governor_core::RunResult {
    let base = BaselineConfig::calibrated(s).unwrap();
    run_experiment(
        s,
        &parse_policy(include_str!("../../../policies/default.json")).unwrap(),
        &ControllerSpec::Static(base),
        1,
        RunOptions::default(),
    )
    .unwrap()
}

#[test]
fn transient_failure_recovers_on_first_retry() {
    let s = only(
        FaultEvent {
            tick: 100,
            fault: FaultKind::TransientTaskFailure {
                pipeline: "clickstream".into(),
                stage: "enrich".into(),
            },
        },
        300,
    );
    let r = run_static(&s);
    let inc: Vec<_> = r
        .incidents
        .iter()
        .filter(|i| i.class == IncidentClass::TransientTaskFailure)
        .collect();
    assert_eq!(inc.len(), 1);
    assert_eq!(
        inc[0].duration(),
        Some(BaselineConfig::DEFAULT_RETRY_BACKOFF)
    );
    assert_eq!(r.interventions(), 0);
}

#[test]
fn exhausted_retries_wait_for_operator() {
    // input stays missing past all three retries
    let s = only(
        FaultEvent {
            tick: 100,
            fault: FaultKind::UpstreamDelay {
                pipeline: "clickstream".into(),
                delay_ticks: 30,
                missing_fraction: 0.0,
            },
        },
        400,
    );
    let r = run_static(&s);
    let inc = r
        .incidents
        .iter()
        .find(|i| i.class == IncidentClass::UpstreamDelay)
        .unwrap();
    let exhaustion = 3 * BaselineConfig::DEFAULT_RETRY_BACKOFF;
    assert_eq!(
        inc.duration(),
        Some(exhaustion + BaselineConfig::DEFAULT_OPERATOR_DELAY)
    );
    assert_eq!(r.interventions(), 1);
}

#[test]
fn incompatible_drift_halts_until_operator() {
    let mut s = canonical_scenario();
    s.horizon = 400;
    let drift = s
        .fault_schedule
        .iter()
        .find(|f| matches!(&f.fault, FaultKind::SchemaDrift { pipeline, .. } if pipeline == "sensor_feed"))
        .cloned()
        .unwrap();
    s.fault_schedule = vec![FaultEvent { tick: 100, ..drift }];
    let r = run_static(&s);
    let inc = r
        .incidents
        .iter()
        .find(|i| i.class == IncidentClass::SchemaIncompatible)
        .unwrap();
    assert_eq!(inc.detected_tick, 100);
    assert_eq!(inc.duration(), Some(BaselineConfig::DEFAULT_OPERATOR_DELAY));
    assert_eq!(r.interventions(), 1);
}

#[test]
fn calibrated_allocations_respect_stage_bounds() {
    let s = canonical_scenario();
    let base = BaselineConfig::calibrated(&s).unwrap();
    base.validate(&s).unwrap();
}

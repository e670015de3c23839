//! Fixtures shared by the benchmarks in `benches/`.

use governor_core::{
    canonical_scenario, parse_policy, ActionKind, ActionParams, Actor, Column, DataType,
    PolicyContext, PolicyDocument, ProposedAction, ScenarioSpec, Schema, Target,
};

pub const POLICY: &str = include_str!("../../../policies/default.json");

pub fn policy() -> PolicyDocument {
    parse_policy(POLICY).expect("bundled policy is valid")
}

/// The canonical scenario cut to `horizon` ticks, keeping the faults that
/// still fall inside it.
pub fn short_scenario(horizon: u64) -> ScenarioSpec {
    let mut s = canonical_scenario();
    s.horizon = horizon;
    s.fault_schedule.retain(|f| f.tick < horizon);
    s
}

/// A `width`-column schema and a successor with one of every change kind.
pub fn schema_pair(width: usize) -> (Schema, Schema) {
    let cols: Vec<Column> = (0..width)
        .map(|i| {
            Column::new(
                format!("c{i}"),
                DataType::ALL[i % DataType::ALL.len()],
                i % 3 == 0,
            )
        })
        .collect();
    let old = Schema::new(1, cols.clone()).unwrap();
    let mut next = cols;
    next.remove(1);
    next[2].name = "renamed".into();
    next[3].dtype = DataType::Float64;
    next[4].nullable = !next[4].nullable;
    next.push(Column::new("added", DataType::String, true));
    (old, Schema::new(2, next).unwrap())
}

pub fn scale_up() -> (ProposedAction, PolicyContext) {
    let action = ProposedAction {
        id: 1,
        tick: 100,
        agent: Actor::OptimizationAgent,
        kind: ActionKind::ScaleUp,
        target: Target::stage("clickstream", "ingest"),
        params: ActionParams {
            delta_units: Some(1),
            ..ActionParams::default()
        },
        justification: "queue growth".into(),
        incident: None,
    };
    let ctx = PolicyContext {
        windowed_spend: 40.0,
        steady_burn: 0.5,
        unit_price: 0.01,
        remaining_ticks: 30,
        pipeline_tags: vec!["realtime".into()],
        current_alloc: 3,
    };
    (action, ctx)
}

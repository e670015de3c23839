use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunResult};
use crate::telemetry::{IncidentClass, MetricName, SeriesId};
use crate::Tick;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidentDuration {
    pub id: u64,
    pub pipeline: String,
    pub class: IncidentClass,
    pub detected_tick: Tick,
    pub resumed_tick: Tick,
    pub duration: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnresolvedIncident {
    pub id: u64,
    pub pipeline: String,
    pub class: IncidentClass,
    pub detected_tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub controller: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub policy_version: u32,
    /// Absent when no incident closed.
    pub mttr_mean: Option<f64>,
    pub mttr_per_incident: Vec<IncidentDuration>,
    /// Still open at the horizon; excluded from the mean.
    pub unresolved: Vec<UnresolvedIncident>,
    pub total_cost: f64,
    pub freshness_p95: BTreeMap<String, f64>,
    pub manual_interventions: u64,
}

impl MetricsReport {
    /// Flat metric name to value; absent metrics are left out.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        if let Some(v) = self.mttr_mean {
            m.insert("mttr_mean".to_string(), v);
        }
        m.insert("total_cost".to_string(), self.total_cost);
        m.insert(
            "manual_interventions".to_string(),
            self.manual_interventions as f64,
        );
        for (p, v) in &self.freshness_p95 {
            m.insert(format!("freshness_p95.{p}"), *v);
        }
        m
    }
}

/// Nearest-rank percentile; `None` for an empty sample.
pub fn nearest_rank(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Mean of closed-incident durations. Summed as integers so the result
/// does not depend on incident order.
pub fn mttr_mean(durations: &[Tick]) -> Option<f64> {
    if durations.is_empty() {
        return None;
    }
    let sum: u128 = durations.iter().map(|&d| d as u128).sum();
    Some(sum as f64 / durations.len() as f64)
}

pub fn compute_metrics(run: &RunResult) -> MetricsReport {
    let mut per = Vec::new();
    let mut unresolved = Vec::new();
    for i in &run.incidents {
        match i.resumed_tick {
            Some(r) => per.push(IncidentDuration {
                id: i.id,
                pipeline: i.pipeline.clone(),
                class: i.class,
                detected_tick: i.detected_tick,
                resumed_tick: r,
                duration: r - i.detected_tick,
            }),
            None => unresolved.push(UnresolvedIncident {
                id: i.id,
                pipeline: i.pipeline.clone(),
                class: i.class,
                detected_tick: i.detected_tick,
            }),
        }
    }
    let durations: Vec<Tick> = per.iter().map(|d| d.duration).collect();
    let freshness_p95 = run
        .streaming_pipelines
        .iter()
        .filter_map(|p| {
            let s = run
                .metrics
                .series(&SeriesId::new(p, MetricName::FreshnessLag))?;
            let vals: Vec<f64> = s.iter().map(|&(_, v)| v).collect();
            nearest_rank(&vals, 95.0).map(|v| (p.clone(), v))
        })
        .collect();
    MetricsReport {
        controller: run.controller.clone(),
        scenario_hash: run.scenario_hash.clone(),
        seed: run.seed,
        policy_version: run.policy_version,
        mttr_mean: mttr_mean(&durations),
        mttr_per_incident: per,
        unresolved,
        total_cost: run.tick_costs.iter().sum(),
        freshness_p95,
        manual_interventions: run.interventions(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub stddev: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat {
            mean,
            stddev: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub runs: Vec<MetricsReport>,
    pub stats: BTreeMap<String, Stat>,
}

impl MultiSeedSummary {
    fn of(runs: &[MetricsReport]) -> Self {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in runs {
            for (k, v) in r.flat() {
                values.entry(k).or_default().push(v);
            }
        }
        Self {
            runs: runs.to_vec(),
            stats: values
                .into_iter()
                .filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s)))
                .collect(),
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.stats.get(metric).map(|s| s.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scenario_hash: String,
    pub seed: Vec<u64>,
    pub policy_version: u32,
    pub baseline: MultiSeedSummary,
    pub agentic: MultiSeedSummary,
    /// (baseline − agentic) / baseline × 100 over seed means.
    pub deltas_percent: BTreeMap<String, f64>,
}

/// Relative change in percent, absent when the baseline is zero.
pub fn delta_percent(baseline: f64, agentic: f64) -> Option<f64> {
    if baseline == 0.0 {
        None
    } else {
        Some((baseline - agentic) / baseline * 100.0)
    }
}

/// Compare paired runs. Every pair must share scenario, seed and policy.
pub fn compare(
    baseline: &[MetricsReport],
    agentic: &[MetricsReport],
) -> Result<ComparisonReport, HarnessError> {
    if baseline.is_empty() || baseline.len() != agentic.len() {
        return Err(HarnessError::ScenarioMismatch(format!(
            "{} baseline runs vs {} agentic runs",
            baseline.len(),
            agentic.len()
        )));
    }
    let first = &baseline[0];
    for (b, a) in baseline.iter().zip(agentic) {
        if b.scenario_hash != a.scenario_hash || b.scenario_hash != first.scenario_hash {
            return Err(HarnessError::ScenarioMismatch(format!(
                "scenario {} vs {}",
                b.scenario_hash, a.scenario_hash
            )));
        }
        if b.seed != a.seed {
            return Err(HarnessError::ScenarioMismatch(format!(
                "seed {} vs {}",
                b.seed, a.seed
            )));
        }
        if b.policy_version != a.policy_version {
            return Err(HarnessError::ScenarioMismatch(format!(
                "policy version {} vs {}",
                b.policy_version, a.policy_version
            )));
        }
    }
    let bs = MultiSeedSummary::of(baseline);
    let ags = MultiSeedSummary::of(agentic);
    let deltas_percent = bs
        .stats
        .iter()
        .filter_map(|(k, s)| {
            let a = ags.mean(k)?;
            delta_percent(s.mean, a).map(|d| (k.clone(), d))
        })
        .collect();
    Ok(ComparisonReport {
        scenario_hash: first.scenario_hash.clone(),
        seed: baseline.iter().map(|r| r.seed).collect(),
        policy_version: first.policy_version,
        baseline: bs,
        agentic: ags,
        deltas_percent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(mttr: Option<f64>, cost: f64, interventions: u64) -> MetricsReport {
        MetricsReport {
            controller: "x".into(),
            scenario_hash: "h".into(),
            seed: 1,
            policy_version: 1,
            mttr_mean: mttr,
            mttr_per_incident: Vec::new(),
            unresolved: Vec::new(),
            total_cost: cost,
            freshness_p95: BTreeMap::new(),
            manual_interventions: interventions,
        }
    }

    #[test]
    fn mttr_of_two_incidents() {
        assert_eq!(mttr_mean(&[60, 40]), Some(50.0));
        assert_eq!(mttr_mean(&[]), None);
    }

    #[test]
    fn p95_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 95.0), Some(95.0));
        assert_eq!(nearest_rank(&[7.0], 95.0), Some(7.0));
        assert_eq!(nearest_rank(&[], 95.0), None);
    }

    #[test]
    fn headline_deltas() {
        let c = compare(
            &[report(Some(100.0), 1000.0, 20)],
            &[report(Some(55.0), 750.0, 5)],
        )
        .unwrap();
        assert_eq!(c.deltas_percent["mttr_mean"], 45.0);
        assert_eq!(c.deltas_percent["total_cost"], 25.0);
        assert_eq!(c.deltas_percent["manual_interventions"], 75.0);
    }

    #[test]
    fn absent_metrics_have_no_delta() {
        let c = compare(&[report(None, 10.0, 0)], &[report(Some(5.0), 10.0, 0)]).unwrap();
        assert!(!c.deltas_percent.contains_key("mttr_mean"));
        assert!(!c.deltas_percent.contains_key("manual_interventions"));
    }

    #[test]
    fn mismatched_seed_is_rejected() {
        let mut a = report(None, 1.0, 0);
        a.seed = 2;
        assert!(matches!(
            compare(&[report(None, 1.0, 0)], &[a]),
            Err(HarnessError::ScenarioMismatch(_))
        ));
    }
}

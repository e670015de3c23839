//! Windowed EWMA anomaly detection over telemetry series.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::telemetry::MetricName;
use crate::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwmaConfig {
    pub alpha: f64,
    /// Deviations above the mean that count as anomalous.
    pub k: f64,
    pub sigma_floor: f64,
    /// Samples, including the one under test, before anything is flagged.
    pub min_samples: usize,
    /// Prior samples the statistics are computed over.
    pub window: usize,
}

impl Default for EwmaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            k: 3.0,
            sigma_floor: 1.0,
            min_samples: 5,
            window: 20,
        }
    }
}

/// EWMA mean and mean absolute deviation of `samples`, seeded from the
/// first sample with zero deviation.
pub fn ewma_stats(samples: impl IntoIterator<Item = f64>, alpha: f64) -> Option<(f64, f64)> {
    let mut it = samples.into_iter();
    let mut mean = it.next()?;
    let mut dev = 0.0;
    for x in it {
        dev = (1.0 - alpha) * dev + alpha * (x - mean).abs();
        mean = (1.0 - alpha) * mean + alpha * x;
    }
    Some((mean, dev))
}

#[derive(Debug, Clone, Default)]
pub struct EwmaDetector {
    history: VecDeque<f64>,
}

impl EwmaDetector {
    /// Test `x` against the prior window, then add it. Returns the
    /// statistics `x` was tested against when it is flagged. Only upward
    /// moves are anomalous.
    pub fn observe(&mut self, x: f64, cfg: &EwmaConfig) -> Option<(f64, f64)> {
        let mut flagged = None;
        if self.history.len() + 1 >= cfg.min_samples {
            if let Some((mean, dev)) = ewma_stats(self.history.iter().copied(), cfg.alpha) {
                if x - mean > cfg.k * dev.max(cfg.sigma_floor) {
                    flagged = Some((mean, dev));
                }
            }
        }
        self.history.push_back(x);
        while self.history.len() > cfg.window {
            self.history.pop_front();
        }
        flagged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub pipeline: String,
    pub metric: MetricName,
    pub tick: Tick,
    pub value: f64,
    pub mean: f64,
    pub deviation: f64,
}

/// One detector per (pipeline, metric).
#[derive(Debug, Clone, Default)]
pub struct Monitor {
    pub config: EwmaConfig,
    detectors: BTreeMap<(String, MetricName), EwmaDetector>,
    active: BTreeMap<(String, MetricName), bool>,
}

impl Monitor {
    pub fn new(config: EwmaConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// Feed one sample. Returns the anomaly and whether it just began.
    pub fn observe(
        &mut self,
        pipeline: &str,
        metric: MetricName,
        tick: Tick,
        value: f64,
    ) -> Option<(Anomaly, bool)> {
        let key = (pipeline.to_string(), metric);
        let hit = self
            .detectors
            .entry(key.clone())
            .or_default()
            .observe(value, &self.config);
        let was = self.active.insert(key, hit.is_some()).unwrap_or(false);
        hit.map(|(mean, deviation)| {
            (
                Anomaly {
                    pipeline: pipeline.to_string(),
                    metric,
                    tick,
                    value,
                    mean,
                    deviation,
                },
                !was,
            )
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_after_four_flat_samples_is_flagged() {
        let cfg = EwmaConfig::default();
        let mut d = EwmaDetector::default();
        for _ in 0..4 {
            assert!(d.observe(10.0, &cfg).is_none());
        }
        let (mean, dev) = d.observe(50.0, &cfg).unwrap();
        assert_eq!((mean, dev), (10.0, 0.0));
    }

    #[test]
    fn nothing_before_min_samples() {
        let cfg = EwmaConfig::default();
        let mut d = EwmaDetector::default();
        for _ in 0..3 {
            d.observe(0.0, &cfg);
        }
        // fourth sample: only three priors
        assert!(d.observe(1000.0, &cfg).is_none());
    }

    #[test]
    fn hand_computed_stats() {
        // mean 10 -> 12 -> 11.6; dev 0 -> 2 -> 0.8*2 + 0.2*abs(10 - 12) = 2.0
        let (m, d) = ewma_stats([10.0, 20.0, 10.0], 0.2).unwrap();
        assert!((m - 11.6).abs() < 1e-12);
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn drops_are_not_flagged() {
        let cfg = EwmaConfig::default();
        let mut d = EwmaDetector::default();
        for _ in 0..10 {
            d.observe(100.0, &cfg);
        }
        assert!(d.observe(0.0, &cfg).is_none());
    }
}

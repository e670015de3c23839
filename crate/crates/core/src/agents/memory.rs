use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::action::ActionKind;
use crate::telemetry::IncidentClass;
use crate::Tick;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub attempts: u64,
    pub successes: u64,
    /// Sum of detection-to-resumption ticks over successes.
    pub resolution_ticks: u64,
}

impl MemoryStats {
    /// Success rate, or `None` before the first attempt.
    pub fn success_rate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.successes as f64 / self.attempts as f64)
    }

    pub fn mean_resolution(&self) -> Option<f64> {
        (self.successes > 0).then(|| self.resolution_ticks as f64 / self.successes as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub class: IncidentClass,
    pub kind: ActionKind,
    pub attempts: u64,
    pub successes: u64,
    pub mean_resolution: Option<f64>,
}

/// What each (incident class, action kind) pairing has achieved so far.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutcomeMemory {
    stats: BTreeMap<(IncidentClass, ActionKind), MemoryStats>,
}

impl OutcomeMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_attempt(&mut self, class: IncidentClass, kind: ActionKind) {
        self.stats.entry((class, kind)).or_default().attempts += 1;
    }

    /// Credit a success. Ignored when there was no matching attempt.
    pub fn record_success(&mut self, class: IncidentClass, kind: ActionKind, ticks: Tick) {
        if let Some(s) = self.stats.get_mut(&(class, kind)) {
            if s.successes < s.attempts {
                s.successes += 1;
                s.resolution_ticks += ticks;
            }
        }
    }

    pub fn get(&self, class: IncidentClass, kind: ActionKind) -> MemoryStats {
        self.stats.get(&(class, kind)).copied().unwrap_or_default()
    }

    pub fn entries(&self) -> Vec<MemoryEntry> {
        self.stats
            .iter()
            .map(|(&(class, kind), s)| MemoryEntry {
                class,
                kind,
                attempts: s.attempts,
                successes: s.successes,
                mean_resolution: s.mean_resolution(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn successes_never_exceed_attempts() {
        let mut m = OutcomeMemory::new();
        m.record_success(IncidentClass::TransientTaskFailure, ActionKind::Replay, 5);
        assert_eq!(
            m.get(IncidentClass::TransientTaskFailure, ActionKind::Replay)
                .successes,
            0
        );
        m.record_attempt(IncidentClass::TransientTaskFailure, ActionKind::Replay);
        m.record_success(IncidentClass::TransientTaskFailure, ActionKind::Replay, 5);
        m.record_success(IncidentClass::TransientTaskFailure, ActionKind::Replay, 5);
        let s = m.get(IncidentClass::TransientTaskFailure, ActionKind::Replay);
        assert_eq!((s.attempts, s.successes), (1, 1));
        assert_eq!(s.mean_resolution(), Some(5.0));
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::events::{Event, RunEvent};
use crate::provider::{usage_totals, UsageTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub correct: Option<bool>,
    /// Answered escalations.
    pub n_interventions: u32,
    /// CODING_ATTEMPT count per sub-function, all levels together.
    pub coding_attempts: BTreeMap<String, u32>,
    /// Mean of `coding_attempts` over the sub-functions that have any.
    pub avg_coding: f64,
    pub reflections: BTreeMap<String, u32>,
    pub usage: UsageTable,
}

/// Events that fail to parse are skipped; use a verified log for exact figures.
pub fn compute_metrics(log: &[RunEvent]) -> Metrics {
    let mut m = Metrics {
        correct: None,
        n_interventions: 0,
        coding_attempts: BTreeMap::new(),
        avg_coding: 0.0,
        reflections: BTreeMap::new(),
        usage: usage_totals(log),
    };
    for ev in log {
        match ev.event() {
            Ok(Event::InterventionAnswered(_)) => m.n_interventions += 1,
            Ok(Event::CodingAttempt(a)) => *m.coding_attempts.entry(a.subfunction).or_default() += 1,
            Ok(Event::ReflectionDecided(r)) => *m.reflections.entry(r.decision.name().to_string()).or_default() += 1,
            Ok(Event::RunCompleted(c)) => m.correct = c.correct,
            _ => {}
        }
    }
    if !m.coding_attempts.is_empty() {
        let total: u64 = m.coding_attempts.values().map(|&v| v as u64).sum();
        m.avg_coding = total as f64 / m.coding_attempts.len() as f64;
    }
    m
}

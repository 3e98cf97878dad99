//! Per-episode aggregates and the row layout of `metrics.csv`.

use serde::{Deserialize, Serialize};

use crate::env::SnapshotMetrics;

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 11] = [
    "run_id",
    "seed",
    "episode",
    "mean_reward",
    "sum_rate",
    "see",
    "jain",
    "objective",
    "qos_violations",
    "power_violations",
    "sigma",
];

/// Step averages of one episode. Violation counts are totals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub mean_reward: f64,
    pub sum_rate: f64,
    pub see: f64,
    pub jain: f64,
    pub objective: f64,
    pub qos_violations: usize,
    pub power_violations: usize,
    /// Exploration scale at the end of the episode (ε for the codebook agent).
    pub sigma: f64,
}

/// Running sums over the steps of one episode.
#[derive(Debug, Clone, Default)]
pub struct EpisodeAccumulator {
    steps: usize,
    reward: f64,
    sum_rate: f64,
    see: f64,
    jain: f64,
    objective: f64,
    qos: usize,
    power: usize,
}

impl EpisodeAccumulator {
    pub fn push(&mut self, reward: f64, m: &SnapshotMetrics) {
        self.steps += 1;
        self.reward += reward;
        self.sum_rate += m.sum_rate;
        self.see += m.see;
        self.jain += m.jain;
        self.objective += m.objective;
        self.qos += m.terms.qos_violations;
        self.power += m.terms.power_violation as usize;
    }

    pub fn finish(&self, episode: usize, sigma: f64) -> EpisodeSummary {
        let n = self.steps.max(1) as f64;
        EpisodeSummary {
            episode,
            mean_reward: self.reward / n,
            sum_rate: self.sum_rate / n,
            see: self.see / n,
            jain: self.jain / n,
            objective: self.objective / n,
            qos_violations: self.qos,
            power_violations: self.power,
            sigma,
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub episode: usize,
    pub mean_reward: f64,
    pub sum_rate: f64,
    pub see: f64,
    pub jain: f64,
    pub objective: f64,
    pub qos_violations: usize,
    pub power_violations: usize,
    pub sigma: f64,
}

impl MetricsRecord {
    pub fn new(run_id: &str, seed: u64, s: &EpisodeSummary) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            episode: s.episode,
            mean_reward: s.mean_reward,
            sum_rate: s.sum_rate,
            see: s.see,
            jain: s.jain,
            objective: s.objective,
            qos_violations: s.qos_violations,
            power_violations: s.power_violations,
            sigma: s.sigma,
        }
    }
}

/// Mean of a field over summaries; zero for an empty slice.
pub fn mean_of(rows: &[EpisodeSummary], f: impl Fn(&EpisodeSummary) -> f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

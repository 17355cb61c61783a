use serde::{Deserialize, Serialize};

/// Global-model evaluation after one round. Round 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round_index: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub selected_clients: Vec<usize>,
    /// Zero unless timing was requested, which keeps metric files
    /// reproducible byte for byte.
    pub wall_millis: u64,
}

/// Trailing mean over the last `min(window, i + 1)` points.
pub fn rolling_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            let chunk = &series[start..=i];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect()
}

pub const SMOOTHING_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReach {
    pub target: f64,
    /// First round whose raw accuracy meets the target; `None` if never.
    pub first_round: Option<usize>,
    /// Raw accuracy at `first_round`.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub targets: Vec<TargetReach>,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub final_accuracy: f64,
}

/// First round at which raw accuracy reaches `target`.
pub fn first_reach(metrics: &[RoundMetrics], target: f64) -> Option<&RoundMetrics> {
    metrics.iter().find(|m| m.test_accuracy >= target)
}

/// Table-style summary over raw (unsmoothed) accuracy.
pub fn summarize(metrics: &[RoundMetrics], targets: &[f64]) -> Summary {
    let best = metrics
        .iter()
        .fold(None::<&RoundMetrics>, |best, m| match best {
            Some(b) if b.test_accuracy >= m.test_accuracy => Some(b),
            _ => Some(m),
        });
    Summary {
        rounds: metrics.last().map_or(0, |m| m.round_index),
        targets: targets
            .iter()
            .map(|&target| {
                let hit = first_reach(metrics, target);
                TargetReach {
                    target,
                    first_round: hit.map(|m| m.round_index),
                    accuracy: hit.map(|m| m.test_accuracy),
                }
            })
            .collect(),
        best_accuracy: best.map_or(0.0, |m| m.test_accuracy),
        best_round: best.map_or(0, |m| m.round_index),
        final_accuracy: metrics.last().map_or(0.0, |m| m.test_accuracy),
    }
}

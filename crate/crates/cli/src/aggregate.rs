//! Seed-level statistics.

use pdo_core::trainers::RunSummary;
use serde::{Deserialize, Serialize};

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// `None` for an empty input.
    pub fn of(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub seeds: Vec<u64>,
    pub max_fitness: Option<MeanStd>,
    pub min_fitness: Option<MeanStd>,
    pub qd_score: Option<MeanStd>,
    pub coverage: Option<MeanStd>,
    pub runs: Vec<RunSummary>,
}

impl AggregateSummary {
    pub fn new(runs: Vec<RunSummary>) -> Self {
        let pick = |f: &dyn Fn(&RunSummary) -> Option<f64>| MeanStd::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            max_fitness: pick(&|r| r.max_fitness),
            min_fitness: pick(&|r| r.min_fitness),
            qd_score: pick(&|r| Some(r.qd_score)),
            coverage: pick(&|r| Some(r.coverage as f64)),
            runs,
        }
    }

    /// The aggregate with timing removed, for comparing runs.
    pub fn metrics_only(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.runs {
            r.wall_clock_secs = 0.0;
        }
        out
    }
}

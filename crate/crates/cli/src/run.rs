//! Executing a run spec: one directory per seed plus an aggregate summary.

use std::path::{Path, PathBuf};

use pdo_core::trainers::train;

use crate::aggregate::AggregateSummary;
use crate::error::{CliError, Result};
use crate::spec::RunSpec;

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Runs every seed in order and writes `summary.json` under `out`.
pub fn run(spec: &RunSpec, out: &Path, mut progress: impl FnMut(u64, &Path)) -> Result<AggregateSummary> {
    let configs = spec.configs()?;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut runs = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let dir = seed_dir(out, cfg.seed);
        progress(cfg.seed, &dir);
        let (summary, _) = train(cfg, Some(&dir))?;
        runs.push(summary);
    }
    let agg = AggregateSummary::new(runs);
    let path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&agg).expect("summaries serialize");
    std::fs::write(&path, text).map_err(CliError::io(&path))?;
    Ok(agg)
}

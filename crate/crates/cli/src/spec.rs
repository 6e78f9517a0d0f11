//! Run specifications: a trainer config plus the seeds to run it under.
//!
//! The file format is the trainer config as JSON with one extra `seeds`
//! key. `env` and `archive` also accept bare names (`"toy"`, `"grid"`) for
//! their defaults.

use std::path::Path;

use pdo_core::archive::ArchiveKind;
use pdo_core::trainers::TrainerConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub seeds: Vec<u64>,
    pub config: TrainerConfig,
}

fn expand_shorthand(obj: &mut Map<String, Value>, key: &str) {
    if let Some(Value::String(name)) = obj.get(key) {
        let name = name.clone();
        obj.insert(key.into(), serde_json::json!({ "kind": name }));
    }
}

impl RunSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let Value::Object(mut obj) = value else {
            return Err(CliError::Config("run spec must be a JSON object".into()));
        };
        let seeds = match obj.remove("seeds") {
            None => vec![0],
            Some(v) => serde_json::from_value(v).map_err(|e| CliError::Config(format!("seeds: {e}")))?,
        };
        expand_shorthand(&mut obj, "env");
        if let Some(Value::String(name)) = obj.get("archive") {
            let kind = match name.as_str() {
                "grid" => ArchiveKind::grid(),
                "queue" => ArchiveKind::queue(),
                other => return Err(CliError::Config(format!("unknown archive {other:?}"))),
            };
            obj.insert("archive".into(), serde_json::to_value(kind).expect("archive kinds serialize"));
        }
        let config: TrainerConfig =
            serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::Config(e.to_string()))?;
        let spec = Self { seeds, config };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked before a run starts.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(CliError::Config("seeds must be distinct".into()));
        }
        if matches!(self.config.archive, ArchiveKind::Grid { .. }) && !self.config.env.has_descriptor() {
            return Err(CliError::Config(format!(
                "grid archives need a behavior descriptor, which {} does not provide",
                self.config.env.name()
            )));
        }
        self.config.resolved()?;
        Ok(())
    }

    /// Fully resolved per-seed configs.
    pub fn configs(&self) -> Result<Vec<TrainerConfig>> {
        self.seeds
            .iter()
            .map(|&seed| Ok(TrainerConfig { seed, ..self.config.clone() }.resolved()?))
            .collect()
    }
}

/// Parses `"0,1,2"` or a half-open range `"0..5"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Usage(format!("cannot parse seeds {s:?}; use 0,1,2 or 0..5"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

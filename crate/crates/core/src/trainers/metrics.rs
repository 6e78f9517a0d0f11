//! Per-iteration records written as JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::QdMetrics;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerRecord {
    pub id: usize,
    /// Latest evaluated fitness (carried between evaluations).
    pub fitness: Option<f64>,
    pub bd: Option<Vec<f64>>,
    pub episode_return: Option<f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub aborted: bool,
    pub reverted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub max_fitness: Option<f64>,
    pub min_fitness: Option<f64>,
    pub qd_score: f64,
    pub coverage: usize,
}

impl ArchiveRecord {
    pub fn new(m: QdMetrics, min_fitness: Option<f64>) -> Self {
        Self {
            max_fitness: (!m.max_fitness.is_nan()).then_some(m.max_fitness),
            min_fitness,
            qd_score: m.qd_score,
            coverage: m.coverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploitRecord {
    pub learner: usize,
    pub source_seq: u64,
    pub source_fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxRecord {
    pub det_before: f64,
    pub det_after: f64,
    pub jittered: bool,
    pub padded: bool,
    pub fitness: Vec<f64>,
    pub inserted: usize,
    pub replaced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Environment steps summed over the population so far.
    pub env_steps: u64,
    pub evaluated: bool,
    pub learners: Vec<LearnerRecord>,
    pub archive: ArchiveRecord,
    pub exploit: Option<ExploitRecord>,
    pub aux: Option<AuxRecord>,
    pub lambda: Option<f64>,
    /// Set when clustering selection fell back to plain top-M.
    pub selection_fallback: Option<bool>,
}

pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Iterations at which the archive's max fitness dropped.
pub fn max_fitness_violations(records: &[IterationRecord]) -> Vec<usize> {
    let mut best = f64::NEG_INFINITY;
    let mut bad = Vec::new();
    for r in records {
        match r.archive.max_fitness {
            Some(m) if m < best => bad.push(r.iteration),
            Some(m) => best = m,
            None if best > f64::NEG_INFINITY => bad.push(r.iteration),
            None => {}
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(iteration: usize, max: Option<f64>) -> IterationRecord {
        IterationRecord {
            iteration,
            env_steps: 0,
            evaluated: true,
            learners: vec![],
            archive: ArchiveRecord {
                max_fitness: max,
                min_fitness: max,
                qd_score: 0.0,
                coverage: 0,
            },
            exploit: None,
            aux: None,
            lambda: None,
            selection_fallback: None,
        }
    }

    #[test]
    fn violations_are_detected() {
        let ok = [rec(0, None), rec(1, Some(1.0)), rec(2, Some(1.0)), rec(3, Some(2.0))];
        assert!(max_fitness_violations(&ok).is_empty());
        let bad = [rec(0, Some(3.0)), rec(1, Some(2.0)), rec(2, None)];
        assert_eq!(max_fitness_violations(&bad), vec![1, 2]);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = JsonlWriter::create(&path).unwrap();
        let records = [rec(0, None), rec(1, Some(0.1 + 0.2))];
        for r in &records {
            w.write(r).unwrap();
        }
        w.flush().unwrap();
        assert_eq!(read_metrics(&path).unwrap(), records);
    }
}

//! Static reports built only from run directories, so re-running a report
//! rewrites identical bytes.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use pdo_core::archive::{load_archive, ArchiveStore};
use pdo_core::trainers::{read_metrics, IterationRecord, RunDir, TrainerConfig};

use crate::aggregate::MeanStd;
use crate::error::{CliError, Result};
use crate::svg::{heatmap, line_chart, Series};

pub const METRICS: [&str; 4] = ["max_fitness", "min_fitness", "coverage", "qd_score"];

fn metric(r: &IterationRecord, name: &str) -> Option<f64> {
    match name {
        "max_fitness" => r.archive.max_fitness,
        "min_fitness" => r.archive.min_fitness,
        "coverage" => Some(r.archive.coverage as f64),
        "qd_score" => Some(r.archive.qd_score),
        _ => None,
    }
}

/// Expands the inputs into run directories: a path holding `metrics.jsonl`
/// is a run; otherwise its `seed-*` children are, in name order.
pub fn discover_runs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for p in inputs {
        if RunDir::new(p).metrics().is_file() {
            runs.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| CliError::Report {
                run: p.clone(),
                message: format!("missing metrics.jsonl and not a directory of runs ({e})"),
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.is_dir() && c.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed-")))
            .collect();
        if children.is_empty() {
            return Err(CliError::Report {
                run: p.clone(),
                message: "missing metrics.jsonl".into(),
            });
        }
        children.sort();
        runs.extend(children);
    }
    Ok(runs)
}

pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: TrainerConfig,
    pub records: Vec<IterationRecord>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let rd = RunDir::new(dir);
    let err = |message: String| CliError::Report {
        run: dir.to_path_buf(),
        message,
    };
    if !rd.metrics().is_file() {
        return Err(err("missing metrics.jsonl".into()));
    }
    let records = read_metrics(&rd.metrics()).map_err(|e| err(format!("metrics.jsonl: {e}")))?;
    let text = std::fs::read_to_string(rd.config()).map_err(|e| err(format!("config.json: {e}")))?;
    let config = serde_json::from_str(&text).map_err(|e| err(format!("config.json: {e}")))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        records,
    })
}

/// Per-iteration mean and sample std of one metric across runs, truncated
/// to the shortest run.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub iteration: Vec<usize>,
    pub stats: Vec<Option<MeanStd>>,
}

pub fn curve(runs: &[&[IterationRecord]], name: &str) -> Curve {
    let len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut iteration = Vec::with_capacity(len);
    let mut stats = Vec::with_capacity(len);
    for i in 0..len {
        iteration.push(runs[0][i].iteration);
        let xs: Vec<f64> = runs.iter().filter_map(|r| metric(&r[i], name)).collect();
        stats.push(MeanStd::of(&xs));
    }
    Curve { iteration, stats }
}

pub fn curves_csv(curves: &[(&str, Curve)]) -> String {
    let mut out = String::from("iteration");
    for (name, _) in curves {
        let _ = write!(out, ",{name}_mean,{name}_std,{name}_n");
    }
    out.push('\n');
    let len = curves.first().map_or(0, |c| c.1.iteration.len());
    for i in 0..len {
        let _ = write!(out, "{}", curves[0].1.iteration[i]);
        for (_, c) in curves {
            match c.stats[i] {
                Some(s) => {
                    let _ = write!(out, ",{},{},{}", s.mean, s.std, s.n);
                }
                None => out.push_str(",,,0"),
            }
        }
        out.push('\n');
    }
    out
}

fn run_label(dir: &Path) -> String {
    let parts: Vec<String> = dir
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    parts
        .into_iter()
        .rev()
        .collect::<Vec<_>>()
        .join("-")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Heatmap of a run's final grid archive, or `None` for queue archives.
pub fn archive_heatmap(run: &LoadedRun) -> Result<Option<String>> {
    let archive = load_archive(&RunDir::new(&run.dir).archive()).map_err(|e| CliError::Report {
        run: run.dir.clone(),
        message: format!("archive: {e}"),
    })?;
    let ArchiveStore::Grid(grid) = &archive.store else {
        return Ok(None);
    };
    let cells: Vec<Vec<Option<f64>>> = (0..grid.shape[0])
        .map(|i| (0..grid.shape[1]).map(|j| grid.cell([i, j]).map(|s| s.fitness)).collect())
        .collect();
    let lo = run.config.env.qd_offset();
    let hi = cells.iter().flatten().flatten().copied().fold(lo, f64::max);
    let title = format!("{} archive ({} seed {})", run.config.trainer.name(), run.config.env.name(), run.config.seed);
    Ok(Some(heatmap(&title, &cells, lo, hi, ["descriptor 1", "descriptor 2"])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub written: Vec<PathBuf>,
}

/// Writes `curves.csv`, one chart per metric and one heatmap per grid run.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<ReportFiles> {
    let dirs = discover_runs(inputs)?;
    let runs: Vec<LoadedRun> = dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut written = Vec::new();
    let mut write = |name: String, body: &str| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, body).map_err(CliError::io(&path))?;
        written.push(path);
        Ok(())
    };

    let records: Vec<&[IterationRecord]> = runs.iter().map(|r| r.records.as_slice()).collect();
    let curves: Vec<(&str, Curve)> = METRICS.iter().map(|m| (*m, curve(&records, m))).collect();
    write("curves.csv".into(), &curves_csv(&curves))?;
    for (name, c) in &curves {
        let x: Vec<f64> = c.iteration.iter().map(|&i| i as f64).collect();
        let mean: Vec<Option<f64>> = c.stats.iter().map(|s| s.map(|s| s.mean)).collect();
        let std: Vec<Option<f64>> = c.stats.iter().map(|s| s.map(|s| s.std)).collect();
        let label = format!("mean ± std over {} runs", runs.len());
        let svg = line_chart(
            &name.replace('_', " "),
            "iteration",
            &[Series {
                label: &label,
                x: &x,
                mean: &mean,
                std: &std,
            }],
        );
        write(format!("{name}.svg"), &svg)?;
    }
    for run in &runs {
        if let Some(svg) = archive_heatmap(run)? {
            write(format!("heatmap-{}.svg", run_label(&run.dir)), &svg)?;
        }
    }
    Ok(ReportFiles { written })
}

//! Run outputs: accuracy matrix, summary, loss traces, representation dump,
//! manifest, and sweep aggregation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Sample;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::eval::AccuracyMatrix;
use crate::trainer::{loss_trace_csv, TaskReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub tasks_completed: usize,
    /// `ACC_j` for every completed task.
    pub average_accuracy: Vec<f64>,
    pub final_average_accuracy: f64,
    /// `None` when fewer than two tasks ran.
    pub bwt: Option<f64>,
}

impl Summary {
    pub fn from_matrix(mode: &str, m: &AccuracyMatrix) -> Result<Summary> {
        let average_accuracy = (1..=m.completed()).map(|j| m.average_accuracy(j)).collect::<Result<Vec<_>>>()?;
        let bwt = if m.completed() == m.tasks() { m.bwt()? } else { None };
        Ok(Summary {
            mode: mode.to_string(),
            tasks_completed: m.completed(),
            final_average_accuracy: average_accuracy.last().copied().unwrap_or(0.0),
            average_accuracy,
            bwt,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskTiming {
    pub task: usize,
    pub seconds: f64,
    pub memory_exemplars: usize,
    pub augmented_current: usize,
    pub augmented_replay: usize,
}

/// Everything needed to repeat a run, plus what it produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub data: serde_json::Value,
    pub tasks: Vec<TaskTiming>,
    pub summary: Option<Summary>,
    pub error: Option<String>,
}

/// `sample_id,relation,h0,…` with eval-mode hidden vectors.
pub fn reps_csv(model: &Model, samples: &[Sample]) -> Result<String> {
    let d = model.config().hidden_dim;
    let mut out = String::from("sample_id,relation");
    for i in 0..d {
        let _ = write!(out, ",h{i}");
    }
    out.push('\n');
    for s in samples {
        let h = model.hidden_of(s)?;
        let _ = write!(out, "{},{}", s.id, s.relation);
        for x in h {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes run artifacts into one directory as the run progresses.
pub struct ArtifactWriter {
    dir: PathBuf,
    manifest: RunManifest,
}

impl ArtifactWriter {
    pub fn create(dir: &Path, config: &RunConfig, data: serde_json::Value) -> Result<ArtifactWriter> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                config: config.clone(),
                data,
                tasks: Vec::new(),
                summary: None,
                error: None,
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Loss trace of the task plus the matrix and summary so far.
    pub fn task_done(&mut self, report: &TaskReport, matrix: &AccuracyMatrix) -> Result<()> {
        fs::write(
            self.dir.join(format!("loss_trace_task{}.csv", report.task)),
            loss_trace_csv(&report.trace),
        )?;
        self.manifest.tasks.push(TaskTiming {
            task: report.task,
            seconds: report.seconds,
            memory_exemplars: report.memory_exemplars,
            augmented_current: report.augmented_current,
            augmented_replay: report.augmented_replay,
        });
        self.write_matrix(matrix)
    }

    pub fn write_matrix(&mut self, matrix: &AccuracyMatrix) -> Result<()> {
        fs::write(self.dir.join("acc_matrix.csv"), matrix.to_csv())?;
        let mode = self.manifest.config.mode.to_string();
        let summary = Summary::from_matrix(&mode, matrix)?;
        fs::write(self.dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        self.manifest.summary = Some(summary);
        self.write_manifest()
    }

    pub fn write_file(&self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.dir.join(name), contents)?;
        Ok(())
    }

    pub fn fail(&mut self, error: &Error) -> Result<()> {
        self.manifest.error = Some(error.to_string());
        self.write_manifest()
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn write_manifest(&self) -> Result<()> {
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}

/// One finished run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRun {
    pub memory_size: usize,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-run rows: `memory,seed,acc_1..acc_J,bwt`.
pub fn sweep_runs_csv(runs: &[SweepRun]) -> Result<String> {
    let tasks = runs.first().map_or(0, |r| r.matrix.tasks());
    let mut out = String::from("memory,seed");
    for j in 1..=tasks {
        let _ = write!(out, ",acc_{j}");
    }
    out.push_str(",bwt\n");
    for r in runs {
        let _ = write!(out, "{},{}", r.memory_size, r.seed);
        for j in 1..=tasks {
            let _ = write!(out, ",{}", r.matrix.average_accuracy(j)?);
        }
        match r.matrix.bwt()? {
            Some(b) => {
                let _ = writeln!(out, ",{b}");
            }
            None => out.push_str(",\n"),
        }
    }
    Ok(out)
}

/// Mean and population standard deviation of every `ACC_j` and of BWT,
/// grouped by memory size.
pub fn sweep_aggregate_csv(runs: &[SweepRun]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::config("sweep produced no runs"));
    }
    let tasks = runs[0].matrix.tasks();
    let mut groups: BTreeMap<usize, Vec<&SweepRun>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.memory_size).or_default().push(r);
    }
    let mut out = String::from("memory,runs");
    for j in 1..=tasks {
        let _ = write!(out, ",acc_{j}_mean,acc_{j}_std");
    }
    out.push_str(",bwt_mean,bwt_std\n");
    for (l, rs) in groups {
        let _ = write!(out, "{l},{}", rs.len());
        for j in 1..=tasks {
            let xs = rs.iter().map(|r| r.matrix.average_accuracy(j)).collect::<Result<Vec<_>>>()?;
            let (m, s) = mean_std(&xs);
            let _ = write!(out, ",{m},{s}");
        }
        let bwts: Vec<f64> = rs.iter().filter_map(|r| r.matrix.bwt().ok().flatten()).collect();
        if bwts.is_empty() {
            out.push_str(",,\n");
        } else {
            let (m, s) = mean_std(&bwts);
            let _ = writeln!(out, ",{m},{s}");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(l: usize, seed: u64, rows: Vec<Vec<f64>>) -> SweepRun {
        SweepRun {
            memory_size: l,
            seed,
            matrix: AccuracyMatrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn aggregate_groups_by_memory_size() {
        let runs = vec![
            run(1, 1, vec![vec![1.0], vec![0.5, 0.5]]),
            run(1, 2, vec![vec![0.5], vec![0.25, 0.75]]),
            run(2, 1, vec![vec![1.0], vec![1.0, 1.0]]),
        ];
        let csv = sweep_aggregate_csv(&runs).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "memory,runs,acc_1_mean,acc_1_std,acc_2_mean,acc_2_std,bwt_mean,bwt_std");
        assert_eq!(lines[1], "1,2,0.75,0.25,0.5,0,-0.375,0.125");
        assert_eq!(lines[2], "2,1,1,0,1,0,0,0");
        assert!(sweep_aggregate_csv(&[]).is_err());
    }

    #[test]
    fn summary_without_bwt_for_single_task() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.5]]).unwrap();
        let s = Summary::from_matrix("sckd", &m).unwrap();
        assert_eq!(s.bwt, None);
        assert_eq!(s.final_average_accuracy, 0.5);
    }
}

//! Task accuracy, global accuracy, forgetting, and run reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::ModelParams;

/// Percentage of test samples from `task_classes` that the model labels
/// correctly, taking the argmax over every class the model knows. `None`
/// when the test set holds no sample of those classes.
pub fn task_accuracy(model: &ModelParams, test: &Dataset, task_classes: &[usize]) -> Result<Option<f64>> {
    accuracy_where(model, test, |y| task_classes.contains(&y))
}

/// Accuracy over the whole test set.
pub fn global_accuracy(model: &ModelParams, test: &Dataset) -> Result<Option<f64>> {
    accuracy_where(model, test, |_| true)
}

fn accuracy_where(model: &ModelParams, test: &Dataset, keep: impl Fn(usize) -> bool) -> Result<Option<f64>> {
    let idx: Vec<usize> = (0..test.len()).filter(|&i| keep(test.labels()[i])).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let sub = test.subset(&idx);
    let pred = model.predict(sub.inputs())?;
    let correct = pred.iter().zip(sub.labels()).filter(|(p, y)| p == y).count();
    Ok(Some(100.0 * correct as f64 / idx.len() as f64))
}

/// Best earlier accuracy on `task` minus its final accuracy. `history` is
/// indexed `[eval_point][task]`; undefined with fewer than two evaluations.
pub fn forgetting(history: &[Vec<Option<f64>>], task: usize) -> Option<f64> {
    let evals: Vec<f64> = history
        .iter()
        .filter_map(|row| row.get(task).copied().flatten())
        .collect();
    let (last, earlier) = evals.split_last()?;
    let best = earlier.iter().copied().reduce(f64::max)?;
    Some(best - last)
}

/// Mean of the defined per-task forgetting values.
pub fn average_forgetting(per_task: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Global accuracy and mean training loss after one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPoint {
    pub task: usize,
    pub round: usize,
    pub global_accuracy: Option<f64>,
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_name: String,
    pub seed: u64,
    /// Original class ids introduced by each task.
    pub task_classes: Vec<Vec<usize>>,
    /// `accuracy[e][j]`: accuracy on task `j` after task `e` finished;
    /// `None` for tasks not yet introduced.
    pub accuracy: Vec<Vec<Option<f64>>>,
    /// Accuracy over all classes seen so far, per evaluation point.
    pub global_accuracy: Vec<Option<f64>>,
    pub forgetting: Vec<Option<f64>>,
    pub avg_forgetting: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub round_curves: Vec<RoundPoint>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

/// `{run_name}_seed{seed}.{ext}`
pub fn report_file_name(run_name: &str, seed: u64, format: ReportFormat) -> String {
    format!("{run_name}_seed{seed}.{}", format.extension())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunReport {
    pub fn final_global_accuracy(&self) -> Option<f64> {
        self.global_accuracy.last().copied().flatten()
    }

    /// Fills the forgetting columns from the accuracy history.
    pub fn finalize(&mut self) {
        let tasks = self.task_classes.len();
        self.forgetting = (0..tasks).map(|j| forgetting(&self.accuracy, j)).collect();
        self.avg_forgetting = average_forgetting(&self.forgetting);
    }

    /// CSV rows: one `eval_point,task,accuracy` line per (evaluation, task)
    /// pair with 1-based indices, then `global_accuracy,<eval_point>,v` per
    /// evaluation, `forgetting_task_<j>,<j>,v` per task with a defined
    /// forgetting value, and a final `avg_forgetting,,v`. Missing values are
    /// empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |source| Error::Csv {
            path: "<memory>".into(),
            source,
        };
        w.write_record(["eval_point", "task", "accuracy"]).map_err(to_err)?;
        for (e, row) in self.accuracy.iter().enumerate() {
            for (j, acc) in row.iter().enumerate() {
                w.write_record([(e + 1).to_string(), (j + 1).to_string(), fmt_opt(*acc)])
                    .map_err(to_err)?;
            }
        }
        for (e, acc) in self.global_accuracy.iter().enumerate() {
            w.write_record(["global_accuracy".to_string(), (e + 1).to_string(), fmt_opt(*acc)])
                .map_err(to_err)?;
        }
        for (j, f) in self.forgetting.iter().enumerate() {
            if let Some(f) = f {
                w.write_record([format!("forgetting_task_{}", j + 1), (j + 1).to_string(), f.to_string()])
                    .map_err(to_err)?;
            }
        }
        w.write_record(["avg_forgetting".to_string(), String::new(), fmt_opt(self.avg_forgetting)])
            .map_err(to_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: "<memory>".into(),
            source,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<memory>".into(),
            source,
        })
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Writes `report` to `path` in the requested format.
pub fn write_report(report: &RunReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Json => {
            let mut s = report.to_json()?;
            s.push('\n');
            s
        }
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

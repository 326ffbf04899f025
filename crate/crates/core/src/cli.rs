//! Multi-seed runs, parameter sweeps and their console/CSV output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::federation;
use crate::metrics::{self, ReportFormat, RunReport};

/// Process exit codes of the `fedclass` binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    Config = 1,
    Runtime = 2,
    CheckFailed = 3,
}

impl ExitCode {
    pub fn for_error(e: &Error) -> Self {
        match e {
            Error::Config(_) => ExitCode::Config,
            _ => ExitCode::Runtime,
        }
    }
}

/// Runs every configured seed in order.
pub fn run_seeds(config: &ExperimentConfig) -> Result<Vec<RunReport>> {
    config.validate()?;
    config
        .seeds
        .iter()
        .map(|&seed| {
            log::info!("{}: seed {seed}", config.run_name);
            federation::run_experiment(config, seed)
        })
        .collect()
}

/// Writes one JSON and one CSV report per seed plus `{run_name}_summary.csv`
/// into `dir`, returning the paths written.
pub fn write_outputs(dir: &Path, reports: &[RunReport]) -> Result<Vec<PathBuf>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Validation("no reports to write".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for r in reports {
        for format in [ReportFormat::Json, ReportFormat::Csv] {
            let path = dir.join(metrics::report_file_name(&r.run_name, r.seed, format));
            metrics::write_report(r, &path, format)?;
            written.push(path);
        }
    }
    let path = dir.join(format!("{}_summary.csv", first.run_name));
    std::fs::write(&path, summary_csv(reports)?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Mean and sample standard deviation of the defined values.
pub fn mean_std(values: &[Option<f64>]) -> Option<(f64, f64)> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

/// Columns of the seed summary: final per-task accuracy, per-task
/// forgetting (all but the last task), global accuracy, average forgetting.
fn summary_columns(reports: &[RunReport]) -> Vec<(String, Vec<Option<f64>>)> {
    let tasks = reports.first().map_or(0, |r| r.task_classes.len());
    let mut cols = Vec::new();
    for j in 0..tasks {
        cols.push((
            format!("T{} acc", j + 1),
            reports
                .iter()
                .map(|r| r.accuracy.last().and_then(|row| row.get(j).copied().flatten()))
                .collect(),
        ));
    }
    for j in 1..tasks {
        cols.push((
            format!("T{} forg", j),
            reports
                .iter()
                .map(|r| r.forgetting.get(j - 1).copied().flatten())
                .collect(),
        ));
    }
    cols.push((
        "global acc".into(),
        reports.iter().map(|r| r.final_global_accuracy()).collect(),
    ));
    cols.push((
        "avg forg".into(),
        reports.iter().map(|r| r.avg_forgetting).collect(),
    ));
    cols
}

fn fmt_mean_std(v: Option<(f64, f64)>) -> String {
    match v {
        Some((m, s)) => format!("{m:.2} ± {s:.2}"),
        None => "-".into(),
    }
}

/// Console table: one column per metric, mean ± std over seeds.
pub fn summary_table(reports: &[RunReport]) -> String {
    let cols = summary_columns(reports);
    let cells: Vec<(String, String)> = cols
        .iter()
        .map(|(h, v)| (h.clone(), fmt_mean_std(mean_std(v))))
        .collect();
    let widths: Vec<usize> = cells
        .iter()
        .map(|(h, c)| h.chars().count().max(c.chars().count()))
        .collect();
    let mode = reports
        .first()
        .map(|r| r.config.mode.to_string())
        .unwrap_or_default();
    let mut out = String::new();
    let header: Vec<String> = cells
        .iter()
        .zip(&widths)
        .map(|((h, _), w)| format!("{h:>w$}"))
        .collect();
    let row: Vec<String> = cells
        .iter()
        .zip(&widths)
        .map(|((_, c), w)| format!("{c:>w$}"))
        .collect();
    let _ = writeln!(out, "{:<20} | {}", "method", header.join(" | "));
    let _ = writeln!(out, "{:<20} | {}", mode, row.join(" | "));
    let _ = writeln!(out, "({} seed(s))", reports.len());
    out
}

/// `metric,mean,std` rows for the seed summary.
pub fn summary_csv(reports: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |source| Error::Csv {
        path: "<memory>".into(),
        source,
    };
    w.write_record(["metric", "mean", "std", "seeds"]).map_err(to_err)?;
    for (name, values) in summary_columns(reports) {
        let (m, s) = match mean_std(&values) {
            Some((m, s)) => (m.to_string(), s.to_string()),
            None => (String::new(), String::new()),
        };
        let n = values.iter().flatten().count().to_string();
        w.write_record([name, m, s, n]).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Beta,
    Memory,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepParam::Beta),
            "m" | "memory" => Ok(SweepParam::Memory),
            _ => Err(Error::Config(vec![format!(
                "cannot sweep `{s}`; expected `beta` or `m`"
            )])),
        }
    }
}

/// One sweep setting and its row label.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepValue {
    pub value: f64,
    pub label: String,
}

/// Parses a comma list. Memory values may be written `k c` or `kc`,
/// meaning `k` times the total class count, and are labelled
/// `k|C^new ∪ C^old|` like plain multiples.
pub fn parse_sweep_values(param: SweepParam, text: &str, classes: usize) -> Result<Vec<SweepValue>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for raw in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parsed = match param {
            SweepParam::Beta => raw
                .parse::<f64>()
                .ok()
                .filter(|b| *b >= 0.0 && b.is_finite())
                .map(|b| SweepValue {
                    value: b,
                    label: raw.to_string(),
                }),
            SweepParam::Memory => {
                let multiple = raw
                    .strip_suffix('c')
                    .map(|k| k.trim_end_matches(['*', '·', ' ']).parse::<usize>());
                match multiple {
                    Some(Ok(k)) => Some(SweepValue {
                        value: (k * classes) as f64,
                        label: memory_label(k * classes, classes),
                    }),
                    Some(Err(_)) => None,
                    None => raw.parse::<usize>().ok().map(|m| SweepValue {
                        value: m as f64,
                        label: memory_label(m, classes),
                    }),
                }
            }
        };
        match parsed {
            Some(v) => out.push(v),
            None => problems.push(format!("bad sweep value `{raw}`")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if out.is_empty() {
        return Err(Error::Validation("sweep needs at least one value".into()));
    }
    Ok(out)
}

fn memory_label(m: usize, classes: usize) -> String {
    if m > 0 && classes > 0 && m % classes == 0 {
        format!("{}|C^new ∪ C^old|", m / classes)
    } else {
        m.to_string()
    }
}

/// Seed-averaged outcome of one sweep setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub label: String,
    pub value: f64,
    pub global_accuracy: Option<f64>,
    pub avg_forgetting: Option<f64>,
    pub reports: Vec<RunReport>,
}

pub fn apply_sweep(config: &ExperimentConfig, param: SweepParam, value: f64) -> ExperimentConfig {
    let mut c = config.clone();
    match param {
        SweepParam::Beta => c.beta = value,
        SweepParam::Memory => c.memory = value as usize,
    }
    c
}

/// Runs every value over every configured seed.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[SweepValue]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Validation("sweep needs at least one value".into()));
    }
    config.validate()?;
    values
        .iter()
        .map(|v| {
            let reports = run_seeds(&apply_sweep(config, param, v.value))?;
            let global: Vec<_> = reports.iter().map(|r| r.final_global_accuracy()).collect();
            let forg: Vec<_> = reports.iter().map(|r| r.avg_forgetting).collect();
            Ok(SweepRow {
                label: v.label.clone(),
                value: v.value,
                global_accuracy: mean_std(&global).map(|x| x.0),
                avg_forgetting: mean_std(&forg).map(|x| x.0),
                reports,
            })
        })
        .collect()
}

/// Forgetting change against the first row: `"-"` for the first row,
/// otherwise `|reference - this|` with `↓` when forgetting dropped and `↑`
/// when it rose.
pub fn delta_column(rows: &[SweepRow]) -> Vec<String> {
    let reference = rows.first().and_then(|r| r.avg_forgetting);
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            if i == 0 {
                return "-".into();
            }
            match (reference, r.avg_forgetting) {
                (Some(a), Some(b)) => {
                    let d = a - b;
                    if d > 0.0 {
                        format!("{d:.2}↓")
                    } else if d < 0.0 {
                        format!("{:.2}↑", -d)
                    } else {
                        "0.00".into()
                    }
                }
                _ => "-".into(),
            }
        })
        .collect()
}

/// `param,value,global_accuracy,avg_forgetting,delta`
pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> Result<String> {
    let name = match param {
        SweepParam::Beta => "beta",
        SweepParam::Memory => "m",
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |source| Error::Csv {
        path: "<memory>".into(),
        source,
    };
    w.write_record([name, "value", "global_accuracy", "avg_forgetting", "delta"])
        .map_err(to_err)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (r, d) in rows.iter().zip(delta_column(rows)) {
        w.write_record([
            r.label.clone(),
            r.value.to_string(),
            fmt(r.global_accuracy),
            fmt(r.avg_forgetting),
            d,
        ])
        .map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Console rendering of a sweep.
pub fn sweep_table(param: SweepParam, rows: &[SweepRow]) -> String {
    let name = match param {
        SweepParam::Beta => "beta",
        SweepParam::Memory => "m",
    };
    let width = rows
        .iter()
        .map(|r| r.label.chars().count())
        .chain([name.len()])
        .max()
        .unwrap_or(0);
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let mut out = String::new();
    let _ = writeln!(out, "{name:>width$} | global acc | avg forg | delta");
    for (r, d) in rows.iter().zip(delta_column(rows)) {
        let _ = writeln!(
            out,
            "{:>width$} | {:>10} | {:>8} | {d}",
            r.label,
            fmt(r.global_accuracy),
            fmt(r.avg_forgetting)
        );
    }
    out
}

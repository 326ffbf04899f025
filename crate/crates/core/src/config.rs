//! Experiment configuration: defaults, flat `key = value` files and
//! validation that reports every violation at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, DistillMode};
use crate::error::{Error, Result};
use crate::federation::RoundPlan;
use crate::incremental::HeadInit;
use crate::tensor::KlDirection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_name: String,

    pub dataset: DatasetKind,
    /// Synthetic blobs: class count, samples per class, feature width and
    /// the distance between the closest pair of class means.
    pub classes: usize,
    pub per_class: usize,
    pub features: usize,
    pub separation: f64,
    pub idx_train_images: Option<PathBuf>,
    pub idx_train_labels: Option<PathBuf>,
    pub idx_test_images: Option<PathBuf>,
    pub idx_test_labels: Option<PathBuf>,
    /// Held-out share when no separate test files are given.
    pub test_fraction: f64,

    pub clients: usize,
    pub alpha: f64,
    pub tasks: Vec<usize>,
    pub permute_classes: bool,
    pub memory: usize,

    pub beta: f64,
    pub theta: f64,
    pub mode: DistillMode,
    pub kl_direction: KlDirection,
    pub detach_target: bool,
    pub kd_theta_squared: bool,
    /// Temper the student side of the KL as well as the target.
    pub tempered_student: bool,
    pub head_init: HeadInit,

    pub rounds_per_task: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub hidden_width: usize,

    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Record global accuracy and training loss after every round.
    pub round_curves: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_name: "fedclass".into(),
            dataset: DatasetKind::Synthetic,
            classes: 4,
            per_class: 500,
            features: 8,
            separation: 5.0,
            idx_train_images: None,
            idx_train_labels: None,
            idx_test_images: None,
            idx_test_labels: None,
            test_fraction: 0.2,
            clients: 5,
            alpha: 0.5,
            tasks: vec![2, 2],
            permute_classes: false,
            memory: 20,
            beta: 5.0,
            theta: 2.0,
            mode: DistillMode::FedclassAugmented,
            kl_direction: KlDirection::TargetFirst,
            detach_target: true,
            kd_theta_squared: false,
            tempered_student: true,
            head_init: HeadInit::Zero,
            rounds_per_task: 20,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            hidden_width: 64,
            seeds: vec![1],
            output_dir: PathBuf::from("out"),
            round_curves: false,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.trim_matches(|c| c == '{' || c == '}' || c == '[' || c == ']')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_num)
        .collect()
}

pub fn parse_head_init(v: &str) -> std::result::Result<HeadInit, String> {
    match v.split_once(':') {
        None if v == "zero" => Ok(HeadInit::Zero),
        None if v == "gaussian" => Ok(HeadInit::Gaussian { std: 0.01 }),
        Some(("gaussian", std)) => Ok(HeadInit::Gaussian {
            std: parse_num(std)?,
        }),
        _ => Err(format!("expected `zero` or `gaussian[:std]`, got `{v}`")),
    }
}

pub fn parse_kl_direction(v: &str) -> std::result::Result<KlDirection, String> {
    match v {
        "target_first" => Ok(KlDirection::TargetFirst),
        "student_first" => Ok(KlDirection::StudentFirst),
        _ => Err(format!("expected `target_first` or `student_first`, got `{v}`")),
    }
}

impl ExperimentConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key.trim() {
            "run_name" => self.run_name = v.to_string(),
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "idx" => DatasetKind::Idx,
                    _ => return Err(format!("unknown dataset kind `{v}`")),
                }
            }
            "classes" => self.classes = parse_num(v)?,
            "per_class" => self.per_class = parse_num(v)?,
            "features" => self.features = parse_num(v)?,
            "separation" => self.separation = parse_num(v)?,
            "idx_train_images" => self.idx_train_images = opt_path(v),
            "idx_train_labels" => self.idx_train_labels = opt_path(v),
            "idx_test_images" => self.idx_test_images = opt_path(v),
            "idx_test_labels" => self.idx_test_labels = opt_path(v),
            "test_fraction" => self.test_fraction = parse_num(v)?,
            "clients" | "k" => self.clients = parse_num(v)?,
            "alpha" => self.alpha = parse_num(v)?,
            "tasks" => self.tasks = parse_list(v)?,
            "permute_classes" => self.permute_classes = parse_bool(v)?,
            "memory" | "m" => self.memory = parse_num(v)?,
            "beta" => self.beta = parse_num(v)?,
            "theta" => self.theta = parse_num(v)?,
            "mode" => self.mode = v.parse().map_err(|e: Error| e.to_string())?,
            "kl_direction" => self.kl_direction = parse_kl_direction(v)?,
            "detach_target" => self.detach_target = parse_bool(v)?,
            "kd_theta_squared" => self.kd_theta_squared = parse_bool(v)?,
            "tempered_student" => self.tempered_student = parse_bool(v)?,
            "head_init" => self.head_init = parse_head_init(v)?,
            "rounds_per_task" => self.rounds_per_task = parse_num(v)?,
            "local_epochs" => self.local_epochs = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "lr" => self.lr = parse_num(v)?,
            "momentum" => self.momentum = parse_num(v)?,
            "weight_decay" => self.weight_decay = parse_num(v)?,
            "hidden_width" => self.hidden_width = parse_num(v)?,
            "seeds" => self.seeds = parse_list(v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "round_curves" => self.round_curves = parse_bool(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut problems = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k, v) {
                        problems.push(format!("line {}: {}: {e}", n + 1, k.trim()));
                    }
                }
                None => problems.push(format!("line {}: expected `key = value`", n + 1)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every violated constraint, or `Ok` if there are none.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            p.push(format!("run_name `{}` must be a plain file stem", self.run_name));
        }
        match self.dataset {
            DatasetKind::Synthetic => {
                if self.classes < 2 {
                    p.push(format!("classes = {} (need >= 2)", self.classes));
                }
                if self.per_class < 1 {
                    p.push("per_class must be >= 1".into());
                }
                if self.features < 1 {
                    p.push("features must be >= 1".into());
                }
                if !(self.separation >= 0.0 && self.separation.is_finite()) {
                    p.push(format!("separation = {} (need finite >= 0)", self.separation));
                }
                let total: usize = self.tasks.iter().sum();
                if total != self.classes {
                    p.push(format!(
                        "tasks {:?} sum to {total}, but classes = {}",
                        self.tasks, self.classes
                    ));
                }
            }
            DatasetKind::Idx => {
                for (key, path) in [
                    ("idx_train_images", &self.idx_train_images),
                    ("idx_train_labels", &self.idx_train_labels),
                ] {
                    match path {
                        None => p.push(format!("{key} is required for dataset = idx")),
                        Some(path) if !path.is_file() => {
                            p.push(format!("{key}: {} does not exist", path.display()))
                        }
                        _ => {}
                    }
                }
                match (&self.idx_test_images, &self.idx_test_labels) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        for (key, path) in [("idx_test_images", a), ("idx_test_labels", b)] {
                            if !path.is_file() {
                                p.push(format!("{key}: {} does not exist", path.display()));
                            }
                        }
                    }
                    _ => p.push("idx_test_images and idx_test_labels go together".into()),
                }
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            p.push(format!("test_fraction = {} (need [0, 1))", self.test_fraction));
        }
        if self.clients < 1 {
            p.push("clients must be >= 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            p.push(format!("alpha = {} (need > 0)", self.alpha));
        }
        if self.tasks.is_empty() || self.tasks.contains(&0) {
            p.push(format!("tasks {:?}: need at least one task, each >= 1 class", self.tasks));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            p.push(format!("beta = {} (need >= 0)", self.beta));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            p.push(format!("theta = {} (need > 0)", self.theta));
        }
        if let HeadInit::Gaussian { std } = self.head_init {
            if !(std >= 0.0 && std.is_finite()) {
                p.push(format!("head_init std = {std} (need >= 0)"));
            }
        }
        if self.local_epochs < 1 {
            p.push("local_epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            p.push("batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            p.push(format!("lr = {} (need >= 0)", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("momentum = {} (need [0, 1))", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push(format!("weight_decay = {} (need >= 0)", self.weight_decay));
        }
        if self.hidden_width < 1 {
            p.push("hidden_width must be >= 1".into());
        }
        if self.seeds.is_empty() {
            p.push("seeds must list at least one seed".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            beta: self.beta,
            theta: self.theta,
            mode: self.mode,
            kl_direction: self.kl_direction,
            detach_target: self.detach_target,
            kd_theta_squared: self.kd_theta_squared,
            tempered_student: self.tempered_student,
        }
    }

    pub fn plan(&self) -> RoundPlan {
        RoundPlan {
            rounds_per_task: self.rounds_per_task,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
        }
    }
}

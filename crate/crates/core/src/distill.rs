//! New-class augmented self-distillation.
//!
//! The historical model only scores the `g` old classes. Its tempered scores
//! are rescaled by the mass the current model leaves for old classes, and the
//! current model's own tempered scores fill in the `h` new classes:
//!
//! ```text
//! z_j = s_j                              g <= j < g + h
//! z_j = q_j * (1 - sum_{c >= g} s_c)     0 <= j < g
//! ```
//!
//! with `q = softmax(hist_logits / theta)` and `s = softmax(curr_logits / theta)`.
//! The client objective is `CE + beta * KL` against `z`, averaged per sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, check_theta, softmax_raw, Batch, Gradients, KdTarget, KlDirection, LossSpec, Matrix,
    ModelParams, ObjectiveSpec, ScoreVector,
};

/// Old/new partition of the current output head: indices `0..old` are old
/// classes, `old..old + new` are the classes introduced by the current task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub old: usize,
    pub new: usize,
}

impl ClassSplit {
    pub fn new(old: usize, new: usize) -> Result<Self> {
        if new == 0 {
            return Err(Error::Validation(
                "a task must introduce at least one class".into(),
            ));
        }
        Ok(Self { old, new })
    }

    pub fn total(&self) -> usize {
        self.old + self.new
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// CE plus KL against the new-class augmented target.
    #[default]
    FedclassAugmented,
    /// CE plus KL against the historical model's tempered scores alone.
    PlainSelfDistill,
    /// CE only; the federated pipeline reduces to FedAvg with replay.
    CeOnly,
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedclass_augmented" | "fedclass" => Ok(Self::FedclassAugmented),
            "plain_self_distill" | "plain" => Ok(Self::PlainSelfDistill),
            "ce_only" | "fedavg" => Ok(Self::CeOnly),
            other => Err(Error::Parameter(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FedclassAugmented => "fedclass_augmented",
            Self::PlainSelfDistill => "plain_self_distill",
            Self::CeOnly => "ce_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub beta: f64,
    pub theta: f64,
    pub mode: DistillMode,
    pub kl_direction: KlDirection,
    /// Treat the distillation target as a constant during backpropagation.
    pub detach_target: bool,
    pub kd_theta_squared: bool,
    /// Temper the student scores inside the KL as well as the targets.
    pub tempered_student: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta: 5.0,
            theta: 2.0,
            mode: DistillMode::FedclassAugmented,
            kl_direction: KlDirection::TargetFirst,
            detach_target: true,
            kd_theta_squared: false,
            tempered_student: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_theta(self.theta)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// True when the objective carries a distillation term.
    pub fn distills(&self) -> bool {
        self.mode != DistillMode::CeOnly && self.beta != 0.0
    }
}

/// Augmentation on probability vectors: `q` over old classes, `s` over all.
pub(crate) fn augment_probs(q: &[f64], s: &[f64]) -> Vec<f64> {
    let g = q.len();
    let new_mass: f64 = s[g..].iter().sum();
    let remaining = (1.0 - new_mass).max(0.0);
    let mut z = Vec::with_capacity(s.len());
    z.extend(q.iter().map(|&qj| qj * remaining));
    z.extend_from_slice(&s[g..]);
    z
}

/// New-class augmented distillation target for one sample.
pub fn augment_scores(
    hist_logits: &[f64],
    curr_logits: &[f64],
    split: ClassSplit,
    theta: f64,
) -> Result<ScoreVector> {
    check_theta(theta)?;
    if hist_logits.len() != split.old || curr_logits.len() != split.total() {
        return Err(Error::Dimension(format!(
            "expected {} historical and {} current logits, got {} and {}",
            split.old,
            split.total(),
            hist_logits.len(),
            curr_logits.len()
        )));
    }
    let s = tensor::softmax_temp(curr_logits, theta)?;
    let q = if split.old == 0 {
        Vec::new()
    } else {
        tensor::softmax_temp(hist_logits, theta)?.into_inner()
    };
    Ok(ScoreVector::from_raw(augment_probs(&q, s.as_slice())))
}

/// Plain self-distillation target: the historical model's tempered scores.
/// Only defined when the historical head is as wide as the current one.
pub fn plain_self_distill_target(
    hist_logits: &[f64],
    theta: f64,
    current_dim: usize,
) -> Result<ScoreVector> {
    if hist_logits.len() != current_dim {
        return Err(Error::Dimension(format!(
            "historical head has {} classes, current head {current_dim}",
            hist_logits.len()
        )));
    }
    tensor::softmax_temp(hist_logits, theta)
}

/// Builds the loss the client minimizes on `batch`.
pub fn objective_loss(
    params: &ModelParams,
    old_params: Option<&ModelParams>,
    batch: &Batch,
    split: ClassSplit,
    cfg: &DistillConfig,
) -> Result<LossSpec> {
    cfg.validate()?;
    if params.output_dim() != split.total() {
        return Err(Error::Dimension(format!(
            "model head has {} classes, split expects {}",
            params.output_dim(),
            split.total()
        )));
    }
    if !cfg.distills() {
        return Ok(LossSpec::CrossEntropy);
    }
    let old = old_params.ok_or_else(|| {
        Error::State(format!("mode {} needs a historical model", cfg.mode))
    })?;
    let hist_logits = old.forward(&batch.inputs)?;
    let n = batch.len();
    let classes = split.total();

    let target = match cfg.mode {
        DistillMode::FedclassAugmented => {
            if old.output_dim() != split.old {
                return Err(Error::Dimension(format!(
                    "historical head has {} classes, split expects {} old classes",
                    old.output_dim(),
                    split.old
                )));
            }
            if cfg.detach_target {
                let curr_logits = params.forward(&batch.inputs)?;
                let mut z = Matrix::zeros(n, classes);
                for i in 0..n {
                    let zi = augment_scores(hist_logits.row(i), curr_logits.row(i), split, cfg.theta)?;
                    z.row_mut(i).copy_from_slice(zi.as_slice());
                }
                KdTarget::Fixed(z)
            } else {
                let mut q = Matrix::zeros(n, split.old);
                for i in 0..n {
                    q.row_mut(i)
                        .copy_from_slice(&softmax_raw(hist_logits.row(i), cfg.theta));
                }
                KdTarget::LiveAugmented { hist_probs: q }
            }
        }
        DistillMode::PlainSelfDistill => {
            let mut t = Matrix::zeros(n, classes);
            for i in 0..n {
                let ti = plain_self_distill_target(hist_logits.row(i), cfg.theta, classes)?;
                t.row_mut(i).copy_from_slice(ti.as_slice());
            }
            KdTarget::Fixed(t)
        }
        DistillMode::CeOnly => unreachable!("handled by distills()"),
    };

    Ok(LossSpec::Objective(ObjectiveSpec {
        ce_weight: 1.0,
        kd_weight: cfg.beta,
        theta: cfg.theta,
        direction: cfg.kl_direction,
        theta_squared: cfg.kd_theta_squared,
        tempered_student: cfg.tempered_student,
        target,
    }))
}

/// Batch-mean `J_CE + beta * J_KD` and its gradient w.r.t. `params`.
pub fn client_objective(
    params: &ModelParams,
    old_params: Option<&ModelParams>,
    batch: &Batch,
    split: ClassSplit,
    cfg: &DistillConfig,
) -> Result<(f64, Gradients)> {
    let spec = objective_loss(params, old_params, batch, split, cfg)?;
    tensor::backward(params, batch, &spec)
}

/// Rebuilds the augmented target from the probability laws it rests on
/// instead of the closed form. `hist_old` is the historical model's score
/// over old classes; `current` is the current model's score over all classes.
///
/// New-class scores in the historical state are taken from the current
/// state. Each old class is then split by the law of total probability over
/// the event "the class is new" and its complement: the first branch
/// vanishes because an old class never lies in the new-class set, and the
/// second is the historical score conditioned on new classes being absent,
/// weighted by the probability of that absence.
pub fn theorem_oracle(hist_old: &ScoreVector, current: &ScoreVector) -> Result<ScoreVector> {
    let hist_old = ScoreVector::new(hist_old.as_slice().to_vec())?;
    let current = ScoreVector::new(current.as_slice().to_vec())?;
    let g = hist_old.len();
    if current.len() <= g {
        return Err(Error::Validation(format!(
            "current scores cover {} classes, need more than the {g} old ones",
            current.len()
        )));
    }
    let classes: Vec<usize> = (0..current.len()).collect();
    let new_set: Vec<usize> = classes[g..].to_vec();
    let is_new = |c: usize| new_set.contains(&c);

    let p_new_given_current = |u: usize| current[u];
    let p_new_given_hist = |u: usize| p_new_given_current(u);
    let p_new_set_given_hist: f64 = new_set.iter().map(|&u| p_new_given_hist(u)).sum();
    let p_not_new_given_hist = 1.0 - p_new_set_given_hist;

    // p({u} ∩ C_new | S_old) / p(C_new | S_old)
    let p_old_given_new = |u: usize| -> f64 {
        let joint: f64 = [u]
            .iter()
            .filter(|&&c| is_new(c))
            .map(|&c| p_new_given_hist(c))
            .sum();
        if p_new_set_given_hist > 0.0 {
            joint / p_new_set_given_hist
        } else {
            0.0
        }
    };
    let p_old_given_not_new = |u: usize| hist_old[u];

    let z = classes
        .iter()
        .map(|&u| {
            if is_new(u) {
                p_new_given_hist(u)
            } else {
                p_old_given_new(u) * p_new_set_given_hist
                    + p_old_given_not_new(u) * p_not_new_given_hist.max(0.0)
            }
        })
        .collect();
    Ok(ScoreVector::from_raw(z))
}

//! Dense double-precision numerics for a small ReLU classifier.
//!
//! Everything here is written with explicit loops in a fixed order so that
//! two runs on the same inputs produce bit-identical results. The network is
//! a plain MLP: affine layers with ReLU between them and raw logits at the
//! output. Gradients are analytic and are checked against central
//! differences by [`finite_diff_check`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill;
use crate::error::{Error, Result};

/// Probability floor applied before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the sum of a [`ScoreVector`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot stack {} columns on {} columns",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }
}

/// One affine layer: `out = W x + b` with `W` shaped `[out x in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn affine(&self, inputs: &Matrix) -> Matrix {
        let (out, inp) = self.weight.shape();
        let mut z = Matrix::zeros(inputs.rows(), out);
        for (n, x) in inputs.iter_rows().enumerate() {
            let zr = z.row_mut(n);
            for o in 0..out {
                let w = self.weight.row(o);
                let mut acc = self.bias[o];
                for i in 0..inp {
                    acc += w[i] * x[i];
                }
                zr[o] = acc;
            }
        }
        z
    }
}

/// Parameters of a feed-forward classifier. Also used as the container for
/// gradients and optimizer velocity, which share its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

/// Gradients carry the same shape as the parameters they belong to.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("a model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i}: bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// All-zero parameters for the given layer widths, e.g. `[in, hidden, out]`.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Dimension(
                "need at least input and output widths".into(),
            ));
        }
        Self::new(dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect())
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))` for both
    /// weights and biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.input_dim().max(1) as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut layer.bias {
                *b = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    pub(crate) fn check_same_shape(&self, other: &ModelParams, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: parameter shapes {:?} and {:?} differ",
                self.shape_signature(),
                other.shape_signature()
            )))
        }
    }

    pub fn shape_signature(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Every scalar in a fixed order: layer by layer, weights then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    /// Mutable access to the `idx`-th scalar in [`values`](Self::values) order.
    pub fn value_mut(&mut self, idx: usize) -> Option<&mut f64> {
        self.values_mut().nth(idx)
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Raw logits for every row of `inputs`.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(inputs)?.logits)
    }

    fn forward_cached(&self, inputs: &Matrix) -> Result<ForwardCache> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&current);
            activations.push(current);
            if i < last {
                for v in z.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            current = z;
        }
        Ok(ForwardCache {
            activations,
            logits: current,
        })
    }

    /// Predicted class per row, ties broken towards the lower index.
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(inputs)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }
}

struct ForwardCache {
    /// Input to each layer; entry 0 is the raw batch input, later entries are
    /// post-ReLU hidden activations.
    activations: Vec<Matrix>,
    logits: Matrix,
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Minibatch of inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::Validation("batch is empty".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    /// Validates entries in `[0, 1]` summing to one within [`SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("score vector is empty".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::Validation(format!(
                "score entry {i} = {p} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Validation(format!("scores sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for ScoreVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {theta}"
        )))
    }
}

/// Max-subtracted softmax of `logits / theta`, no validation.
pub(crate) fn softmax_raw(logits: &[f64], theta: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| ((l - max) / theta).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Tempered softmax `exp(l_j / theta) / sum_c exp(l_c / theta)`.
pub fn softmax_temp(logits: &[f64], theta: f64) -> Result<ScoreVector> {
    check_theta(theta)?;
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Parameter("logits must be finite".into()));
    }
    Ok(ScoreVector(softmax_raw(logits, theta)))
}

/// `-ln(scores[label])` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(scores: &ScoreVector, label: usize) -> Result<f64> {
    let p = scores.0.get(label).copied().ok_or_else(|| {
        Error::Index(format!(
            "label {label} out of range for {} classes",
            scores.len()
        ))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// `sum_j a_j ln(a_j / b_j)` with `0 ln 0 = 0` and `b` floored.
pub(crate) fn kl_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(&ai, _)| ai > 0.0)
        .map(|(&ai, &bi)| ai * (ai.ln() - bi.max(PROB_FLOOR).ln()))
        .sum()
}

/// `D_KL(target || student)`.
pub fn kl_divergence(target: &ScoreVector, student: &ScoreVector) -> Result<f64> {
    if target.len() != student.len() {
        return Err(Error::Dimension(format!(
            "KL between {} and {} classes",
            target.len(),
            student.len()
        )));
    }
    // Rounding can push the sum a hair below zero when the vectors coincide.
    Ok(kl_raw(&target.0, &student.0).max(0.0))
}

/// Which distribution occupies the reference slot of the distillation KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target || student)`, equivalent in gradient to soft-label CE.
    #[default]
    TargetFirst,
    /// `KL(student || target)`.
    StudentFirst,
}

/// Distillation target for each sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum KdTarget {
    /// Constant per-sample distributions, one row per sample.
    Fixed(Matrix),
    /// New-class augmented target rebuilt from the live student scores, so
    /// gradients also flow through the target. Rows hold the historical
    /// model's tempered probabilities over the `g` old classes.
    LiveAugmented { hist_probs: Matrix },
}

/// Weighted sum of hard-label CE and a tempered distillation KL.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub ce_weight: f64,
    pub kd_weight: f64,
    pub theta: f64,
    pub direction: KlDirection,
    /// Multiply the KD term by `theta^2`.
    pub theta_squared: bool,
    /// Divide the student logits by `theta` inside the KL. When false the
    /// student side uses the plain softmax while targets stay tempered.
    pub tempered_student: bool,
    pub target: KdTarget,
}

/// Scalar loss whose gradient [`backward`] computes. Every loss is averaged
/// over the batch.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    CrossEntropy,
    /// `0.5 * ||logits - targets||^2` per sample.
    SquaredError { targets: Matrix },
    Objective(ObjectiveSpec),
}

impl LossSpec {
    fn validate(&self, batch: usize, classes: usize) -> Result<()> {
        match self {
            LossSpec::CrossEntropy => Ok(()),
            LossSpec::SquaredError { targets } => {
                if targets.shape() != (batch, classes) {
                    return Err(Error::Parameter(format!(
                        "squared-error targets {:?}, logits ({batch}, {classes})",
                        targets.shape()
                    )));
                }
                Ok(())
            }
            LossSpec::Objective(spec) => {
                check_theta(spec.theta)?;
                if !(spec.ce_weight >= 0.0 && spec.kd_weight >= 0.0) {
                    return Err(Error::Parameter(
                        "objective weights must be non-negative".into(),
                    ));
                }
                match &spec.target {
                    KdTarget::Fixed(t) if t.shape() != (batch, classes) => {
                        Err(Error::Parameter(format!(
                            "distillation targets {:?}, logits ({batch}, {classes})",
                            t.shape()
                        )))
                    }
                    KdTarget::LiveAugmented { hist_probs }
                        if hist_probs.rows() != batch || hist_probs.cols() >= classes =>
                    {
                        Err(Error::Parameter(format!(
                            "historical scores {:?} incompatible with logits ({batch}, {classes})",
                            hist_probs.shape()
                        )))
                    }
                    _ => Ok(()),
                }
            }
        }
    }

    /// Mean loss over the batch and its gradient w.r.t. the logits.
    pub(crate) fn evaluate(&self, logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        let (n, classes) = logits.shape();
        self.validate(n, classes)?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {classes} outputs"
            )));
        }
        let mut total = 0.0;
        let mut grad = Matrix::zeros(n, classes);
        for i in 0..n {
            let u = logits.row(i);
            let g = grad.row_mut(i);
            total += match self {
                LossSpec::CrossEntropy => ce_term(u, labels[i], 1.0, g),
                LossSpec::SquaredError { targets } => {
                    let t = targets.row(i);
                    let mut l = 0.0;
                    for j in 0..classes {
                        let d = u[j] - t[j];
                        l += 0.5 * d * d;
                        g[j] += d;
                    }
                    l
                }
                LossSpec::Objective(spec) => {
                    let mut l = 0.0;
                    if spec.ce_weight != 0.0 {
                        l += ce_term(u, labels[i], spec.ce_weight, g);
                    }
                    if spec.kd_weight != 0.0 {
                        l += kd_term(u, i, spec, g);
                    }
                    l
                }
            };
        }
        let scale = 1.0 / n as f64;
        for v in grad.as_mut_slice() {
            *v *= scale;
        }
        Ok((total * scale, grad))
    }
}

fn ce_term(u: &[f64], label: usize, weight: f64, grad: &mut [f64]) -> f64 {
    let p = softmax_raw(u, 1.0);
    for (j, pj) in p.iter().enumerate() {
        let onehot = if j == label { 1.0 } else { 0.0 };
        grad[j] += weight * (pj - onehot);
    }
    weight * -p[label].max(PROB_FLOOR).ln()
}

fn kd_term(u: &[f64], row: usize, spec: &ObjectiveSpec, grad: &mut [f64]) -> f64 {
    let theta = spec.theta;
    let student_theta = if spec.tempered_student { theta } else { 1.0 };
    let p = softmax_raw(u, student_theta);
    let classes = p.len();
    let scale = if spec.theta_squared {
        spec.kd_weight * theta * theta
    } else {
        spec.kd_weight
    };

    // Live targets are built from the tempered scores `s`, which equal `p`
    // unless the student side is untempered.
    let (target, live) = match &spec.target {
        KdTarget::Fixed(t) => (t.row(row).to_vec(), None),
        KdTarget::LiveAugmented { hist_probs } => {
            let q = hist_probs.row(row);
            let s = if spec.tempered_student {
                p.clone()
            } else {
                softmax_raw(u, theta)
            };
            (distill::augment_probs(q, &s), Some((q, s)))
        }
    };

    // dL/dp and dL/dz for the generic KL(a || b) = sum a ln a - a ln b.
    let mut d_p = vec![0.0; classes];
    let mut d_z = vec![0.0; classes];
    let loss = match spec.direction {
        KlDirection::TargetFirst => {
            for j in 0..classes {
                let pj = p[j].max(PROB_FLOOR);
                if p[j] >= PROB_FLOOR {
                    d_p[j] = -target[j] / pj;
                }
                if target[j] > 0.0 {
                    d_z[j] = target[j].ln() + 1.0 - pj.ln();
                }
            }
            kl_raw(&target, &p)
        }
        KlDirection::StudentFirst => {
            for j in 0..classes {
                let zj = target[j].max(PROB_FLOOR);
                if p[j] > 0.0 {
                    d_p[j] = p[j].ln() + 1.0 - zj.ln();
                }
                if target[j] >= PROB_FLOOR {
                    d_z[j] = -p[j] / zj;
                }
            }
            kl_raw(&p, &target)
        }
    };

    softmax_backward(&p, &d_p, scale / student_theta, grad);
    if let Some((q, s)) = live {
        // z_new = s_new; z_old_j = q_j * (1 - sum_new s).
        let g = q.len();
        let through_old: f64 = (0..g).map(|j| q[j] * d_z[j]).sum();
        let mut d_s = vec![0.0; classes];
        for k in g..classes {
            d_s[k] = d_z[k] - through_old;
        }
        softmax_backward(&s, &d_s, scale / theta, grad);
    }
    scale * loss
}

/// Adds `scale * J^T d` to `grad`, where `J` is the Jacobian of the softmax
/// that produced `p`.
fn softmax_backward(p: &[f64], d: &[f64], scale: f64, grad: &mut [f64]) {
    let inner: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
    for k in 0..p.len() {
        grad[k] += scale * p[k] * (d[k] - inner);
    }
}

/// Mean batch loss without gradients.
pub fn loss(params: &ModelParams, batch: &Batch, spec: &LossSpec) -> Result<f64> {
    let logits = params.forward(&batch.inputs)?;
    Ok(spec.evaluate(&logits, &batch.labels)?.0)
}

/// Mean batch loss and its exact gradient w.r.t. every parameter.
pub fn backward(params: &ModelParams, batch: &Batch, spec: &LossSpec) -> Result<(f64, Gradients)> {
    let cache = params.forward_cached(&batch.inputs)?;
    let (loss, mut delta) = spec.evaluate(&cache.logits, &batch.labels)?;
    let mut grads = params.zeros_like();

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = &cache.activations[li];
        let (out, inp) = layer.weight.shape();
        let gl = &mut grads.layers[li];
        for n in 0..input.rows() {
            let d = delta.row(n);
            let x = input.row(n);
            for o in 0..out {
                let dn = d[o];
                if dn == 0.0 {
                    continue;
                }
                gl.bias[o] += dn;
                let gw = gl.weight.row_mut(o);
                for i in 0..inp {
                    gw[i] += dn * x[i];
                }
            }
        }
        if li == 0 {
            break;
        }
        // Propagate to the previous layer's post-ReLU output; the ReLU mask is
        // read off that output since relu(z) > 0 iff z > 0.
        let mut prev = Matrix::zeros(input.rows(), inp);
        for n in 0..input.rows() {
            let d = delta.row(n);
            let x = input.row(n);
            let pr = prev.row_mut(n);
            for o in 0..out {
                let dn = d[o];
                if dn == 0.0 {
                    continue;
                }
                let w = layer.weight.row(o);
                for i in 0..inp {
                    pr[i] += dn * w[i];
                }
            }
            for i in 0..inp {
                if x[i] <= 0.0 {
                    pr[i] = 0.0;
                }
            }
        }
        delta = prev;
    }
    Ok((loss, grads))
}

/// SGD with momentum and coupled weight decay:
/// `v <- momentum * v + (grad + weight_decay * param)`, `param <- param - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, params: &ModelParams) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {lr} must be >= 0")));
        }
        if !(momentum >= 0.0 && momentum.is_finite() && weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Parameter(
                "momentum and weight decay must be non-negative".into(),
            ));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        })
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }

    /// Zeroes the velocity and adopts the shape of `params`.
    pub fn reset(&mut self, params: &ModelParams) {
        self.velocity = params.zeros_like();
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        params.check_same_shape(grads, "sgd_step gradients")?;
        params.check_same_shape(&self.velocity, "sgd_step velocity")?;
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for ((w, g), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(self.velocity.values_mut())
        {
            *v = mu * *v + (g + wd * *w);
            *w -= lr * *v;
        }
        Ok(())
    }
}

/// One optimizer step on `params`.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    opt.step(params, grads)
}

/// Worst relative error between [`backward`] and central differences, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    params: &ModelParams,
    batch: &Batch,
    spec: &LossSpec,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("step {eps} must be positive")));
    }
    let (_, analytic) = backward(params, batch, spec)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (idx, &a) in analytic.values().enumerate() {
        let orig = *probe.value_mut(idx).expect("index within parameter count");
        *probe.value_mut(idx).unwrap() = orig + eps;
        let up = loss(&probe, batch, spec)?;
        *probe.value_mut(idx).unwrap() = orig - eps;
        let down = loss(&probe, batch, spec)?;
        *probe.value_mut(idx).unwrap() = orig;
        let numeric = (up - down) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Row-wise accumulator used when materialising subsets.
pub(crate) struct RowBuilder {
    m: Matrix,
}

impl RowBuilder {
    pub(crate) fn new(cols: usize) -> Self {
        Self {
            m: Matrix::zeros(0, cols),
        }
    }

    pub(crate) fn push(&mut self, row: &[f64]) {
        self.m.push_row(row);
    }

    pub(crate) fn finish(self) -> Matrix {
        self.m
    }
}

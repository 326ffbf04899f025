//! Self-contained invariant and oracle suites behind `fedclass check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::{self, ClassSplit, DistillConfig};
use crate::error::Result;
use crate::federation;
use crate::tensor::{
    self, Batch, KdTarget, KlDirection, LossSpec, Matrix, ModelParams, ObjectiveSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_split(rng: &mut ChaCha8Rng) -> ClassSplit {
    ClassSplit {
        old: rng.random_range(1..=10),
        new: rng.random_range(1..=10),
    }
}

/// Augmented targets over `cases` random logit pairs: unit mass, entries in
/// `[0, 1]`, new-class entries equal to the current tempered softmax and
/// old-class ratios equal to the historical ones.
pub fn normalization(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mass_err, mut ratio_err): (f64, f64) = (0.0, 0.0);
    let mut out_of_range = 0;
    let mut new_mismatch = 0;
    for _ in 0..cases {
        let split = random_split(&mut rng);
        let theta = rng.random_range(0.25..8.0);
        let hist = random_logits(&mut rng, split.old, 10.0);
        let curr = random_logits(&mut rng, split.total(), 10.0);
        let z = distill::augment_scores(&hist, &curr, split, theta)?;
        let z = z.as_slice();
        let s = tensor::softmax_temp(&curr, theta)?;
        let q = tensor::softmax_temp(&hist, theta)?;

        mass_err = mass_err.max((z.iter().sum::<f64>() - 1.0).abs());
        out_of_range += z.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        new_mismatch += (split.old..split.total())
            .filter(|&j| z[j] != s[j])
            .count();
        // z_i / z_j == q_i / q_j, compared cross-multiplied
        for i in 0..split.old {
            for j in 0..split.old {
                let lhs = z[i] * q[j];
                let rhs = z[j] * q[i];
                let scale = lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
                ratio_err = ratio_err.max((lhs - rhs).abs() / scale);
            }
        }
    }
    let passed = mass_err <= 1e-9 && out_of_range == 0 && new_mismatch == 0 && ratio_err <= 1e-12;
    Ok(CheckResult::new(
        "augmented target normalization",
        passed,
        format!(
            "{cases} cases: max |sum-1| {mass_err:.2e}, {out_of_range} entries outside [0,1], \
             {new_mismatch} new-class mismatches, max old-ratio error {ratio_err:.2e}"
        ),
    ))
}

/// Augmented targets against their conditional-probability derivation.
pub fn theorem_equivalence(pairs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let split = random_split(&mut rng);
        let theta = rng.random_range(0.25..8.0);
        let hist = random_logits(&mut rng, split.old, 8.0);
        let curr = random_logits(&mut rng, split.total(), 8.0);
        let z = distill::augment_scores(&hist, &curr, split, theta)?;
        let oracle = distill::theorem_oracle(
            &tensor::softmax_temp(&hist, theta)?,
            &tensor::softmax_temp(&curr, theta)?,
        )?;
        for (a, b) in z.as_slice().iter().zip(oracle.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(CheckResult::new(
        "derivation equivalence",
        worst <= 1e-12,
        format!("{pairs} pairs: max |diff| {worst:.2e}"),
    ))
}

/// Objectives whose gradients are checked: CE alone, augmented KD alone and
/// `CE + beta * KD`, the latter two with the target rebuilt from the model
/// being differentiated and again with a constant target taken at `anchor`.
///
/// Anchor the constant target away from the point under test: taken at that
/// point it matches the new-class scores exactly, those gradient entries
/// vanish and a finite-difference comparison measures only rounding noise.
pub fn objective_suite(
    anchor: &ModelParams,
    old: &ModelParams,
    batch: &Batch,
    split: ClassSplit,
    beta: f64,
    theta: f64,
) -> Result<Vec<(&'static str, LossSpec)>> {
    let hist = old.forward(&batch.inputs)?;
    let curr = anchor.forward(&batch.inputs)?;
    let mut z = Matrix::zeros(batch.len(), split.total());
    let mut q = Matrix::zeros(batch.len(), split.old);
    for i in 0..batch.len() {
        let zi = distill::augment_scores(hist.row(i), curr.row(i), split, theta)?;
        z.row_mut(i).copy_from_slice(zi.as_slice());
        q.row_mut(i)
            .copy_from_slice(tensor::softmax_temp(hist.row(i), theta)?.as_slice());
    }
    let objective = |ce_weight, kd_weight, target| {
        LossSpec::Objective(ObjectiveSpec {
            ce_weight,
            kd_weight,
            theta,
            direction: KlDirection::TargetFirst,
            theta_squared: false,
            tempered_student: DistillConfig::default().tempered_student,
            target,
        })
    };
    let live = || KdTarget::LiveAugmented { hist_probs: q.clone() };
    let fixed = || KdTarget::Fixed(z.clone());
    Ok(vec![
        ("cross-entropy", LossSpec::CrossEntropy),
        ("augmented distillation", objective(0.0, 1.0, live())),
        ("combined objective", objective(1.0, beta, live())),
        ("augmented distillation, constant target", objective(0.0, 1.0, fixed())),
        ("combined objective, constant target", objective(1.0, beta, fixed())),
    ])
}

/// Analytic gradients of a width-64 MLP on a batch of 32 against central
/// differences.
pub fn gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = ClassSplit { old: 2, new: 2 };
    let features = 8;
    let params = ModelParams::init(&[features, 64, split.total()], &mut rng)?;
    let old = ModelParams::init(&[features, 64, split.old], &mut rng)?;
    let mut anchor = params.clone();
    for v in anchor.values_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let inputs: Vec<f64> = (0..32 * features).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..32).map(|_| rng.random_range(0..split.total())).collect();
    let batch = Batch::new(Matrix::from_vec(32, features, inputs)?, labels)?;

    let mut out = Vec::new();
    for (name, spec) in objective_suite(&anchor, &old, &batch, split, 5.0, 2.0)? {
        let err = tensor::finite_diff_check(&params, &batch, &spec, 1e-5)?;
        out.push(CheckResult::new(
            name,
            err < 1e-4,
            format!("max relative error {err:.2e}"),
        ));
    }
    Ok(out)
}

/// Weighted-mean identities of server aggregation.
pub fn aggregation(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scalar = |v: f64| -> Result<ModelParams> {
        let mut m = ModelParams::zeros(&[1, 1])?;
        m.layers_mut()[0].weight.set(0, 0, v);
        Ok(m)
    };
    let value = |m: &ModelParams| m.layers()[0].weight.get(0, 0);
    let mut failures = Vec::new();

    let equal = federation::aggregate(&[scalar(0.0)?, scalar(4.0)?], &[5, 5])?;
    if (value(&equal) - 2.0).abs() > 1e-12 {
        failures.push(format!("equal weights gave {}", value(&equal)));
    }
    let weighted = federation::aggregate(&[scalar(0.0)?, scalar(4.0)?], &[1, 3])?;
    if (value(&weighted) - 3.0).abs() > 1e-12 {
        failures.push(format!("sizes [1,3] gave {}", value(&weighted)));
    }
    let model = ModelParams::init(&[5, 7, 3], &mut rng)?;
    if federation::aggregate(std::slice::from_ref(&model), &[17])? != model {
        failures.push("single client changed".into());
    }
    let copies = vec![model.clone(); 4];
    let same = federation::aggregate(&copies, &[3, 1, 4, 1])?;
    let drift = same.max_abs_diff(&model)?;
    if drift > 1e-15 {
        failures.push(format!("identical models drifted by {drift:.2e}"));
    }
    let weights = federation::aggregation_weights(&[2, 7, 1])?;
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        failures.push(format!("weights {weights:?} do not sum to 1"));
    }
    if federation::aggregate(&[], &[]).is_ok() {
        failures.push("empty input accepted".into());
    }
    let other = ModelParams::init(&[5, 6, 3], &mut rng)?;
    if federation::aggregate(&[model, other], &[1, 1]).is_ok() {
        failures.push("shape mismatch accepted".into());
    }
    Ok(CheckResult::new(
        "aggregation identities",
        failures.is_empty(),
        if failures.is_empty() {
            "weighted mean, identity and error cases hold".into()
        } else {
            failures.join("; ")
        },
    ))
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = vec![normalization(1000, seed)?, theorem_equivalence(10_000, seed)?];
    out.extend(gradients(seed)?);
    out.push(aggregation(seed)?);
    Ok(out)
}

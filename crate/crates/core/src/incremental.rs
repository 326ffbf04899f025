//! Class-incremental bookkeeping: task schedules, head extension, the
//! historical snapshot and the per-client exemplar memory.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::ClassSplit;
use crate::error::{Error, Result};
use crate::tensor::ModelParams;

/// Ordered tasks with pairwise disjoint class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn tasks(&self) -> &[Vec<usize>] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(Vec::len).collect()
    }

    /// Classes in the order they are introduced.
    pub fn class_order(&self) -> Vec<usize> {
        self.tasks.iter().flatten().copied().collect()
    }

    /// `map[class] = output index`, so that each task's classes occupy a
    /// contiguous block of the head right after the classes of earlier tasks.
    pub fn label_map(&self) -> Vec<usize> {
        let order = self.class_order();
        let mut map = vec![0; order.len()];
        for (pos, &c) in order.iter().enumerate() {
            map[c] = pos;
        }
        map
    }

    /// Old/new split of the head while training task `t` (0-based).
    pub fn split(&self, t: usize) -> Result<ClassSplit> {
        let task = self
            .tasks
            .get(t)
            .ok_or_else(|| Error::Index(format!("task {t} of {}", self.tasks.len())))?;
        let old = self.tasks[..t].iter().map(Vec::len).sum();
        ClassSplit::new(old, task.len())
    }

    /// Output indices covered by task `t` after relabelling with [`label_map`](Self::label_map).
    pub fn output_range(&self, t: usize) -> std::ops::Range<usize> {
        let start: usize = self.tasks[..t].iter().map(Vec::len).sum();
        start..start + self.tasks[t].len()
    }
}

/// Assigns classes to tasks. Without a seed, classes go to tasks in
/// ascending index order; with one, the class order is shuffled first.
pub fn build_schedule(
    class_count: usize,
    split_sizes: &[usize],
    permutation_seed: Option<u64>,
) -> Result<TaskSchedule> {
    if split_sizes.is_empty() || split_sizes.contains(&0) {
        return Err(Error::Validation(format!(
            "task sizes {split_sizes:?} must be non-empty and each at least 1"
        )));
    }
    let total: usize = split_sizes.iter().sum();
    if total != class_count {
        return Err(Error::Validation(format!(
            "task sizes {split_sizes:?} sum to {total}, dataset has {class_count} classes"
        )));
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    if let Some(seed) = permutation_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut tasks = Vec::with_capacity(split_sizes.len());
    let mut start = 0;
    for &n in split_sizes {
        tasks.push(order[start..start + n].to_vec());
        start += n;
    }
    Ok(TaskSchedule { tasks })
}

/// Initialization for rows added to the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadInit {
    #[default]
    Zero,
    Gaussian { std: f64 },
}

/// Adds `new_classes` output rows; existing rows are copied bit for bit.
pub fn extend_head(
    params: &ModelParams,
    new_classes: usize,
    init: HeadInit,
    seed: u64,
) -> Result<ModelParams> {
    if new_classes == 0 {
        return Err(Error::Validation("head extension needs at least one class".into()));
    }
    let mut layers = params.layers().to_vec();
    let head = layers.last_mut().expect("models have at least one layer");
    let (out, inp) = head.weight.shape();
    let mut weight = head.weight.as_slice().to_vec();
    let mut bias = head.bias.clone();
    match init {
        HeadInit::Zero => {
            weight.resize((out + new_classes) * inp, 0.0);
            bias.resize(out + new_classes, 0.0);
        }
        HeadInit::Gaussian { std } => {
            let normal = Normal::new(0.0, std)
                .map_err(|e| Error::Parameter(format!("head init std {std}: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            weight.extend((0..new_classes * inp).map(|_| normal.sample(&mut rng)));
            bias.resize(out + new_classes, 0.0);
        }
    }
    head.weight = crate::tensor::Matrix::from_vec(out + new_classes, inp, weight)?;
    head.bias = bias;
    ModelParams::new(layers)
}

/// Independent copy of the live model, used as the distillation teacher.
pub fn snapshot_old(params: &ModelParams) -> ModelParams {
    params.clone()
}

/// Replay buffer of samples from completed tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarMemory {
    capacity: usize,
    samples: Dataset,
}

impl ExemplarMemory {
    pub fn new(capacity: usize, features: usize, class_count: usize) -> Self {
        Self {
            capacity,
            samples: Dataset::empty(features, class_count),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn samples(&self) -> &Dataset {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Per-class quotas filling `m` slots round-robin over classes in ascending
/// index order, skipping classes that run out of samples. When every class
/// has enough, each gets `m / classes` and the first `m % classes` one more.
fn balanced_quotas(available: &[usize], m: usize) -> Vec<usize> {
    let mut quotas = vec![0; available.len()];
    let supply: usize = available.iter().sum();
    let mut left = m.min(supply);
    while left > 0 {
        for (q, &avail) in quotas.iter_mut().zip(available) {
            if left == 0 {
                break;
            }
            if *q < avail {
                *q += 1;
                left -= 1;
            }
        }
    }
    quotas
}

/// Rebuilds the memory as a class-balanced uniform random subset of
/// `memory ∪ prior_data` holding `min(m, available)` samples.
pub fn update_memory(
    memory: &ExemplarMemory,
    prior_data: &Dataset,
    m: usize,
    seed: u64,
) -> Result<ExemplarMemory> {
    let pool = if memory.samples.is_empty() {
        prior_data.clone()
    } else {
        memory.samples.concat(prior_data)?
    };
    if m == 0 || pool.is_empty() {
        return Ok(ExemplarMemory {
            capacity: m,
            samples: Dataset::empty(pool.features(), pool.class_count()),
        });
    }
    let classes: Vec<usize> = pool
        .class_counts()
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(c, _)| c)
        .collect();
    let per_class: Vec<Vec<usize>> = classes.iter().map(|&c| pool.indices_of(c)).collect();
    let available: Vec<usize> = per_class.iter().map(Vec::len).collect();
    let quotas = balanced_quotas(&available, m);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(m);
    for (mut idx, quota) in per_class.into_iter().zip(quotas) {
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..quota]);
    }
    Ok(ExemplarMemory {
        capacity: m,
        samples: pool.subset(&keep),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::tensor::{softmax_temp, sgd_step, backward, LossSpec, Matrix, OptimizerState};
    use rand::Rng;

    #[test]
    fn schedules_from_sizes() {
        let s = build_schedule(10, &[5, 5], None).unwrap();
        assert_eq!(s.tasks(), &[vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
        let s = build_schedule(10, &[4, 3, 3], None).unwrap();
        assert_eq!(s.sizes(), vec![4, 3, 3]);
        assert_eq!(s.split(2).unwrap(), ClassSplit::new(7, 3).unwrap());
        assert_eq!(s.output_range(1), 4..7);
        let s = build_schedule(4, &[4], None).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.split(0).unwrap(), ClassSplit::new(0, 4).unwrap());
    }

    #[test]
    fn schedule_validation() {
        assert!(matches!(build_schedule(10, &[5, 4], None), Err(Error::Validation(_))));
        assert!(matches!(build_schedule(3, &[3, 0], None), Err(Error::Validation(_))));
        assert!(matches!(build_schedule(0, &[], None), Err(Error::Validation(_))));
    }

    #[test]
    fn permuted_schedules_are_seeded() {
        let a = build_schedule(10, &[4, 3, 3], Some(5)).unwrap();
        let b = build_schedule(10, &[4, 3, 3], Some(5)).unwrap();
        assert_eq!(a, b);
        let mut all = a.class_order();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let map = a.label_map();
        for (pos, c) in a.class_order().into_iter().enumerate() {
            assert_eq!(map[c], pos);
        }
    }

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn extension_preserves_old_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&[4, 8, 3], &mut rng).unwrap();
        let x = random_inputs(&mut rng, 5, 4);
        let before = params.forward(&x).unwrap();
        for init in [HeadInit::Zero, HeadInit::Gaussian { std: 0.01 }] {
            let ext = extend_head(&params, 2, init, 9).unwrap();
            assert_eq!(ext.output_dim(), 5);
            let after = ext.forward(&x).unwrap();
            for i in 0..5 {
                assert_eq!(&after.row(i)[..3], before.row(i));
                if init == HeadInit::Zero {
                    assert_eq!(&after.row(i)[3..], &[0.0, 0.0]);
                }
            }
        }
        assert!(extend_head(&params, 0, HeadInit::Zero, 0).is_err());
    }

    #[test]
    fn zero_rows_keep_old_class_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(&[3, 6, 4], &mut rng).unwrap();
        let ext = extend_head(&params, 3, HeadInit::Zero, 0).unwrap();
        let x = random_inputs(&mut rng, 10, 3);
        let a = params.forward(&x).unwrap();
        let b = ext.forward(&x).unwrap();
        for i in 0..10 {
            let p = softmax_temp(a.row(i), 1.0).unwrap();
            let q = softmax_temp(b.row(i), 1.0).unwrap();
            let mass: f64 = q.as_slice()[..4].iter().sum();
            for j in 0..4 {
                assert!((q[j] / mass - p[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn twice_or_once_gives_same_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&[4, 16, 5], &mut rng).unwrap();
        let twice = extend_head(&extend_head(&params, 5, HeadInit::Zero, 1).unwrap(), 5, HeadInit::Zero, 2).unwrap();
        let once = extend_head(&params, 10, HeadInit::Zero, 1).unwrap();
        assert_eq!(twice.shape_signature(), once.shape_signature());
        assert_eq!(twice.layers()[1].weight.shape(), (15, 16));
        assert_eq!(twice, once);
    }

    #[test]
    fn snapshot_is_isolated_from_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut live = ModelParams::init(&[3, 5, 2], &mut rng).unwrap();
        let snap = snapshot_old(&live);
        let frozen = live.clone();
        assert_eq!(snapshot_old(&snap), snap);
        let x = random_inputs(&mut rng, 4, 3);
        let batch = crate::tensor::Batch::new(x.clone(), vec![0, 1, 0, 1]).unwrap();
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0, &live).unwrap();
        for _ in 0..5 {
            let (_, g) = backward(&live, &batch, &LossSpec::CrossEntropy).unwrap();
            sgd_step(&mut live, &g, &mut opt).unwrap();
        }
        assert_ne!(live, frozen);
        assert_eq!(snap, frozen);
        assert_eq!(snap.forward(&x).unwrap(), frozen.forward(&x).unwrap());
    }

    #[test]
    fn memory_capacity_cases() {
        let ds = generate_synthetic(2, 100, 2, 3.0, 1).unwrap();
        let empty = ExemplarMemory::new(0, 2, 2);

        let none = update_memory(&empty, &ds, 0, 3).unwrap();
        assert!(none.is_empty());

        let small = generate_synthetic(3, 4, 2, 3.0, 2).unwrap();
        let all = update_memory(&empty, &small, 50, 3).unwrap();
        assert_eq!(all.len(), small.len());
        assert_eq!(all.samples().class_counts(), small.class_counts());

        let a = update_memory(&empty, &ds, 20, 7).unwrap();
        let b = update_memory(&empty, &ds, 20, 7).unwrap();
        assert_eq!(a.samples().class_counts(), vec![10, 10]);
        assert_eq!(a, b);
        let c = update_memory(&empty, &ds, 20, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn quotas_balance_and_redistribute() {
        assert_eq!(balanced_quotas(&[100, 100, 100], 20), vec![7, 7, 6]);
        assert_eq!(balanced_quotas(&[2, 100], 20), vec![2, 18]);
        assert_eq!(balanced_quotas(&[3, 4], 50), vec![3, 4]);
    }

    #[test]
    fn memory_rebuild_keeps_older_classes() {
        let first = generate_synthetic(4, 30, 2, 3.0, 1).unwrap();
        let t1 = first.filter_classes(&[0, 1]);
        let t2 = first.filter_classes(&[2, 3]);
        let mem = update_memory(&ExemplarMemory::new(8, 2, 4), &t1, 8, 1).unwrap();
        assert_eq!(mem.samples().class_counts(), vec![4, 4, 0, 0]);
        let mem = update_memory(&mem, &t2, 8, 2).unwrap();
        assert_eq!(mem.samples().class_counts(), vec![2, 2, 2, 2]);
        assert!(mem.len() <= mem.capacity());
    }
}

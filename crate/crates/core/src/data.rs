//! Datasets: synthetic Gaussian blobs, IDX ingestion, CSV export and
//! per-class Dirichlet partitioning across clients.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Batch, Matrix, RowBuilder};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Labelled samples. Shards produced by partitioning may be empty; datasets
/// built from files or generators always hold at least one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn empty(features: usize, class_count: usize) -> Self {
        Self {
            inputs: Matrix::zeros(0, features),
            labels: Vec::new(),
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Indices of samples labelled `class`, ascending.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Samples whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, y)| classes.contains(y))
            .map(|(i, _)| i)
            .collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(
            self.inputs.vstack(&other.inputs)?,
            labels,
            self.class_count.max(other.class_count),
        )
    }

    /// Renames every label through `map` (`new = map[old]`).
    pub fn relabel(&self, map: &[usize]) -> Result<Dataset> {
        if map.len() < self.class_count {
            return Err(Error::Validation(format!(
                "label map covers {} of {} classes",
                map.len(),
                self.class_count
            )));
        }
        let labels = self.labels.iter().map(|&y| map[y]).collect();
        Dataset::new(self.inputs.clone(), labels, self.class_count)
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let sub = self.subset(idx);
        Batch::new(sub.inputs, sub.labels)
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    /// Stratified split; each class contributes `round(n_c * test_fraction)`
    /// samples to the test side.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Parameter(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..self.class_count {
            let mut idx = self.indices_of(c);
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// CSV with header `f0,...,f{D-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..self.features()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(csv_err)?;
        for (row, y) in self.inputs.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Isotropic unit-variance Gaussian blobs, one per class. Class means sit on
/// a scaled simplex when `feature_dim >= class_count` and on a circle in the
/// first two coordinates otherwise; in both cases the closest pair of means
/// is exactly `separation` apart.
pub fn generate_synthetic(
    class_count: usize,
    per_class: usize,
    feature_dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 || per_class < 1 || feature_dim < 1 {
        return Err(Error::Parameter(
            "need at least 2 classes, 1 sample per class and 1 feature".into(),
        ));
    }
    let means = class_means(class_count, feature_dim, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = RowBuilder::new(feature_dim);
    let mut labels = Vec::with_capacity(class_count * per_class);
    let mut x = vec![0.0; feature_dim];
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for (xi, mi) in x.iter_mut().zip(mean) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *xi = mi + noise;
            }
            rows.push(&x);
            labels.push(c);
        }
    }
    Dataset::new(rows.finish(), labels, class_count)
}

fn class_means(classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if dim >= classes {
        let scale = separation / std::f64::consts::SQRT_2;
        (0..classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = scale;
                m
            })
            .collect()
    } else if dim >= 2 {
        let step = std::f64::consts::TAU / classes as f64;
        let radius = separation / (2.0 * (step / 2.0).sin());
        (0..classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[0] = radius * (step * c as f64).cos();
                m[1] = radius * (step * c as f64).sin();
                m
            })
            .collect()
    } else {
        (0..classes).map(|c| vec![separation * c as f64]).collect()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX file, returning its dimensions and payload.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, ndims: usize, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32_be(bytes, 0, what)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let dims = (0..ndims)
        .map(|i| read_u32_be(bytes, 4 + 4 * i, what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{what}: {} payload bytes, header promises {expected}",
            payload.len()
        )));
    }
    Ok((dims, payload))
}

/// Loads an MNIST-style image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (idims, pixels) = parse_idx(&image_bytes, IDX_IMAGES_MAGIC, 3, "images")?;
    let (ldims, raw_labels) = parse_idx(&label_bytes, IDX_LABELS_MAGIC, 1, "labels")?;
    if idims[0] != ldims[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    if idims[0] == 0 {
        return Err(Error::Format("IDX files hold no samples".into()));
    }
    let features = idims[1] * idims[2];
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Matrix::from_vec(idims[0], features, data)?, labels, class_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Rounds `props * total` to integers summing to `total`, handing leftover
/// units to the largest fractional parts (ties to the lower index).
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Draws `Dirichlet(alpha * 1_k)` proportions by normalising gamma variates.
pub fn dirichlet_proportions<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.iter().map(|d| d / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Per-class Dirichlet split of `ds` across `spec.clients` shards.
///
/// One ChaCha8 stream seeded with `spec.seed` drives the whole procedure.
/// For each class in ascending order the class's sample indices are
/// shuffled, proportions are drawn, rounded with [`largest_remainder`], and
/// consecutive runs of the shuffled indices go to clients `0..K`. An attempt
/// that leaves a client empty is discarded and the stream continues with a
/// fresh attempt, up to 100 times. Each shard keeps the original sample order.
pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    let k = spec.clients;
    if k == 0 {
        return Err(Error::Validation("need at least one client".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::Parameter(format!(
            "Dirichlet alpha must be positive, got {}",
            spec.alpha
        )));
    }
    if k > ds.len() {
        return Err(Error::Validation(format!(
            "{k} clients but only {} samples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
        for c in 0..ds.class_count() {
            let mut idx = ds.indices_of(c);
            idx.shuffle(&mut rng);
            let props = dirichlet_proportions(k, spec.alpha, &mut rng);
            let counts = largest_remainder(&props, idx.len());
            let mut start = 0;
            for (shard, n) in shards.iter_mut().zip(counts) {
                shard.extend_from_slice(&idx[start..start + n]);
                start += n;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards
                .into_iter()
                .map(|mut s| {
                    s.sort_unstable();
                    ds.subset(&s)
                })
                .collect());
        }
    }
    Err(Error::Validation(format!(
        "no partition without an empty client after {MAX_PARTITION_ATTEMPTS} draws"
    )))
}

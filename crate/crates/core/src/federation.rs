//! Synchronous federated runtime: per-client local training, weighted
//! server aggregation and task transitions.
//!
//! Within a round every client starts from the same broadcast model and
//! trains on its own data only. Aggregation consumes client results in
//! ascending id order, so the floating-point summation order never depends
//! on how the clients were scheduled across threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{self, Dataset, PartitionSpec};
use crate::distill::{self, ClassSplit, DistillConfig, DistillMode};
use crate::error::{Error, Result};
use crate::incremental::{self, ExemplarMemory, HeadInit, TaskSchedule};
use crate::metrics::{self, RoundPoint, RunReport};
use crate::seeding::{derive_seed, Stream};
use crate::tensor::{self, ModelParams, OptimizerState};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "FEDCLASS_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub rounds_per_task: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for RoundPlan {
    fn default() -> Self {
        Self {
            rounds_per_task: 20,
            local_epochs: 1,
            batch_size: 32,
        }
    }
}

/// Per-client weights `sizes_k / sum(sizes)`.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Validation("nothing to aggregate".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Validation(format!(
            "aggregation sizes {sizes:?} must all be positive"
        )));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Parameter-wise weighted mean of `models` with weights proportional to `sizes`.
pub fn aggregate(models: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    if models.len() != sizes.len() {
        return Err(Error::Validation(format!(
            "{} models but {} sizes",
            models.len(),
            sizes.len()
        )));
    }
    let weights = aggregation_weights(sizes)?;
    let first = &models[0];
    for m in &models[1..] {
        first.check_same_shape(m, "aggregate")?;
    }
    if models.len() == 1 {
        return Ok(first.clone());
    }
    let mut out = first.zeros_like();
    for (m, &w) in models.iter().zip(&weights) {
        out.add_scaled(w, m)?;
    }
    Ok(out)
}

/// Everything one client keeps between rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: ModelParams,
    pub old_model: Option<ModelParams>,
    /// `task_shards[t]` holds this client's samples of task `t`'s classes.
    pub task_shards: Vec<Dataset>,
    pub memory: ExemplarMemory,
    pub opt: OptimizerState,
    /// 0-based index of the task being trained.
    pub task: usize,
    rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(
        id: usize,
        model: ModelParams,
        task_shards: Vec<Dataset>,
        memory_capacity: usize,
        opt: OptimizerState,
        seed: u64,
    ) -> Result<Self> {
        let first = task_shards
            .first()
            .ok_or_else(|| Error::Validation(format!("client {id} has no task shards")))?;
        let memory = ExemplarMemory::new(memory_capacity, first.features(), first.class_count());
        Ok(Self {
            id,
            model,
            old_model: None,
            task_shards,
            memory,
            opt,
            task: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `D_old ∪ D_t`: exemplar memory followed by the current task's shard.
    pub fn training_pool(&self) -> Result<Dataset> {
        let shard = self.current_shard()?;
        if self.memory.is_empty() {
            Ok(shard.clone())
        } else {
            self.memory.samples().concat(shard)
        }
    }

    pub fn current_shard(&self) -> Result<&Dataset> {
        self.task_shards
            .get(self.task)
            .ok_or_else(|| Error::State(format!("client {} has no shard for task {}", self.id, self.task)))
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    /// `|D^k_t|`; zero means the client is left out of aggregation.
    pub weight: usize,
    pub mean_loss: Option<f64>,
    pub steps: usize,
}

/// Loads the server's model and runs `local_epochs` of minibatch SGD over
/// memory plus current-task data. The first task trains on CE alone.
pub fn client_round(
    cs: &mut ClientState,
    global: &ModelParams,
    plan: &RoundPlan,
    cfg: &DistillConfig,
    split: ClassSplit,
) -> Result<RoundOutcome> {
    cs.model.check_same_shape(global, "client_round download")?;
    cs.model = global.clone();
    let weight = cs.current_shard()?.len();
    let pool = cs.training_pool()?;
    if pool.is_empty() {
        log::warn!(
            "client {} has no training data for task {}; skipping",
            cs.id,
            cs.task + 1
        );
        return Ok(RoundOutcome {
            weight: 0,
            mean_loss: None,
            steps: 0,
        });
    }

    let effective = if cs.task == 0 {
        DistillConfig {
            mode: DistillMode::CeOnly,
            ..*cfg
        }
    } else {
        *cfg
    };

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut total_loss = 0.0;
    let mut steps = 0;
    for _ in 0..plan.local_epochs {
        order.shuffle(&mut cs.rng);
        for chunk in order.chunks(plan.batch_size.max(1)) {
            let batch = pool.batch(chunk)?;
            let (loss, grads) =
                distill::client_objective(&cs.model, cs.old_model.as_ref(), &batch, split, &effective)?;
            tensor::sgd_step(&mut cs.model, &grads, &mut cs.opt)?;
            total_loss += loss;
            steps += 1;
        }
    }
    if !cs.model.is_finite() {
        return Err(Error::Validation(format!(
            "client {} diverged to non-finite parameters",
            cs.id
        )));
    }
    Ok(RoundOutcome {
        weight,
        mean_loss: Some(total_loss / steps as f64),
        steps,
    })
}

/// Moves a client from task `t` to `t + 1`: rebuilds the exemplar memory
/// from memory plus the finished task's shard, snapshots the model as the
/// historical teacher and widens the live head by `new_classes`.
///
/// The teacher keeps its narrow head except in plain self-distillation,
/// which compares heads of equal width and therefore gets the same widened
/// head as the live model.
#[allow(clippy::too_many_arguments)]
pub fn task_transition(
    cs: &mut ClientState,
    new_classes: usize,
    memory_size: usize,
    memory_seed: u64,
    head_init: HeadInit,
    head_seed: u64,
    mode: DistillMode,
) -> Result<()> {
    let finished = cs.current_shard()?.clone();
    cs.memory = incremental::update_memory(&cs.memory, &finished, memory_size, memory_seed)?;
    let snapshot = incremental::snapshot_old(&cs.model);
    cs.model = incremental::extend_head(&cs.model, new_classes, head_init, head_seed)?;
    cs.old_model = Some(match mode {
        DistillMode::PlainSelfDistill => {
            incremental::extend_head(&snapshot, new_classes, head_init, head_seed)?
        }
        _ => snapshot,
    });
    cs.opt.reset(&cs.model);
    cs.task += 1;
    Ok(())
}

/// Server-side state between rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelParams,
    pub round: usize,
    pub task: usize,
}

/// Train/test data after relabelling so each task owns a contiguous block of
/// output indices.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub schedule: TaskSchedule,
}

pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (train, test) = match config.dataset {
        DatasetKind::Synthetic => {
            let all = data::generate_synthetic(
                config.classes,
                config.per_class,
                config.features,
                config.separation,
                derive_seed(seed, Stream::Data, &[]),
            )?;
            all.train_test_split(config.test_fraction, derive_seed(seed, Stream::TestSplit, &[]))?
        }
        DatasetKind::Idx => {
            let missing = || Error::Config(vec!["IDX training paths are required".into()]);
            let images = config.idx_train_images.as_deref().ok_or_else(missing)?;
            let labels = config.idx_train_labels.as_deref().ok_or_else(missing)?;
            let train = data::load_idx(images, labels)?;
            match (&config.idx_test_images, &config.idx_test_labels) {
                (Some(ti), Some(tl)) => {
                    let test = data::load_idx(ti, tl)?;
                    let classes = train.class_count().max(test.class_count());
                    (
                        Dataset::new(train.inputs().clone(), train.labels().to_vec(), classes)?,
                        Dataset::new(test.inputs().clone(), test.labels().to_vec(), classes)?,
                    )
                }
                _ => train.train_test_split(
                    config.test_fraction,
                    derive_seed(seed, Stream::TestSplit, &[]),
                )?,
            }
        }
    };
    let permutation = config
        .permute_classes
        .then(|| derive_seed(seed, Stream::Schedule, &[]));
    let schedule = incremental::build_schedule(train.class_count(), &config.tasks, permutation)?;
    let map = schedule.label_map();
    Ok(PreparedData {
        train: train.relabel(&map)?,
        test: test.relabel(&map)?,
        schedule,
    })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))
}

fn evaluate(
    model: &ModelParams,
    test: &Dataset,
    schedule: &TaskSchedule,
    trained_through: usize,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    let mut row = Vec::with_capacity(schedule.len());
    for j in 0..schedule.len() {
        if j <= trained_through {
            let classes: Vec<usize> = schedule.output_range(j).collect();
            row.push(metrics::task_accuracy(model, test, &classes)?);
        } else {
            row.push(None);
        }
    }
    let seen = schedule.output_range(trained_through).end;
    let seen_classes: Vec<usize> = (0..seen).collect();
    let global = metrics::task_accuracy(model, test, &seen_classes)?;
    Ok((row, global))
}

/// Runs the full task sequence for one master seed.
pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<RunReport> {
    Ok(run_with_model(config, seed)?.0)
}

/// Like [`run_experiment`], also returning the final global model.
pub fn run_with_model(config: &ExperimentConfig, seed: u64) -> Result<(RunReport, ModelParams)> {
    config.validate()?;
    let prepared = prepare_data(config, seed)?;
    run_prepared(config, seed, &prepared)
}

/// Client training shards. Depends only on the data, `clients`, `alpha` and
/// the seed, so every mode sees the same split.
pub fn client_shards(config: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<Vec<Dataset>> {
    data::dirichlet_partition(
        train,
        &PartitionSpec {
            clients: config.clients,
            alpha: config.alpha,
            seed: derive_seed(seed, Stream::Partition, &[]),
        },
    )
}

pub fn run_prepared(
    config: &ExperimentConfig,
    seed: u64,
    prepared: &PreparedData,
) -> Result<(RunReport, ModelParams)> {
    let PreparedData {
        train,
        test,
        schedule,
    } = prepared;
    let cfg = config.distill();
    let plan = config.plan();
    cfg.validate()?;

    let shards = client_shards(config, train, seed)?;

    let first_task = schedule.sizes()[0];
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Init, &[]));
    let initial = ModelParams::init(
        &[train.features(), config.hidden_width, first_task],
        &mut init_rng,
    )?;
    let mut server = ServerState {
        global: initial,
        round: 0,
        task: 0,
    };

    let mut clients = shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            let per_task = (0..schedule.len())
                .map(|t| shard.filter_classes(&schedule.output_range(t).collect::<Vec<_>>()))
                .collect();
            ClientState::new(
                k,
                server.global.clone(),
                per_task,
                config.memory,
                OptimizerState::new(config.lr, config.momentum, config.weight_decay, &server.global)?,
                derive_seed(seed, Stream::Client, &[k as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let pool = thread_pool()?;
    let mut accuracy = Vec::with_capacity(schedule.len());
    let mut global_accuracy = Vec::with_capacity(schedule.len());
    let mut round_curves = Vec::new();

    for t in 0..schedule.len() {
        let split = schedule.split(t)?;
        if t > 0 {
            let head_seed = derive_seed(seed, Stream::Head, &[t as u64]);
            server.global = incremental::extend_head(&server.global, split.new, config.head_init, head_seed)?;
            for cs in &mut clients {
                task_transition(
                    cs,
                    split.new,
                    config.memory,
                    derive_seed(seed, Stream::Memory, &[cs.id as u64, t as u64]),
                    config.head_init,
                    head_seed,
                    config.mode,
                )?;
            }
        }
        server.task = t;

        for r in 0..plan.rounds_per_task {
            let global = &server.global;
            let outcomes: Vec<RoundOutcome> = pool.install(|| {
                clients
                    .par_iter_mut()
                    .map(|cs| client_round(cs, global, &plan, &cfg, split))
                    .collect::<Result<Vec<_>>>()
            })?;

            let (models, sizes): (Vec<ModelParams>, Vec<usize>) = clients
                .iter()
                .zip(&outcomes)
                .filter(|(_, o)| o.weight > 0)
                .map(|(cs, o)| (cs.model.clone(), o.weight))
                .unzip();
            if models.is_empty() {
                log::warn!("task {} round {}: no client trained", t + 1, r + 1);
            } else {
                server.global = aggregate(&models, &sizes)?;
            }
            for cs in &mut clients {
                cs.model = server.global.clone();
            }
            server.round += 1;

            if config.round_curves {
                let (_, acc) = evaluate(&server.global, test, schedule, t)?;
                let losses: Vec<f64> = outcomes.iter().filter_map(|o| o.mean_loss).collect();
                round_curves.push(RoundPoint {
                    task: t + 1,
                    round: r + 1,
                    global_accuracy: acc,
                    train_loss: (!losses.is_empty())
                        .then(|| losses.iter().sum::<f64>() / losses.len() as f64),
                });
            }
        }

        let (row, global) = evaluate(&server.global, test, schedule, t)?;
        accuracy.push(row);
        global_accuracy.push(global);
    }

    let mut report = RunReport {
        run_name: config.run_name.clone(),
        seed,
        task_classes: schedule.tasks().to_vec(),
        accuracy,
        global_accuracy,
        forgetting: Vec::new(),
        avg_forgetting: None,
        round_curves,
        config: config.clone(),
    };
    report.finalize();
    Ok((report, server.global))
}

//! End-to-end acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line;
//! run with `--nocapture` to see them.

use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedclass::checks;
use fedclass::config::ExperimentConfig;
use fedclass::distill::DistillMode;
use fedclass::federation::{self, prepare_data};
use fedclass::metrics::{self, ReportFormat, RunReport};
use fedclass::seeding::{derive_seed, Stream};
use fedclass::tensor::{self, LossSpec, ModelParams, OptimizerState};

const SEEDS: [u64; 3] = [1, 2, 3];

fn report(name: &str, passed: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
}

/// 4 Gaussian classes in two tasks of two, 5 clients, Dirichlet 0.5,
/// memory 20, beta 5, temperature 2, 20 rounds per task.
fn trend_config() -> ExperimentConfig {
    ExperimentConfig {
        classes: 4,
        per_class: 500,
        features: 8,
        separation: 5.0,
        tasks: vec![2, 2],
        clients: 5,
        alpha: 0.5,
        memory: 20,
        beta: 5.0,
        theta: 2.0,
        rounds_per_task: 20,
        ..ExperimentConfig::default()
    }
}

#[derive(Debug, Clone, Copy)]
struct SeedMean {
    forgetting: f64,
    global: f64,
}

fn seed_mean(config: &ExperimentConfig) -> SeedMean {
    let reports: Vec<RunReport> = SEEDS
        .iter()
        .map(|&s| federation::run_experiment(config, s).expect("experiment runs"))
        .collect();
    let n = reports.len() as f64;
    SeedMean {
        forgetting: reports.iter().map(|r| r.avg_forgetting.unwrap()).sum::<f64>() / n,
        global: reports.iter().map(|r| r.final_global_accuracy().unwrap()).sum::<f64>() / n,
    }
}

fn fedavg() -> SeedMean {
    static CELL: OnceLock<SeedMean> = OnceLock::new();
    *CELL.get_or_init(|| {
        seed_mean(&ExperimentConfig {
            mode: DistillMode::CeOnly,
            ..trend_config()
        })
    })
}

fn fedclass_default() -> SeedMean {
    static CELL: OnceLock<SeedMean> = OnceLock::new();
    *CELL.get_or_init(|| seed_mean(&trend_config()))
}

#[test]
fn derivation_oracle_equivalence() {
    let start = Instant::now();
    let r = checks::theorem_equivalence(10_000, 11).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let passed = r.passed && secs < 5.0;
    report("derivation oracle equivalence", passed, &format!("{} in {secs:.2}s", r.detail));
    assert!(passed);
}

#[test]
fn augmented_target_normalization_and_structure() {
    let start = Instant::now();
    let r = checks::normalization(1000, 12).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let passed = r.passed && secs < 5.0;
    report("augmented target normalization", passed, &format!("{} in {secs:.2}s", r.detail));
    assert!(passed);
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    let results = checks::gradients(13).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let passed = results.iter().all(|r| r.passed) && secs < 30.0;
    let detail: Vec<String> = results.iter().map(|r| format!("{}: {}", r.name, r.detail)).collect();
    report(
        "gradient correctness (width 64, batch 32, beta 5, theta 2, eps 1e-5)",
        passed,
        &format!("{} in {secs:.2}s", detail.join("; ")),
    );
    assert!(passed);
}

#[test]
fn aggregation_identities() {
    let r = checks::aggregation(14).unwrap();
    report("aggregation identities", r.passed, &r.detail);
    assert!(r.passed);
}

/// Single-model SGD over the full training set with the federated client's
/// shuffling stream and a persistent optimizer.
fn centralized_reference(config: &ExperimentConfig, seed: u64) -> ModelParams {
    let prepared = prepare_data(config, seed).unwrap();
    let train = prepared.train;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Init, &[]));
    let mut model = ModelParams::init(
        &[train.features(), config.hidden_width, config.classes],
        &mut init_rng,
    )
    .unwrap();
    let mut opt = OptimizerState::new(config.lr, config.momentum, config.weight_decay, &model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Client, &[0]));
    for _ in 0..config.rounds_per_task {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..config.local_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let batch = train.batch(chunk).unwrap();
                let (_, grads) = tensor::backward(&model, &batch, &LossSpec::CrossEntropy).unwrap();
                tensor::sgd_step(&mut model, &grads, &mut opt).unwrap();
            }
        }
    }
    model
}

#[test]
fn single_client_matches_centralized_sgd() {
    let config = ExperimentConfig {
        classes: 3,
        per_class: 60,
        features: 5,
        tasks: vec![3],
        clients: 1,
        rounds_per_task: 4,
        local_epochs: 2,
        batch_size: 16,
        ..ExperimentConfig::default()
    };
    let seed = 21;
    let (_, federated) = federation::run_with_model(&config, seed).unwrap();
    let direct = centralized_reference(&config, seed);
    let identical = federated
        .values()
        .zip(direct.values())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let diff = federated.max_abs_diff(&direct).unwrap();
    report(
        "single-client run equals centralized SGD",
        identical,
        &format!("{} parameters, max |diff| {diff:e}", direct.num_params()),
    );
    assert!(identical);
}

/// Share of old-task test samples the final FedAvg model assigns to another
/// old class. The augmented target only constrains the ratios among old
/// classes, so this bounds what it can recover.
fn old_to_old_confusion(config: &ExperimentConfig) -> f64 {
    let mut wrong = 0usize;
    let mut total = 0usize;
    for &seed in &SEEDS {
        let (_, model) = federation::run_with_model(config, seed).unwrap();
        let prepared = prepare_data(config, seed).unwrap();
        let old = config.tasks[0];
        let pred = model.predict(prepared.test.inputs()).unwrap();
        for (&y, &p) in prepared.test.labels().iter().zip(&pred) {
            if y < old {
                total += 1;
                if p < old && p != y {
                    wrong += 1;
                }
            }
        }
    }
    100.0 * wrong as f64 / total as f64
}

fn linear_probe_accuracy(config: &ExperimentConfig, seed: u64) -> f64 {
    let p = prepare_data(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::init(&[config.features, config.classes], &mut rng).unwrap();
    let mut opt = OptimizerState::new(0.05, 0.9, 0.0, &model).unwrap();
    let mut order: Vec<usize> = (0..p.train.len()).collect();
    for _ in 0..30 {
        order.shuffle(&mut rng);
        for chunk in order.chunks(32) {
            let batch = p.train.batch(chunk).unwrap();
            let (_, g) = tensor::backward(&model, &batch, &LossSpec::CrossEntropy).unwrap();
            tensor::sgd_step(&mut model, &g, &mut opt).unwrap();
        }
    }
    metrics::global_accuracy(&model, &p.test).unwrap().unwrap()
}

#[test]
fn fedclass_beats_fedavg_on_forgetting() {
    let config = trend_config();
    let probe = SEEDS
        .iter()
        .map(|&s| linear_probe_accuracy(&config, s))
        .fold(f64::INFINITY, f64::min);
    assert!(probe > 95.0, "blobs must be linearly separable, probe {probe:.2}%");

    let start = Instant::now();
    let base = fedavg();
    let ours = fedclass_default();
    let secs = start.elapsed().as_secs_f64();
    let gap = base.forgetting - ours.forgetting;
    let passed = gap >= 5.0 && ours.global >= base.global - 1.0 && secs < 300.0;
    let confusion = old_to_old_confusion(&ExperimentConfig {
        mode: DistillMode::CeOnly,
        ..config.clone()
    });
    report(
        "augmented distillation vs plain averaging",
        passed,
        &format!(
            "forgetting {:.2} vs {:.2} (gap {gap:.2}, need >= 5), global {:.2} vs {:.2}; \
             linear probe {probe:.2}%, plain-averaging old-to-old confusion {confusion:.2}%, {secs:.1}s",
            ours.forgetting, base.forgetting, ours.global, base.global
        ),
    );

    let literal = seed_mean(&ExperimentConfig {
        tempered_student: false,
        ..config
    });
    println!(
        "       untempered student: forgetting {:.2} (gap {:.2}), global {:.2}",
        literal.forgetting,
        base.forgetting - literal.forgetting,
        literal.global
    );
    assert!(passed);
}

#[test]
fn distillation_weight_reduces_forgetting() {
    let without = seed_mean(&ExperimentConfig {
        beta: 0.0,
        ..trend_config()
    });
    let with = fedclass_default();
    let passed = with.forgetting < without.forgetting;
    report(
        "distillation weight ablation",
        passed,
        &format!(
            "avg forgetting beta=5 {:.2} vs beta=0 {:.2}",
            with.forgetting, without.forgetting
        ),
    );
    assert!(passed);
}

#[test]
fn larger_memory_helps() {
    let config = trend_config();
    let sizes = [0, 2 * config.classes, 8 * config.classes];
    let means: Vec<SeedMean> = sizes
        .iter()
        .map(|&memory| {
            seed_mean(&ExperimentConfig {
                memory,
                ..config.clone()
            })
        })
        .collect();
    let acc_up = means.windows(2).all(|w| w[1].global >= w[0].global);
    let forg_down = means.windows(2).all(|w| w[1].forgetting <= w[0].forgetting);
    let jump = means[2].global - means[0].global;
    let passed = acc_up && forg_down && jump >= 10.0;
    let detail: Vec<String> = sizes
        .iter()
        .zip(&means)
        .map(|(m, s)| format!("m={m}: global {:.2}, forgetting {:.2}", s.global, s.forgetting))
        .collect();
    report(
        "memory ablation",
        passed,
        &format!("{}; gain {jump:.2}", detail.join("; ")),
    );
    assert!(passed);
}

#[test]
fn repeated_runs_write_identical_bytes() {
    let config = ExperimentConfig {
        per_class: 120,
        rounds_per_task: 5,
        tasks: vec![2, 1, 1],
        ..trend_config()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files: Vec<Vec<Vec<u8>>> = Vec::new();
    for dir in &dirs {
        let report = federation::run_experiment(&config, 9).unwrap();
        let mut bytes = Vec::new();
        for format in [ReportFormat::Json, ReportFormat::Csv] {
            let path = dir.path().join(metrics::report_file_name(&report.run_name, 9, format));
            metrics::write_report(&report, &path, format).unwrap();
            bytes.push(std::fs::read(&path).unwrap());
        }
        files.push(bytes);
    }
    let passed = files[0] == files[1];
    report(
        "determinism",
        passed,
        &format!(
            "json {} bytes, csv {} bytes, identical: {passed}",
            files[0][0].len(),
            files[0][1].len()
        ),
    );
    assert!(passed);
}

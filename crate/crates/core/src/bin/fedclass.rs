use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

use fedclass::checks;
use fedclass::cli::{self, ExitCode, SweepParam};
use fedclass::{Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "fedclass", version, about = "Federated class-incremental learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment for every configured seed and print a summary.
    Run(ConfigArgs),
    /// Compare settings of `beta` or `m`.
    Sweep {
        /// `beta` or `m`
        #[arg(long)]
        param: String,
        /// Comma list; memory values accept `kc` for k times the class count.
        #[arg(long)]
        values: String,
        /// Where to write the comparison CSV (default: <output_dir>/<run_name>_sweep_<param>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the invariant and oracle suites.
    Check {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Settings come from `--config` first; every flag below overrides it.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    run_name: Option<String>,
    /// `synthetic` or `idx`
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    separation: Option<String>,
    #[arg(long)]
    idx_train_images: Option<String>,
    #[arg(long)]
    idx_train_labels: Option<String>,
    #[arg(long)]
    idx_test_images: Option<String>,
    #[arg(long)]
    idx_test_labels: Option<String>,
    #[arg(long)]
    test_fraction: Option<String>,
    /// Number of clients.
    #[arg(long, short = 'k')]
    clients: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Classes per task, e.g. `2,2`.
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    permute_classes: Option<String>,
    /// Exemplar memory per client.
    #[arg(long, short = 'm')]
    memory: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    /// `fedclass_augmented`, `plain_self_distill` or `ce_only`
    #[arg(long)]
    mode: Option<String>,
    /// `target_first` or `student_first`
    #[arg(long)]
    kl_direction: Option<String>,
    #[arg(long)]
    detach_target: Option<String>,
    #[arg(long)]
    kd_theta_squared: Option<String>,
    #[arg(long)]
    tempered_student: Option<String>,
    /// `zero` or `gaussian[:std]`
    #[arg(long)]
    head_init: Option<String>,
    #[arg(long)]
    rounds_per_task: Option<String>,
    #[arg(long)]
    local_epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    hidden_width: Option<String>,
    /// Comma list of master seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    round_curves: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("run_name", &self.run_name),
            ("dataset", &self.dataset),
            ("classes", &self.classes),
            ("per_class", &self.per_class),
            ("features", &self.features),
            ("separation", &self.separation),
            ("idx_train_images", &self.idx_train_images),
            ("idx_train_labels", &self.idx_train_labels),
            ("idx_test_images", &self.idx_test_images),
            ("idx_test_labels", &self.idx_test_labels),
            ("test_fraction", &self.test_fraction),
            ("clients", &self.clients),
            ("alpha", &self.alpha),
            ("tasks", &self.tasks),
            ("permute_classes", &self.permute_classes),
            ("memory", &self.memory),
            ("beta", &self.beta),
            ("theta", &self.theta),
            ("mode", &self.mode),
            ("kl_direction", &self.kl_direction),
            ("detach_target", &self.detach_target),
            ("kd_theta_squared", &self.kd_theta_squared),
            ("tempered_student", &self.tempered_student),
            ("head_init", &self.head_init),
            ("rounds_per_task", &self.rounds_per_task),
            ("local_epochs", &self.local_epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("hidden_width", &self.hidden_width),
            ("seeds", &self.seeds),
            ("output_dir", &self.output_dir),
            ("round_curves", &self.round_curves),
        ];
        let mut problems = Vec::new();
        for (key, value) in flags {
            if let Some(v) = value {
                if let Err(e) = config.set(key, v) {
                    problems.push(format!("--{key}: {e}"));
                }
            }
        }
        for kv in &self.set {
            match kv.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = config.set(k, v) {
                        problems.push(format!("--set {kv}: {e}"));
                    }
                }
                None => problems.push(format!("--set {kv}: expected KEY=VALUE")),
            }
        }
        if let Err(Error::Config(more)) = config.validate() {
            problems.extend(more);
        }
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn run(args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    let reports = cli::run_seeds(&config)?;
    let written = cli::write_outputs(&config.output_dir, &reports)?;
    print!("{}", cli::summary_table(&reports));
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn sweep(param: &str, values: &str, out: Option<&PathBuf>, args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    let param: SweepParam = param.parse()?;
    let classes: usize = config.tasks.iter().sum();
    let values = cli::parse_sweep_values(param, values, classes)?;
    let rows = cli::sweep(&config, param, &values)?;
    print!("{}", cli::sweep_table(param, &rows));
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let path = out.cloned().unwrap_or_else(|| {
        let name = match param {
            SweepParam::Beta => "beta",
            SweepParam::Memory => "m",
        };
        config
            .output_dir
            .join(format!("{}_sweep_{name}.csv", config.run_name))
    });
    std::fs::write(&path, cli::sweep_csv(param, &rows)?).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn check(seed: u64) -> Result<bool> {
    let results = checks::run_all(seed)?;
    let mut all = true;
    for r in &results {
        all &= r.passed;
        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(all)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // usage errors are configuration errors, not runtime failures
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Config } else { ExitCode::Ok };
            let _ = e.print();
            process::exit(code as i32);
        }
    };
    let outcome = match &cli.command {
        Command::Run(args) => run(args).map(|_| ExitCode::Ok),
        Command::Sweep {
            param,
            values,
            out,
            config,
        } => sweep(param, values, out.as_ref(), config).map(|_| ExitCode::Ok),
        Command::Check { seed } => check(*seed).map(|ok| if ok { ExitCode::Ok } else { ExitCode::CheckFailed }),
    };
    let code = match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::for_error(&e)
        }
    };
    process::exit(code as i32);
}

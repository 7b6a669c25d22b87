use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use expflip::attacks::AttackKind;
use expflip::datasets::{self, Split};
use expflip::harness::{self, ExperimentSpec};
use expflip::nn::TrainConfig;
use expflip::{store, Error, Result};

#[derive(Parser)]
#[command(name = "expflip", version, about = "Exponent bit-flip attacks on float32 CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference CNN for one epoch and save it.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with a `[train]` table; explicit flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attack fresh copies of a model across budgets and seeds; write a CSV report.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        method: AttackKind,
        /// Total flip budget, or a comma-separated list of budgets.
        #[arg(long, value_delimiter = ',', required = true)]
        bits: Vec<usize>,
        /// Weight-stealth iterations (defaults to a split of the budget).
        #[arg(long, requires = "bits_per_iter")]
        iters: Option<usize>,
        #[arg(long, requires = "iters")]
        bits_per_iter: Option<usize>,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 15)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-budget mean and standard deviation.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Write the flip plan of the seed-0 run (single budget only).
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Save the seed-0 corrupted model (single budget only).
        #[arg(long)]
        corrupted: Option<PathBuf>,
        /// Fill the wall_ms column (makes the report non-reproducible).
        #[arg(long)]
        record_time: bool,
    },
    /// Run an experiment described by a TOML spec file.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Compare weight-stealth (iterations x bits-per-iteration) configurations.
    SweepStealth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "1x70,2x35,5x14,10x7,14x5")]
        configs: String,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, default_value_t = 15)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Per-iteration mean/std validation accuracy.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Bit-level Hamming distance and per-layer range violations between two model files.
    Audit {
        #[arg(long)]
        pristine: PathBuf,
        #[arg(long)]
        corrupted: PathBuf,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn train(
    data_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    lr: Option<f32>,
    batch_size: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => harness::load_train_config(p)?,
        None => TrainConfig::default(),
    };
    cfg.lr = lr.unwrap_or(cfg.lr);
    cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let model = harness::train_reference(data_dir, &cfg)?;
    let val = datasets::load_mnist(data_dir, Split::Validation)?;
    let acc = model.accuracy(&val.images, &val.labels)?;
    store::save(&model, out)?;
    println!(
        "trained {} parameters, validation accuracy {}",
        model.param_count(),
        harness::fmt_sig(acc, 6)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attack(
    model_path: &Path,
    data_dir: &Path,
    method: AttackKind,
    bits: Vec<usize>,
    split: Option<(usize, usize)>,
    batch_size: usize,
    seeds: usize,
    out: &Path,
    summary: Option<&Path>,
    plan: Option<&Path>,
    corrupted: Option<&Path>,
    record_time: bool,
) -> Result<()> {
    let spec = ExperimentSpec {
        stealth_config: split,
        repetitions: seeds,
        batch_size,
        record_time,
        ..ExperimentSpec::new(method, bits)
    };
    spec.validate()?;
    if (plan.is_some() || corrupted.is_some()) && spec.budgets.len() != 1 {
        return Err(Error::Argument("--plan and --corrupted need a single --bits value".into()));
    }
    let model = store::load(model_path)?;
    let val = datasets::load_mnist(data_dir, Split::Validation)?;
    let report = harness::run_experiment_on(&model, &val, &spec)?;
    write(out, &report.to_csv())?;
    if let Some(p) = summary {
        write(p, &report.summary_csv())?;
    }
    if plan.is_some() || corrupted.is_some() {
        let budget = spec.budgets[0];
        let split = split.unwrap_or_else(|| harness::stealth_split(budget));
        let run = harness::run_single(&model, &val, method, budget, split, batch_size, 0, None, None)?;
        if let Some(p) = plan {
            write(p, &run.plan.to_json())?;
        }
        if let Some(p) = corrupted {
            store::save(&run.model, p)?;
        }
    }
    print_summaries(method, &report.summaries);
    Ok(())
}

fn run_spec(spec: &Path, model_path: &Path, data_dir: &Path, out: &Path, summary: Option<&Path>) -> Result<()> {
    let spec = harness::load_spec(spec)?;
    let report = harness::run_experiment(model_path, data_dir, &spec)?;
    write(out, &report.to_csv())?;
    if let Some(p) = summary {
        write(p, &report.summary_csv())?;
    }
    print_summaries(spec.method, &report.summaries);
    Ok(())
}

fn print_summaries(method: AttackKind, summaries: &[harness::BudgetSummary]) {
    for s in summaries {
        println!(
            "{} budget {}: mean RAD {} (std {}) over {} runs, shortfall {}",
            method,
            s.budget,
            harness::fmt_sig(s.mean_rad, 4),
            harness::fmt_sig(s.std_rad, 3),
            s.runs,
            s.total_shortfall
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    model_path: &Path,
    data_dir: &Path,
    configs: &str,
    batch_size: usize,
    seeds: usize,
    out: &Path,
    summary: Option<&Path>,
    trajectory: Option<&Path>,
) -> Result<()> {
    let configs = harness::parse_configs(configs)?;
    let model = store::load(model_path)?;
    let val = datasets::load_mnist(data_dir, Split::Validation)?;
    let report = harness::sweep_stealth_configs(&model, &val, &configs, seeds, batch_size)?;
    write(out, &report.to_csv())?;
    if let Some(p) = summary {
        write(p, &report.summary_csv())?;
    }
    if let Some(p) = trajectory {
        write(p, &report.trajectory_csv())?;
    }
    for &c in &configs {
        let s = report.summary(c).unwrap();
        println!(
            "{}x{}: mean RAD {} (std {})",
            c.0,
            c.1,
            harness::fmt_sig(s.mean_rad, 4),
            harness::fmt_sig(s.std_rad, 3)
        );
    }
    Ok(())
}

fn audit(pristine: &Path, corrupted: &Path) -> Result<()> {
    let report = harness::audit(pristine, corrupted)?;
    println!("hamming_bits {}", report.hamming_bits);
    for (layer, n) in &report.range_violations {
        println!("range_violations {layer} {n}");
    }
    println!("range_violations_total {}", report.total_violations());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data_dir,
            out,
            config,
            lr,
            batch_size,
            seed,
        } => train(&data_dir, &out, config.as_deref(), lr, batch_size, seed),
        Command::Attack {
            model,
            data_dir,
            method,
            bits,
            iters,
            bits_per_iter,
            batch_size,
            seeds,
            out,
            summary,
            plan,
            corrupted,
            record_time,
        } => attack(
            &model,
            &data_dir,
            method,
            bits,
            iters.zip(bits_per_iter),
            batch_size,
            seeds,
            &out,
            summary.as_deref(),
            plan.as_deref(),
            corrupted.as_deref(),
            record_time,
        ),
        Command::Run {
            spec,
            model,
            data_dir,
            out,
            summary,
        } => run_spec(&spec, &model, &data_dir, &out, summary.as_deref()),
        Command::SweepStealth {
            model,
            data_dir,
            configs,
            batch_size,
            seeds,
            out,
            summary,
            trajectory,
        } => sweep(
            &model,
            &data_dir,
            &configs,
            batch_size,
            seeds,
            &out,
            summary.as_deref(),
            trajectory.as_deref(),
        ),
        Command::Audit { pristine, corrupted } => audit(&pristine, &corrupted),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 3 } else { 2 })
        }
    }
}

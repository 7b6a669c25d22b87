//! Experiment orchestration: RAD, multi-seed attack runs, weight-stealth
//! configuration sweeps, CSV reports and model audits.

mod report;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackKind, FlipPlan, IterationObserver};
use crate::bits::RangeConstraint;
use crate::datasets::{self, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::nn::{Model, TrainConfig};
use crate::store;

pub use report::{fmt_sig, mean_std, AttackReport, BudgetSummary, ReportRow, SweepReport, TrajectoryPoint};

/// Relative accuracy drop `(a_pristine - a_corrupted) / a_pristine`.
pub fn rad(a_pristine: f64, a_corrupted: f64) -> Result<f64> {
    if !(a_pristine > 0.0 && a_pristine <= 1.0) {
        return Err(Error::arg(format!("pristine accuracy {a_pristine} must lie in (0, 1]")));
    }
    if !(0.0..=1.0).contains(&a_corrupted) {
        return Err(Error::arg(format!("corrupted accuracy {a_corrupted} must lie in [0, 1]")));
    }
    Ok((a_pristine - a_corrupted) / a_pristine)
}

/// Splits a weight-stealth budget into `(iterations, bits per iteration)`,
/// using the largest divisor of the budget that does not exceed 7 bits per iteration.
pub fn stealth_split(budget: usize) -> (usize, usize) {
    if budget == 0 {
        return (0, 0);
    }
    let n_b = (1..=7.min(budget)).rev().find(|d| budget.is_multiple_of(*d)).unwrap();
    (budget / n_b, n_b)
}

/// Seed of the batch drawn in weight-stealth iteration `iter` of run `seed`.
/// Iteration 0 uses the run seed itself.
pub fn iteration_seed(seed: u64, iter: usize) -> u64 {
    if iter == 0 {
        seed
    } else {
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(iter as u64).rotate_left(17)
    }
}

/// One experiment: an attack method run at several budgets, once per seed `0..repetitions`.
///
/// Can be read from TOML, e.g. `method = "weight-stealth"`, `budgets = [140]`,
/// `stealth_config = [20, 7]`; omitted fields take the defaults of [`ExperimentSpec::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub method: AttackKind,
    /// Total bit budgets, one report section each.
    pub budgets: Vec<usize>,
    /// Explicit weight-stealth split; when unset each budget is split by [`stealth_split`].
    #[serde(default)]
    pub stealth_config: Option<(usize, usize)>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Fill the `wall_ms` column. Off by default so reports are byte-reproducible.
    #[serde(default)]
    pub record_time: bool,
}

fn default_repetitions() -> usize {
    15
}

fn default_batch_size() -> usize {
    128
}

impl ExperimentSpec {
    pub fn new(method: AttackKind, budgets: Vec<usize>) -> Self {
        Self {
            method,
            budgets,
            stealth_config: None,
            repetitions: default_repetitions(),
            batch_size: default_batch_size(),
            record_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::arg("repetitions must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        if self.budgets.is_empty() {
            return Err(Error::arg("at least one flip budget is required"));
        }
        let mut sorted = self.budgets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.budgets.len() {
            return Err(Error::arg("flip budgets must be distinct"));
        }
        if let Some((k, n_b)) = self.stealth_config {
            if self.method != AttackKind::WeightStealth {
                return Err(Error::arg("iterations/bits-per-iteration only apply to weight-stealth"));
            }
            if self.budgets != [k * n_b] {
                return Err(Error::arg(format!("budget must equal iterations x bits-per-iteration = {}", k * n_b)));
            }
        }
        Ok(())
    }

    fn split(&self, budget: usize) -> (usize, usize) {
        self.stealth_config.unwrap_or_else(|| stealth_split(budget))
    }
}

/// Result of one attack on one pristine copy.
pub struct AttackOutcome {
    pub plan: FlipPlan,
    pub model: Model,
}

/// Runs one attack against a fresh copy of `pristine`, drawing batches from `val`.
#[allow(clippy::too_many_arguments)]
pub fn run_single(
    pristine: &Model,
    val: &LabeledDataset,
    method: AttackKind,
    budget: usize,
    split: (usize, usize),
    batch_size: usize,
    seed: u64,
    constraint: Option<&RangeConstraint>,
    observer: Option<&mut IterationObserver<'_>>,
) -> Result<AttackOutcome> {
    let mut model = pristine.clone();
    let plan = match method {
        AttackKind::Random => attacks::random_attack(&mut model, budget, seed)?,
        AttackKind::Exhaustive => {
            let batch = datasets::sample_batch(val, batch_size, seed)?;
            attacks::exhaustive_attack(&mut model, &batch, budget)?
        }
        AttackKind::ModelWise => {
            let batch = datasets::sample_batch(val, batch_size, seed)?;
            attacks::model_wise_attack(&mut model, &batch, budget)?
        }
        AttackKind::LayerWise => {
            let batch = datasets::sample_batch(val, batch_size, seed)?;
            attacks::layer_wise_attack(&mut model, &batch, budget)?
        }
        AttackKind::WeightStealth => {
            let owned;
            let constraint = match constraint {
                Some(c) => c,
                None => {
                    owned = attacks::range_constraint(pristine)?;
                    &owned
                }
            };
            let (k, n_b) = split;
            attacks::weight_stealth_attack(
                &mut model,
                |iter| datasets::sample_batch(val, batch_size, iteration_seed(seed, iter)),
                k,
                n_b,
                constraint,
                observer,
            )?
        }
    };
    Ok(AttackOutcome { plan, model })
}

#[cfg(feature = "parallel")]
fn map_cells<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_cells<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Callback that sees every finished cell: its report row and the attacked model.
/// May run on several threads at once.
pub type CellInspector<'a> = dyn Fn(&ReportRow, &AttackOutcome) -> Result<()> + Sync + 'a;

/// Runs every (budget, seed) cell of `spec` against in-memory model and data.
///
/// Cells run concurrently but rows come back in (budget, seed) order.
pub fn run_experiment_on(pristine: &Model, val: &LabeledDataset, spec: &ExperimentSpec) -> Result<AttackReport> {
    run_experiment_inspect(pristine, val, spec, None)
}

/// [`run_experiment_on`] with a hook called for every cell.
pub fn run_experiment_inspect(
    pristine: &Model,
    val: &LabeledDataset,
    spec: &ExperimentSpec,
    inspect: Option<&CellInspector<'_>>,
) -> Result<AttackReport> {
    spec.validate()?;
    let acc_pristine = pristine.accuracy(&val.images, &val.labels)?;
    let constraint = attacks::range_constraint(pristine)?;
    let reps = spec.repetitions;
    let cells = map_cells(spec.budgets.len() * reps, |cell| -> Result<ReportRow> {
        let budget = spec.budgets[cell / reps];
        let seed = (cell % reps) as u64;
        let start = Instant::now();
        let out = run_single(
            pristine,
            val,
            spec.method,
            budget,
            spec.split(budget),
            spec.batch_size,
            seed,
            Some(&constraint),
            None,
        )?;
        let acc = out.model.accuracy(&val.images, &val.labels)?;
        let row = ReportRow {
            method: spec.method,
            budget,
            seed,
            acc_pristine,
            acc_corrupted: acc,
            rad: rad(acc_pristine, acc)?,
            realized: out.plan.realized,
            shortfall: out.plan.shortfall,
            wall_ms: spec.record_time.then(|| start.elapsed().as_secs_f64() * 1e3),
        };
        if let Some(f) = inspect {
            f(&row, &out)?;
        }
        Ok(row)
    });
    let rows = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(AttackReport::new(spec.method, acc_pristine, rows))
}

/// Loads the model file and the validation split, then runs the experiment.
pub fn run_experiment(model_path: impl AsRef<Path>, data_dir: impl AsRef<Path>, spec: &ExperimentSpec) -> Result<AttackReport> {
    let model = store::load(model_path)?;
    let val = datasets::load_mnist(data_dir, Split::Validation)?;
    run_experiment_on(&model, &val, spec)
}

/// Weight-stealth runs for several `(k, n_b)` configurations, with per-iteration
/// validation accuracy recorded for every seed.
pub fn sweep_stealth_configs(
    pristine: &Model,
    val: &LabeledDataset,
    configs: &[(usize, usize)],
    repetitions: usize,
    batch_size: usize,
) -> Result<SweepReport> {
    sweep_stealth_inspect(pristine, val, configs, repetitions, batch_size, None)
}

/// [`sweep_stealth_configs`] with a hook called for every run.
pub fn sweep_stealth_inspect(
    pristine: &Model,
    val: &LabeledDataset,
    configs: &[(usize, usize)],
    repetitions: usize,
    batch_size: usize,
    inspect: Option<&CellInspector<'_>>,
) -> Result<SweepReport> {
    if repetitions == 0 || configs.is_empty() {
        return Err(Error::arg("need at least one configuration and one repetition"));
    }
    if let Some(&(k, n)) = configs.iter().find(|(k, n)| *k == 0 || *n == 0) {
        return Err(Error::arg(format!("invalid configuration {k}x{n}")));
    }
    let acc_pristine = pristine.accuracy(&val.images, &val.labels)?;
    let constraint = attacks::range_constraint(pristine)?;
    let cells = map_cells(configs.len() * repetitions, |cell| -> Result<(ReportRow, Vec<f64>)> {
        let (k, n_b) = configs[cell / repetitions];
        let seed = (cell % repetitions) as u64;
        let mut trajectory = vec![acc_pristine];
        let mut observe = |_: usize, m: &Model| -> Result<()> {
            trajectory.push(m.accuracy(&val.images, &val.labels)?);
            Ok(())
        };
        let out = run_single(
            pristine,
            val,
            AttackKind::WeightStealth,
            k * n_b,
            (k, n_b),
            batch_size,
            seed,
            Some(&constraint),
            Some(&mut observe),
        )?;
        let acc = *trajectory.last().unwrap();
        let row = ReportRow {
            method: AttackKind::WeightStealth,
            budget: k * n_b,
            seed,
            acc_pristine,
            acc_corrupted: acc,
            rad: rad(acc_pristine, acc)?,
            realized: out.plan.realized,
            shortfall: out.plan.shortfall,
            wall_ms: None,
        };
        if let Some(f) = inspect {
            f(&row, &out)?;
        }
        Ok((row, trajectory))
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SweepReport::new(configs, repetitions, acc_pristine, cells))
}

/// Parses `"1x70,2x35"` into `[(1, 70), (2, 35)]`.
pub fn parse_configs(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|part| {
            let part = part.trim();
            let (k, n) = part
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::arg(format!("configuration `{part}` is not of the form KxN")))?;
            let k = k.trim().parse().map_err(|_| Error::arg(format!("bad iteration count in `{part}`")))?;
            let n = n.trim().parse().map_err(|_| Error::arg(format!("bad bit count in `{part}`")))?;
            Ok((k, n))
        })
        .collect()
}

/// Bit-level comparison of a pristine and a corrupted model file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub hamming_bits: u64,
    /// Per weight layer: count of weights outside the pristine `[min, max]`.
    pub range_violations: Vec<(String, usize)>,
}

impl AuditReport {
    pub fn total_violations(&self) -> usize {
        self.range_violations.iter().map(|(_, n)| n).sum()
    }
}

pub fn audit_bytes(pristine: &[u8], corrupted: &[u8]) -> Result<AuditReport> {
    let hamming_bits = store::payload_hamming(pristine, corrupted)?;
    let p = store::from_bytes(pristine, "<pristine>")?;
    let c = store::from_bytes(corrupted, "<corrupted>")?;
    let constraint = attacks::range_constraint(&p)?;
    Ok(AuditReport {
        hamming_bits,
        range_violations: attacks::range_violations(&c, &constraint)?,
    })
}

pub fn audit(pristine: impl AsRef<Path>, corrupted: impl AsRef<Path>) -> Result<AuditReport> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    audit_bytes(&read(pristine.as_ref())?, &read(corrupted.as_ref())?)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        Error::format(
            path.display().to_string(),
            e.span().map_or(0, |s| s.start as u64),
            e.message().to_string(),
        )
    })
}

#[derive(Debug, Clone, Deserialize)]
struct TrainFile {
    train: TrainConfig,
}

/// Training settings from a TOML file with a `[train]` table.
pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    read_toml::<TrainFile>(path.as_ref()).map(|f| f.train)
}

/// Reads and validates an experiment spec file.
pub fn load_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = read_toml(path.as_ref())?;
    spec.validate()?;
    Ok(spec)
}

/// Trains the reference CNN for one epoch on the training split.
pub fn train_reference(data_dir: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Model> {
    let train = datasets::load_mnist(data_dir, Split::Train)?;
    crate::nn::train_epoch(Model::cnn50k(cfg.seed), &train.images, &train.labels, cfg)
}

use std::fmt::Write as _;

use crate::attacks::AttackKind;

/// Formats like C's `%.{sig}g`: `sig` significant digits, trailing zeros removed,
/// scientific notation for very small or very large magnitudes.
pub fn fmt_sig(x: f64, sig: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sig = sig.max(1);
    // Exponent after rounding to `sig` digits.
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if exp < -4 || exp >= sig as i32 {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn g6(x: f64) -> String {
    fmt_sig(x, 6)
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single value).
///
/// Sums are taken relative to the first value, so identical inputs give an
/// exact mean and a standard deviation of exactly 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let Some(&x0) = xs.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = xs.len() as f64;
    let shift = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let mean = x0 + shift;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - x0 - shift).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One attack on one pristine copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: AttackKind,
    pub budget: usize,
    pub seed: u64,
    pub acc_pristine: f64,
    pub acc_corrupted: f64,
    pub rad: f64,
    pub realized: usize,
    pub shortfall: usize,
    pub wall_ms: Option<f64>,
}

pub const ROW_HEADER: &str = "method,budget,seed,acc_pristine,acc_corrupted,rad,realized,shortfall,wall_ms";

impl ReportRow {
    fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.budget,
            self.seed,
            g6(self.acc_pristine),
            g6(self.acc_corrupted),
            g6(self.rad),
            self.realized,
            self.shortfall,
            self.wall_ms.map(g6).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSummary {
    pub budget: usize,
    pub runs: usize,
    pub mean_rad: f64,
    pub std_rad: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub total_shortfall: usize,
}

fn summarize(budget: usize, rows: &[&ReportRow]) -> BudgetSummary {
    let rads: Vec<f64> = rows.iter().map(|r| r.rad).collect();
    let accs: Vec<f64> = rows.iter().map(|r| r.acc_corrupted).collect();
    let (mean_rad, std_rad) = mean_std(&rads);
    let (mean_acc, std_acc) = mean_std(&accs);
    BudgetSummary {
        budget,
        runs: rows.len(),
        mean_rad,
        std_rad,
        mean_acc,
        std_acc,
        total_shortfall: rows.iter().map(|r| r.shortfall).sum(),
    }
}

const SUMMARY_HEADER: &str = "budget,runs,mean_rad,std_rad,mean_acc,std_acc,total_shortfall";

impl BudgetSummary {
    fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.budget,
            self.runs,
            g6(self.mean_rad),
            g6(self.std_rad),
            g6(self.mean_acc),
            g6(self.std_acc),
            self.total_shortfall
        )
    }
}

fn budgets_in_order(rows: &[ReportRow]) -> Vec<usize> {
    let mut budgets = Vec::new();
    for r in rows {
        if !budgets.contains(&r.budget) {
            budgets.push(r.budget);
        }
    }
    budgets
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub method: AttackKind,
    pub acc_pristine: f64,
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<BudgetSummary>,
}

impl AttackReport {
    pub fn new(method: AttackKind, acc_pristine: f64, rows: Vec<ReportRow>) -> Self {
        let summaries = budgets_in_order(&rows)
            .into_iter()
            .map(|b| summarize(b, &rows.iter().filter(|r| r.budget == b).collect::<Vec<_>>()))
            .collect();
        Self {
            method,
            acc_pristine,
            rows,
            summaries,
        }
    }

    pub fn summary(&self, budget: usize) -> Option<&BudgetSummary> {
        self.summaries.iter().find(|s| s.budget == budget)
    }

    /// Per-run rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ROW_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{}", r.method, r.csv_fields());
        }
        out
    }

    /// Mean and sample standard deviation per budget.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("method,{SUMMARY_HEADER}\n");
        for s in &self.summaries {
            let _ = writeln!(out, "{},{}", self.method, s.csv_fields());
        }
        out
    }
}

/// Mean and spread of validation accuracy after a given weight-stealth iteration
/// (iteration 0 is the pristine model).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub config: (usize, usize),
    pub iteration: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub acc_pristine: f64,
    /// Rows grouped by configuration, each carrying its `(k, n_b)`.
    pub rows: Vec<((usize, usize), ReportRow)>,
    pub trajectories: Vec<TrajectoryPoint>,
}

fn label((k, n): (usize, usize)) -> String {
    format!("{k}x{n}")
}

impl SweepReport {
    pub(crate) fn new(
        configs: &[(usize, usize)],
        repetitions: usize,
        acc_pristine: f64,
        cells: Vec<(ReportRow, Vec<f64>)>,
    ) -> Self {
        let mut rows = Vec::with_capacity(cells.len());
        let mut trajectories = Vec::new();
        for (ci, &config) in configs.iter().enumerate() {
            let group = &cells[ci * repetitions..(ci + 1) * repetitions];
            for it in 0..=config.0 {
                let accs: Vec<f64> = group.iter().map(|(_, t)| t[it]).collect();
                let (mean_acc, std_acc) = mean_std(&accs);
                trajectories.push(TrajectoryPoint {
                    config,
                    iteration: it,
                    mean_acc,
                    std_acc,
                });
            }
            rows.extend(group.iter().map(|(r, _)| (config, r.clone())));
        }
        Self {
            acc_pristine,
            rows,
            trajectories,
        }
    }

    /// Final-state summary for one configuration.
    pub fn summary(&self, config: (usize, usize)) -> Option<BudgetSummary> {
        let rows: Vec<&ReportRow> = self.rows.iter().filter(|(c, _)| *c == config).map(|(_, r)| r).collect();
        (!rows.is_empty()).then(|| summarize(config.0 * config.1, &rows))
    }

    pub fn trajectory(&self, config: (usize, usize)) -> Vec<&TrajectoryPoint> {
        self.trajectories.iter().filter(|p| p.config == config).collect()
    }

    fn configs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (c, _) in &self.rows {
            if !out.contains(c) {
                out.push(*c);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("config,k,n_b,{ROW_HEADER}\n");
        for (c, r) in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", label(*c), c.0, c.1, r.method, r.csv_fields());
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("config,k,n_b,{SUMMARY_HEADER}\n");
        for c in self.configs() {
            if let Some(s) = self.summary(c) {
                let _ = writeln!(out, "{},{},{},{}", label(c), c.0, c.1, s.csv_fields());
            }
        }
        out
    }

    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("config,k,n_b,iteration,mean_acc,std_acc\n");
        for p in &self.trajectories {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                label(p.config),
                p.config.0,
                p.config.1,
                p.iteration,
                g6(p.mean_acc),
                g6(p.std_acc)
            );
        }
        out
    }
}

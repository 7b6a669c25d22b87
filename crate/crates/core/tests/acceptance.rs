//! Acceptance checks. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! non-zero if any fail. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 1 9 10`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use expflip::attacks::{apply_plan, exhaustive_attack, model_wise_attack, revert_plan, AttackKind};
use expflip::bits::{exponent_bit_gradient, flip_bit, get_bit, Role};
use expflip::datasets::{self, LabeledDataset, Split};
use expflip::harness::{self, AttackOutcome, AttackReport, ExperimentSpec, ReportRow, SweepReport};
use expflip::nn::{Batch, Model};
use expflip::store;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| root().join("data/mnist"))
}

/// One line of evidence inside a criterion.
struct Check {
    ok: bool,
    text: String,
}

fn check(ok: bool, text: impl Into<String>) -> Check {
    Check { ok, text: text.into() }
}

struct Ctx {
    model: Model,
    val: LabeledDataset,
    train_secs: f64,
}

fn ctx() -> &'static Ctx {
    static CTX: OnceLock<Ctx> = OnceLock::new();
    CTX.get_or_init(|| {
        let cfg = harness::load_train_config(root().join("configs/cnn50k.toml")).unwrap();
        let start = Instant::now();
        let model = harness::train_reference(mnist_dir(), &cfg).unwrap();
        let train_secs = start.elapsed().as_secs_f64();
        let val = datasets::load_mnist(mnist_dir(), Split::Validation).unwrap();
        Ctx { model, val, train_secs }
    })
}

fn experiment(name: &str) -> ExperimentSpec {
    harness::load_spec(root().join("configs/experiments").join(format!("{name}.toml"))).unwrap()
}

/// Audit result of one stealth run, produced by the same routine as `expflip audit`.
struct Audited {
    label: String,
    planned: usize,
    hamming: u64,
    violations: usize,
}

/// Saves the corrupted model next to the pristine file and audits the pair.
struct Auditor {
    dir: tempfile::TempDir,
    pristine: PathBuf,
    results: Mutex<Vec<Audited>>,
}

impl Auditor {
    fn new(model: &Model) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let pristine = dir.path().join("pristine.ibsm");
        store::save(model, &pristine).unwrap();
        Self { dir, pristine, results: Mutex::new(Vec::new()) }
    }

    fn record(&self, label: String, out: &AttackOutcome) -> expflip::Result<()> {
        let path = self.dir.path().join(format!("{label}.ibsm"));
        store::save(&out.model, &path)?;
        let report = harness::audit(&self.pristine, &path)?;
        std::fs::remove_file(&path).ok();
        self.results.lock().unwrap().push(Audited {
            label,
            planned: out.plan.len(),
            hamming: report.hamming_bits,
            violations: report.total_violations(),
        });
        Ok(())
    }

    fn finish(self) -> Vec<Audited> {
        let mut v = self.results.into_inner().unwrap();
        v.sort_by(|a, b| a.label.cmp(&b.label));
        v
    }
}

struct StealthRuns {
    report: AttackReport,
    audits: Vec<Audited>,
}

fn stealth_budgets() -> &'static StealthRuns {
    static RUNS: OnceLock<StealthRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let c = ctx();
        let auditor = Auditor::new(&c.model);
        let inspect = |row: &ReportRow, out: &AttackOutcome| auditor.record(format!("b{}-s{}", row.budget, row.seed), out);
        let report = harness::run_experiment_inspect(&c.model, &c.val, &experiment("weight-stealth"), Some(&inspect)).unwrap();
        StealthRuns { report, audits: auditor.finish() }
    })
}

struct SweepRuns {
    report: SweepReport,
    audits: Vec<Audited>,
}

const SWEEP: [(usize, usize); 2] = [(1, 70), (10, 7)];

fn stealth_sweep() -> &'static SweepRuns {
    static RUNS: OnceLock<SweepRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let c = ctx();
        let auditor = Auditor::new(&c.model);
        let counter = Mutex::new(0usize);
        let inspect = |row: &ReportRow, out: &AttackOutcome| {
            let n = {
                let mut g = counter.lock().unwrap();
                *g += 1;
                *g
            };
            auditor.record(format!("sweep{n:03}-s{}", row.seed), out)
        };
        let report = harness::sweep_stealth_inspect(&c.model, &c.val, &SWEEP, 15, 256, Some(&inspect)).unwrap();
        SweepRuns { report, audits: auditor.finish() }
    })
}

fn special_patterns() -> Vec<u32> {
    vec![
        0x0000_0000, 0x8000_0000, // ±0
        0x7F80_0000, 0xFF80_0000, // ±inf
        0x7FC0_0000, 0xFFC0_0000, 0x7F80_0001, 0x7FBF_FFFF, 0xFFFF_FFFF, 0x7FFF_FFFF, // NaNs
        0x0000_0001, 0x8000_0001, 0x007F_FFFF, 0x807F_FFFF, // subnormals
        0x0080_0000, 0x8080_0000, // smallest normals
        0x7F7F_FFFF, 0xFF7F_FFFF, // ±max
        0x3F80_0000, 0xBF80_0000, 0x4000_0000, 0xC000_0000, 0x3F00_0000,
    ]
}

/// Reads bit `k` from the big-endian byte array, never from the host representation.
fn bit_via_bytes(v: f32, k: u8) -> u8 {
    (v.to_be_bytes()[(k / 8) as usize] >> (7 - k % 8)) & 1
}

fn flip_via_bytes(v: f32, k: u8) -> f32 {
    let mut bytes = v.to_be_bytes();
    bytes[(k / 8) as usize] ^= 1 << (7 - k % 8);
    f32::from_be_bytes(bytes)
}

fn bit_arithmetic() -> Vec<Check> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB17F);
    let mut patterns: Vec<u32> = (0..1_000_000).map(|_| rng.gen()).collect();
    patterns.extend(special_patterns());
    let (mut involution, mut endian) = (0u64, 0u64);
    for &p in &patterns {
        let v = f32::from_bits(p);
        for k in 0..32u8 {
            let once = flip_bit(v, k).unwrap();
            if flip_bit(once, k).unwrap().to_bits() != p || once.to_bits() != p ^ (1 << (31 - k)) {
                involution += 1;
            }
            if get_bit(v, k).unwrap() != bit_via_bytes(v, k) || once.to_bits() != flip_via_bytes(v, k).to_bits() {
                endian += 1;
            }
        }
    }
    let examples = [
        (1.0f32, f32::INFINITY.to_bits()),
        (-2.0, (-0.0f32).to_bits()),
        (0.5, 1.701_411_8e38f32.to_bits()),
    ];
    let bad_examples: Vec<String> = examples
        .iter()
        .filter(|(v, want)| flip_bit(*v, 1).unwrap().to_bits() != *want)
        .map(|(v, _)| v.to_string())
        .collect();
    let secs = start.elapsed().as_secs_f64();
    vec![
        check(involution == 0, format!("involution failures {involution} over {} patterns x 32 bits", patterns.len())),
        check(endian == 0, format!("big-endian byte view mismatches {endian}")),
        check(bad_examples.is_empty(), format!("b1 examples 1.0->+inf, -2.0->-0.0, 0.5->1.7014118e38 wrong: {bad_examples:?}")),
        check(secs < 10.0, format!("runtime {secs:.2} s (< 10 s)")),
    ]
}

/// Value of a normal float with its exponent bits replaced by continuous `b`.
fn value_from_fields(sign: u32, b: &[f64; 8], mantissa: u32) -> f64 {
    let e: f64 = b.iter().enumerate().map(|(j, bj)| 2f64.powi(7 - j as i32) * bj).sum();
    let s = if sign == 1 { -1.0 } else { 1.0 };
    s * 2f64.powf(e - 127.0) * (1.0 + mantissa as f64 / (1u32 << 23) as f64)
}

fn bit_gradient() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut reconstruct = 0;
    for _ in 0..10_000 {
        let sign = rng.gen_range(0..2u32);
        let exp = rng.gen_range(1..255u32);
        let mantissa = rng.gen_range(0..(1u32 << 23));
        let w = f32::from_bits(sign << 31 | exp << 23 | mantissa);
        let g: f32 = rng.gen_range(-3.0..3.0);
        let bits: [f64; 8] = std::array::from_fn(|j| ((exp >> (7 - j)) & 1) as f64);
        if value_from_fields(sign, &bits, mantissa) != w as f64 {
            reconstruct += 1;
        }
        for i in 1..=8u8 {
            let (mut hi, mut lo) = (bits, bits);
            hi[i as usize - 1] += h;
            lo[i as usize - 1] -= h;
            let dw_db = (value_from_fields(sign, &hi, mantissa) - value_from_fields(sign, &lo, mantissa)) / (2.0 * h);
            let numeric = g as f64 * dw_db;
            let analytic = exponent_bit_gradient(w, g, i).unwrap();
            worst = worst.max((analytic - numeric).abs() / numeric.abs().max(f64::MIN_POSITIVE));
        }
    }
    vec![
        check(reconstruct == 0, format!("field reconstruction mismatches {reconstruct}")),
        check(worst <= 1e-4, format!("worst relative error {worst:.3e} over 10000 floats x 8 bits (<= 1e-4)")),
    ]
}

/// Relative error within 1e-2, or absolute within 1e-4 for tiny gradients.
fn agrees(analytic: f64, numeric: f64) -> bool {
    let abs = (analytic - numeric).abs();
    if analytic.abs() < 1e-3 {
        abs <= 1e-4
    } else {
        abs / analytic.abs() <= 1e-2
    }
}

/// Central difference of the f64 reference loss; f64 keeps the step far below any
/// ReLU or max-pool kink without drowning in rounding noise.
fn reference_grad(model: &Model, batch: &Batch, li: usize, role: Role, offset: usize) -> f64 {
    let w = model.param(li, role).unwrap().data()[offset] as f64;
    let h = 1e-6 * w.abs().max(1.0);
    let at = |v: f64| common::reference_loss(model, batch, Some((li, role, offset, v)));
    (at(w + h) - at(w - h)) / (2.0 * h)
}

fn backprop() -> Vec<Check> {
    let model = Model::cnn50k(3);
    let val = datasets::load_mnist(mnist_dir(), Split::Validation).unwrap();
    let batch = datasets::sample_batch(&val, 8, 5).unwrap();
    let snap = model.loss_and_grad(&batch).unwrap();
    let reference = common::reference_loss(&model, &batch, None);
    let mut checks = vec![check(
        (reference - snap.loss).abs() <= 1e-5,
        format!("f64 reference loss {reference:.7} vs library {:.7}", snap.loss),
    )];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut total = 0;
    for layer in ["conv1", "conv2", "fc1", "fc2"] {
        let li = model.layer_index(layer).unwrap();
        for role in [Role::Weight, Role::Bias] {
            let grads = snap.get(layer, role).unwrap();
            let mut bad = Vec::new();
            for _ in 0..8 {
                let offset = rng.gen_range(0..grads.len());
                let numeric = reference_grad(&model, &batch, li, role, offset);
                let analytic = grads[offset] as f64;
                total += 1;
                if !agrees(analytic, numeric) {
                    bad.push(format!("[{offset}] analytic {analytic:.4e} numeric {numeric:.4e}"));
                }
            }
            checks.push(check(bad.is_empty(), format!("{layer}.{role}: 8 coordinates agree {}", bad.join(" "))));
        }
    }
    checks.push(check(total >= 50, format!("{total} coordinates checked")));
    checks
}

fn training() -> Vec<Check> {
    let c = ctx();
    let acc = c.model.accuracy(&c.val.images, &c.val.labels).unwrap();
    vec![
        check(c.model.param_count() == 52_138, format!("{} parameters", c.model.param_count())),
        check(acc >= 0.90, format!("validation accuracy {acc:.4} after one epoch (>= 0.90), trained in {:.0} s", c.train_secs)),
    ]
}

fn single_flip(name: &str) -> AttackReport {
    let c = ctx();
    let mut spec = experiment(name);
    spec.budgets = vec![1];
    harness::run_experiment_on(&c.model, &c.val, &spec).unwrap()
}

fn rad_line(label: &str, report: &AttackReport, budget: usize, ok: impl Fn(f64) -> bool, bound: &str) -> Check {
    let s = report.summary(budget).unwrap();
    check(
        ok(s.mean_rad),
        format!("{label}: mean RAD {:.3} +- {:.3} over {} seeds ({bound})", s.mean_rad, s.std_rad, s.runs),
    )
}

fn table_one() -> Vec<Check> {
    vec![
        rad_line("random, 1 flip", &single_flip("random"), 1, |r| r <= 0.05, "<= 0.05"),
        rad_line("exhaustive, 1 flip", &single_flip("exhaustive"), 1, |r| r >= 0.80, ">= 0.80"),
        rad_line("model-wise, 1 flip", &single_flip("model-wise"), 1, |r| r >= 0.75, ">= 0.75"),
        rad_line("layer-wise, 1 flip", &single_flip("layer-wise"), 1, |r| r >= 0.75, ">= 0.75"),
        rad_line("weight-stealth, 140 flips", &stealth_budgets().report, 140, |r| r >= 0.80, ">= 0.80"),
    ]
}

fn stealth_trend() -> Vec<Check> {
    let report = &stealth_budgets().report;
    let means: Vec<f64> = [1, 15, 35, 70, 140].iter().map(|&b| report.summary(b).unwrap().mean_rad).collect();
    let drops: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    let ok = drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.05);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
    vec![check(ok, format!("mean RAD over budgets 1,15,35,70,140: {} (non-decreasing up to one dip <= 0.05)", shown.join(" -> ")))]
}

fn stealth_configs() -> Vec<Check> {
    let report = &stealth_sweep().report;
    let a = report.summary(SWEEP[0]).unwrap().mean_rad;
    let b = report.summary(SWEEP[1]).unwrap().mean_rad;
    vec![check(b - a >= 0.05, format!("batch 256: (10,7) mean RAD {b:.3} vs (1,70) {a:.3}, margin {:.3} (>= 0.05)", b - a))]
}

fn audit_checks(label: &str, audits: &[Audited], runs: usize) -> Vec<Check> {
    let violations: usize = audits.iter().map(|a| a.violations).sum();
    let worst: Vec<&str> = audits.iter().filter(|a| a.violations > 0).map(|a| a.label.as_str()).collect();
    let hamming_off = audits.iter().filter(|a| a.hamming != a.planned as u64).count();
    vec![
        check(audits.len() == runs, format!("{label}: {} of {runs} runs audited", audits.len())),
        check(violations == 0, format!("{label}: {violations} out-of-range weights {worst:?}")),
        check(hamming_off == 0, format!("{label}: {hamming_off} runs whose file Hamming distance differs from the plan length")),
    ]
}

fn stealth_invariant() -> Vec<Check> {
    let mut checks = audit_checks("budgets 1..140", &stealth_budgets().audits, 5 * 15);
    checks.extend(audit_checks("sweep (1,70)/(10,7)", &stealth_sweep().audits, 2 * 15));
    checks
}

fn oracles() -> Vec<Check> {
    let mut top1 = 0;
    let mut exhaustive = 0;
    for trial in 0..100 {
        let m = common::toy_model(1000 + trial);
        let batch = common::toy_batch(trial, 8);
        let mut attacked = m.clone();
        let plan = model_wise_attack(&mut attacked, &batch, 1).unwrap();
        let got = plan.records.first().map(|r| (r.address.layer.clone(), r.address.offset));
        top1 += (got == common::naive_top1(&m, &batch)) as usize;

        let m = common::toy_model(5000 + trial);
        let batch = common::toy_batch(77 + trial, 6);
        let mut attacked = m.clone();
        let plan = exhaustive_attack(&mut attacked, &batch, 1).unwrap();
        let got = plan.records.first().map(|r| (r.address.layer.clone(), r.address.offset));
        exhaustive += (got == Some(common::naive_exhaustive(&m, &batch))) as usize;
    }
    vec![
        check(top1 == 100, format!("model-wise top-1 vs naive |w*g| scan: {top1}/100")),
        check(exhaustive == 100, format!("exhaustive vs straight-line probe loop: {exhaustive}/100")),
    ]
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

fn audit_fidelity() -> Vec<Check> {
    let dir = tempfile::tempdir().unwrap();
    let saved = dir.path().join("model.ibsm");
    store::save(&Model::cnn50k(21), &saved).unwrap();
    let pristine = read(&saved);
    let mut checks = Vec::new();
    for n in [1usize, 15, 140] {
        let mut bad = Vec::new();
        for trial in 0..10u64 {
            let mut m = store::load(&saved).unwrap();
            let plan = common::random_plan(&m, n, 31 * n as u64 + trial);
            apply_plan(&mut m, &plan).unwrap();
            let corrupted = dir.path().join(format!("n{n}-{trial}.ibsm"));
            store::save(&m, &corrupted).unwrap();
            let hamming = store::payload_hamming(&pristine, &read(&corrupted)).unwrap();
            let audited = harness::audit(&saved, &corrupted).unwrap().hamming_bits;
            revert_plan(&mut m, &plan).unwrap();
            let restored = store::to_bytes(&m) == pristine;
            if hamming != n as u64 || audited != n as u64 || !restored {
                bad.push(format!("trial {trial}: hamming {hamming} audit {audited} restored {restored}"));
            }
        }
        checks.push(check(bad.is_empty(), format!("n = {n}: 10 random plans over all bits {}", bad.join("; "))));
    }
    checks
}

/// Every committed spec, shrunk to two seeds and its smallest budgets.
fn determinism_specs() -> Vec<(String, ExperimentSpec)> {
    ["random", "exhaustive", "model-wise", "layer-wise", "weight-stealth", "weight-stealth-10x7"]
        .iter()
        .map(|name| {
            let mut spec = experiment(name);
            spec.repetitions = 2;
            let keep = if spec.method == AttackKind::Exhaustive { 1 } else { 2 };
            spec.budgets.truncate(keep);
            (name.to_string(), spec)
        })
        .collect()
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the default pool for `None`.
fn on_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        return rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f);
    }
    let _ = threads;
    f()
}

const VARIANTS: [(&str, Option<usize>); 3] = [("rerun", None), ("1 thread", Some(1)), ("4 threads", Some(4))];

fn compare(name: &str, run: impl Fn() -> String + Sync) -> Check {
    let first = run();
    let same: Vec<(&str, bool)> = VARIANTS.iter().map(|&(label, t)| (label, on_pool(t, &run) == first)).collect();
    let shown: Vec<String> = same.iter().map(|(l, s)| format!("{l} {}", if *s { "identical" } else { "DIFFERS" })).collect();
    check(same.iter().all(|(_, s)| *s), format!("{name}: {}", shown.join(", ")))
}

fn determinism() -> Vec<Check> {
    let c = ctx();
    let mut checks: Vec<Check> = determinism_specs()
        .iter()
        .map(|(name, spec)| {
            compare(name, || {
                let r = harness::run_experiment_on(&c.model, &c.val, spec).unwrap();
                r.to_csv() + &r.summary_csv()
            })
        })
        .collect();
    checks.push(compare("stealth sweep 2x5,5x2", || {
        let r = harness::sweep_stealth_configs(&c.model, &c.val, &[(2, 5), (5, 2)], 2, 64).unwrap();
        r.to_csv() + &r.summary_csv() + &r.trajectory_csv()
    }));
    checks
}

type Criterion = (usize, &'static str, fn() -> Vec<Check>);

const CRITERIA: [Criterion; 11] = [
    (1, "bit arithmetic", bit_arithmetic),
    (2, "analytic bit gradient", bit_gradient),
    (3, "backprop vs finite differences", backprop),
    (4, "one-epoch training", training),
    (5, "single-flip and 140-flip attack strength", table_one),
    (6, "weight-stealth trend over budgets", stealth_trend),
    (7, "weight-stealth configuration trend", stealth_configs),
    (8, "weight-stealth range invariant", stealth_invariant),
    (9, "oracle equivalence on toy models", oracles),
    (10, "audit fidelity", audit_fidelity),
    (11, "determinism", determinism),
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, title, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let checks = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                vec![check(false, format!("panicked: {msg}"))]
            });
        let ok = checks.iter().all(|c| c.ok);
        println!(
            "[{}] criterion {n}: {title} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for c in &checks {
            println!("    {} {}", if c.ok { "ok  " } else { "FAIL" }, c.text);
        }
        if !ok {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

//! One PASS/FAIL line per acceptance criterion.
//!
//! Training runs are kept under `target/acceptance` (or
//! `CAMFORGE_ACCEPTANCE_DIR`) and reused while their echoed configuration is
//! unchanged, so only the first invocation pays for the full-data runs. Data
//! comes from `CAMFORGE_DATA`, falling back to the workspace `data` directory.

#[allow(dead_code, unused_imports)]
#[path = "losses.rs"]
mod losses;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camforge::bench::{bench_one, median, random_batch, BenchSettings};
use camforge::checkpoint;
use camforge::config::TrainConfig;
use camforge::data::Dataset;
use camforge::losses::LossConfig;
use camforge::models::{Arch, Model, ModelSpec};
use camforge::train::{self, validate, Preprocess, RunData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [42, 43, 44];
const EPOCHS: &str = "6";
/// Batch prototype weights tried on MNIST seed 42; the best by validation
/// accuracy is used for every BCPL run.
const LAMBDAS: [&str; 3] = ["0.1", "0.3", "1"];

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, text: String) {
        self.failures += usize::from(!pass);
        println!("{} {id:<3} {text}", if pass { "PASS" } else { "FAIL" });
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_root() -> PathBuf {
    std::env::var_os("CAMFORGE_DATA").map_or_else(|| workspace().join("data"), PathBuf::from)
}

fn runs_dir() -> PathBuf {
    std::env::var_os("CAMFORGE_ACCEPTANCE_DIR").map_or_else(|| workspace().join("target/acceptance"), PathBuf::from)
}

/// Outcome of one training run, read back from its output directory.
struct Outcome {
    test_acc: f64,
    best_val_acc: f64,
    epochs: usize,
    wall_minutes: f64,
}

fn read_outcome(dir: &Path) -> Option<Outcome> {
    let report = fs::read_to_string(dir.join("report/test_report.txt")).ok()?;
    let test_acc = report.lines().find_map(|l| l.strip_prefix("test_accuracy="))?.parse().ok()?;
    let metrics = fs::read_to_string(dir.join("metrics.csv")).ok()?;
    let val: Vec<f64> = metrics.lines().skip(1).map(|l| l.split(',').nth(3)?.parse().ok()).collect::<Option<_>>()?;
    let timing = fs::read_to_string(dir.join("timing.csv")).ok()?;
    let seconds: f64 = timing.lines().skip(1).map(|l| l.split(',').nth(1)?.parse::<f64>().ok()).sum::<Option<f64>>()?;
    Some(Outcome {
        test_acc,
        best_val_acc: val.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        epochs: val.len(),
        wall_minutes: seconds / 60.0,
    })
}

/// Reuse a finished run with the same configuration or train it now.
fn run(name: &str, settings: &[(&str, &str)]) -> Result<Outcome, String> {
    let mut cfg = TrainConfig {
        data_root: data_root(),
        output_dir: runs_dir().join(name),
        ..TrainConfig::default()
    };
    for (k, v) in settings {
        cfg.set(k, v)?;
    }
    let dir = &cfg.output_dir;
    let cached = fs::read_to_string(dir.join("config.txt")).is_ok_and(|c| c == cfg.echo());
    if !cached {
        eprintln!("training {name} into {}", dir.display());
        let data = RunData::load(&cfg).map_err(|e| e.to_string())?;
        train::run(&cfg, &data, |r| eprintln!("  {name} epoch {} val {:.2}%", r.epoch, r.val_acc)).map_err(|e| e.to_string())?;
    }
    read_outcome(dir).ok_or_else(|| format!("incomplete run directory {}", dir.display()))
}

fn seeded(name: &str, settings: &[(&str, &str)]) -> Result<Vec<Outcome>, String> {
    SEEDS
        .iter()
        .map(|seed| {
            let seed = seed.to_string();
            let mut all = settings.to_vec();
            all.push(("seed", &seed));
            run(&format!("{name}_seed{seed}"), &all)
        })
        .collect()
}

fn median_acc(runs: &[Outcome]) -> f64 {
    median(&mut runs.iter().map(|r| r.test_acc).collect::<Vec<_>>())
}

fn accs(runs: &[Outcome]) -> String {
    runs.iter().map(|r| format!("{:.2}", r.test_acc)).collect::<Vec<_>>().join(", ")
}

fn accuracy(report: &mut Report) {
    let baseline = seeded("mnist_baseline", &[("dataset", "mnist"), ("loss", "baseline"), ("epochs", EPOCHS)]);
    let base_median = match &baseline {
        Ok(runs) => {
            let m = median_acc(runs);
            let wall = runs.iter().map(|r| r.wall_minutes).fold(0.0, f64::max);
            let epochs = runs.iter().map(|r| r.epochs).max().unwrap_or(0);
            report.line(
                "1a",
                m >= 98.4 && wall <= 30.0 && epochs <= 10,
                format!(
                    "SimpleCNN/MNIST baseline: median test {m:.2}% ({}), {epochs} epochs, slowest run {wall:.1} min [>= 98.40%, <= 10 epochs, <= 30 min]",
                    accs(runs)
                ),
            );
            Some(m)
        }
        Err(e) => {
            report.line("1a", false, format!("SimpleCNN/MNIST baseline: {e}"));
            None
        }
    };

    let sweep: Result<Vec<Outcome>, String> = LAMBDAS
        .iter()
        .map(|l| run(&format!("mnist_bcpl_l1_lambda{l}_seed42"), &[("loss", "bcpl_l1"), ("lambda_batch_proto", l), ("epochs", EPOCHS), ("seed", "42")]))
        .collect();
    let lambda = match &sweep {
        Ok(runs) => {
            let best = (0..runs.len()).fold(0, |b, i| if runs[i].best_val_acc > runs[b].best_val_acc { i } else { b });
            let vals: Vec<String> = LAMBDAS.iter().zip(runs).map(|(l, r)| format!("{l}: {:.2}%", r.best_val_acc)).collect();
            println!("     lambda_batch_proto by MNIST seed-42 validation accuracy: {} -> {}", vals.join(", "), LAMBDAS[best]);
            LAMBDAS[best]
        }
        Err(e) => {
            report.line("1b", false, format!("lambda selection: {e}"));
            LAMBDAS[2]
        }
    };
    let bcpl = |dataset: &'static str| [("dataset", dataset), ("loss", "bcpl_l1"), ("lambda_batch_proto", lambda), ("epochs", EPOCHS)];

    match seeded(&format!("mnist_bcpl_l1_lambda{lambda}"), &bcpl("mnist")) {
        Ok(runs) => {
            let m = median_acc(&runs);
            let floor = base_median.map_or(f64::INFINITY, |b| b - 0.3);
            report.line(
                "1b",
                m >= 98.5 && m >= floor,
                format!(
                    "SimpleCNN/MNIST BCPL_L1 (lambda {lambda}): median test {m:.2}% ({}) [>= 98.50%, >= baseline - 0.3 = {floor:.2}%]",
                    accs(&runs)
                ),
            );
        }
        Err(e) => report.line("1b", false, format!("SimpleCNN/MNIST BCPL_L1: {e}")),
    }

    match seeded(&format!("fmnist_bcpl_l1_lambda{lambda}"), &bcpl("fmnist")) {
        Ok(runs) => {
            let m = median_acc(&runs);
            report.line("1c", m >= 90.3, format!("SimpleCNN/FashionMNIST BCPL_L1 (lambda {lambda}): median test {m:.2}% ({}) [>= 90.30%]", accs(&runs)));
        }
        Err(e) => report.line("1c", false, format!("SimpleCNN/FashionMNIST BCPL_L1: {e}")),
    }

    match run(
        "mnist_resnet18_smoke",
        &[("model", "resnet18"), ("loss", "bcpl_l1"), ("lambda_batch_proto", lambda), ("epochs", "1")],
    ) {
        Ok(r) => report.line(
            "1d",
            r.best_val_acc >= 95.0,
            format!("ResNet18/MNIST 1 epoch: val {:.2}%, test {:.2}% [val >= 95%]", r.best_val_acc, r.test_acc),
        ),
        Err(e) => report.line("1d", false, format!("ResNet18/MNIST 1 epoch: {e}")),
    }

    let stage = [
        ("model", "resnet18"),
        ("input_side", "112"),
        ("loss", "bcpl_l1"),
        ("lambda_batch_proto", lambda),
        ("epochs", "1"),
        ("train_limit", "2000"),
        ("val_limit", "500"),
        ("test_limit", "500"),
    ];
    match run("mnist_112_smoke", &stage) {
        Ok(r) => report.line(
            "1e",
            r.epochs == 1 && r.test_acc.is_finite(),
            format!("112x112 stage, ResNet18 BCPL_L1, 1 epoch on 2000 images: ran end to end, test {:.2}% (non-gating)", r.test_acc),
        ),
        Err(e) => report.line("1e", false, format!("112x112 stage: {e}")),
    }
}

fn equivalence(report: &mut Report) {
    let (simple, simple_live) = cam::equivalence_grid(Arch::SimpleCnn, cam::SIMPLECNN_LAYERS);
    let (resnet, resnet_live) = cam::equivalence_grid(Arch::ResNet18, cam::RESNET_LAYERS);
    report.line(
        "2",
        simple < 1e-5 && resnet < 1e-5 && simple_live && resnet_live,
        format!("functional vs hooked, batches 1/4/16/64: max abs diff SimpleCNN {simple:.2e}, ResNet18 {resnet:.2e} [< 1e-5]"),
    );
}

fn collapse(report: &mut Report) {
    let mismatches = cam::batch_of_one_mismatches(100);
    report.line("3", mismatches == 0, format!("batch-of-one collapse: {mismatches} of 100 trials differ [exact equality]"));
}

fn efficiency(report: &mut Report) {
    let settings = BenchSettings {
        trials: 5,
        warmup: 1,
        seed: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut pass = true;
    let mut parts = Vec::new();
    for arch in [Arch::SimpleCnn, Arch::ResNet18] {
        let mut model = Model::build(ModelSpec::new(arch, 28), 0).unwrap();
        let (images, classes) = random_batch(64, 28, &mut rng);
        let r = bench_one(&mut model, &images, &classes, &settings).unwrap();
        pass &= r.functional_ms <= r.hooked_ms;
        parts.push(format!("{arch} {:.1} vs {:.1} ms (ratio {:.2})", r.functional_ms, r.hooked_ms, r.ratio()));
    }
    report.line("4", pass, format!("median functional <= hooked at batch 64: {} [ratio >= 1]", parts.join(", ")));
}

fn gradients(report: &mut Report) {
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    let mut worst_name = "";
    for (name, errors) in gradcheck::CASES {
        let (e64, e32) = errors();
        if e32 > w32 {
            worst_name = name;
        }
        w64 = w64.max(e64);
        w32 = w32.max(e32);
    }
    let q32 = gradcheck::query_pipeline::<f32>(1e-2);
    let q64 = gradcheck::query_pipeline::<f64>(1e-6);
    report.line(
        "5",
        w64.max(q64) < gradcheck::TOL_F64 && w32.max(q32) < gradcheck::TOL_F32,
        format!(
            "central differences over {} operator cases + gradient query: worst rel err f32 {:.2e} ({worst_name}), f64 {:.2e} [< 1e-2, < 1e-4]",
            gradcheck::CASES.len(),
            w32.max(q32),
            w64.max(q64)
        ),
    );
}

fn loss_properties(report: &mut Report) {
    let (lo, hi, at_equality) = losses::metric_sweep(2000);
    let gap = losses::batch_loss_worst_gap(6);
    report.line(
        "6",
        lo >= 0.0 && hi <= 2.0 && at_equality < 1e-12 && gap <= 1e-4,
        format!(
            "SSIM loss range [{lo:.4}, {hi:.4}] over 2000 pairs, worst metric at equality {at_equality:.1e}, batched class-sum vs per-class recomputation rel gap {gap:.1e} [in [0,2], 0, <= 1e-4]"
        ),
    );
}

fn parameters(report: &mut Report) {
    let resnet = Model::build(ModelSpec::new(Arch::ResNet18, 28), 0).unwrap().param_count();
    let simple = Model::build(ModelSpec::new(Arch::SimpleCnn, 28), 0).unwrap().param_count();
    let rel = (resnet as f64 - 11.17e6).abs() / 11.17e6;
    report.line(
        "7",
        rel <= 0.005 && simple == 420_586,
        format!("parameters: ResNet18 {resnet} ({:.2}% from 11.17M), SimpleCNN {simple} [<= 0.5%, == 420586]", rel * 100.0),
    );
}

fn determinism(report: &mut Report) {
    let data = training::synthetic_run_data(28);
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    for loss in ["bcpl_l1", "pl_ssim"] {
        let a = train::run(&training::config(loss, &dir.path().join(format!("{loss}_a"))), &data, |_| {}).unwrap();
        let b = train::run(&training::config(loss, &dir.path().join(format!("{loss}_b"))), &data, |_| {}).unwrap();
        identical &= fs::read(&a.metrics_csv).unwrap() == fs::read(&b.metrics_csv).unwrap();
    }
    let mut untouched = true;
    for arch in [Arch::SimpleCnn, Arch::ResNet18] {
        let mut model = Model::build(ModelSpec::new(arch, 28), 1).unwrap();
        let prep = Preprocess {
            side: 28,
            norm: Dataset::Mnist.norm(),
        };
        let before = checkpoint::to_bytes(&model, 1, 0, 0.0);
        validate(&mut model, &data.val, &data.val_protos, &LossConfig::default(), &prep, 16).unwrap();
        untouched &= checkpoint::to_bytes(&model, 1, 0, 0.0) == before;
    }
    report.line(
        "8",
        identical && untouched,
        format!("determinism: repeated runs byte-identical metrics CSV = {identical}, validation leaves parameters byte-identical = {untouched}"),
    );
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    accuracy(&mut report);
    equivalence(&mut report);
    collapse(&mut report);
    efficiency(&mut report);
    gradients(&mut report);
    loss_properties(&mut report);
    parameters(&mut report);
    determinism(&mut report);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criterion line(s) failed", report.failures);
        ExitCode::FAILURE
    }
}

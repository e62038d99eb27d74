//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::bench::{bench_gradcam, report_bench, BenchSettings};
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, Split};
use crate::error::{Error, Result};
use crate::gradcam::{self, explain_functional};
use crate::models::{Arch, Mode};
use crate::pgm;
use crate::prototypes::build_prototypes;
use crate::tensor::Tensor;
use crate::train::{self, Preprocess, RunData};

pub const DATA_ENV: &str = "CAMFORGE_DATA";

#[derive(Debug, Parser)]
#[command(name = "camforge", version, about = "Explanation-guided training with Grad-CAM prototype losses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value configuration file (`#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset root holding mnist/ and fashion-mnist/ (beats $CAMFORGE_DATA).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Output directory (beats `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build train- and val-split prototypes and write them as PGM and JSON.
    PreparePrototypes(Common),
    /// Train, validate each epoch, keep the best checkpoint, evaluate on test.
    ///
    /// With the bcpl_* losses the prototype term is a sum over the classes
    /// present in each batch, so its scale grows with class diversity.
    Train(Common),
    /// Evaluate a checkpoint on the test split and export CAM grids.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grad-CAM of the predicted class for one image.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grayscale P5 image; resized to the model side.
        #[arg(long, conflicts_with = "index")]
        image: Option<PathBuf>,
        /// Index into the test split.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Time functional against hooked Grad-CAM and check they agree.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec!["simplecnn".to_string(), "resnet18".to_string()])]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![28])]
        sides: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 4, 16, 64])]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
    },
}

/// Config file, then `$CAMFORGE_DATA`, then `--set`, then the path flags.
pub fn resolve_config(common: &Common, fallback: Option<&Path>) -> Result<TrainConfig> {
    let path = common.config.as_deref().or(fallback.filter(|p| p.exists()));
    let mut cfg = match path {
        Some(p) => TrainConfig::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(root) = std::env::var_os(DATA_ENV) {
        cfg.data_root = PathBuf::from(root);
    }
    cfg.apply_overrides(&common.overrides)?;
    if let Some(root) = &common.data_root {
        cfg.data_root = root.clone();
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare(cfg: &TrainConfig) -> Result<()> {
    let full = data::load_split(&cfg.data_root, cfg.dataset, true)?;
    let (tr, va) = data::split_train_val(&full, cfg.train_fraction, cfg.seed)?;
    let dir = cfg.output_dir.join("prototypes");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for ds in [tr, va] {
        let set = build_prototypes(&ds)?.resized(cfg.model.input_side)?;
        set.export_pgm(&dir)?;
        set.save_json(&dir.join(format!("{}.json", ds.split)))?;
        println!("{}: {} images -> {}", ds.split, ds.len(), dir.display());
    }
    Ok(())
}

fn train_cmd(cfg: &TrainConfig) -> Result<()> {
    let data = RunData::load(cfg)?;
    println!(
        "{} {} {} | train {} val {} test {} | {}",
        cfg.dataset.name(),
        cfg.model.arch,
        cfg.loss,
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cfg.output_dir.display()
    );
    let summary = train::run(cfg, &data, |r| {
        println!(
            "epoch {:>3}  ce {:.4}  proto {:.4}  val_acc {:.2}  val_proto {:.4}",
            r.epoch, r.train_ce, r.train_proto, r.val_acc, r.val_proto
        )
    })?;
    println!(
        "best epoch {} (val {:.2}%), test accuracy {:.2}%",
        summary.best_epoch, summary.best_val_acc, summary.test.accuracy
    );
    Ok(())
}

fn eval_cmd(common: &Common, ckpt: &Path) -> Result<()> {
    let sibling = ckpt.parent().map(|d| d.join("config.txt"));
    let mut cfg = resolve_config(common, sibling.as_deref())?;
    let (mut model, manifest) = checkpoint::load(ckpt)?;
    cfg.model = manifest.spec;
    if common.out.is_none() {
        cfg.output_dir = ckpt.parent().unwrap_or(Path::new(".")).to_path_buf();
    }
    let test = data::load_split(&cfg.data_root, cfg.dataset, false)?;
    let test = if cfg.test_limit > 0 && cfg.test_limit < test.len() {
        test.truncate(cfg.test_limit)
    } else {
        test
    };
    let report = train::evaluate_test(&mut model, &test, cfg.dataset.norm(), 256)?;
    let dir = cfg.output_dir.join("report");
    train::export_report(&report, &dir)?;
    println!("test accuracy {:.2}% on {} images -> {}", report.accuracy, report.total(), dir.display());
    Ok(())
}

fn explain_cmd(common: &Common, ckpt: &Path, image: Option<&Path>, index: Option<usize>) -> Result<()> {
    let sibling = ckpt.parent().map(|d| d.join("config.txt"));
    let cfg = resolve_config(common, sibling.as_deref())?;
    let (mut model, manifest) = checkpoint::load(ckpt)?;
    let side = manifest.spec.input_side;
    let (raw, label) = match (image, index) {
        (Some(path), _) => {
            let (h, w, px) = pgm::read(path)?;
            (Tensor::new(vec![1, 1, h, w], px)?, None)
        }
        (None, Some(i)) => {
            let test = data::load_split(&cfg.data_root, cfg.dataset, false)?;
            if i >= test.len() {
                return Err(Error::Invalid(format!("index {i} outside test split of {}", test.len())));
            }
            let one = test.select(&[i], Split::Test);
            (one.images, Some(one.labels[0]))
        }
        (None, None) => return Err(Error::Invalid("explain needs --image or --index".into())),
    };
    let raw = if raw.dim(2) == side && raw.dim(3) == side {
        raw
    } else {
        crate::ops::resize_bilinear(&raw, side, side)?
    };
    let prep = Preprocess {
        side,
        norm: cfg.dataset.norm(),
    };
    let (logits, cams) = explain_functional(&mut model, &prep.apply(&raw)?, None, Mode::Eval)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (h, w) = (cams.maps.dim(2), cams.maps.dim(3));
    gradcam::write_cam_csv(&out.join("cam.csv"), cams.map(0), h, w)?;
    let up = gradcam::upsample_cam(&cams.maps, side)?;
    gradcam::write_cam_pgm(&out.join("cam.pgm"), up.data(), side, side)?;
    pgm::write(&out.join("input.pgm"), raw.data(), side, side)?;
    let scores: Vec<String> = logits.data().iter().map(|v| format!("{v:.3}")).collect();
    println!(
        "predicted class {}{} | logits [{}] | cam {h}×{w} -> {}",
        cams.classes[0],
        label.map(|l| format!(" (label {l})")).unwrap_or_default(),
        scores.join(", "),
        out.join("cam.pgm").display()
    );
    Ok(())
}

fn bench_cmd(models: &[String], sides: &[usize], batches: &[usize], settings: BenchSettings, out: &Path) -> Result<bool> {
    let mut all_equivalent = true;
    for name in models {
        let arch = Arch::parse(name).ok_or_else(|| Error::Invalid(format!("unknown model {name:?}")))?;
        let sides: Vec<usize> = match arch {
            Arch::SimpleCnn => sides.iter().copied().filter(|&s| s == 28).collect(),
            Arch::ResNet18 => sides.to_vec(),
        };
        for &side in &sides {
            let results = bench_gradcam(arch, &[side], batches, &settings)?;
            let csv = report_bench(&results);
            let path = out.join(format!("bench_{arch}_{side}.csv"));
            write(&path, &csv)?;
            println!("{arch} @ {side}:\n{csv}-> {}", path.display());
            for r in &results {
                if !r.equivalent() {
                    eprintln!("equivalence failure: {arch} batch {} max diff {:e}", r.batch_size, r.max_abs_diff);
                    all_equivalent = false;
                }
            }
        }
    }
    Ok(all_equivalent)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::PreparePrototypes(common) => prepare(&resolve_config(&common, None)?).map(|_| true),
        Command::Train(common) => train_cmd(&resolve_config(&common, None)?).map(|_| true),
        Command::Eval { common, checkpoint } => eval_cmd(&common, &checkpoint).map(|_| true),
        Command::Explain {
            common,
            checkpoint,
            image,
            index,
        } => explain_cmd(&common, &checkpoint, image.as_deref(), index).map(|_| true),
        Command::Bench {
            models,
            sides,
            batches,
            trials,
            warmup,
            seed,
            out,
        } => bench_cmd(&models, &sides, &batches, BenchSettings { trials, warmup, seed }, &out),
    }
}

/// Run with `argv` (program name first); returns the process exit code:
/// 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            if e.kind() != clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                eprintln!("\n{}", Cli::command().render_help());
            }
            return 1;
        }
    };
    match dispatch(cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["camforge", "frobnicate"]), 1);
        assert_eq!(run(["camforge"]), 1);
        assert_eq!(run(["camforge", "--help"]), 0);
    }

    #[test]
    fn bad_config_value_exits_one() {
        assert_eq!(run(["camforge", "train", "--set", "lr=abc"]), 1);
    }

    #[test]
    fn missing_data_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "camforge".to_string(),
            "prepare-prototypes".into(),
            "--data-root".into(),
            dir.path().display().to_string(),
            "--out".into(),
            dir.path().join("o").display().to_string(),
        ]);
        assert_eq!(code, 2);
    }
}

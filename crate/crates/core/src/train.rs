//! Training with CAM-prototype objectives, validation, test evaluation, and
//! report export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, Batch, LabeledDataset, NormSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::gradcam::{self, argmax_rows, FeatureCapture};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossConfig, Variant};
use crate::models::{Mode, Model};
use crate::pgm;
use crate::prototypes::{build_prototypes, PrototypeSet};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,train_ce,train_proto,val_acc,val_proto,seconds";

/// Resize to the model side, then normalize.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    pub side: usize,
    pub norm: NormSpec,
}

impl Preprocess {
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.norm.apply(&data::resize_images(images, self.side)?))
    }
}

/// Splits and prototypes for one run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub train_protos: PrototypeSet,
    pub val_protos: PrototypeSet,
}

fn limit(ds: LabeledDataset, n: usize) -> LabeledDataset {
    if n == 0 || n >= ds.len() {
        ds
    } else {
        ds.truncate(n)
    }
}

impl RunData {
    /// Load the dataset, split train/val with the run seed, apply size caps,
    /// and build split-specific prototypes at the model side.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let full = data::load_split(&cfg.data_root, cfg.dataset, true)?;
        let test = data::load_split(&cfg.data_root, cfg.dataset, false)?;
        let (train, val) = data::split_train_val(&full, cfg.train_fraction, cfg.seed)?;
        Self::from_splits(
            limit(train, cfg.train_limit),
            limit(val, cfg.val_limit),
            limit(test, cfg.test_limit),
            cfg.model.input_side,
        )
    }

    pub fn from_splits(train: LabeledDataset, val: LabeledDataset, test: LabeledDataset, side: usize) -> Result<Self> {
        let train_protos = build_prototypes(&train)?.resized(side)?;
        let val_protos = build_prototypes(&val)?.resized(side)?;
        Ok(RunData {
            train,
            val,
            test,
            train_protos,
            val_protos,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub train_proto: f64,
    pub val_acc: f64,
    pub val_proto: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.4},{:.6},{:.3}",
            self.epoch, self.train_ce, self.train_proto, self.val_acc, self.val_proto, self.seconds
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

/// Forward a batch and build the objective's prototype term.
struct StepGraph {
    graph: Graph,
    logits: Var,
    ce: Var,
    proto: Var,
}

fn build_step(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    protos: &PrototypeSet,
    loss: &LossConfig,
    mode: Mode,
) -> Result<StepGraph> {
    let mut g = Graph::new();
    let (logits, act) = model.forward_capture(&mut g, images, mode)?;
    let capture = FeatureCapture::new(&g, act)?;
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let side = protos.side();
    let proto = match loss.variant {
        Variant::Baseline | Variant::Pl => {
            let maps = gradcam::functional_cam_var(&mut g, logits, &capture, labels)?;
            let maps = gradcam::upsample_cam_var(&mut g, maps, side)?;
            losses::prototype_loss(&mut g, maps, protos, labels, loss.metric)?
        }
        Variant::Bcpl => {
            let (maps, acc) = gradcam::batchcam_var(&mut g, logits, &capture, labels)?;
            let maps = gradcam::upsample_cam_var(&mut g, maps, side)?;
            losses::batchcam_prototype_loss(&mut g, maps, protos, &acc.classes, loss.metric)?
        }
    };
    Ok(StepGraph {
        graph: g,
        logits,
        ce,
        proto,
    })
}

/// One optimizer step; returns `(cross-entropy, prototype term)`.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    protos: &PrototypeSet,
    loss: &LossConfig,
    lr: f64,
    batch_index: usize,
) -> Result<(f64, f64)> {
    let StepGraph {
        mut graph, ce, proto, ..
    } = build_step(model, &batch.images, &batch.labels, protos, loss, Mode::Train)?;
    let total = losses::total_loss(&mut graph, ce, Some(proto), loss)?;
    if !graph.value(total).all_finite() {
        return Err(Error::NonFiniteLoss { batch: batch_index });
    }
    let (ce_v, proto_v) = (graph.value(ce).item(), graph.value(proto).item());
    model
        .params_mut()
        .backward_and_step(&mut graph, total, lr)
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { batch: batch_index },
            other => other,
        })?;
    Ok((f64::from(ce_v), f64::from(proto_v)))
}

/// Accuracy (percent) and mean prototype term over a split, with running
/// batchnorm statistics and no parameter updates. CAM gradients are still
/// queried.
pub fn validate(
    model: &mut Model,
    ds: &LabeledDataset,
    protos: &PrototypeSet,
    loss: &LossConfig,
    prep: &Preprocess,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut proto_sum = 0.0f64;
    let mut batches = 0usize;
    for batch in data::make_batches(ds, batch_size, 0, 0, false)? {
        let images = prep.apply(&batch.images)?;
        let step = build_step(model, &images, &batch.labels, protos, loss, Mode::Eval)?;
        let preds = argmax_rows(step.graph.value(step.logits));
        correct += preds.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        let term = f64::from(step.graph.value(step.proto).item());
        // per-image terms are averaged over items, batch terms over batches
        proto_sum += match loss.variant {
            Variant::Bcpl => term,
            _ => term * batch.labels.len() as f64,
        };
        batches += 1;
    }
    let denom = match loss.variant {
        Variant::Bcpl => batches.max(1),
        _ => ds.len().max(1),
    };
    Ok((100.0 * correct as f64 / ds.len().max(1) as f64, proto_sum / denom as f64))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    /// Parameters of the epoch with the best validation accuracy.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub wall_seconds: Vec<f64>,
}

/// Train for `cfg.epochs`, validating after every epoch and keeping the
/// best-validation model.
pub fn train(cfg: &TrainConfig, data: &RunData, mut progress: impl FnMut(&MetricsRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let loss = cfg.effective_loss();
    let prep = Preprocess {
        side: cfg.model.input_side,
        norm: cfg.dataset.norm(),
    };
    let mut model = Model::build(cfg.model.clone(), cfg.seed)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut wall_seconds = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut ce_sum, mut proto_sum, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for batch in data::make_batches(&data.train, cfg.batch_size, cfg.seed, epoch as u64, true)? {
            // batch statistics need two items; a trailing singleton is skipped
            if batch.labels.len() < 2 && model.has_batchnorm() {
                continue;
            }
            let batch = Batch {
                images: prep.apply(&batch.images)?,
                labels: batch.labels,
            };
            let n = batch.labels.len();
            let (ce, proto) = train_step(&mut model, &batch, &data.train_protos, &loss, cfg.lr, step)?;
            ce_sum += ce * n as f64;
            proto_sum += match loss.variant {
                Variant::Bcpl => proto,
                _ => proto * n as f64,
            };
            seen += n;
            batches += 1;
            step += 1;
        }
        let (val_acc, val_proto) = validate(&mut model, &data.val, &data.val_protos, &loss, &prep, cfg.batch_size)?;
        let elapsed = start.elapsed().as_secs_f64();
        let record = MetricsRecord {
            epoch,
            train_ce: ce_sum / seen.max(1) as f64,
            train_proto: proto_sum
                / match loss.variant {
                    Variant::Bcpl => batches.max(1),
                    _ => seen.max(1),
                } as f64,
            val_acc,
            val_proto,
            seconds: if cfg.timing { elapsed } else { 0.0 },
        };
        progress(&record);
        if val_acc > best.2 {
            best = (model.clone(), epoch, val_acc);
        }
        metrics.push(record);
        wall_seconds.push(elapsed);
    }
    Ok(TrainOutcome {
        metrics,
        best: best.0,
        best_epoch: best.1,
        best_val_acc: best.2,
        wall_seconds,
    })
}

/// Test accuracy, confusion counts, and per-class mean CAMs split by whether
/// the prediction was right.
#[derive(Clone, Debug, PartialEq)]
pub struct TestReport {
    pub accuracy: f64,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub side: usize,
    pub correct_maps: Vec<Vec<f32>>,
    pub correct_counts: Vec<usize>,
    pub wrong_maps: Vec<Vec<f32>>,
    pub wrong_counts: Vec<usize>,
}

impl TestReport {
    pub fn total(&self) -> usize {
        self.correct_counts.iter().chain(&self.wrong_counts).sum()
    }
}

/// Evaluate on the test split. Maps explain the predicted class and are
/// upsampled to the input side before averaging.
pub fn evaluate_test(model: &mut Model, test: &LabeledDataset, norm: NormSpec, batch_size: usize) -> Result<TestReport> {
    let side = model.spec().input_side;
    let prep = Preprocess { side, norm };
    let per = side * side;
    let mut sums = [vec![vec![0.0f64; per]; NUM_CLASSES], vec![vec![0.0f64; per]; NUM_CLASSES]];
    let mut counts = [vec![0usize; NUM_CLASSES], vec![0usize; NUM_CLASSES]];
    let mut confusion = vec![vec![0usize; NUM_CLASSES]; NUM_CLASSES];
    for batch in data::make_batches(test, batch_size, 0, 0, false)? {
        let images = prep.apply(&batch.images)?;
        let (_, cams) = gradcam::explain_functional(model, &images, None, Mode::Eval)?;
        let maps = gradcam::upsample_cam(&cams.maps, side)?;
        for (i, (&truth, &pred)) in batch.labels.iter().zip(&cams.classes).enumerate() {
            confusion[truth][pred] += 1;
            let group = usize::from(truth != pred);
            counts[group][truth] += 1;
            for (acc, &v) in sums[group][truth].iter_mut().zip(&maps.data()[i * per..(i + 1) * per]) {
                *acc += f64::from(v);
            }
        }
    }
    let mean = |sums: &[Vec<f64>], counts: &[usize]| -> Vec<Vec<f32>> {
        sums.iter()
            .zip(counts)
            .map(|(s, &n)| s.iter().map(|&v| if n > 0 { (v / n as f64) as f32 } else { 0.0 }).collect())
            .collect()
    };
    let correct: usize = counts[0].iter().sum();
    Ok(TestReport {
        accuracy: 100.0 * correct as f64 / test.len().max(1) as f64,
        correct_maps: mean(&sums[0], &counts[0]),
        wrong_maps: mean(&sums[1], &counts[1]),
        correct_counts: counts[0].clone(),
        wrong_counts: counts[1].clone(),
        confusion,
        side,
    })
}

/// Per-class PGMs for both groups, one grid per group, and the confusion matrix.
pub fn export_report(report: &TestReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = report.side;
    for (group, maps) in [("correct", &report.correct_maps), ("wrong", &report.wrong_maps)] {
        for (c, map) in maps.iter().enumerate() {
            pgm::write(&dir.join(format!("cam_{group}_{c}.pgm")), map, s, s)?;
        }
        let (h, w, g) = pgm::grid(maps, s, s, 5);
        pgm::write(&dir.join(format!("cam_{group}_grid.pgm")), &g, h, w)?;
    }
    let mut csv = String::from("true\\pred");
    for c in 0..NUM_CLASSES {
        write!(csv, ",{c}").unwrap();
    }
    csv.push('\n');
    for (t, row) in report.confusion.iter().enumerate() {
        write!(csv, "{t}").unwrap();
        for v in row {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    let path = dir.join("confusion.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let mut summary = format!("test_accuracy={:.4}\n", report.accuracy);
    writeln!(summary, "correct_counts={:?}", report.correct_counts).unwrap();
    writeln!(summary, "wrong_counts={:?}", report.wrong_counts).unwrap();
    let path = dir.join("test_report.txt");
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))
}

/// Files written by [`run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub metrics: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test: TestReport,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Full run into `cfg.output_dir`: config echo, prototypes, metrics CSV,
/// best checkpoint, and the test report reloaded from that checkpoint.
pub fn run(cfg: &TrainConfig, data: &RunData, progress: impl FnMut(&MetricsRecord)) -> Result<RunSummary> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("config.txt"), &cfg.echo())?;
    let proto_dir = out.join("prototypes");
    data.train_protos.export_pgm(&proto_dir)?;
    data.val_protos.export_pgm(&proto_dir)?;

    let outcome = train(cfg, data, progress)?;
    let metrics_path = out.join("metrics.csv");
    write(&metrics_path, &metrics_csv(&outcome.metrics))?;
    let mut timing = String::from("epoch,wall_seconds\n");
    for (i, s) in outcome.wall_seconds.iter().enumerate() {
        writeln!(timing, "{},{s:.3}", i + 1).unwrap();
    }
    write(&out.join("timing.csv"), &timing)?;

    let ckpt = out.join("best.ckpt");
    checkpoint::save(&ckpt, &outcome.best, cfg.seed, outcome.best_epoch, outcome.best_val_acc)?;
    let (mut reloaded, _) = checkpoint::load(&ckpt)?;
    let test = evaluate_test(&mut reloaded, &data.test, cfg.dataset.norm(), 256)?;
    export_report(&test, &out.join("report"))?;
    Ok(RunSummary {
        metrics: outcome.metrics,
        best_epoch: outcome.best_epoch,
        best_val_acc: outcome.best_val_acc,
        test,
        checkpoint: ckpt,
        metrics_csv: metrics_path,
    })
}

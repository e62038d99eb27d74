//! Timing and equivalence of functional versus hooked Grad-CAM.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcam::{explain_functional, gradcam_hooked};
use crate::models::{Arch, Mode, Model, ModelSpec, NUM_CLASSES};
use crate::tensor::Tensor;

/// Maps further apart than this mark the two paths as non-equivalent.
pub const EQUIVALENCE_TOL: f32 = 1e-4;

pub const BENCH_HEADER: &str = "batch,functional_ms,hooked_ms,ratio,max_abs_diff";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub arch: Arch,
    pub side: usize,
    pub batch_size: usize,
    pub functional_ms: f64,
    pub hooked_ms: f64,
    pub max_abs_diff: f32,
}

impl BenchResult {
    /// `hooked_ms / functional_ms`.
    pub fn ratio(&self) -> f64 {
        self.hooked_ms / self.functional_ms
    }

    pub fn equivalent(&self) -> bool {
        self.max_abs_diff <= EQUIVALENCE_TOL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSettings {
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            trials: 20,
            warmup: 3,
            seed: 0,
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Random inputs in [-1, 1] and random target classes.
pub fn random_batch(n: usize, side: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let data = (0..n * side * side).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let classes = (0..n).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
    (Tensor::new(vec![n, 1, side, side], data).expect("shape matches"), classes)
}

fn time_ms(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Time both paths on identical weights and inputs. Only CAM generation
/// (forward included) is inside the timed region.
pub fn bench_one(model: &mut Model, images: &Tensor, classes: &[usize], settings: &BenchSettings) -> Result<BenchResult> {
    let (_, reference) = explain_functional(model, images, Some(classes), Mode::Eval)?;
    let (_, hooked) = gradcam_hooked(model, images, Some(classes), Mode::Eval)?;
    let max_abs_diff = reference.max_abs_diff(&hooked);
    for _ in 0..settings.warmup {
        explain_functional(model, images, Some(classes), Mode::Eval)?;
        gradcam_hooked(model, images, Some(classes), Mode::Eval)?;
    }
    let mut functional = Vec::with_capacity(settings.trials);
    let mut hooked_t = Vec::with_capacity(settings.trials);
    for _ in 0..settings.trials.max(1) {
        functional.push(time_ms(|| explain_functional(model, images, Some(classes), Mode::Eval).map(drop))?);
        hooked_t.push(time_ms(|| gradcam_hooked(model, images, Some(classes), Mode::Eval).map(drop))?);
    }
    Ok(BenchResult {
        arch: model.spec().arch,
        side: model.spec().input_side,
        batch_size: classes.len(),
        functional_ms: median(&mut functional),
        hooked_ms: median(&mut hooked_t),
        max_abs_diff,
    })
}

/// Every `(side, batch)` pair for one architecture with seeded weights.
pub fn bench_gradcam(arch: Arch, sides: &[usize], batch_sizes: &[usize], settings: &BenchSettings) -> Result<Vec<BenchResult>> {
    let mut out = Vec::new();
    for &side in sides {
        let mut model = Model::build(ModelSpec::new(arch, side), settings.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ side as u64);
        for &n in batch_sizes {
            let (images, classes) = random_batch(n, side, &mut rng);
            out.push(bench_one(&mut model, &images, &classes, settings)?);
        }
    }
    Ok(out)
}

pub fn report_bench(results: &[BenchResult]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in results {
        writeln!(
            out,
            "{},{:.3},{:.3},{:.3},{:.3e}",
            r.batch_size,
            r.functional_ms,
            r.hooked_ms,
            r.ratio(),
            r.max_abs_diff
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(batch: usize, f: f64, h: f64) -> BenchResult {
        BenchResult {
            arch: Arch::SimpleCnn,
            side: 28,
            batch_size: batch,
            functional_ms: f,
            hooked_ms: h,
            max_abs_diff: 0.0,
        }
    }

    #[test]
    fn csv_layout() {
        let rows: Vec<_> = [1, 4, 16, 64].iter().map(|&b| result(b, 2.0, 5.0)).collect();
        let csv = report_bench(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], BENCH_HEADER);
        assert_eq!(lines[1], "1,2.000,5.000,2.500,0.000e0");
        assert_eq!(csv, report_bench(&rows));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn batch_of_one_agrees() {
        let settings = BenchSettings {
            trials: 1,
            warmup: 0,
            seed: 3,
        };
        let r = bench_gradcam(Arch::SimpleCnn, &[28], &[1], &settings).unwrap();
        assert!(r[0].max_abs_diff < 1e-5, "{}", r[0].max_abs_diff);
        assert!(r[0].functional_ms > 0.0 && r[0].hooked_ms > 0.0);
    }
}

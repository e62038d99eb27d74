use camforge::bench::random_batch;
use camforge::data::Split;
use camforge::gradcam::{batchcam_var, upsample_cam, upsample_cam_var, FeatureCapture};
use camforge::losses::{batchcam_prototype_loss, l1_distance, l2_distance, ssim_loss};
use camforge::models::{Arch, Mode, Model, ModelSpec};
use camforge::ops::{MapMetric, SsimConfig};
use camforge::prototypes::PrototypeSet;
use camforge::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent value from a direct NumPy evaluation of the three SSIM terms.
const SSIM_ALTERNATING: f64 = 1.996_406_468_356_957_6;

#[test]
fn ssim_of_alternating_patterns() {
    let m = [0.0, 1.0, 0.0, 1.0];
    let p = [1.0, 0.0, 1.0, 0.0];
    let cfg = SsimConfig::default();
    let got = ssim_loss(&m, &p, &cfg).unwrap();
    assert!((got - SSIM_ALTERNATING).abs() < 1e-9, "{got}");

    // l = c = 1 here, so the loss is 1 - s with s from the covariance term.
    let s = (-0.25 + cfg.c3) / (0.25 + cfg.c3);
    assert!((got - (1.0 - s)).abs() < 1e-12);
}

#[test]
fn ssim_with_general_exponents() {
    let m = [0.2, 0.9, 0.4, 0.7, 0.1, 0.5];
    let p = [0.3, 0.8, 0.1, 0.6, 0.5, 0.2];
    let plain = ssim_loss(&m, &p, &SsimConfig::default()).unwrap();
    assert!((plain - 0.443_441_486_355_493_74).abs() < 1e-6, "{plain}");
    let cfg = SsimConfig {
        alpha: 2.0,
        beta: 0.5,
        gamma: 1.5,
        ..SsimConfig::default()
    };
    let weighted = ssim_loss(&m, &p, &cfg).unwrap();
    assert!((weighted - 0.582_547_217_669_040_9).abs() < 1e-6, "{weighted}");
}

#[test]
fn constant_maps() {
    let cfg = SsimConfig::default();
    assert_eq!(ssim_loss(&[0.3; 9], &[0.3; 9], &cfg).unwrap(), 0.0);
    let l = ssim_loss(&[0.0; 4], &[1.0; 4], &cfg).unwrap();
    let expected = 1.0 - cfg.c1 / (1.0 + cfg.c1);
    assert!((l - expected).abs() < 1e-9);
}

#[test]
fn shape_mismatch_is_an_error() {
    let cfg = SsimConfig::default();
    assert!(l1_distance(&[0.0; 3], &[0.0; 4]).is_err());
    assert!(l2_distance(&[0.0; 3], &[0.0; 4]).is_err());
    assert!(ssim_loss(&[0.0; 3], &[0.0; 4], &cfg).is_err());
}

fn unit_maps(len: usize) -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    (prop::collection::vec(0.0f32..=1.0, len), prop::collection::vec(0.0f32..=1.0, len))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ssim_stays_in_range((m, p) in (2usize..40).prop_flat_map(unit_maps)) {
        let l = ssim_loss(&m, &p, &SsimConfig::default()).unwrap();
        prop_assert!((0.0..=2.0).contains(&l), "{}", l);
    }

    #[test]
    fn metrics_are_symmetric((m, p) in (2usize..40).prop_flat_map(unit_maps)) {
        let cfg = SsimConfig::default();
        prop_assert_eq!(l1_distance(&m, &p).unwrap(), l1_distance(&p, &m).unwrap());
        prop_assert_eq!(l2_distance(&m, &p).unwrap(), l2_distance(&p, &m).unwrap());
        let (a, b) = (ssim_loss(&m, &p, &cfg).unwrap(), ssim_loss(&p, &m, &cfg).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn metrics_vanish_at_equality(m in prop::collection::vec(0.0f32..=1.0, 2..40)) {
        prop_assert_eq!(l1_distance(&m, &m).unwrap(), 0.0);
        prop_assert_eq!(l2_distance(&m, &m).unwrap(), 0.0);
        prop_assert!(ssim_loss(&m, &m, &SsimConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn metrics_are_positive_off_equality((m, p) in (2usize..40).prop_flat_map(unit_maps)) {
        prop_assume!(m.iter().zip(&p).any(|(a, b)| (a - b).abs() > 1e-3));
        prop_assert!(l1_distance(&m, &p).unwrap() > 0.0);
        prop_assert!(l2_distance(&m, &p).unwrap() > 0.0);
    }
}

fn random_prototypes(rng: &mut ChaCha8Rng) -> PrototypeSet {
    let maps = (0..10).map(|_| (0..28 * 28).map(|_| rng.gen::<f32>()).collect()).collect();
    PrototypeSet::from_maps(maps, Split::Train, 28).unwrap()
}

/// The library path: one batched query, grouped means, one distance per class.
fn library_loss(model: &mut Model, images: &Tensor, labels: &[usize], protos: &PrototypeSet, metric: MapMetric) -> f64 {
    let mut g = Graph::new();
    let (logits, act) = model.forward_capture(&mut g, images, Mode::Eval).unwrap();
    let capture = FeatureCapture::new(&g, act).unwrap();
    let (maps, acc) = batchcam_var(&mut g, logits, &capture, labels).unwrap();
    let up = upsample_cam_var(&mut g, maps, 28).unwrap();
    let loss = batchcam_prototype_loss(&mut g, up, protos, &acc.classes, metric).unwrap();
    f64::from(g.value(loss).item())
}

/// Per-class recomputation from scratch: every member is run through the
/// model on its own, its class-score gradient is queried separately, and the
/// class averages, pooling, ReLU and min-max scaling are written out as loops.
fn brute_force_loss(model: &mut Model, images: &Tensor, labels: &[usize], protos: &PrototypeSet, metric: MapMetric) -> f64 {
    let mut total = 0.0;
    for class in 0..10 {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean_a: Vec<f64> = Vec::new();
        let mut mean_g: Vec<f64> = Vec::new();
        let mut dims = (0, 0, 0);
        for &i in &members {
            let mut g = Graph::new();
            let (logits, act) = model.forward_capture(&mut g, &Tensor::stack(&[images.slice_outer(i)]).unwrap(), Mode::Eval).unwrap();
            let score = g.select(logits, 0, class).unwrap();
            let grad = g.grad_query(score, act).unwrap();
            let shape = g.shape(act).to_vec();
            dims = (shape[1], shape[2], shape[3]);
            if mean_a.is_empty() {
                mean_a = vec![0.0; grad.numel()];
                mean_g = vec![0.0; grad.numel()];
            }
            for (m, &v) in mean_a.iter_mut().zip(g.value(act).data()) {
                *m += f64::from(v) / members.len() as f64;
            }
            for (m, &v) in mean_g.iter_mut().zip(grad.data()) {
                *m += f64::from(v) / members.len() as f64;
            }
        }
        let (k, h, w) = dims;
        let hw = h * w;
        let alpha: Vec<f64> = (0..k).map(|c| mean_g[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let mut map: Vec<f64> = (0..hw)
            .map(|p| (0..k).map(|c| alpha[c] * mean_a[c * hw + p]).sum::<f64>().max(0.0))
            .collect();
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in &mut map {
            *v = (*v - lo) / (hi - lo + 1e-8);
        }
        let small = Tensor::new(vec![1, 1, h, w], map.iter().map(|&v| v as f32).collect()).unwrap();
        let up = upsample_cam(&small, 28).unwrap();
        let proto = protos.prototype_for(class).unwrap();
        total += match metric {
            MapMetric::L1 => l1_distance(up.data(), proto).unwrap(),
            MapMetric::L2 => l2_distance(up.data(), proto).unwrap(),
            MapMetric::Ssim(cfg) => ssim_loss(up.data(), proto, &cfg).unwrap(),
        };
    }
    total
}

/// Worst relative gap between the batched loss and the per-class
/// recomputation over random batches, cycling through L1, L2 and SSIM.
pub fn batch_loss_worst_gap(trials: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let metrics = [MapMetric::L1, MapMetric::L2, MapMetric::Ssim(SsimConfig::default())];
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut model = Model::build(ModelSpec::new(Arch::SimpleCnn, 28), trial).unwrap();
        let protos = random_prototypes(&mut rng);
        let n = rng.gen_range(2..12);
        let (images, _) = random_batch(n, 28, &mut rng);
        // Few distinct labels so classes repeat inside the batch.
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let metric = metrics[trial as usize % 3];
        let fast = library_loss(&mut model, &images, &labels, &protos, metric);
        let slow = brute_force_loss(&mut model, &images, &labels, &protos, metric);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1.0));
    }
    worst
}

#[test]
fn batch_prototype_loss_matches_per_class_recomputation() {
    let gap = batch_loss_worst_gap(6);
    assert!(gap <= 1e-4, "{gap}");
}

/// Range of the SSIM loss and the largest metric value at equality over
/// random unit-range maps: `(min loss, max loss, worst value at equality)`.
pub fn metric_sweep(samples: usize) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = SsimConfig::default();
    let (mut lo, mut hi, mut at_equality) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for i in 0..samples {
        let len = rng.gen_range(2..40);
        let m: Vec<f32> = (0..len).map(|_| rng.gen()).collect();
        // Every fourth pair is anti-correlated to reach the top of the range.
        let p: Vec<f32> = if i % 4 == 0 { m.iter().map(|v| 1.0 - v).collect() } else { (0..len).map(|_| rng.gen()).collect() };
        let l = ssim_loss(&m, &p, &cfg).unwrap();
        lo = lo.min(l);
        hi = hi.max(l);
        for v in [l1_distance(&m, &m).unwrap(), l2_distance(&m, &m).unwrap(), ssim_loss(&m, &m, &cfg).unwrap()] {
            at_equality = at_equality.max(v.abs());
        }
    }
    (lo, hi, at_equality)
}

#[test]
fn metric_sweep_stays_in_range() {
    let (lo, hi, eq) = metric_sweep(500);
    assert!(lo >= 0.0 && hi <= 2.0, "{lo} {hi}");
    assert!(hi > 1.5, "anti-correlated maps approach the top of the range: {hi}");
    assert!(eq < 1e-12);
}

#[test]
fn batch_prototype_loss_ignores_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut model = Model::build(ModelSpec::new(Arch::SimpleCnn, 28), 4).unwrap();
    let protos = random_prototypes(&mut rng);
    let n = 10;
    let (images, _) = random_batch(n, 28, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| [3, 1, 3, 7, 1, 3, 0, 7, 7, 2][i]).collect();
    let base = library_loss(&mut model, &images, &labels, &protos, MapMetric::L1);
    for _ in 0..5 {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = Tensor::stack(&order.iter().map(|&i| images.slice_outer(i)).collect::<Vec<_>>()).unwrap();
        let shuffled_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let again = library_loss(&mut model, &shuffled, &shuffled_labels, &protos, MapMetric::L1);
        assert!((base - again).abs() < 1e-5, "{base} vs {again}");
    }
}

#[test]
fn class_sum_is_a_sum() {
    let protos = PrototypeSet::from_maps(vec![vec![0.0; 4]; 10], Split::Train, 2).unwrap();
    let mut g = Graph::new();
    let cams = g.constant(Tensor::new(vec![2, 1, 2, 2], vec![0.1; 8]).unwrap());
    let loss = batchcam_prototype_loss(&mut g, cams, &protos, &[2, 5], MapMetric::L1).unwrap();
    assert!((g.value(loss).item() - 0.2).abs() < 1e-7);
}

//! Grad-CAM maps: per image through one gradient query, per image through a
//! hooked per-item backward loop, and averaged per class over a batch.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{Forward, Mode, Model, Taps};
use crate::ops::cam::CAM_EPS;
use crate::pgm;
use crate::tensor::Tensor;

/// The retained target-layer activations of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureCapture {
    pub activations: Var,
}

impl FeatureCapture {
    pub fn new(g: &Graph, activations: Var) -> Result<Self> {
        if !g.is_retained(activations) {
            return Err(Error::NotRetained(activations.id()));
        }
        if g.shape(activations).len() != 4 {
            return Err(Error::shape("capture", format!("expected N×K×H×W, got {:?}", g.shape(activations))));
        }
        Ok(FeatureCapture { activations })
    }
}

/// A batch of maps with the class each was computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct CamBatch {
    /// M×1×H×W.
    pub maps: Tensor,
    pub classes: Vec<usize>,
    pub normalized: bool,
}

impl CamBatch {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn side(&self) -> usize {
        self.maps.dim(2)
    }

    pub fn map(&self, i: usize) -> &[f32] {
        let per = self.maps.numel() / self.len();
        &self.maps.data()[i * per..(i + 1) * per]
    }

    pub fn max_abs_diff(&self, other: &CamBatch) -> f32 {
        if self.maps.shape() != other.maps.shape() {
            return f32::INFINITY;
        }
        self.maps.max_abs_diff(&other.maps)
    }
}

/// Per-class accumulators of a batch-averaged CAM.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchCamAccumulators {
    /// Distinct classes, ascending.
    pub classes: Vec<usize>,
    /// Batch members of each class.
    pub members: Vec<Vec<usize>>,
    /// Class-averaged target-layer gradients, G×K×H×W.
    pub mean_grads: Tensor,
    /// Spatially pooled `mean_grads`, G×K.
    pub alpha: Vec<f32>,
}

impl BatchCamAccumulators {
    pub fn counts(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

fn check_classes(g: &Graph, logits: Var, capture: &FeatureCapture, classes: &[usize]) -> Result<(usize, usize)> {
    let ls = g.shape(logits);
    if ls.len() != 2 {
        return Err(Error::shape("gradcam", format!("logits must be N×C, got {ls:?}")));
    }
    let (n, c) = (ls[0], ls[1]);
    if g.shape(capture.activations)[0] != n || classes.len() != n {
        return Err(Error::shape(
            "gradcam",
            format!(
                "{} logits rows, {} captured rows, {} classes",
                n,
                g.shape(capture.activations)[0],
                classes.len()
            ),
        ));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    Ok((n, c))
}

/// `∂S_{c_i}^{(i)} / ∂A` for every item at once, from a single query of
/// `Σ_i S_{c_i}^{(i)}`. Rows stay separate because nothing downstream of the
/// target layer mixes batch items.
pub fn class_score_gradients(g: &mut Graph, logits: Var, capture: &FeatureCapture, classes: &[usize]) -> Result<Tensor> {
    let (_, c) = check_classes(g, logits, capture, classes)?;
    let picks = classes.iter().enumerate().map(|(i, &k)| i * c + k).collect();
    let scores = g.gather(logits, picks)?;
    let total = g.sum(scores)?;
    g.grad_query(total, capture.activations)
}

/// Spatial mean of an N×K×H×W tensor, flattened to N·K weights.
pub fn pool_weights(grads: &Tensor) -> Vec<f32> {
    let hw = grads.dim(2) * grads.dim(3);
    grads
        .data()
        .chunks(hw)
        .map(|plane| (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as f32)
        .collect()
}

/// Normalized per-image maps as a graph variable; gradients reach the
/// activations, the channel weights are constants.
pub fn functional_cam_var(g: &mut Graph, logits: Var, capture: &FeatureCapture, classes: &[usize]) -> Result<Var> {
    let grads = class_score_gradients(g, logits, capture, classes)?;
    let alpha = pool_weights(&grads);
    let weighted = g.channel_weighted_sum(capture.activations, alpha)?;
    let positive = g.relu(weighted)?;
    g.minmax_normalize(positive)
}

/// Per-image Grad-CAM from one gradient query.
pub fn gradcam_functional(g: &mut Graph, logits: Var, capture: &FeatureCapture, classes: &[usize]) -> Result<CamBatch> {
    let maps = functional_cam_var(g, logits, capture, classes)?;
    Ok(CamBatch {
        maps: g.value(maps).clone(),
        classes: classes.to_vec(),
        normalized: true,
    })
}

/// Batch-averaged maps, one per distinct label, as a graph variable.
pub fn batchcam_var(
    g: &mut Graph,
    logits: Var,
    capture: &FeatureCapture,
    labels: &[usize],
) -> Result<(Var, BatchCamAccumulators)> {
    let grads = class_score_gradients(g, logits, capture, labels)?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let (classes, members): (Vec<usize>, Vec<Vec<usize>>) = by_class.into_iter().unzip();

    let per = grads.numel() / labels.len();
    let mut mean = vec![0.0f32; members.len() * per];
    for (dst, grp) in mean.chunks_mut(per).zip(&members) {
        for &i in grp {
            for (d, &v) in dst.iter_mut().zip(&grads.data()[i * per..(i + 1) * per]) {
                *d += v;
            }
        }
        let inv = 1.0 / grp.len() as f32;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    let mut shape = grads.shape().to_vec();
    shape[0] = members.len();
    let mean_grads = Tensor::new(shape, mean)?;
    let alpha = pool_weights(&mean_grads);

    let averaged = g.group_mean(capture.activations, members.clone())?;
    let weighted = g.channel_weighted_sum(averaged, alpha.clone())?;
    let positive = g.relu(weighted)?;
    let maps = g.minmax_normalize(positive)?;
    Ok((
        maps,
        BatchCamAccumulators {
            classes,
            members,
            mean_grads,
            alpha,
        },
    ))
}

/// One map per distinct label in the batch.
pub fn batchcam(g: &mut Graph, logits: Var, capture: &FeatureCapture, labels: &[usize]) -> Result<CamBatch> {
    let (maps, acc) = batchcam_var(g, logits, capture, labels)?;
    Ok(CamBatch {
        maps: g.value(maps).clone(),
        classes: acc.classes,
        normalized: true,
    })
}

/// `(m − min)/(max − min + ε)` per map of an M×…​ tensor.
pub fn normalize_cam(maps: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(maps.clone());
    let out = g.minmax_normalize(v)?;
    Ok(g.value(out).clone())
}

/// Bilinear upsampling to `side × side`, clamped back into [0, 1].
pub fn upsample_cam_var(g: &mut Graph, maps: Var, side: usize) -> Result<Var> {
    let s = g.shape(maps);
    if s.len() != 4 || side < s[2] || side < s[3] {
        return Err(Error::shape("upsample_cam", format!("cannot upsample {s:?} to side {side}")));
    }
    if s[2] == side && s[3] == side {
        return Ok(maps);
    }
    let up = g.bilinear_resize(maps, side, side)?;
    g.clamp(up, 0.0, 1.0)
}

pub fn upsample_cam(maps: &Tensor, side: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(maps.clone());
    let out = upsample_cam_var(&mut g, v, side)?;
    Ok(g.value(out).clone())
}

/// Row-wise argmax of an N×C tensor.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    logits
        .data()
        .chunks(logits.dim(1))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Grad-CAM through listeners: a forward listener on the target layer keeps
/// its activations and attaches a gradient listener, then every item gets its
/// own full backward pass over the retained graph. `classes = None` explains
/// the predicted class.
pub fn gradcam_hooked(model: &mut Model, images: &Tensor, classes: Option<&[usize]>, mode: Mode) -> Result<(Tensor, CamBatch)> {
    let activations: Rc<RefCell<Option<Tensor>>> = Rc::default();
    let gradient: Rc<RefCell<Option<Tensor>>> = Rc::default();
    let mut g = Graph::new();
    let layer = model.spec().target_layer.clone();
    let mut taps = Taps::none();
    {
        let activations = Rc::clone(&activations);
        let gradient = Rc::clone(&gradient);
        taps.on_forward(&layer, move |g, v| {
            *activations.borrow_mut() = Some(g.value(v).clone());
            let gradient = Rc::clone(&gradient);
            g.register_backward_hook(v, move |grad| *gradient.borrow_mut() = Some(grad.clone()));
        });
    }
    let Forward { logits, .. } = model.forward(&mut g, images, mode, &mut taps)?;
    drop(taps);
    let logit_values = g.value(logits).clone();
    let classes = match classes {
        Some(c) => c.to_vec(),
        None => argmax_rows(&logit_values),
    };
    let acts = activations.borrow_mut().take().ok_or_else(|| Error::Invalid(format!("layer {layer} never produced")))?;
    let (n, k, h, w) = (acts.dim(0), acts.dim(1), acts.dim(2), acts.dim(3));
    if classes.len() != n {
        return Err(Error::shape("gradcam_hooked", format!("{n} items, {} classes", classes.len())));
    }
    let hw = h * w;
    let mut maps = Vec::with_capacity(n * hw);
    for (i, &c) in classes.iter().enumerate() {
        let score = g.select(logits, i, c)?;
        g.backward(score)?;
        let grad = gradient.borrow_mut().take().ok_or(Error::NotRetained(logits.id()))?;
        let row = &grad.data()[i * k * hw..(i + 1) * k * hw];
        let a = &acts.data()[i * k * hw..(i + 1) * k * hw];
        let mut map = vec![0.0f32; hw];
        for ki in 0..k {
            let plane = &row[ki * hw..(ki + 1) * hw];
            let alpha = (plane.iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64) as f32;
            for (m, &v) in map.iter_mut().zip(&a[ki * hw..(ki + 1) * hw]) {
                *m += alpha * v;
            }
        }
        map.iter_mut().for_each(|m| *m = m.max(0.0));
        let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let inv = 1.0 / (hi - lo + CAM_EPS as f32);
        maps.extend(map.iter().map(|&m| (m - lo) * inv));
    }
    Ok((
        logit_values,
        CamBatch {
            maps: Tensor::new(vec![n, 1, h, w], maps)?,
            classes,
            normalized: true,
        },
    ))
}

/// Forward `images` with the target layer retained and return per-image
/// functional maps.
pub fn explain_functional(model: &mut Model, images: &Tensor, classes: Option<&[usize]>, mode: Mode) -> Result<(Tensor, CamBatch)> {
    let mut g = Graph::new();
    let (logits, act) = model.forward_capture(&mut g, images, mode)?;
    let capture = FeatureCapture::new(&g, act)?;
    let logit_values = g.value(logits).clone();
    let classes = match classes {
        Some(c) => c.to_vec(),
        None => argmax_rows(&logit_values),
    };
    let cams = gradcam_functional(&mut g, logits, &capture, &classes)?;
    Ok((logit_values, cams))
}

/// Six significant digits, plain or scientific like C's `%g`.
pub fn format_g6(v: f32) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = f64::from(v).abs().log10().floor() as i32;
    let s = if (-5..6).contains(&exp) {
        format!("{:.*}", (5 - exp).max(0) as usize, v)
    } else {
        format!("{v:.5e}")
    };
    if s.contains('.') && !s.contains('e') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// One CSV row per map row, values row-major.
pub fn write_cam_csv(path: &Path, map: &[f32], height: usize, width: usize) -> Result<()> {
    if map.len() != height * width {
        return Err(Error::shape("cam csv", format!("{} values for {height}×{width}", map.len())));
    }
    let mut out = String::new();
    for row in map.chunks(width) {
        let cells: Vec<String> = row.iter().map(|&v| format_g6(v)).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_cam_pgm(path: &Path, map: &[f32], height: usize, width: usize) -> Result<()> {
    pgm::write(path, map, height, width)
}

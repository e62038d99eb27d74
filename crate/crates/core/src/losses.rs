//! CAM-to-prototype distances and the composite training objectives.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{MapMetric, SsimConfig};
use crate::prototypes::PrototypeSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Cross-entropy only.
    Baseline,
    /// Per-image CAMs against the prototype of each image's class.
    Pl,
    /// Per-class batch-averaged CAMs, summed over the classes in the batch.
    Bcpl,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub variant: Variant,
    pub metric: MapMetric,
    pub lambda_class: f64,
    pub lambda_proto: f64,
    pub lambda_batch_proto: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: Variant::Baseline,
            metric: MapMetric::L1,
            lambda_class: 1.0,
            lambda_proto: 1.0,
            lambda_batch_proto: 1.0,
        }
    }
}

/// Every accepted objective name.
pub const LOSS_NAMES: [&str; 7] = ["baseline", "pl_l1", "pl_l2", "pl_ssim", "bcpl_l1", "bcpl_l2", "bcpl_ssim"];

impl LossConfig {
    /// `(variant, metric)` for one of [`LOSS_NAMES`]. Baseline keeps L1 as the
    /// metric of its logged, untrained prototype term.
    pub fn parse_name(name: &str) -> Option<(Variant, MapMetric)> {
        let lower = name.to_ascii_lowercase();
        if lower == "baseline" {
            return Some((Variant::Baseline, MapMetric::L1));
        }
        let (variant, metric) = lower.split_once('_')?;
        let variant = match variant {
            "pl" => Variant::Pl,
            "bcpl" => Variant::Bcpl,
            _ => return None,
        };
        let metric = match metric {
            "l1" => MapMetric::L1,
            "l2" => MapMetric::L2,
            "ssim" => MapMetric::Ssim(SsimConfig::default()),
            _ => return None,
        };
        Some((variant, metric))
    }

    pub fn name(&self) -> String {
        let metric = match self.metric {
            MapMetric::L1 => "l1",
            MapMetric::L2 => "l2",
            MapMetric::Ssim(_) => "ssim",
        };
        match self.variant {
            Variant::Baseline => "baseline".into(),
            Variant::Pl => format!("pl_{metric}"),
            Variant::Bcpl => format!("bcpl_{metric}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_class", self.lambda_class),
            ("lambda_proto", self.lambda_proto),
            ("lambda_batch_proto", self.lambda_batch_proto),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if let MapMetric::Ssim(cfg) = &self.metric {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Weight of the prototype term actually trained on.
    pub fn proto_weight(&self) -> f64 {
        match self.variant {
            Variant::Baseline => 0.0,
            Variant::Pl => self.lambda_proto,
            Variant::Bcpl => self.lambda_batch_proto,
        }
    }
}

impl fmt::Display for LossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn same_len(op: &'static str, m: &[f32], p: &[f32]) -> Result<()> {
    if m.len() != p.len() || m.is_empty() {
        return Err(Error::shape(op, format!("{} vs {} elements", m.len(), p.len())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_distance(m: &[f32], p: &[f32]) -> Result<f64> {
    same_len("l1_distance", m, p)?;
    Ok(MapMetric::L1.eval(m, p))
}

/// Mean squared difference.
pub fn l2_distance(m: &[f32], p: &[f32]) -> Result<f64> {
    same_len("l2_distance", m, p)?;
    Ok(MapMetric::L2.eval(m, p))
}

/// `1 − SSIM` over whole-map statistics.
pub fn ssim_loss(m: &[f32], p: &[f32], cfg: &SsimConfig) -> Result<f64> {
    same_len("ssim_loss", m, p)?;
    cfg.validate()?;
    Ok(MapMetric::Ssim(*cfg).eval(m, p))
}

/// Mean over the batch of `metric(cams[i], P[labels[i]])`. `cams` is an
/// N×1×S×S map batch at the prototype side.
pub fn prototype_loss(g: &mut Graph, cams: Var, protos: &PrototypeSet, labels: &[usize], metric: MapMetric) -> Result<Var> {
    let per_map = per_map_distance(g, cams, protos, labels, metric)?;
    g.mean(per_map)
}

/// `Σ_c metric(M̄_c, P_c)` over the classes present in the batch; `cams`
/// holds one map per entry of `classes`.
pub fn batchcam_prototype_loss(
    g: &mut Graph,
    cams: Var,
    protos: &PrototypeSet,
    classes: &[usize],
    metric: MapMetric,
) -> Result<Var> {
    let per_map = per_map_distance(g, cams, protos, classes, metric)?;
    g.sum(per_map)
}

fn per_map_distance(g: &mut Graph, cams: Var, protos: &PrototypeSet, classes: &[usize], metric: MapMetric) -> Result<Var> {
    let shape = g.shape(cams);
    if shape.len() != 4 || shape[0] != classes.len() || shape[2] != protos.side() || shape[3] != protos.side() {
        return Err(Error::shape(
            "prototype_loss",
            format!(
                "maps {shape:?} vs {} classes at side {}",
                classes.len(),
                protos.side()
            ),
        ));
    }
    let target = protos.stack(classes)?;
    g.map_distance(cams, target, metric)
}

/// `λ_class·CE + λ·proto`, with λ chosen by the variant. The prototype term
/// is left out of the graph entirely when its weight is zero.
pub fn total_loss(g: &mut Graph, ce: Var, proto: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let class = g.scale(ce, cfg.lambda_class as f32)?;
    match proto {
        Some(p) if cfg.proto_weight() != 0.0 => {
            let weighted = g.scale(p, cfg.proto_weight() as f32)?;
            g.add(class, weighted)
        }
        _ => Ok(class),
    }
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(ce: f64, proto: f64, cfg: &LossConfig) -> f64 {
    let w = cfg.proto_weight();
    cfg.lambda_class * ce + if w != 0.0 { w * proto } else { 0.0 }
}

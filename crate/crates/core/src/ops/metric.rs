//! Per-map distances between a differentiable map batch and constant targets.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

/// Stabilizers and exponents of the single-scale, whole-map SSIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        let c2 = 0.03f64.powi(2);
        SsimConfig {
            c1: 0.01f64.powi(2),
            c2,
            c3: c2 / 2.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.c3 > 0.0) {
            return Err(Error::Invalid("SSIM stabilizers must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.gamma > 0.0) {
            return Err(Error::Invalid("SSIM exponents must be positive".into()));
        }
        Ok(())
    }

    /// With `β = γ` and `C3 = C2/2` the contrast·structure product reduces to
    /// `(2σxy + C2)/(σx² + σy² + C2)`, which needs no square roots.
    fn fused_contrast_structure(&self) -> bool {
        self.beta == self.gamma && (self.c3 - self.c2 / 2.0).abs() <= f64::EPSILON * self.c2
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MapMetric {
    L1,
    L2,
    Ssim(SsimConfig),
}

struct Moments {
    n: f64,
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cxy: f64,
}

fn moments<T: Real>(x: &[T], y: &[T]) -> Moments {
    let n = x.len() as f64;
    let mx = x.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
    let my = y.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a.to_f64().unwrap() - mx;
        let dy = b.to_f64().unwrap() - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    Moments {
        n,
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cxy: cxy / n,
    }
}

fn signed_pow(base: f64, exp: f64) -> f64 {
    if exp == 1.0 {
        base
    } else {
        base.signum() * base.abs().powf(exp)
    }
}

/// `d signed_pow(base, exp) / d base`.
fn signed_pow_grad(base: f64, exp: f64) -> f64 {
    if exp == 1.0 {
        1.0
    } else {
        exp * base.abs().powf(exp - 1.0)
    }
}

/// SSIM index and its partial derivatives with respect to
/// `(μx, σx², σxy)`.
fn ssim_parts(m: &Moments, cfg: &SsimConfig) -> (f64, f64, f64, f64) {
    let lden = m.mx * m.mx + m.my * m.my + cfg.c1;
    let lnum = 2.0 * m.mx * m.my + cfg.c1;
    let l = lnum / lden;
    let dl_dmx = (2.0 * m.my * lden - lnum * 2.0 * m.mx) / (lden * lden);
    let la = signed_pow(l, cfg.alpha);
    let dla = signed_pow_grad(l, cfg.alpha) * dl_dmx;

    if cfg.fused_contrast_structure() {
        let den = m.vx + m.vy + cfg.c2;
        let num = 2.0 * m.cxy + cfg.c2;
        let cs = num / den;
        let csb = signed_pow(cs, cfg.beta);
        let dcs = signed_pow_grad(cs, cfg.beta);
        let d_vx = dcs * (-num / (den * den));
        let d_cxy = dcs * (2.0 / den);
        return (la * csb, dla * csb, la * d_vx, la * d_cxy);
    }

    let sx = m.vx.sqrt();
    let sy = m.vy.sqrt();
    let dsx_dvx = if sx > 1e-12 { 0.5 / sx } else { 0.0 };
    let cden = m.vx + m.vy + cfg.c2;
    let cnum = 2.0 * sx * sy + cfg.c2;
    let c = cnum / cden;
    let dc_dvx = (2.0 * sy * dsx_dvx * cden - cnum) / (cden * cden);
    let sden = sx * sy + cfg.c3;
    let snum = m.cxy + cfg.c3;
    let s = snum / sden;
    let ds_dvx = -snum * sy * dsx_dvx / (sden * sden);
    let ds_dcxy = 1.0 / sden;
    let cb = signed_pow(c, cfg.beta);
    let sg = signed_pow(s, cfg.gamma);
    let dcb = signed_pow_grad(c, cfg.beta);
    let dsg = signed_pow_grad(s, cfg.gamma);
    let value = la * cb * sg;
    let d_vx = la * (dcb * dc_dvx * sg + cb * dsg * ds_dvx);
    let d_cxy = la * cb * dsg * ds_dcxy;
    (value, dla * cb * sg, d_vx, d_cxy)
}

impl MapMetric {
    /// Distance between two equally-sized maps.
    pub fn eval<T: Real>(&self, x: &[T], y: &[T]) -> f64 {
        let n = x.len() as f64;
        match self {
            MapMetric::L1 => {
                x.iter()
                    .zip(y)
                    .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
                    .sum::<f64>()
                    / n
            }
            MapMetric::L2 => {
                x.iter()
                    .zip(y)
                    .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).powi(2))
                    .sum::<f64>()
                    / n
            }
            MapMetric::Ssim(cfg) => 1.0 - ssim_parts(&moments(x, y), cfg).0,
        }
    }

    fn grad_map<T: Real>(&self, x: &[T], y: &[T], upstream: T, out: &mut Vec<T>) {
        let n = x.len() as f64;
        let up = upstream.to_f64().unwrap();
        match self {
            MapMetric::L1 => out.extend(x.iter().zip(y).map(|(&a, &b)| {
                let d = a - b;
                let sign = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                sign * T::lit(up / n)
            })),
            MapMetric::L2 => out.extend(x.iter().zip(y).map(|(&a, &b)| (a - b) * T::lit(2.0 * up / n))),
            MapMetric::Ssim(cfg) => {
                let m = moments(x, y);
                let (_, d_mx, d_vx, d_cxy) = ssim_parts(&m, cfg);
                // loss = 1 − SSIM
                out.extend(x.iter().zip(y).map(|(a, b)| {
                    let dx = a.to_f64().unwrap() - m.mx;
                    let dy = b.to_f64().unwrap() - m.my;
                    let d = d_mx / m.n + d_vx * 2.0 * dx / m.n + d_cxy * dy / m.n;
                    T::lit(-d * up)
                }))
            }
        }
    }

    pub(crate) fn backward<T: Real>(&self, input: &Tensor<T>, target: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let n = input.dim(0);
        let per = input.numel() / n;
        let mut dx = Vec::with_capacity(input.numel());
        for i in 0..n {
            let x = &input.data()[i * per..(i + 1) * per];
            let y = &target.data()[i * per..(i + 1) * per];
            self.grad_map(x, y, g.data()[i], &mut dx);
        }
        Tensor::new(input.shape().to_vec(), dx).unwrap()
    }
}

impl<T: Real> Graph<T> {
    /// Per-map distance between `input` and a constant `target` of the same
    /// shape; returns a vector with one entry per leading index.
    pub fn map_distance(&mut self, input: Var, target: Tensor<T>, metric: MapMetric) -> Result<Var> {
        if self.shape(input) != target.shape() {
            return Err(Error::shape(
                "map_distance",
                format!("{:?} vs {:?}", self.shape(input), target.shape()),
            ));
        }
        if let MapMetric::Ssim(cfg) = &metric {
            cfg.validate()?;
        }
        let x = self.value(input);
        let n = x.dim(0);
        let per = x.numel() / n.max(1);
        let out = (0..n)
            .map(|i| {
                T::lit(metric.eval(
                    &x.data()[i * per..(i + 1) * per],
                    &target.data()[i * per..(i + 1) * per],
                ))
            })
            .collect();
        let value = Tensor::new(vec![n], out)?;
        self.push(
            value,
            Op::MapDistance {
                input,
                target,
                metric,
            },
            &[input],
            "map_distance",
        )
    }
}

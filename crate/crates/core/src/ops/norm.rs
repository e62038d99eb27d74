use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and (unbiased) variance of a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Real = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum BnMode<'a, T: Real> {
    /// Normalize with batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats<T>),
    /// Normalize with the running stats.
    Eval(&'a RunningStats<T>),
}

impl<T: Real> Graph<T> {
    pub fn batchnorm2d(&mut self, input: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("batchnorm2d", format!("input must be NCHW, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("channel dimension: expected [{c}] affine params"),
            ));
        }
        let eps = T::lit(BN_EPS);
        let hw = h * w;
        let m = n * hw;
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match &mode {
            BnMode::Train(_) => {
                if n < 2 {
                    return Err(Error::BatchTooSmall(n));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        acc += x[(ni * c + ch) * hw..][..hw].iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0f64;
                    for ni in 0..n {
                        sq += x[(ni * c + ch) * hw..][..hw]
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap() - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = T::lit(mu);
                    var[ch] = T::lit(sq / m as f64);
                }
                (mean, var, true)
            }
            BnMode::Eval(stats) => (stats.mean.clone(), stats.var.clone(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        if let BnMode::Train(stats) = mode {
            let mom = T::lit(BN_MOMENTUM);
            let unbias = T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap();
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
            "batchnorm2d",
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Real>(
    graph: &Graph<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    g: &Tensor<T>,
    wants: &dyn Fn(Var) -> bool,
    emit: &mut dyn FnMut(Var, Tensor<T>),
) {
    let shape = graph.shape(input);
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = T::from_usize(n * hw).unwrap();
    let dy = g.data();
    let gm = graph.value(gamma).data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += dy[i] * xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    if wants(input) {
        let mut dx = vec![T::zero(); dy.len()];
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * hw;
                let scale = gm[ch] * inv_std[ch];
                for i in off..off + hw {
                    dx[i] = if batch_stats {
                        scale / m * (m * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                    } else {
                        scale * dy[i]
                    };
                }
            }
        }
        emit(input, Tensor::new(shape.to_vec(), dx).unwrap());
    }
    if wants(gamma) {
        emit(gamma, Tensor::new(vec![c], dgamma).unwrap());
    }
    if wants(beta) {
        emit(beta, Tensor::new(vec![c], dbeta).unwrap());
    }
}

//! Differentiable building blocks of class activation maps.
//!
//! Channel weights and min/max statistics enter as constants: gradients
//! flow into the feature maps only.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

/// ε in `(m − min) / (max − min + ε)`.
pub const CAM_EPS: f64 = 1e-8;

impl<T: Real> Graph<T> {
    /// `out[n,0] = Σ_k weights[n,k] · input[n,k]` for an N×K×H×W input.
    pub fn channel_weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("channel_weighted_sum", format!("input must be NCHW, got {shape:?}")));
        }
        let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if weights.len() != n * k {
            return Err(Error::shape(
                "channel_weighted_sum",
                format!("expected {} weights, got {}", n * k, weights.len()),
            ));
        }
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * hw];
        for ni in 0..n {
            let dst = &mut out[ni * hw..(ni + 1) * hw];
            for ki in 0..k {
                let wgt = weights[ni * k + ki];
                let src = &x[(ni * k + ki) * hw..][..hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wgt * v;
                }
            }
        }
        let value = Tensor::new(vec![n, 1, shape[2], shape[3]], out)?;
        self.push(value, Op::ChannelWeightedSum { input, weights }, &[input], "channel_weighted_sum")
    }

    /// Per-map min-max scaling into [0, 1] over every axis after the first.
    /// Flat maps collapse to zeros through the ε guard. A map that is exactly
    /// flat passes no gradient: its output is zero for any common value, and
    /// the guarded scale `1/ε` would otherwise swamp every other term.
    pub fn minmax_normalize(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.dim(0);
        if n == 0 {
            return Err(Error::shape("minmax_normalize", "empty batch"));
        }
        let per = x.numel() / n;
        let eps = T::lit(CAM_EPS);
        let mut out = Vec::with_capacity(x.numel());
        let mut inv_range = Vec::with_capacity(n);
        let mut extrema = Vec::with_capacity(n);
        for map in x.data().chunks(per) {
            let (mut argmin, mut argmax) = (0, 0);
            for (i, &v) in map.iter().enumerate() {
                if v < map[argmin] {
                    argmin = i;
                }
                if v > map[argmax] {
                    argmax = i;
                }
            }
            let (lo, hi) = (map[argmin], map[argmax]);
            let inv = T::one() / (hi - lo + eps);
            out.extend(map.iter().map(|&v| (v - lo) * inv));
            inv_range.push(if hi > lo { inv } else { T::zero() });
            extrema.push((argmin, argmax));
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(
            value,
            Op::MinMaxNorm {
                input,
                inv_range,
                extrema,
            },
            &[input],
            "minmax_normalize",
        )
    }

    /// Mean over leading-axis members of each group: G×rest from N×rest.
    pub fn group_mean(&mut self, input: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let x = self.value(input);
        let n = x.dim(0);
        let per = x.numel() / n.max(1);
        for grp in &groups {
            if grp.is_empty() {
                return Err(Error::shape("group_mean", "empty group"));
            }
            if let Some(&bad) = grp.iter().find(|&&i| i >= n) {
                return Err(Error::shape("group_mean", format!("member {bad} outside batch of {n}")));
            }
        }
        let mut out = vec![T::zero(); groups.len() * per];
        for (gi, grp) in groups.iter().enumerate() {
            let dst = &mut out[gi * per..(gi + 1) * per];
            for &m in grp {
                for (d, &v) in dst.iter_mut().zip(&x.data()[m * per..(m + 1) * per]) {
                    *d += v;
                }
            }
            let inv = T::one() / T::from_usize(grp.len()).unwrap();
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = groups.len();
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::GroupMean { input, groups }, &[input], "group_mean")
    }
}

pub(crate) fn channel_weighted_sum_backward<T: Real>(g: &Tensor<T>, input_shape: &[usize], weights: &[T]) -> Tensor<T> {
    let (n, k, hw) = (input_shape[0], input_shape[1], input_shape[2] * input_shape[3]);
    let gd = g.data();
    let mut dx = Vec::with_capacity(n * k * hw);
    for ni in 0..n {
        let gm = &gd[ni * hw..(ni + 1) * hw];
        for ki in 0..k {
            let wgt = weights[ni * k + ki];
            dx.extend(gm.iter().map(|&v| v * wgt));
        }
    }
    Tensor::new(input_shape.to_vec(), dx).unwrap()
}

pub(crate) fn group_mean_backward<T: Real>(g: &Tensor<T>, input_shape: &[usize], groups: &[Vec<usize>]) -> Tensor<T> {
    let per: usize = input_shape[1..].iter().product();
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (gi, grp) in groups.iter().enumerate() {
        let inv = T::one() / T::from_usize(grp.len()).unwrap();
        let src = &g.data()[gi * per..(gi + 1) * per];
        for &m in grp {
            for (acc, &v) in d[m * per..(m + 1) * per].iter_mut().zip(src) {
                *acc += v * inv;
            }
        }
    }
    dx
}

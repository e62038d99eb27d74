//! Bilinear resampling with half-pixel (align-corners = false) sampling.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

/// Source taps for each output coordinate along one axis: `(lo, hi, weight_hi)`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, wy) in &ty {
            let wy = T::lit(wy);
            for &(x0, x1, wx) in &tx {
                let wx = T::lit(wx);
                let top = plane[y0 * w + x0] * (T::one() - wx) + plane[y0 * w + x1] * wx;
                let bottom = plane[y1 * w + x0] * (T::one() - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (T::one() - wy) + bottom * wy);
            }
        }
    }
    debug_assert_eq!(out.len(), planes * out_h * out_w);
    Tensor::new(vec![s[0], s[1], out_h, out_w], out).unwrap()
}

pub(crate) fn bilinear_backward<T: Real>(g: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (out_h, out_w) = (g.dim(2), g.dim(3));
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (plane, gp) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(out_h * out_w)) {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let wy = T::lit(wy);
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let wx = T::lit(wx);
                let gv = gp[oy * out_w + ox];
                let top = gv * (T::one() - wy);
                let bottom = gv * wy;
                plane[y0 * w + x0] += top * (T::one() - wx);
                plane[y0 * w + x1] += top * wx;
                plane[y1 * w + x0] += bottom * (T::one() - wx);
                plane[y1 * w + x1] += bottom * wx;
            }
        }
    }
    dx
}

impl<T: Real> Graph<T> {
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(input);
        if shape.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("input must be NCHW, got {shape:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "output extents must be >= 1"));
        }
        let value = bilinear_forward(self.value(input), out_h, out_w);
        self.push(value, Op::Bilinear { input }, &[input], "bilinear_resize")
    }
}

/// Bilinear resize of a plain tensor, outside any graph.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape("bilinear_resize", format!("input must be NCHW, got {:?}", x.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "output extents must be >= 1"));
    }
    Ok(bilinear_forward(x, out_h, out_w))
}

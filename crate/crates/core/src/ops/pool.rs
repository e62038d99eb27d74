use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    /// 2×2 max pooling with stride 2. Odd spatial extents are rejected.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        if shape.len() != 4 {
            return Err(Error::shape("maxpool2", format!("input must be NCHW, got {shape:?}")));
        }
        if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial extents must be even, got {}×{}", shape[2], shape[3]),
            ));
        }
        self.max_pool2d(input, 2, 2, 0)
    }

    /// Max pooling with implicit −∞ padding. Ties route the gradient to the
    /// first maximal element in row-major window order.
    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("input must be NCHW, got {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel || padding >= kernel {
            return Err(Error::shape(
                "max_pool2d",
                format!("kernel {kernel}, stride {stride}, padding {padding} invalid for {h}×{w}"),
            ));
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        if kernel == 2 && stride == 2 && padding == 0 {
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    let top = base + 2 * oy * w;
                    let (r0, r1) = (&x[top..top + w], &x[top + w..top + 2 * w]);
                    for ox in 0..ow {
                        let j = 2 * ox;
                        let mut best = (r0[j], top + j);
                        for (v, idx) in [(r0[j + 1], top + j + 1), (r1[j], top + w + j), (r1[j + 1], top + w + j + 1)] {
                            if v > best.0 {
                                best = (v, idx);
                            }
                        }
                        out.push(best.0);
                        argmax.push(best.1);
                    }
                }
            }
            let value = Tensor::new(vec![n, c, oh, ow], out)?;
            return self.push(value, Op::MaxPool { input, argmax }, &[input], "max_pool2d");
        }
        // In-bounds window offsets for each output row (or column).
        let window = |o: usize, extent: usize| {
            let first = (o * stride).saturating_sub(padding);
            let last = (o * stride + kernel - padding).min(extent);
            first..last
        };
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                let rows = window(oy, h);
                for ox in 0..ow {
                    let cols = window(ox, w);
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for iy in rows.clone() {
                        for ix in cols.clone() {
                            let idx = base + iy * w + ix;
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(value, Op::MaxPool { input, argmax }, &[input], "max_pool2d")
    }
}

//! 2-D cross-correlation lowered to GEMM via im2col.
//!
//! Images are processed in chunks so that each GEMM has roughly
//! [`TARGET_COLUMNS`] output columns: large feature maps run one image per
//! GEMM, tiny ones (deep ResNet stages) batch many images into one.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{matmul, Real, Tensor};

const TARGET_COLUMNS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be NCHW, got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel must be OIHW, got {kernel:?}")));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(
                "conv2d",
                format!("channel dimension: input has {}, kernel expects {}", input[1], kernel[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if h + 2 * pad < kh {
            return Err(Error::shape(
                "conv2d",
                format!("height dimension: padded extent {} < kernel {kh}", h + 2 * pad),
            ));
        }
        if w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("width dimension: padded extent {} < kernel {kw}", w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            n: input[0],
            c: input[1],
            h,
            w,
            o: kernel[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (TARGET_COLUMNS / self.plane()).clamp(1, self.n.max(1))
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.o * self.plane() * self.patch()) as u64
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kj - pad` is in range.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.ow);
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, n0: usize, count: usize, cols: &mut [T]) {
    let p = g.plane();
    let cols_per_row = count * p;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * cols_per_row;
                let (lo, hi) = valid_cols(g, kj);
                for nl in 0..count {
                    let plane = &x[((n0 + nl) * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let dst = &mut cols[row + nl * p + oy * g.ow..][..g.ow];
                        let iy = oy * g.stride + ki;
                        if iy < g.pad || iy - g.pad >= g.h {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[(iy - g.pad) * g.w..][..g.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, s) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, n0: usize, count: usize, dx: &mut [T]) {
    let p = g.plane();
    let cols_per_row = count * p;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * cols_per_row;
                let (lo, hi) = valid_cols(g, kj);
                for nl in 0..count {
                    let plane = &mut dx[((n0 + nl) * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = oy * g.stride + ki;
                        if iy < g.pad || iy - g.pad >= g.h {
                            continue;
                        }
                        let src = &cols[row + nl * p + oy * g.ow..][lo..hi];
                        let dst = &mut plane[(iy - g.pad) * g.w..][..g.w];
                        let first = lo * g.stride + kj - g.pad;
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias dimension: expected [{}], got {:?}", geom.o, self.shape(b)),
                ));
            }
        }
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = bias.map(|b| self.value(b).data());
        let (p, k) = (geom.plane(), geom.patch());
        let chunk = geom.chunk();
        let mut out = vec![T::zero(); geom.n * geom.o * p];
        let mut cols = vec![T::zero(); k * chunk * p];
        let mut tmp = vec![T::zero(); geom.o * chunk * p];
        let mut n0 = 0;
        while n0 < geom.n {
            let count = chunk.min(geom.n - n0);
            let j = count * p;
            im2col(x, &geom, n0, count, &mut cols[..k * j]);
            matmul(w, false, &cols[..k * j], false, &mut tmp[..geom.o * j], geom.o, k, j, false);
            for nl in 0..count {
                for o in 0..geom.o {
                    let dst = &mut out[((n0 + nl) * geom.o + o) * p..][..p];
                    let src = &tmp[o * j + nl * p..][..p];
                    let bias = b.map_or(T::zero(), |b| b[o]);
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
            n0 += count;
        }
        let value = Tensor::new(vec![geom.n, geom.o, geom.oh, geom.ow], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
            "conv2d",
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    graph: &Graph<T>,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: &ConvGeom,
    g: &Tensor<T>,
    wants: &dyn Fn(Var) -> bool,
    emit: &mut dyn FnMut(Var, Tensor<T>),
) {
    let want_x = wants(input);
    let want_w = wants(kernel);
    let want_b = bias.is_some_and(wants);
    let x = graph.value(input).data();
    let w = graph.value(kernel).data();
    let dy = g.data();
    let (p, k, o) = (geom.plane(), geom.patch(), geom.o);
    let chunk = geom.chunk();

    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); w.len()]);
    let mut db = want_b.then(|| vec![T::zero(); o]);
    let mut cols = vec![T::zero(); k * chunk * p];
    let mut dy_chunk = vec![T::zero(); o * chunk * p];

    let mut n0 = 0;
    while n0 < geom.n {
        let count = chunk.min(geom.n - n0);
        let j = count * p;
        for nl in 0..count {
            for oc in 0..o {
                let src = &dy[((n0 + nl) * o + oc) * p..][..p];
                dy_chunk[oc * j + nl * p..][..p].copy_from_slice(src);
            }
        }
        if let Some(db) = db.as_mut() {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc += dy_chunk[oc * j..(oc + 1) * j].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(x, geom, n0, count, &mut cols[..k * j]);
            matmul(&dy_chunk[..o * j], false, &cols[..k * j], true, dw, o, j, k, true);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(w, true, &dy_chunk[..o * j], false, &mut cols[..k * j], k, o, j, false);
            col2im(&cols[..k * j], geom, n0, count, dx);
        }
        n0 += count;
    }
    if let Some(dx) = dx {
        emit(input, Tensor::new(graph.shape(input).to_vec(), dx).unwrap());
    }
    if let Some(dw) = dw {
        emit(kernel, Tensor::new(graph.shape(kernel).to_vec(), dw).unwrap());
    }
    if let (Some(b), Some(db)) = (bias, db) {
        emit(b, Tensor::new(vec![o], db).unwrap());
    }
}

/// Multiply-accumulate count of a convolution with the given extents.
pub fn conv_macs(input: [usize; 4], kernel: [usize; 4], stride: usize, padding: usize) -> Result<u64> {
    Ok(ConvGeom::new(&input, &kernel, stride, padding)?.macs())
}

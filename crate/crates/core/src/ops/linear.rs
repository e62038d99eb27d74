use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{matmul, Real, Tensor};

impl<T: Real> Graph<T> {
    /// `input (N×F) · weight (F×O) + bias (O)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(
                "linear",
                format!("inner dimension: input {xs:?} vs weight {ws:?}"),
            ));
        }
        let (n, f, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "linear",
                    format!("bias dimension: expected [{o}], got {:?}", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        matmul(
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            n,
            f,
            o,
            bias.is_some(),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            Tensor::new(vec![n, o], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &inputs,
            "linear",
        )
    }
}

pub(crate) fn linear_backward<T: Real>(
    graph: &Graph<T>,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    g: &Tensor<T>,
    wants: &dyn Fn(Var) -> bool,
    emit: &mut dyn FnMut(Var, Tensor<T>),
) {
    let xs = graph.shape(input);
    let (n, f) = (xs[0], xs[1]);
    let o = graph.shape(weight)[1];
    let dy = g.data();
    if wants(input) {
        let mut dx = vec![T::zero(); n * f];
        matmul(dy, false, graph.value(weight).data(), true, &mut dx, n, o, f, false);
        emit(input, Tensor::new(vec![n, f], dx).unwrap());
    }
    if wants(weight) {
        let mut dw = vec![T::zero(); f * o];
        matmul(graph.value(input).data(), true, dy, false, &mut dw, f, n, o, false);
        emit(weight, Tensor::new(vec![f, o], dw).unwrap());
    }
    if let Some(b) = bias.filter(|&b| wants(b)) {
        let mut db = vec![T::zero(); o];
        for row in dy.chunks(o) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        emit(b, Tensor::new(vec![o], db).unwrap());
    }
}

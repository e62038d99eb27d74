//! Shape plumbing and elementwise operators.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

impl<T: Real> Graph<T> {
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu { input }, &[input], "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale { input, factor }, &[input], "scale")
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push(value, Op::Reshape { input }, &[input], "reshape")
    }

    /// Collapse every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(input, vec![n, rest])
    }

    /// NCHW → N×C spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input must be NCHW, got {shape:?}")));
        }
        let hw = shape[2] * shape[3];
        let scale = T::one() / T::from_usize(hw).unwrap();
        let data = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], data)?;
        self.push(value, Op::GlobalAvgPool { input }, &[input], "global_avg_pool")
    }

    /// Elements at flat `indices`, as a 1-D tensor.
    pub fn gather(&mut self, input: Var, indices: Vec<usize>) -> Result<Var> {
        let x = self.value(input).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {} elements", x.len())));
        }
        let value = Tensor::new(vec![indices.len()], indices.iter().map(|&i| x[i]).collect())?;
        self.push(value, Op::Gather { input, indices }, &[input], "gather")
    }

    /// Scalar element `(row, col)` of a 2-D tensor.
    pub fn select(&mut self, input: Var, row: usize, col: usize) -> Result<Var> {
        let shape = self.shape(input);
        if shape.len() != 2 || row >= shape[0] || col >= shape[1] {
            return Err(Error::shape("select", format!("({row}, {col}) outside {shape:?}")));
        }
        let idx = row * shape[1] + col;
        let value = Tensor::scalar(self.value(input).data()[idx]);
        self.push(value, Op::Gather { input, indices: vec![idx] }, &[input], "select")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).data().iter().copied().sum());
        self.push(value, Op::Sum { input }, &[input], "sum")
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let value = Tensor::scalar(x.data().iter().copied().sum::<T>() / T::from_usize(x.numel()).unwrap());
        self.push(value, Op::Mean { input }, &[input], "mean")
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { input, lo, hi }, &[input], "clamp")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(vec![3], &[-1.0, 0.0, 2.5]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn relu_all_negative_blocks_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::from_f64(vec![4], &[-1.0, -0.1, -3.0, -2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::from_f64(vec![2], &[0.0, 1.0]).unwrap());
        let y = g.relu(x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn gather_and_select() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = g.select(x, 1, 2).unwrap();
        assert_eq!(g.value(s).item(), 6.0);
        assert!(g.select(x, 2, 0).is_err());
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(vec![1], &[f64::MAX]).unwrap());
        assert!(matches!(g.scale(x, 2.0), Err(Error::NonFinite { .. })));
    }
}

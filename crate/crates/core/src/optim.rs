//! Learnable parameters with Adam state.

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// Named learnable tensors, their accumulated gradients, and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    params: Vec<Param<T>>,
    step: u64,
    adam: AdamConfig,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            step: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn with_adam(adam: AdamConfig) -> Self {
        ParamSet {
            adam,
            ..Self::new()
        }
    }

    /// Register a parameter; returns its id.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total learnable element count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: usize, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Bind every parameter as a graph leaf; the returned vars are indexed by id.
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(id, p)| graph.param(id, p.value.clone()))
            .collect()
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            self.params[id].grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// One Adam update from the accumulated gradients, which are then zeroed.
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(eps);
        for p in &mut self.params {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + one_b1 * gi;
            }
            let v = p.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                *w -= step_size * mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        self.zero_grad();
    }

    /// Backpropagate `loss`, accumulate parameter gradients, take one Adam
    /// step, and zero the gradients. A non-finite loss aborts before any update.
    pub fn backward_and_step(&mut self, graph: &mut Graph<T>, loss: Var, lr: f64) -> Result<()> {
        if !graph.value(loss).all_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let grads = graph.backward(loss)?;
        self.accumulate(&grads);
        self.adam_step(lr);
        Ok(())
    }

    /// Hash of every parameter value and optimizer moment.
    pub fn fingerprint(&self) -> u64 {
        use std::collections::hash_map::DefaultHasher;
        use std::hash::{Hash, Hasher};
        let mut h = DefaultHasher::new();
        self.step.hash(&mut h);
        for p in &self.params {
            p.name.hash(&mut h);
            for t in [&p.value, &p.grad, &p.m, &p.v] {
                for v in t.data() {
                    v.to_f64().unwrap().to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_step(theta: f64, lr: f64) -> f64 {
        let mut ps = ParamSet::<f64>::new();
        ps.add("theta", Tensor::scalar(theta));
        let mut g = Graph::new();
        let vars = ps.bind(&mut g);
        let a = g.reshape(vars[0], vec![1, 1]).unwrap();
        let sq = g.linear(a, a, None).unwrap();
        let loss = g.sum(sq).unwrap();
        ps.backward_and_step(&mut g, loss, lr).unwrap();
        ps.get(0).value.item()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the first update is lr·g/|g| = lr
        let theta = square_step(1.0, 0.1);
        assert!((theta - 0.9).abs() < 1e-6, "{theta}");
    }

    #[test]
    fn zero_lr_leaves_params() {
        assert_eq!(square_step(1.0, 0.0), 1.0);
    }

    #[test]
    fn constant_loss_leaves_params() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::full(vec![3], 0.5));
        let mut g = Graph::new();
        let _ = ps.bind(&mut g);
        let c = g.constant(Tensor::scalar(4.0));
        let loss = g.scale(c, 1.0).unwrap();
        ps.backward_and_step(&mut g, loss, 0.1).unwrap();
        assert_eq!(ps.get(0).value.data(), &[0.5; 3]);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", Tensor::full(vec![1], 0.5));
        let before = ps.fingerprint();
        let mut g = Graph::new();
        let loss = g.constant(Tensor::scalar(f32::NAN));
        assert!(ps.backward_and_step(&mut g, loss, 0.1).is_err());
        assert_eq!(ps.fingerprint(), before);
    }
}

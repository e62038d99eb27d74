//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so node indices are a topological
//! order and a reverse sweep over the tape visits every consumer of a node
//! before the node itself. Two sweeps are exposed: [`Graph::backward`], a full
//! pass that materializes parameter gradients and fires backward hooks, and
//! [`Graph::grad_query`], a targeted pass that stops at a retained
//! intermediate and returns a detached gradient.

use crate::error::{Error, Result};
use crate::ops::conv::ConvGeom;
use crate::ops::metric::MapMetric;
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Reshape {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Bilinear {
        input: Var,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    ChannelWeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    MinMaxNorm {
        input: Var,
        inv_range: Vec<T>,
        /// Per-map offsets of the minimum and maximum.
        extrema: Vec<(usize, usize)>,
    },
    Clamp {
        input: Var,
        lo: T,
        hi: T,
    },
    GroupMean {
        input: Var,
        groups: Vec<Vec<usize>>,
    },
    MapDistance {
        input: Var,
        target: Tensor<T>,
        metric: MapMetric,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retained: bool,
    param: Option<usize>,
}

type BackwardHook<T> = Box<dyn FnMut(&Tensor<T>)>;

/// A single differentiation graph. Confined to one thread.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    hooks: Vec<(usize, BackwardHook<T>)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by a full [`Graph::backward`] sweep.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf or retained node, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `(param id, gradient)` for every parameter leaf reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, pid)| self.grads[node].as_ref().map(|g| (pid, g)))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            hooks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Differentiable leaf that is not a model parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Differentiable leaf bound to parameter `id` of a [`crate::optim::ParamSet`].
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retained: false,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Flag `v` as a gradient-query target. Must happen before the nodes that
    /// consume `v` are recorded, otherwise they will not carry gradient back to it.
    pub fn retain(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        node.retained = true;
        node.requires_grad = true;
    }

    pub fn is_retained(&self, v: Var) -> bool {
        self.nodes[v.0].retained
    }

    /// Listener fired with the gradient of `v` during every [`Graph::backward`].
    pub fn register_backward_hook(&mut self, v: Var, hook: impl FnMut(&Tensor<T>) + 'static) {
        self.hooks.push((v.0, Box::new(hook)));
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retained: false,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_scalar(&self, source: Var) -> Result<()> {
        let value = &self.nodes[source.0].value;
        if value.numel() != 1 {
            return Err(Error::NonScalarSource(value.shape().to_vec()));
        }
        Ok(())
    }

    /// `∂source/∂target` for a retained `target`, detached from the graph.
    ///
    /// Only the nodes recorded after `target` are visited, and parameter
    /// gradients are neither computed nor touched.
    pub fn grad_query(&self, source: Var, target: Var) -> Result<Tensor<T>> {
        self.check_scalar(source)?;
        if !self.nodes[target.0].retained {
            return Err(Error::NotRetained(target.0));
        }
        if source.0 < target.0 {
            return Ok(Tensor::zeros(self.nodes[target.0].value.shape().to_vec()));
        }
        let mut grads = self.sweep(source.0, target.0, |i| i == target.0, |_, _| {});
        Ok(grads[target.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[target.0].value.shape().to_vec())))
    }

    /// Full reverse pass from scalar `loss` down to the inputs. Fires backward
    /// hooks and returns gradients of every leaf and retained node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_scalar(loss)?;
        let mut hooks = std::mem::take(&mut self.hooks);
        let nodes = &self.nodes;
        let grads = self.sweep(
            loss.0,
            0,
            |i| matches!(nodes[i].op, Op::Leaf) || nodes[i].retained,
            |i, g| {
                for (node, hook) in hooks.iter_mut() {
                    if *node == i {
                        hook(g);
                    }
                }
            },
        );
        self.hooks = hooks;
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn sweep(
        &self,
        root: usize,
        stop: usize,
        keep: impl Fn(usize) -> bool,
        mut on_complete: impl FnMut(usize, &Tensor<T>),
    ) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        let root_shape = self.nodes[root].value.shape().to_vec();
        grads[root] = Some(Tensor::full(root_shape, T::one()));
        for i in (stop..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            on_complete(i, &g);
            if i > stop {
                let nodes = &self.nodes;
                let wants = |v: Var| v.0 >= stop && nodes[v.0].requires_grad;
                let mut emit = |v: Var, dv: Tensor<T>| {
                    debug_assert!(v.0 < i);
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&dv),
                        slot @ None => *slot = Some(dv),
                    }
                };
                self.backprop(i, &g, &wants, &mut emit);
            }
            if keep(i) {
                grads[i] = Some(g);
            }
        }
        grads
    }

    fn backprop(
        &self,
        index: usize,
        g: &Tensor<T>,
        wants: &dyn Fn(Var) -> bool,
        emit: &mut dyn FnMut(Var, Tensor<T>),
    ) {
        use crate::ops;
        let node = &self.nodes[index];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => ops::conv::conv2d_backward(self, *input, *kernel, *bias, geom, g, wants, emit),
            Op::Relu { input } => {
                if wants(*input) {
                    let out = node.value.data();
                    let dx = g
                        .data()
                        .iter()
                        .zip(out)
                        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                        .collect();
                    emit(*input, Tensor::new(node.value.shape().to_vec(), dx).unwrap());
                }
            }
            Op::MaxPool { input, argmax } => {
                if wants(*input) {
                    let mut dx = Tensor::zeros(self.shape(*input).to_vec());
                    let d = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    emit(*input, dx);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => ops::norm::batchnorm_backward(
                self,
                *input,
                *gamma,
                *beta,
                xhat,
                inv_std,
                *batch_stats,
                g,
                wants,
                emit,
            ),
            Op::Linear {
                input,
                weight,
                bias,
            } => ops::linear::linear_backward(self, *input, *weight, *bias, g, wants, emit),
            Op::Add { a, b } => {
                if wants(*a) {
                    emit(*a, g.clone());
                }
                if wants(*b) {
                    emit(*b, g.clone());
                }
            }
            Op::Scale { input, factor } => {
                if wants(*input) {
                    let f = *factor;
                    emit(*input, g.map(|v| v * f));
                }
            }
            Op::Reshape { input } => {
                if wants(*input) {
                    emit(*input, g.clone().reshape(self.shape(*input).to_vec()).unwrap());
                }
            }
            Op::GlobalAvgPool { input } => {
                if wants(*input) {
                    let shape = self.shape(*input).to_vec();
                    let hw = shape[2] * shape[3];
                    let scale = T::one() / T::from_usize(hw).unwrap();
                    let mut dx = Vec::with_capacity(shape.iter().product());
                    for &gv in g.data() {
                        dx.extend(std::iter::repeat(gv * scale).take(hw));
                    }
                    emit(*input, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let shape = self.shape(*logits).to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let scale = g.item() / T::from_usize(n).unwrap();
                    let mut dx = probs.clone();
                    for (row, &label) in labels.iter().enumerate() {
                        dx[row * c + label] -= T::one();
                    }
                    for v in dx.iter_mut() {
                        *v *= scale;
                    }
                    emit(*logits, Tensor::new(shape, dx).unwrap());
                }
            }
            Op::Bilinear { input } => {
                if wants(*input) {
                    emit(*input, ops::resize::bilinear_backward(g, self.shape(*input)));
                }
            }
            Op::Gather { input, indices } => {
                if wants(*input) {
                    let mut dx = Tensor::zeros(self.shape(*input).to_vec());
                    let d = dx.data_mut();
                    for (&i, &gv) in indices.iter().zip(g.data()) {
                        d[i] += gv;
                    }
                    emit(*input, dx);
                }
            }
            Op::Sum { input } => {
                if wants(*input) {
                    emit(*input, Tensor::full(self.shape(*input).to_vec(), g.item()));
                }
            }
            Op::Mean { input } => {
                if wants(*input) {
                    let shape = self.shape(*input).to_vec();
                    let n = T::from_usize(shape.iter().product()).unwrap();
                    emit(*input, Tensor::full(shape, g.item() / n));
                }
            }
            Op::ChannelWeightedSum { input, weights } => {
                if wants(*input) {
                    emit(*input, ops::cam::channel_weighted_sum_backward(g, self.shape(*input), weights));
                }
            }
            Op::MinMaxNorm {
                input,
                inv_range,
                extrema,
            } => {
                if wants(*input) {
                    let per = g.numel() / inv_range.len();
                    let y = node.value.data();
                    let mut dx = Vec::with_capacity(g.numel());
                    for (i, (&s, &(lo, hi))) in inv_range.iter().zip(extrema).enumerate() {
                        let gs = &g.data()[i * per..(i + 1) * per];
                        let ys = &y[i * per..(i + 1) * per];
                        let start = dx.len();
                        dx.extend(gs.iter().map(|&v| v * s));
                        if s != T::zero() {
                            let total: T = gs.iter().copied().sum();
                            let weighted: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                            dx[start + lo] += s * (weighted - total);
                            dx[start + hi] -= s * weighted;
                        }
                    }
                    emit(*input, Tensor::new(g.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Clamp { input, lo, hi } => {
                if wants(*input) {
                    let x = self.value(*input).data();
                    let dx = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(&d, &v)| if v >= *lo && v <= *hi { d } else { T::zero() })
                        .collect();
                    emit(*input, Tensor::new(g.shape().to_vec(), dx).unwrap());
                }
            }
            Op::GroupMean { input, groups } => {
                if wants(*input) {
                    emit(*input, ops::cam::group_mean_backward(g, self.shape(*input), groups));
                }
            }
            Op::MapDistance {
                input,
                target,
                metric,
            } => {
                if wants(*input) {
                    emit(*input, metric.backward(self.value(*input), target, g));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_query_rejects_unretained_target() {
        let mut g = Graph::<f32>::new();
        let a = g.variable(Tensor::full(vec![2], 1.0));
        let s = g.sum(a).unwrap();
        assert!(matches!(g.grad_query(s, a), Err(Error::NotRetained(_))));
    }

    #[test]
    fn grad_query_rejects_non_scalar_source() {
        let mut g = Graph::<f32>::new();
        let a = g.variable(Tensor::full(vec![2], 1.0));
        g.retain(a);
        let b = g.scale(a, 2.0).unwrap();
        assert!(matches!(g.grad_query(b, a), Err(Error::NonScalarSource(_))));
    }

    #[test]
    fn grad_query_of_scaled_sum_is_constant() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        g.retain(a);
        let b = g.scale(a, 2.0).unwrap();
        let s = g.sum(b).unwrap();
        let grad = g.grad_query(s, a).unwrap();
        assert_eq!(grad.data(), &[2.0; 4]);
    }

    #[test]
    fn grad_query_independent_source_is_zero() {
        let mut g = Graph::<f32>::new();
        let a = g.variable(Tensor::full(vec![3], 1.0));
        g.retain(a);
        let b = g.variable(Tensor::full(vec![3], 5.0));
        let s = g.sum(b).unwrap();
        let grad = g.grad_query(s, a).unwrap();
        assert_eq!(grad.data(), &[0.0; 3]);
        assert_eq!(grad.shape(), &[3]);
    }

    #[test]
    fn grad_query_is_idempotent_and_detached() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::from_f64(vec![4], &[1.0, -1.0, 2.0, 0.3]).unwrap());
        g.retain(x);
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let first = g.grad_query(s, x).unwrap();
        let second = g.grad_query(s, x).unwrap();
        assert_eq!(first, second);
        let as_node = g.constant(first);
        assert!(!g.requires_grad(as_node));
    }

    #[test]
    fn backward_fires_hooks_with_node_gradient() {
        use std::cell::RefCell;
        use std::rc::Rc;
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let y = g.scale(x, 3.0).unwrap();
        let seen = Rc::new(RefCell::new(None));
        let sink = seen.clone();
        g.register_backward_hook(y, move |grad| *sink.borrow_mut() = Some(grad.clone()));
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(seen.borrow().as_ref().unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }
}

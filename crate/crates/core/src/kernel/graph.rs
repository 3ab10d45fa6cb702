use super::ops::{self, Padding, StratNormStats};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    SpatialConv {
        x: Var,
        w: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        padding: Padding,
    },
    AvgPoolElu {
        x: Var,
        kernel: usize,
        slope: Vec<T>,
    },
    DepthwiseSpatial {
        x: Var,
        w: Var,
    },
    DepthwiseTemporal {
        x: Var,
        w: Var,
    },
    Elu(Var),
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
    },
    StratNorm {
        x: Var,
        groups: Vec<usize>,
        stats: StratNormStats<T>,
    },
    NtXent {
        z: Var,
        tau: T,
    },
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// recorded graph is acyclic by construction and backward is a single
/// reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn spatial_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::spatial_conv(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::SpatialConv { x, w }, rg))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let y = ops::conv1d(self.value(x), self.value(w), padding)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::Conv1d { x, w, padding }, rg))
    }

    pub fn avg_pool_elu(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let (y, slope) = ops::avg_pool_elu_slope(self.value(x), kernel)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::AvgPoolElu { x, kernel, slope }, rg))
    }

    pub fn depthwise_spatial(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::depthwise_spatial(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::DepthwiseSpatial { x, w }, rg))
    }

    pub fn depthwise_temporal(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::depthwise_temporal(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(y, Op::DepthwiseTemporal { x, w }, rg))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let y = ops::elu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Elu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(y, Op::Linear { x, w, b }, rg))
    }

    /// Mean cross-entropy of `[B, K]` logits against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(l),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn stratified_norm(&mut self, x: Var, groups: &[usize], eps: f64) -> Result<Var> {
        let (y, stats) = ops::stratified_norm(self.value(x), groups, eps)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            y,
            Op::StratNorm {
                x,
                groups: groups.to_vec(),
                stats,
            },
            rg,
        ))
    }

    pub fn nt_xent(&mut self, z: Var, tau: T) -> Result<Var> {
        let l = ops::nt_xent(self.value(z), tau)?;
        let rg = self.rg(&[z]);
        Ok(self.push(Tensor::scalar(l), Op::NtXent { z, tau }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!(
                    "operand shapes {:?} and {:?} differ",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), d)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(y, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let need = |v: Var| self.nodes[v.0].requires_grad;
            let mut acc = |v: Var, g: Tensor<T>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::SpatialConv { x, w } => {
                    let (dx, dw) =
                        ops::spatial_conv_backward(self.value(*x), self.value(*w), &dy, need(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if need(*w) {
                        acc(*w, dw);
                    }
                }
                Op::Conv1d { x, w, padding } => {
                    let (dx, dw) = ops::conv1d_backward(
                        self.value(*x),
                        self.value(*w),
                        *padding,
                        &dy,
                        need(*x),
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if need(*w) {
                        acc(*w, dw);
                    }
                }
                Op::AvgPoolElu { x, kernel, slope } => {
                    let shape = self.value(*x).shape();
                    acc(*x, ops::avg_pool_elu_backward(shape, slope, *kernel, &dy));
                }
                Op::DepthwiseSpatial { x, w } => {
                    let (dx, dw) = ops::depthwise_spatial_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        need(*x),
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if need(*w) {
                        acc(*w, dw);
                    }
                }
                Op::DepthwiseTemporal { x, w } => {
                    let (dx, dw) = ops::depthwise_temporal_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        need(*x),
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if need(*w) {
                        acc(*w, dw);
                    }
                }
                Op::Elu(x) => acc(*x, ops::elu_backward(self.value(*x), &dy)),
                Op::Relu(x) => acc(*x, ops::relu_backward(self.value(*x), &dy)),
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        ops::linear_backward(self.value(*x), self.value(*w), &dy, need(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if need(*w) {
                        acc(*w, dw);
                    }
                    if need(*b) {
                        acc(*b, db);
                    }
                }
                Op::SoftmaxCe { logits, labels } => {
                    let g =
                        ops::softmax_cross_entropy_backward(self.value(*logits), labels, dy.item());
                    acc(*logits, g);
                }
                Op::StratNorm { x, groups, stats } => {
                    acc(
                        *x,
                        ops::stratified_norm_backward(&node.value, groups, stats, &dy),
                    );
                }
                Op::NtXent { z, tau } => {
                    acc(*z, ops::nt_xent_backward(self.value(*z), *tau, dy.item())?);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(*x, dy.reshape(&shape)?);
                }
                Op::Add(a, b) => {
                    if need(*a) {
                        acc(*a, dy.clone());
                    }
                    if need(*b) {
                        acc(*b, dy);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if need(*a) {
                        acc(*a, elementwise(&dy, vb, |g, y| g * y));
                    }
                    if need(*b) {
                        acc(*b, elementwise(&dy, va, |g, x| g * x));
                    }
                }
                Op::Square(x) => {
                    let two = T::lit(2.0);
                    acc(*x, elementwise(&dy, self.value(*x), |g, v| two * g * v));
                }
                Op::Sum(x) => {
                    let g = dy.item();
                    acc(*x, Tensor::full(self.value(*x).shape(), g));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let d = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), d).expect("shape preserved")
}

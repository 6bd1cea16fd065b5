use super::kernels::{self, conv2d_backward};
use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    #[default]
    Im2col,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2,
    Relu,
    Add,
    Concat,
    Linear,
    Softmax,
    Sigmoid,
    Upsample2x,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    Sigmoid(Var),
    Upsample2x(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Relu(_) => OpKind::Relu,
            Op::Add(..) => OpKind::Add,
            Op::Concat(_) => OpKind::Concat,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Upsample2x(_) => OpKind::Upsample2x,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so the
/// tape is already topologically sorted and `backward` walks it in reverse.
///
/// Gradients of leaves accumulate across `backward` calls until
/// [`Graph::zero_grad`].
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    conv_algo: ConvAlgo,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            conv_algo: ConvAlgo::default(),
            fault: None,
        }
    }

    pub fn with_conv_algo(mut self, algo: ConvAlgo) -> Self {
        self.conv_algo = algo;
        self
    }

    /// Corrupts the backward rule of `kind` (scales its input gradients by 1.5).
    /// Exists so gradient-check tooling can prove it detects broken rules.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let y = match self.conv_algo {
            ConvAlgo::Im2col => kernels::conv2d_im2col(x, w, b, stride, pad)?,
            ConvAlgo::Direct => kernels::conv2d_direct(x, w, b, stride, pad)?,
        };
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(y, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut y = self.value(input).clone();
        for v in y.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        let rg = self.rg(input);
        self.push(y, Op::Relu(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut y = ta.clone();
        for (o, &v) in y.data_mut().iter_mut().zip(tb.data()) {
            *o += v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&ts)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(y, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = kernels::linear(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(y, Op::Linear { input, weight, bias }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Var {
        let y = kernels::softmax_last(self.value(input));
        let rg = self.rg(input);
        self.push(y, Op::Softmax(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let mut y = self.value(input).clone();
        for v in y.data_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        let rg = self.rg(input);
        self.push(y, Op::Sigmoid(input), rg)
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let y = kernels::upsample2x(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(y, Op::Upsample2x(input), rg))
    }

    /// Reverse pass seeded with `dL/d(var)` for each `(var, grad)` pair.
    pub fn backward(&mut self, seeds: &[(Var, &[T])]) -> Result<()> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.len() {
                return Err(Error::Shape(format!(
                    "seed gradient has {} elements, node has {}",
                    g.len(),
                    self.nodes[v.0].value.len()
                )));
            }
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let fault = self.fault == Some(self.nodes[i].op.kind());
            let mut out: Vec<(Var, Vec<T>)> = Vec::new();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    accumulate(&mut self.leaf_grads[i], &gy);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let cg = conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        self.value(*bias),
                        &gy,
                        *stride,
                        *pad,
                        self.rg(*input),
                    )?;
                    if let Some(gi) = cg.input {
                        out.push((*input, gi.into_data()));
                    }
                    out.push((*weight, cg.weight.into_data()));
                    out.push((*bias, cg.bias.into_data()));
                }
                Op::MaxPool2 { input, argmax } => {
                    let n = self.value(*input).len();
                    out.push((*input, kernels::maxpool2_backward(n, argmax, &gy)));
                }
                Op::Relu(input) => {
                    let g = node
                        .value
                        .data()
                        .iter()
                        .zip(&gy)
                        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                        .collect();
                    out.push((*input, g));
                }
                Op::Add(a, b) => {
                    out.push((*a, gy.clone()));
                    out.push((*b, gy.clone()));
                }
                Op::Concat(inputs) => {
                    let (n, _, h, w) = node.value.dims4()?;
                    let total = node.value.len() / n;
                    let mut offset = 0;
                    for &v in inputs {
                        let per = self.value(v).len() / n;
                        let mut g = Vec::with_capacity(per * n);
                        for ni in 0..n {
                            let start = ni * total + offset;
                            g.extend_from_slice(&gy[start..start + per]);
                        }
                        offset += per;
                        debug_assert_eq!(per % (h * w), 0);
                        out.push((v, g));
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (n, din) = (x.shape()[0], x.shape()[1]);
                    let dout = w.shape()[0];
                    let mut gx = vec![T::zero(); n * din];
                    gemm(n, dout, din, &gy, false, w.data(), false, &mut gx, false);
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(dout, n, din, &gy, true, x.data(), false, &mut gw, false);
                    let mut gb = vec![T::zero(); dout];
                    for row in gy.chunks(dout) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((*input, gx));
                    out.push((*weight, gw));
                    out.push((*bias, gb));
                }
                Op::Softmax(input) => {
                    let d = *node.value.shape().last().unwrap_or(&1);
                    let mut g = vec![T::zero(); gy.len()];
                    for ((gr, yr), gyr) in g.chunks_mut(d).zip(node.value.data().chunks(d)).zip(gy.chunks(d)) {
                        let mut dot = T::zero();
                        for (&y, &gv) in yr.iter().zip(gyr) {
                            dot += y * gv;
                        }
                        for ((o, &y), &gv) in gr.iter_mut().zip(yr).zip(gyr) {
                            *o = y * (gv - dot);
                        }
                    }
                    out.push((*input, g));
                }
                Op::Sigmoid(input) => {
                    let g = node
                        .value
                        .data()
                        .iter()
                        .zip(&gy)
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect();
                    out.push((*input, g));
                }
                Op::Upsample2x(input) => {
                    let shape = self.value(*input).shape().to_vec();
                    out.push((*input, kernels::upsample2x_backward(&shape, &gy)));
                }
            }
            for (v, mut g) in out {
                if !self.rg(v) {
                    continue;
                }
                if fault {
                    let k = T::lit(1.5);
                    g.iter_mut().for_each(|x| *x *= k);
                }
                accumulate(&mut grads[v.0], &g);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let w = g.param(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
        let b = g.param(Tensor::new(vec![1], vec![0.1]).unwrap());
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        let r = g.relu(y);
        let seed = vec![1.0; 4];
        g.backward(&[(r, &seed)]).unwrap();
        let once: Vec<Vec<f64>> = [x, w, b].iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        g.backward(&[(r, &seed)]).unwrap();
        for (v, o) in [x, w, b].iter().zip(&once) {
            let twice = g.grad(*v).unwrap();
            for (a, b) in twice.iter().zip(o) {
                assert_eq!(*a, 2.0 * b);
            }
        }
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constant_inputs_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 2], 1.0));
        let w = g.param(Tensor::full(&[3, 2], 0.5));
        let b = g.param(Tensor::zeros(&[3]));
        let y = g.linear(x, w, b).unwrap();
        g.backward(&[(y, &[1.0, 1.0, 1.0])]).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn add_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[1, 2]));
        let b = g.input(Tensor::zeros(&[2, 1]));
        assert!(g.add(a, b).is_err());
    }
}

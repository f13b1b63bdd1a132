//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value plus
//! whatever it needs for the backward sweep. Nodes that do not depend on a
//! gradient-tracking leaf save nothing, so inference through a tape costs
//! only the forward arithmetic. Reductions run in fixed index order and the
//! backward sweep visits nodes in strict reverse order, which makes gradients
//! bitwise reproducible.

mod conv;
mod norm;

pub use norm::NormMode;

use conv::ConvGeom;
use norm::StatLayout;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Norm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        layout: StatLayout,
        batch_stats: Option<(Vec<T>, Vec<T>)>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    BatchMean(Var),
    BatchVar {
        input: Var,
        mean: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    finished: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves reachable from a loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn sign<T: Real>(v: T) -> T {
    // Subgradient of |x| at 0 is taken as 0.
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], var: Var, shape: &[usize], g: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Per-channel batch mean and population variance computed by a
    /// batch-statistics norm node.
    pub fn batch_stats(&self, var: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[var.0].op {
            Op::Norm {
                batch_stats: Some((m, v)),
                ..
            } => Some((m, v)),
            _ => None,
        }
    }

    fn req(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(
        &mut self,
        name: &str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.k] {
                return Err(Error::shape(
                    "conv2d bias",
                    self.shape(weight),
                    self.shape(b),
                ));
            }
        }
        let cols = conv::im2col(self.value(input).data(), &geom);
        let out = conv::conv_forward(
            &cols,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let requires_grad =
            self.req(input) || self.req(weight) || bias.is_some_and(|b| self.req(b));
        let cols = if self.req(weight) { cols } else { Vec::new() };
        let value = Tensor::new(geom.out_shape(), out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            requires_grad,
        )
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(input), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (n, d, m) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(Error::shape("linear bias", ws, self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            Mat::new(self.value(input).data(), n, d),
            Mat::t(self.value(weight).data(), d, m),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let requires_grad =
            self.req(input) || self.req(weight) || bias.is_some_and(|b| self.req(b));
        let value = Tensor::new(vec![n, m], out)?;
        self.push(
            "linear",
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            requires_grad,
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let r = self.req(input);
        self.push("relu", value, Op::Relu(input), r)
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (shape, out, argmax) =
            conv::max_pool_forward(self.value(input).data(), self.shape(input), kernel, stride)?;
        let r = self.req(input);
        let value = Tensor::new(shape, out)?;
        self.push("max_pool2d", value, Op::MaxPool { input, argmax }, r)
    }

    /// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", s, &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::from_usize(hw);
        let data: Vec<T> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let r = self.req(input);
        let value = Tensor::new(vec![n, c], data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(input), r)
    }

    pub fn norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let out = norm::norm_forward(
            self.value(input).data(),
            self.shape(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
            eps,
        )?;
        let requires_grad = self.req(input) || self.req(gamma) || self.req(beta);
        let shape = self.shape(input).to_vec();
        let (xhat, inv_std) = if requires_grad {
            (out.xhat, out.inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            "norm",
            Tensor::new(shape, out.y)?,
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                layout: out.layout,
                batch_stats: out.batch_stats,
            },
            requires_grad,
        )
    }

    /// Mean cross-entropy of `[N, M]` logits against class labels, with
    /// log-sum-exp stabilization.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (n, m) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy labels",
                s,
                &[labels.len()],
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::LabelOutOfRange { label, classes: m });
        }
        let mut probs = vec![T::zero(); n * m];
        let mut total = T::zero();
        for (i, row) in self.value(logits).data().chunks(m).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * m + j] = e;
                z += e;
            }
            probs[i * m..(i + 1) * m].iter_mut().for_each(|p| *p /= z);
            total += max + z.ln() - row[labels[i]];
        }
        let loss = total / T::from_usize(n);
        let r = self.req(logits);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            r,
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let r = self.req(a) || self.req(b);
        self.push(name, value, op, r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|v| v * factor);
        let r = self.req(a);
        self.push("scale", value, Op::Scale(a, factor), r)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::abs);
        let r = self.req(a);
        self.push("abs", value, Op::Abs(a), r)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let r = self.req(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), r)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean input"));
        }
        let s: T = self.value(a).data().iter().copied().sum();
        let r = self.req(a);
        self.push("mean", Tensor::scalar(s / T::from_usize(n)), Op::Mean(a), r)
    }

    fn batch_mean_of(&self, a: Var) -> Result<(Vec<usize>, Vec<T>)> {
        let t = self.value(a);
        if t.ndim() < 1 || t.shape()[0] == 0 {
            return Err(Error::Empty("batch"));
        }
        let n = t.shape()[0];
        let e = t.item_len();
        let mut mean = vec![T::zero(); e];
        for row in t.data().chunks(e) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let nf = T::from_usize(n);
        mean.iter_mut().for_each(|m| *m /= nf);
        Ok((t.shape()[1..].to_vec(), mean))
    }

    /// Mean over the leading (batch) axis.
    pub fn batch_mean(&mut self, a: Var) -> Result<Var> {
        let (shape, mean) = self.batch_mean_of(a)?;
        let r = self.req(a);
        self.push("batch_mean", Tensor::new(shape, mean)?, Op::BatchMean(a), r)
    }

    /// Population variance over the leading (batch) axis.
    pub fn batch_var(&mut self, a: Var) -> Result<Var> {
        let (shape, mean) = self.batch_mean_of(a)?;
        let t = self.value(a);
        let n = t.shape()[0];
        let mut var = vec![T::zero(); mean.len()];
        for row in t.data().chunks(mean.len().max(1)) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let nf = T::from_usize(n);
        var.iter_mut().for_each(|v| *v /= nf);
        let r = self.req(a);
        self.push(
            "batch_var",
            Tensor::new(shape, var)?,
            Op::BatchVar { input: a, mean },
            r,
        )
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// gradient-tracking leaf reachable from it. A tape supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.finished = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g.data(), &mut grads);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let dmat = conv::dout_matrix(g, geom);
                if self.req(*weight) {
                    let dw = conv::conv_weight_grad(&dmat, cols, geom);
                    accumulate(grads, *weight, val(*weight).shape(), dw);
                }
                if let Some(b) = bias.filter(|b| self.req(*b)) {
                    accumulate(grads, b, val(b).shape(), conv::conv_bias_grad(&dmat, geom));
                }
                if self.req(*input) {
                    let dx = conv::conv_input_grad(&dmat, val(*weight).data(), geom);
                    accumulate(grads, *input, val(*input).shape(), dx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if self.req(*input) {
                    let mut dx = vec![T::zero(); n * d];
                    gemm(Mat::new(g, n, m), Mat::new(w.data(), m, d), &mut dx, false);
                    accumulate(grads, *input, x.shape(), dx);
                }
                if self.req(*weight) {
                    let mut dw = vec![T::zero(); m * d];
                    gemm(Mat::t(g, m, n), Mat::new(x.data(), n, d), &mut dw, false);
                    accumulate(grads, *weight, w.shape(), dw);
                }
                if let Some(b) = bias.filter(|b| self.req(*b)) {
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(grads, b, &[m], db);
                }
            }
            Op::Relu(input) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *input, val(*input).shape(), dx);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = vec![T::zero(); val(*input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                accumulate(grads, *input, val(*input).shape(), dx);
            }
            Op::GlobalAvgPool(input) => {
                let s = val(*input).shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_usize(hw);
                let mut dx = Vec::with_capacity(val(*input).len());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                accumulate(grads, *input, s, dx);
            }
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                ..
            } => {
                let out = norm::norm_backward(
                    g,
                    val(*input).shape(),
                    xhat,
                    inv_std,
                    val(*gamma).data(),
                    *layout,
                    self.req(*input),
                );
                if let Some(dx) = out.dx {
                    accumulate(grads, *input, val(*input).shape(), dx);
                }
                if self.req(*gamma) {
                    accumulate(grads, *gamma, val(*gamma).shape(), out.dgamma);
                }
                if self.req(*beta) {
                    accumulate(grads, *beta, val(*beta).shape(), out.dbeta);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let s = val(*logits).shape();
                let (n, m) = (s[0], s[1]);
                let k = g[0] / T::from_usize(n);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * k).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * m + l] -= k;
                }
                accumulate(grads, *logits, s, dx);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                if self.req(*a) {
                    accumulate(grads, *a, val(*a).shape(), g.to_vec());
                }
                if self.req(*b) {
                    let neg = matches!(node.op, Op::Sub(..));
                    let db = g.iter().map(|&v| if neg { -v } else { v }).collect();
                    accumulate(grads, *b, val(*b).shape(), db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if self.req(*a) {
                    let da = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                    accumulate(grads, *a, val(*a).shape(), da);
                }
                if self.req(*b) {
                    let db = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    accumulate(grads, *b, val(*b).shape(), db);
                }
            }
            Op::Scale(a, factor) => {
                let da = g.iter().map(|&v| v * *factor).collect();
                accumulate(grads, *a, val(*a).shape(), da);
            }
            Op::Abs(a) => {
                let da = val(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| sign(x) * gv)
                    .collect();
                accumulate(grads, *a, val(*a).shape(), da);
            }
            Op::Sum(a) => {
                let s = val(*a).shape();
                accumulate(grads, *a, s, vec![g[0]; val(*a).len()]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let v = g[0] / T::from_usize(n);
                accumulate(grads, *a, val(*a).shape(), vec![v; n]);
            }
            Op::BatchMean(a) => {
                let x = val(*a);
                let inv = T::one() / T::from_usize(x.shape()[0]);
                let mut dx = Vec::with_capacity(x.len());
                for _ in 0..x.shape()[0] {
                    dx.extend(g.iter().map(|&v| v * inv));
                }
                accumulate(grads, *a, x.shape(), dx);
            }
            Op::BatchVar { input, mean } => {
                let x = val(*input);
                let k = T::from_f64(2.0) / T::from_usize(x.shape()[0]);
                let e = mean.len().max(1);
                let mut dx = Vec::with_capacity(x.len());
                for row in x.data().chunks(e) {
                    for ((&xv, &m), &gv) in row.iter().zip(mean).zip(g) {
                        dx.push(gv * k * (xv - m));
                    }
                }
                accumulate(grads, *input, x.shape(), dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln4() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4], &[0.3; 8]));
        let l = tape.softmax_cross_entropy(x, &[0, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[0.0; 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(x, &[4]),
            Err(Error::LabelOutOfRange {
                label: 4,
                classes: 4
            })
        ));
        let empty = tape.constant(Tensor::zeros(vec![0, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(empty, &[]),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..9).map(f64::from).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_zero_weights_give_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2, 4, 4], &[0.7; 32]));
        let w = tape.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(vec![3, 5, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(
            err.contains("[1, 2, 4, 4]") && err.contains("[3, 5, 3, 3]"),
            "{err}"
        );
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero_b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, eye, Some(zero_b)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let w0 = tape.constant(Tensor::zeros(vec![3, 2]));
        let b = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let y = tape.linear(x, w0, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

        let bad = tape.constant(Tensor::zeros(vec![3, 5]));
        assert!(matches!(
            tape.linear(x, bad, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn frozen_unit_norm_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data = [0.5, -1.5, 2.0, 0.25, -0.75, 1.0, 0.0, 3.0];
        let x = tape.constant(t(&[1, 2, 2, 2], &data));
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let (mean, var) = ([0.0, 0.0], [1.0, 1.0]);
        let y = tape
            .norm(
                x,
                g,
                b,
                NormMode::Frozen {
                    mean: &mean,
                    var: &var,
                },
                1e-5,
            )
            .unwrap();
        for (a, e) in tape.value(y).data().iter().zip(data) {
            assert!((a - e).abs() < 1e-5 * e.abs().max(1.0));
        }
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(
            &[2, 2, 1, 2],
            &[1.0, 5.0, -2.0, 0.3, 4.0, 4.5, 9.0, -1.0],
        ));
        let g = tape.constant(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[0.25, -3.0]));
        let y = tape.norm(x, g, b, NormMode::BatchStats, 1e-5).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[0.25, 0.25, -3.0, -3.0, 0.25, 0.25, -3.0, -3.0]
        );
    }

    #[test]
    fn negative_frozen_variance_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (mean, var) = ([0.0], [-0.1]);
        assert!(tape
            .norm(
                x,
                g,
                b,
                NormMode::Frozen {
                    mean: &mean,
                    var: &var
                },
                1e-5
            )
            .is_err());
    }

    #[test]
    fn batch_stats_match_direct_summation() {
        // Two samples, two channels of 1x2.
        let data = [1.0, 3.0, -2.0, 0.0, 5.0, 7.0, 2.0, 4.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2, 1, 2], &data));
        let g = tape.constant(t(&[2], &[2.0, 0.5]));
        let b = tape.constant(t(&[2], &[0.1, -0.2]));
        let eps = 1e-5;
        let y = tape.norm(x, g, b, NormMode::BatchStats, eps).unwrap();

        let ch0 = [1.0, 3.0, 5.0, 7.0];
        let ch1 = [-2.0, 0.0, 2.0, 4.0];
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
            (m, var)
        };
        let (m0, v0) = stats(&ch0);
        let (m1, v1) = stats(&ch1);
        let f0 = |x: f64| 2.0 * (x - m0) / (v0 + eps).sqrt() + 0.1;
        let f1 = |x: f64| 0.5 * (x - m1) / (v1 + eps).sqrt() - 0.2;
        let expected = [
            f0(1.0),
            f0(3.0),
            f1(-2.0),
            f1(0.0),
            f0(5.0),
            f0(7.0),
            f1(2.0),
            f1(4.0),
        ];
        for (a, e) in tape.value(y).data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6);
        }
        let (bm, bv) = tape.batch_stats(y).unwrap();
        assert_eq!(bm, &[m0, m1]);
        assert!((bv[0] - v0).abs() < 1e-12 && (bv[1] - v1).abs() < 1e-12);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-2.0, 0.0, 1.0]), true);
        let a = tape.abs(x).unwrap();
        let l = tape.sum(a).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn non_tracking_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), false);
        let w = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        let p = tape.mul(x, w).unwrap();
        let l = tape.sum(p).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }
}

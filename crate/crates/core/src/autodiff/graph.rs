//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op in creation order, so the node list is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.

use super::functional::{self, PROB_FLOOR};
use super::Tensor;
use crate::error::{KoalaError, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Scale(Var, S),
    Reshape(Var),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    SoftmaxT(Var, S),
    LogSoftmaxT(Var, S),
    Kl(Var, Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recording of one forward computation plus accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any was propagated into it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_bias(self.value(bias))?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).relu();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, end)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn softmax_t(&mut self, z: Var, t: S) -> Result<Var> {
        let value = functional::softmax_t(self.value(z), t)?;
        let rg = self.any_grad(&[z]);
        Ok(self.push(value, Op::SoftmaxT(z, t), rg))
    }

    pub fn log_softmax_t(&mut self, z: Var, t: S) -> Result<Var> {
        let value = functional::log_softmax_t(self.value(z), t)?;
        let rg = self.any_grad(&[z]);
        Ok(self.push(value, Op::LogSoftmaxT(z, t), rg))
    }

    /// Row-averaged `KL(p || q)`; `p` is the target.
    pub fn kl_loss(&mut self, p: Var, q: Var) -> Result<Var> {
        let value = Tensor::scalar(functional::kl_loss(self.value(p), self.value(q))?);
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(value, Op::Kl(p, q), rg))
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(functional::mse_loss(self.value(a), self.value(b))?);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let value = Tensor::scalar(functional::cross_entropy_loss(self.value(logits), labels)?);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, Op::CrossEntropy(logits, labels.to_vec()), rg))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    ///
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(KoalaError::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Upstream gradients for this sweep, kept apart from the accumulated ones.
        let mut upstream: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        upstream[loss.0] = Some(Tensor::full(&shape, S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = upstream[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            let contributions = self.local_grads(idx, &op, &dy);
            self.accumulate(Var(idx), dy);
            for (v, g) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut upstream[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, op: &Op<S>, dy: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[idx].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut grads = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    let bt = val(*b).transpose().expect("2d");
                    grads.push((*a, dy.matmul(&bt).expect("shape checked on forward")));
                }
                if wants(*b) {
                    let at = val(*a).transpose().expect("2d");
                    grads.push((*b, at.matmul(dy).expect("shape checked on forward")));
                }
            }
            Op::Add(a, b) => {
                grads.push((*a, dy.clone()));
                grads.push((*b, dy.clone()));
            }
            Op::Sub(a, b) => {
                grads.push((*a, dy.clone()));
                grads.push((*b, dy.map(|g| -g)));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    grads.push((*a, dy.zip_map(val(*b), "mul", |g, y| g * y).unwrap()));
                }
                if wants(*b) {
                    grads.push((*b, dy.zip_map(val(*a), "mul", |g, x| g * x).unwrap()));
                }
            }
            Op::AddBias(x, bias) => {
                grads.push((*x, dy.clone()));
                if wants(*bias) {
                    let mut db = Tensor::zeros(val(*bias).shape());
                    for row in dy.row_iter() {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    grads.push((*bias, db));
                }
            }
            Op::Relu(x) => {
                let dx = dy
                    .zip_map(val(*x), "relu", |g, v| if v > S::zero() || v.is_nan() { g } else { S::zero() })
                    .unwrap();
                grads.push((*x, dx));
            }
            Op::Scale(x, c) => grads.push((*x, dy.map(|g| g * *c))),
            Op::Reshape(x) => {
                let dx = Tensor::new(val(*x).shape().to_vec(), dy.data().to_vec()).unwrap();
                grads.push((*x, dx));
            }
            Op::SliceRows(x, start) => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let c = dx.cols();
                dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                grads.push((*x, dx));
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                grads.push((*x, Tensor::full(val(*x).shape(), g)));
            }
            Op::Mean(x) => {
                let n = S::of(val(*x).len() as f64);
                let g = dy.data()[0] / n;
                grads.push((*x, Tensor::full(val(*x).shape(), g)));
            }
            Op::SoftmaxT(z, t) => {
                // dz = y * (dy - <dy, y>) / t, per row
                let mut dz = out.clone();
                let c = dz.cols();
                for (i, row) in dz.data_mut().chunks_mut(c).enumerate() {
                    let g = dy.row(i);
                    let dot: S = row.iter().zip(g).map(|(&y, &gy)| y * gy).sum();
                    for (y, &gy) in row.iter_mut().zip(g) {
                        *y = *y * (gy - dot) / *t;
                    }
                }
                grads.push((*z, dz));
            }
            Op::LogSoftmaxT(z, t) => {
                // dz = (dy - softmax * sum(dy)) / t, per row
                let mut dz = out.map(|l| l.exp());
                let c = dz.cols();
                for (i, row) in dz.data_mut().chunks_mut(c).enumerate() {
                    let g = dy.row(i);
                    let total: S = g.iter().copied().sum();
                    for (p, &gy) in row.iter_mut().zip(g) {
                        *p = (gy - *p * total) / *t;
                    }
                }
                grads.push((*z, dz));
            }
            Op::Kl(p, q) => {
                let scale = dy.data()[0] / S::of(val(*p).rows() as f64);
                let floor = S::of(PROB_FLOOR);
                if wants(*p) {
                    let dp = val(*p)
                        .zip_map(val(*q), "kl_loss", |pv, qv| {
                            let pv_safe = pv.max(floor);
                            ((pv_safe / qv.max(floor)).ln() + S::one()) * scale
                        })
                        .unwrap();
                    grads.push((*p, dp));
                }
                if wants(*q) {
                    let dq = val(*p)
                        .zip_map(val(*q), "kl_loss", |pv, qv| {
                            if qv < floor {
                                S::zero()
                            } else {
                                -pv / qv * scale
                            }
                        })
                        .unwrap();
                    grads.push((*q, dq));
                }
            }
            Op::Mse(a, b) => {
                let scale = dy.data()[0] * S::of(2.0) / S::of(val(*a).len() as f64);
                let da = val(*a)
                    .zip_map(val(*b), "mse_loss", |x, y| (x - y) * scale)
                    .unwrap();
                if wants(*b) {
                    grads.push((*b, da.map(|g| -g)));
                }
                grads.push((*a, da));
            }
            Op::CrossEntropy(logits, labels) => {
                let rows = S::of(labels.len() as f64);
                let scale = dy.data()[0] / rows;
                let mut dz = functional::softmax_t(val(*logits), S::one()).unwrap();
                for (i, &y) in labels.iter().enumerate() {
                    dz.row_mut(i)[y] -= S::one();
                }
                grads.push((*logits, dz.map(|g| g * scale)));
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 0., 9.]).unwrap());
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mse_scalar_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::vector(vec![3.0]));
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let loss = g.mse_loss(w, zero).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[6.0]);
        assert!(g.grad(zero).is_none());
    }

    #[test]
    fn backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let r = g.relu(w);
        assert!(matches!(g.backward(r), Err(KoalaError::NonScalarLoss(_))));
    }

    #[test]
    fn shared_subexpression_gradients_add() {
        // loss = sum(w * w) => d/dw = 2w
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::vector(vec![1.5, -2.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn constants_do_not_record_grad() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert!(!g.requires_grad(c));
        assert_eq!(g.value(c).data(), &[11.0]);
    }
}

//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Gradients accumulate on leaves created with `requires_grad = true`;
//! nodes whose inputs never require a gradient are skipped entirely.

use crate::error::{Error, Result};
use crate::projection::{window_mean_adjoint, window_mean_kernel, ImageBlock};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization behavior: batch statistics (train) or running statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics and constants of a batch-normalization layer.
///
/// The affine parameters (γ, β) are ordinary graph leaves and are passed to
/// [`Graph::batch_norm`] separately.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> NormState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(width: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); width],
            running_var: vec![T::one(); width],
            eps: T::of(Self::DEFAULT_EPS),
            momentum: T::of(Self::DEFAULT_MOMENTUM),
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Unary(UnaryOp, Var),
    Scale(Var, T),
    Shift(Var),
    Sum(Var),
    ConcatCols(Var, Var),
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    ScatterMax {
        x: Var,
        // one source row per (cell, channel); usize::MAX marks an empty cell
        argmax: Vec<usize>,
    },
    WindowMean {
        x: Var,
        blocks: Vec<ImageBlock>,
        k: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxXent {
        logits: Var,
        // d loss / d logits, already divided by the unmasked row count
        dlogits: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation: values, the operations that produced them, and leaf gradients.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
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

    /// Adds an input value. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| Error::Rank {
            op,
            shape: self.shape(v).to_vec(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    /// Pointwise add/sub/mul. `b` may also be a vector over the last axis of `a`.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = if sa == sb {
            false
        } else {
            let last = *sa.last().unwrap_or(&0);
            let vector = sb.len() == 1 || (sb.len() == 2 && sb[0] == 1);
            if vector && sb.last() == Some(&last) && !sa.is_empty() {
                true
            } else {
                return Err(Error::dim("elementwise", &sa, &sb));
            }
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let width = bv.len();
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let data: Vec<T> = if broadcast {
            av.iter().enumerate().map(|(i, &x)| f(x, bv[i % width])).collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(sa, data)?;
        Ok(self.push(value, &[a, b], Op::Binary { op, a, b, broadcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let value = self.value(x).map(|v| match op {
            UnaryOp::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            UnaryOp::Exp => v.exp(),
            UnaryOp::Log => v.ln(),
        });
        self.push(value, &[x], Op::Unary(op, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Log, x)
    }

    /// `x * factor` for a constant factor.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, &[x], Op::Scale(x, factor))
    }

    /// `x + offset` for a constant offset.
    pub fn shift(&mut self, x: Var, offset: T) -> Var {
        let value = self.value(x).map(|v| v + offset);
        self.push(value, &[x], Op::Shift(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], Op::Sum(x))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, da) = self.dims2("concat_cols", a)?;
        let (n2, db) = self.dims2("concat_cols", b)?;
        if n != n2 {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Tensor::new(vec![n, da + db], data)?;
        Ok(self.push(value, &[a, b], Op::ConcatCols(a, b)))
    }

    /// Row lookup: `out[i] = x[ids[i]]`.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (c, d) = self.dims2("gather_rows", x)?;
        let src = self.value(x);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= c {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: id,
                    limit: c,
                });
            }
            data.extend_from_slice(src.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(value, &[x], Op::GatherRows { x, ids: ids.to_vec() }))
    }

    /// Per-cell, per-channel maximum over the rows assigned to each cell.
    ///
    /// Empty cells are zero. Ties resolve to the first row in input order, and
    /// only that row receives gradient.
    pub fn scatter_max(&mut self, x: Var, cell_ids: &[usize], num_cells: usize) -> Result<Var> {
        let (n, d) = self.dims2("scatter_max", x)?;
        if cell_ids.len() != n {
            return Err(Error::dim("scatter_max", &[n], &[cell_ids.len()]));
        }
        let src = self.value(x).data();
        let mut argmax = vec![usize::MAX; num_cells * d];
        for (i, &c) in cell_ids.iter().enumerate() {
            if c >= num_cells {
                return Err(Error::Index {
                    op: "scatter_max",
                    index: c,
                    limit: num_cells,
                });
            }
            for ch in 0..d {
                let slot = &mut argmax[c * d + ch];
                if *slot == usize::MAX || src[i * d + ch] > src[*slot * d + ch] {
                    *slot = i;
                }
            }
        }
        let data = argmax
            .iter()
            .enumerate()
            .map(|(j, &i)| if i == usize::MAX { T::zero() } else { src[i * d + j % d] })
            .collect();
        let value = Tensor::new(vec![num_cells, d], data)?;
        Ok(self.push(value, &[x], Op::ScatterMax { x, argmax }))
    }

    /// k×k neighborhood mean over stacked range images (see
    /// [`window_mean`](crate::projection::window_mean)).
    pub fn window_mean(&mut self, x: Var, blocks: &[ImageBlock], k: usize) -> Result<Var> {
        let (c, d) = self.dims2("window_mean", x)?;
        let out = window_mean_kernel(self.value(x).data(), c, d, blocks, k)?;
        let value = Tensor::new(vec![c, d], out)?;
        Ok(self.push(
            value,
            &[x],
            Op::WindowMean {
                x,
                blocks: blocks.to_vec(),
                k,
            },
        ))
    }

    /// Batch normalization over rows with learned affine `gamma`, `beta` (length D).
    ///
    /// Train mode normalizes with the biased batch variance and updates the
    /// running statistics (running variance uses the unbiased estimate).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut NormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (n, d) = self.dims2("batch_norm", x)?;
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::dim("batch_norm", self.shape(x), self.shape(p)));
            }
        }
        if state.width() != d {
            return Err(Error::dim("batch_norm", &[d], &[state.width()]));
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let xv = self.value(x).data();
        let (mean, var) = if train {
            let nt = T::of(n as f64);
            let mut mean = vec![T::zero(); d];
            for r in 0..n {
                for (m, &v) in mean.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nt);
            let mut var = vec![T::zero(); d];
            for r in 0..n {
                for c in 0..d {
                    let dv = xv[r * d + c] - mean[c];
                    var[c] += dv * dv;
                }
            }
            var.iter_mut().for_each(|v| *v /= nt);
            let unbias = nt / T::of((n - 1) as f64);
            let m = state.momentum;
            for c in 0..d {
                state.running_mean[c] = (T::one() - m) * state.running_mean[c] + m * mean[c];
                state.running_var[c] = (T::one() - m) * state.running_var[c] + m * var[c] * unbias;
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                out[i] = xhat[i] * g[c] + b[c];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Mean soft-label cross-entropy over unmasked rows.
    ///
    /// `targets` is N×K row-major; rows with `ignore[i] == true` contribute
    /// neither loss nor gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[T], ignore: &[bool]) -> Result<Var> {
        let (n, k) = self.dims2("softmax_cross_entropy", logits)?;
        if targets.len() != n * k {
            return Err(Error::dim("softmax_cross_entropy", &[n, k], &[targets.len()]));
        }
        if ignore.len() != n {
            return Err(Error::dim("softmax_cross_entropy", &[n], &[ignore.len()]));
        }
        let counted = ignore.iter().filter(|&&m| !m).count();
        if counted == 0 {
            return Err(Error::EmptyBatch);
        }
        let tol = T::of(1e-6);
        for r in (0..n).filter(|&r| !ignore[r]) {
            let s: T = targets[r * k..(r + 1) * k].iter().copied().sum();
            if (s - T::one()).abs() > tol || targets[r * k..(r + 1) * k].iter().any(|&t| t < T::zero()) {
                return Err(Error::InvalidTarget {
                    row: r,
                    sum: s.to_f64_lossy(),
                });
            }
        }
        let lv = self.value(logits).data();
        let inv_count = T::one() / T::of(counted as f64);
        let mut dlogits = vec![T::zero(); n * k];
        let mut total = T::zero();
        for r in (0..n).filter(|&r| !ignore[r]) {
            let row = &lv[r * k..(r + 1) * k];
            let t = &targets[r * k..(r + 1) * k];
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            // log Σ exp(l - max), written as ln(1 + rest) so tiny tails keep precision
            let rest: T = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let lse = rest.ln_1p();
            let denom = T::one() + rest;
            let mut row_loss = T::zero();
            for c in 0..k {
                row_loss += t[c] * (lse - (row[c] - max));
                let p = (row[c] - max).exp() / denom;
                dlogits[r * k + c] = (p - t[c]) * inv_count;
            }
            total += row_loss;
        }
        let value = Tensor::scalar(total * inv_count);
        Ok(self.push(value, &[logits], Op::SoftmaxXent { logits, dlogits }))
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Rank {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                let grad = Tensor::new(node.value.shape().to_vec(), g)?;
                match &mut node.grad {
                    Some(existing) => existing.add_assign(&grad),
                    None => node.grad = Some(grad),
                }
                continue;
            }
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if nodes[v.0].requires_grad {
                    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[a.0].value.dims2()?;
                    let n = nodes[b.0].value.shape()[1];
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(*a, &mut |ga| matmul_nt_acc(&g, bv, ga, m, k, n));
                    acc(*b, &mut |gb| matmul_tn_acc(av, &g, gb, m, k, n));
                }
                Op::Binary { op, a, b, broadcast } => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let width = bv.len();
                    let bi = |i: usize| if *broadcast { i % width } else { i };
                    acc(*a, &mut |ga| {
                        for (i, gi) in ga.iter_mut().enumerate() {
                            *gi += match op {
                                BinaryOp::Add | BinaryOp::Sub => g[i],
                                BinaryOp::Mul => g[i] * bv[bi(i)],
                            };
                        }
                    });
                    acc(*b, &mut |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[bi(i)] += match op {
                                BinaryOp::Add => gi,
                                BinaryOp::Sub => -gi,
                                BinaryOp::Mul => gi * av[i],
                            };
                        }
                    });
                }
                Op::Unary(op, x) => {
                    let xv = nodes[x.0].value.data();
                    let yv = node.value.data();
                    acc(*x, &mut |gx| {
                        for i in 0..gx.len() {
                            gx[i] += match op {
                                UnaryOp::Relu => {
                                    if xv[i] > T::zero() {
                                        g[i]
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnaryOp::Exp => g[i] * yv[i],
                                UnaryOp::Log => g[i] / xv[i],
                            };
                        }
                    });
                }
                Op::Scale(x, factor) => acc(*x, &mut |gx| {
                    for (a, &b) in gx.iter_mut().zip(&g) {
                        *a += b * *factor;
                    }
                }),
                Op::Shift(x) => acc(*x, &mut |gx| {
                    for (a, &b) in gx.iter_mut().zip(&g) {
                        *a += b;
                    }
                }),
                Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
                Op::ConcatCols(a, b) => {
                    let (n, da) = nodes[a.0].value.dims2()?;
                    let db = nodes[b.0].value.shape()[1];
                    let w = da + db;
                    acc(*a, &mut |ga| {
                        for r in 0..n {
                            for c in 0..da {
                                ga[r * da + c] += g[r * w + c];
                            }
                        }
                    });
                    acc(*b, &mut |gb| {
                        for r in 0..n {
                            for c in 0..db {
                                gb[r * db + c] += g[r * w + da + c];
                            }
                        }
                    });
                }
                Op::GatherRows { x, ids } => {
                    let d = nodes[x.0].value.shape()[1];
                    acc(*x, &mut |gx| {
                        for (i, &id) in ids.iter().enumerate() {
                            for c in 0..d {
                                gx[id * d + c] += g[i * d + c];
                            }
                        }
                    });
                }
                Op::ScatterMax { x, argmax } => {
                    let d = nodes[x.0].value.shape()[1];
                    acc(*x, &mut |gx| {
                        for (j, &src) in argmax.iter().enumerate() {
                            if src != usize::MAX {
                                gx[src * d + j % d] += g[j];
                            }
                        }
                    });
                }
                Op::WindowMean { x, blocks, k } => {
                    let (c, d) = nodes[x.0].value.dims2()?;
                    let adj = window_mean_adjoint(&g, c, d, blocks, *k)?;
                    acc(*x, &mut |gx| {
                        for (a, &b) in gx.iter_mut().zip(&adj) {
                            *a += b;
                        }
                    });
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (n, d) = nodes[x.0].value.dims2()?;
                    let gam = nodes[gamma.0].value.data();
                    acc(*gamma, &mut |gg| {
                        for i in 0..n * d {
                            gg[i % d] += g[i] * xhat[i];
                        }
                    });
                    acc(*beta, &mut |gb| {
                        for i in 0..n * d {
                            gb[i % d] += g[i];
                        }
                    });
                    acc(*x, &mut |gx| {
                        if *train {
                            let nt = T::of(n as f64);
                            let mut sum_dxhat = vec![T::zero(); d];
                            let mut sum_dxhat_xhat = vec![T::zero(); d];
                            for i in 0..n * d {
                                let dxh = g[i] * gam[i % d];
                                sum_dxhat[i % d] += dxh;
                                sum_dxhat_xhat[i % d] += dxh * xhat[i];
                            }
                            for i in 0..n * d {
                                let c = i % d;
                                let dxh = g[i] * gam[c];
                                gx[i] += inv_std[c] / nt
                                    * (nt * dxh - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c]);
                            }
                        } else {
                            for i in 0..n * d {
                                gx[i] += g[i] * gam[i % d] * inv_std[i % d];
                            }
                        }
                    });
                }
                Op::SoftmaxXent { logits, dlogits } => acc(*logits, &mut |gl| {
                    for (a, &b) in gl.iter_mut().zip(dlogits) {
                        *a += b * g[0];
                    }
                }),
            }
        }

        // every trainable leaf ends up with a gradient, even if the loss ignores it
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }
}

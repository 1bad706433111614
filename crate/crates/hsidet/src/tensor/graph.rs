//! Replayable operation tape with reverse-mode differentiation.
//!
//! Forward math lives in [`super::ops`]; a [`Graph`] records each executed
//! operation together with whatever the backward pass needs (argmax indices,
//! batch statistics). [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every leaf that asked for them. Max-pool routes
//! its subgradient to the lowest linear index on ties; everything runs on a
//! single logical thread, so results are bit-identical between runs.

use super::ops::{self, Conv2dSpec, PoolMode};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Batch-norm statistics source.
#[derive(Debug, Clone)]
pub enum BnMode<T> {
    /// Normalize by batch statistics (training). The computed per-channel
    /// mean/variance are kept on the node for running-average updates.
    Train,
    /// Normalize by the provided running statistics (inference).
    Eval {
        running_mean: Vec<T>,
        running_var: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct BnSaved<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    /// Batch variance (biased); only present in train mode.
    batch_var: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
enum Record<T> {
    Leaf {
        requires_grad: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Conv1dSame {
        x: Var,
        k: Var,
    },
    PoolSpatial {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    PoolChannel {
        x: Var,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    HSwish {
        x: Var,
    },
    Atan {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Minimum {
        a: Var,
        b: Var,
    },
    Maximum {
        a: Var,
        b: Var,
    },
    AddScalar {
        x: Var,
    },
    MulScalar {
        x: Var,
        k: T,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved<T>,
    },
    Upsample2x {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    /// Mean binary cross-entropy of logits against constant targets,
    /// with an optional weight on the positive (target) term.
    BceWithLogitsMean {
        x: Var,
        targets: Tensor<T>,
        pos_weight: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    record: Record<T>,
}

/// Ordered record of executed operations; replayable backwards.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients keyed by the [`Var`] they belong to.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, record: Record<T>) -> Var {
        self.nodes.push(Node { value, record });
        Var(self.nodes.len() - 1)
    }

    /// Register a differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(
            value,
            Record::Leaf {
                requires_grad: true,
            },
        )
    }

    /// Register a constant; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(
            value,
            Record::Leaf {
                requires_grad: false,
            },
        )
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Batch mean/variance captured by a train-mode batch-norm node.
    pub fn bn_batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].record {
            Record::BatchNorm { saved, .. } => saved
                .batch_var
                .as_ref()
                .map(|var| (saved.mean.as_slice(), var.as_slice())),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv2dSpec) -> Result<Var> {
        let bias_data = b.map(|bv| self.value(bv).data().to_vec());
        let out = ops::conv2d(self.value(x), self.value(w), bias_data.as_deref(), spec)?;
        Ok(self.push(out, Record::Conv2d { x, w, b, spec: *spec }))
    }

    pub fn conv1d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let out = ops::conv1d_same(self.value(x), self.value(kernel).data())?;
        Ok(self.push(out, Record::Conv1dSame { x, k: kernel }))
    }

    pub fn pool_spatial(&mut self, x: Var, mode: PoolMode) -> Var {
        let (out, argmax) = ops::pool_spatial(self.value(x), mode);
        self.push(out, Record::PoolSpatial { x, mode, argmax })
    }

    pub fn pool_channel(&mut self, x: Var, mode: PoolMode) -> Var {
        let (out, argmax) = ops::pool_channel(self.value(x), mode);
        self.push(out, Record::PoolChannel { x, mode, argmax })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Record::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Record::Sigmoid { x })
    }

    pub fn hswish(&mut self, x: Var) -> Var {
        let out = ops::hswish(self.value(x));
        self.push(out, Record::HSwish { x })
    }

    pub fn atan(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.atan());
        self.push(out, Record::Atan { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Record::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Record::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(out, Record::Mul { a, b }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::div(self.value(a), self.value(b))?;
        Ok(self.push(out, Record::Div { a, b }))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::minimum(self.value(a), self.value(b))?;
        Ok(self.push(out, Record::Minimum { a, b }))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::maximum(self.value(a), self.value(b))?;
        Ok(self.push(out, Record::Maximum { a, b }))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.push(out, Record::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Record::MulScalar { x, k })
    }

    /// Per-channel batch norm. `gamma` and `beta` are (1, C, 1, 1) vars.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode<T>,
    ) -> Result<Var> {
        let s = self.shape(x);
        let c = s.c;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let vs = self.shape(v);
            if vs.c != c || vs.n != 1 || vs.h != 1 || vs.w != 1 {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {vs} incompatible with {c} channels"),
                ));
            }
        }
        let (mean, var, batch_var) = match &mode {
            BnMode::Train => {
                let m = s.n * s.plane();
                let inv_m = T::from_f64(1.0 / m as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let plane = s.plane();
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..s.n {
                        let base = s.index(b, ch, 0, 0);
                        for v in &self.value(x).data()[base..base + plane] {
                            acc += *v;
                        }
                    }
                    mean[ch] = acc * inv_m;
                    let mut vacc = T::zero();
                    for b in 0..s.n {
                        let base = s.index(b, ch, 0, 0);
                        for v in &self.value(x).data()[base..base + plane] {
                            let d = *v - mean[ch];
                            vacc += d * d;
                        }
                    }
                    var[ch] = vacc * inv_m;
                }
                (mean, var.clone(), Some(var))
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats length != {c} channels"),
                    ));
                }
                (running_mean.clone(), running_var.clone(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(s);
        let plane = s.plane();
        for b in 0..s.n {
            for ch in 0..c {
                let g = self.value(gamma).data()[ch];
                let be = self.value(beta).data()[ch];
                let scale = g * inv_std[ch];
                let shift = be - mean[ch] * scale;
                let base = s.index(b, ch, 0, 0);
                for i in 0..plane {
                    out.data_mut()[base + i] = self.value(x).data()[base + i] * scale + shift;
                }
            }
        }
        Ok(self.push(
            out,
            Record::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    mean,
                    inv_std,
                    batch_var,
                },
            },
        ))
    }

    pub fn upsample_nearest_2x(&mut self, x: Var) -> Var {
        let out = ops::upsample_nearest_2x(self.value(x));
        self.push(out, Record::Upsample2x { x })
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(
            out,
            Record::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels(self.value(x), start, len)?;
        Ok(self.push(out, Record::Slice { x, start }))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let c = self.shape(x).c;
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(Error::shape(
                "split_channels",
                format!("sizes sum to {total}, input has {c} channels"),
            ));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice_channels(x, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let out = ops::gather_linear(self.value(x), &indices)?;
        Ok(self.push(out, Record::Gather { x, indices }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(ops::sum_all(self.value(x)));
        self.push(out, Record::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.shape(x).numel();
        let out = Tensor::scalar(ops::sum_all(self.value(x)) / T::from_f64(n as f64));
        self.push(out, Record::Mean { x })
    }

    /// Mean over elements of BCE(logit, target), evaluated in the
    /// numerically stable form t·softplus(-x) + (1-t)·softplus(x).
    pub fn bce_with_logits_mean(&mut self, x: Var, targets: Tensor<T>) -> Result<Var> {
        self.bce_with_logits_mean_weighted(x, targets, T::one())
    }

    /// Weighted form: the target term carries `pos_weight`, so
    /// l = pw·t·softplus(-x) + (1-t)·softplus(x), averaged over elements.
    pub fn bce_with_logits_mean_weighted(
        &mut self,
        x: Var,
        targets: Tensor<T>,
        pos_weight: T,
    ) -> Result<Var> {
        if targets.shape() != self.shape(x) {
            return Err(Error::shape(
                "bce_with_logits",
                format!(
                    "targets shape {} != logits shape {}",
                    targets.shape(),
                    self.shape(x)
                ),
            ));
        }
        let softplus = |v: T| {
            let pos = if v > T::zero() { v } else { T::zero() };
            pos + (T::one() + (-v.abs()).exp()).ln()
        };
        let mut acc = T::zero();
        for (&xv, &tv) in self.value(x).data().iter().zip(targets.data()) {
            acc += pos_weight * tv * softplus(-xv) + (T::one() - tv) * softplus(xv);
        }
        let n = T::from_f64(targets.shape().numel() as f64);
        let out = Tensor::scalar(acc / n);
        Ok(self.push(
            out,
            Record::BceWithLogitsMean {
                x,
                targets,
                pos_weight,
            },
        ))
    }

    /// FLOPs of every recorded operation, by replaying the tape. Uses the
    /// same counting conventions as the static analyzer (2 FLOPs per MAC,
    /// 1 per elementwise output element, 2 per batch-norm element, 1 per
    /// pooled input element, zero-cost data movement) but derives them from
    /// the executed operations, so it cross-checks the analyzer's walk.
    pub fn count_flops(&self) -> u64 {
        let mut total = 0u64;
        for node in &self.nodes {
            let out = node.value.shape();
            total += match &node.record {
                Record::Leaf { .. } => 0,
                Record::Conv2d { spec, b, .. } => {
                    let macs = (spec.kernel.0
                        * spec.kernel.1
                        * (spec.in_channels / spec.groups)) as u64
                        * out.numel() as u64;
                    2 * macs + if b.is_some() { out.numel() as u64 } else { 0 }
                }
                Record::Conv1dSame { k, .. } => {
                    2 * self.shape(*k).numel() as u64 * (out.n * out.c) as u64
                }
                Record::PoolSpatial { x, .. } | Record::PoolChannel { x, .. } => {
                    self.shape(*x).numel() as u64
                }
                Record::Relu { .. }
                | Record::Sigmoid { .. }
                | Record::HSwish { .. }
                | Record::Atan { .. }
                | Record::Add { .. }
                | Record::Sub { .. }
                | Record::Mul { .. }
                | Record::Div { .. }
                | Record::Minimum { .. }
                | Record::Maximum { .. }
                | Record::AddScalar { .. }
                | Record::MulScalar { .. } => out.numel() as u64,
                Record::BatchNorm { .. } => 2 * out.numel() as u64,
                Record::Upsample2x { .. }
                | Record::Concat { .. }
                | Record::Slice { .. }
                | Record::Gather { .. } => 0,
                Record::Sum { x } | Record::Mean { x } => self.shape(*x).numel() as u64,
                Record::BceWithLogitsMean { x, .. } => 4 * self.shape(*x).numel() as u64,
            };
        }
        total
    }

    /// Reverse pass from a scalar loss with seed gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_seeded(loss, Tensor::scalar(T::one()))
    }

    /// Reverse pass with an explicit scalar seed.
    pub fn backward_seeded(&self, loss: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.shape(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", self.shape(loss)),
            ));
        }
        if seed.shape().numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("seed must be scalar, got {}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.record {
                Record::Leaf { requires_grad } => {
                    if *requires_grad {
                        grads[i] = Some(g);
                    }
                }
                Record::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), spec, &g);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let (Some(bv), Some(db)) = (b, db) {
                        let shape = self.shape(*bv);
                        let t = reshape_vec(db, shape);
                        accumulate(&mut grads, *bv, t);
                    }
                }
                Record::Conv1dSame { x, k } => {
                    let (dx, dk) =
                        ops::conv1d_same_backward(self.value(*x), self.value(*k).data(), &g);
                    accumulate(&mut grads, *x, dx);
                    let t = reshape_vec(dk, self.shape(*k));
                    accumulate(&mut grads, *k, t);
                }
                Record::PoolSpatial { x, mode, argmax } => {
                    let dx = ops::pool_spatial_backward(self.shape(*x), *mode, argmax, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Record::PoolChannel { x, mode, argmax } => {
                    let dx = ops::pool_channel_backward(self.shape(*x), *mode, argmax, &g);
                    accumulate(&mut grads, *x, dx);
                }
                Record::Relu { x } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for ((d, &xv), &gv) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(self.value(*x).data())
                        .zip(g.data())
                    {
                        if xv > T::zero() {
                            *d = gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Record::Sigmoid { x } => {
                    let dx = elementwise_grad(self.value(*x), &g, |xv| {
                        let s = ops::sigmoid_val(xv);
                        s * (T::one() - s)
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Record::HSwish { x } => {
                    let dx = elementwise_grad(self.value(*x), &g, ops::hswish_derivative);
                    accumulate(&mut grads, *x, dx);
                }
                Record::Atan { x } => {
                    let dx = elementwise_grad(self.value(*x), &g, |xv| {
                        T::one() / (T::one() + xv * xv)
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Record::Add { a, b } => {
                    accumulate(&mut grads, *a, ops::reduce_to_shape(&g, self.shape(*a)));
                    accumulate(&mut grads, *b, ops::reduce_to_shape(&g, self.shape(*b)));
                }
                Record::Sub { a, b } => {
                    accumulate(&mut grads, *a, ops::reduce_to_shape(&g, self.shape(*a)));
                    let neg = g.map(|v| -v);
                    accumulate(&mut grads, *b, ops::reduce_to_shape(&neg, self.shape(*b)));
                }
                Record::Mul { a, b } => {
                    let da = ops::mul(&g, self.value(*b)).expect("recorded shapes broadcast");
                    let db = ops::mul(&g, self.value(*a)).expect("recorded shapes broadcast");
                    accumulate(&mut grads, *a, ops::reduce_to_shape(&da, self.shape(*a)));
                    accumulate(&mut grads, *b, ops::reduce_to_shape(&db, self.shape(*b)));
                }
                Record::Div { a, b } => {
                    let da = ops::div(&g, self.value(*b)).expect("recorded shapes broadcast");
                    // d/db (a/b) = -a / b^2
                    let bb = ops::mul(self.value(*b), self.value(*b)).expect("same shape");
                    let quot = ops::div(self.value(*a), &bb).expect("recorded shapes broadcast");
                    let db = ops::mul(&g, &quot.map(|v| -v)).expect("recorded shapes broadcast");
                    accumulate(&mut grads, *a, ops::reduce_to_shape(&da, self.shape(*a)));
                    accumulate(&mut grads, *b, ops::reduce_to_shape(&db, self.shape(*b)));
                }
                Record::Minimum { a, b } | Record::Maximum { a, b } => {
                    let is_min = matches!(node.record, Record::Minimum { .. });
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let out_shape = node.value.shape();
                    let mut da = Tensor::zeros(out_shape);
                    let mut db = Tensor::zeros(out_shape);
                    let sa = av.shape();
                    let sb = bv.shape();
                    for n in 0..out_shape.n {
                        for c in 0..out_shape.c {
                            for h in 0..out_shape.h {
                                for w in 0..out_shape.w {
                                    let x = av.at(n % sa.n, c % sa.c, h % sa.h, w % sa.w);
                                    let y = bv.at(n % sb.n, c % sb.c, h % sb.h, w % sb.w);
                                    let gv = g.at(n, c, h, w);
                                    let a_wins = if is_min { x <= y } else { x >= y };
                                    if a_wins {
                                        *da.at_mut(n, c, h, w) = gv;
                                    } else {
                                        *db.at_mut(n, c, h, w) = gv;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ops::reduce_to_shape(&da, sa));
                    accumulate(&mut grads, *b, ops::reduce_to_shape(&db, sb));
                }
                Record::AddScalar { x } => {
                    accumulate(&mut grads, *x, g);
                }
                Record::MulScalar { x, k } => {
                    let kk = *k;
                    accumulate(&mut grads, *x, g.map(|v| v * kk));
                }
                Record::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                } => {
                    let s = self.shape(*x);
                    let plane = s.plane();
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let mut dgamma = Tensor::zeros(self.shape(*gamma));
                    let mut dbeta = Tensor::zeros(self.shape(*beta));
                    let mut dx = Tensor::zeros(s);
                    let m = T::from_f64((s.n * plane) as f64);
                    for ch in 0..s.c {
                        let mean = saved.mean[ch];
                        let istd = saved.inv_std[ch];
                        let gamma_v = gv.data()[ch];
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for b in 0..s.n {
                            let base = s.index(b, ch, 0, 0);
                            for i in 0..plane {
                                let go = g.data()[base + i];
                                let xn = (xv.data()[base + i] - mean) * istd;
                                sum_g += go;
                                sum_gx += go * xn;
                            }
                        }
                        dbeta.data_mut()[ch] = sum_g;
                        dgamma.data_mut()[ch] = sum_gx;
                        if saved.batch_var.is_some() {
                            // Train mode: statistics depend on x.
                            let k1 = sum_g / m;
                            let k2 = sum_gx / m;
                            for b in 0..s.n {
                                let base = s.index(b, ch, 0, 0);
                                for i in 0..plane {
                                    let go = g.data()[base + i];
                                    let xn = (xv.data()[base + i] - mean) * istd;
                                    dx.data_mut()[base + i] =
                                        gamma_v * istd * (go - k1 - xn * k2);
                                }
                            }
                        } else {
                            let scale = gamma_v * istd;
                            for b in 0..s.n {
                                let base = s.index(b, ch, 0, 0);
                                for i in 0..plane {
                                    dx.data_mut()[base + i] = g.data()[base + i] * scale;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Record::Upsample2x { x } => {
                    let dx = ops::upsample_nearest_2x_backward(self.shape(*x), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Record::Concat { inputs } => {
                    let mut start = 0;
                    for &inp in inputs {
                        let c = self.shape(inp).c;
                        let slice = ops::slice_channels(&g, start, c).expect("recorded layout");
                        accumulate(&mut grads, inp, slice);
                        start += c;
                    }
                }
                Record::Slice { x, start } => {
                    let s = self.shape(*x);
                    let gs = g.shape();
                    let mut dx = Tensor::zeros(s);
                    let plane = s.plane();
                    for b in 0..s.n {
                        let dst = s.index(b, *start, 0, 0);
                        let src = gs.index(b, 0, 0, 0);
                        let len = gs.c * plane;
                        for i in 0..len {
                            dx.data_mut()[dst + i] += g.data()[src + i];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Record::Gather { x, indices } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for (k, &idx) in indices.iter().enumerate() {
                        dx.data_mut()[idx] += g.data()[k];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Record::Sum { x } => {
                    let gv = g.item();
                    accumulate(&mut grads, *x, Tensor::full(self.shape(*x), gv));
                }
                Record::Mean { x } => {
                    let s = self.shape(*x);
                    let gv = g.item() / T::from_f64(s.numel() as f64);
                    accumulate(&mut grads, *x, Tensor::full(s, gv));
                }
                Record::BceWithLogitsMean {
                    x,
                    targets,
                    pos_weight,
                } => {
                    let gv = g.item();
                    let s = self.shape(*x);
                    let n = T::from_f64(s.numel() as f64);
                    let pw = *pos_weight;
                    let mut dx = Tensor::zeros(s);
                    for ((d, &xv), &tv) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(self.value(*x).data())
                        .zip(targets.data())
                    {
                        let sg = ops::sigmoid_val(xv);
                        *d = gv * (pw * tv * (sg - T::one()) + (T::one() - tv) * sg) / n;
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// grad_input = grad_output ⊙ f'(input), elementwise.
fn elementwise_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    derivative: impl Fn(T) -> T,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input.shape());
    for ((d, &xv), &gv) in dx
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(grad_out.data())
    {
        *d = gv * derivative(xv);
    }
    dx
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn reshape_vec<T: Scalar>(data: Vec<T>, shape: Shape) -> Tensor<T> {
    Tensor::from_vec(shape, data).expect("gradient length matches parameter shape")
}

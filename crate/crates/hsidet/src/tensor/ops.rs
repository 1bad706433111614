//! Pure forward kernels and their reverse-mode counterparts.
//!
//! Every function here is a deterministic function of its inputs; the
//! autodiff layer in [`super::graph`] records which of these ran and replays
//! the matching `*_backward` during the backward pass. Reductions run in a
//! fixed serial order so results are bit-identical between runs.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Hyperparameters of a (grouped) 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl Conv2dSpec {
    /// Standard dense convolution, square kernel, "same" padding for odd k.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (stride, stride),
            padding: ((k - 1) / 2, (k - 1) / 2),
            groups: 1,
            has_bias: false,
        }
    }

    /// Depthwise convolution: one k×k filter per channel.
    pub fn depthwise(channels: usize, k: usize, stride: usize) -> Self {
        Conv2dSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: (k, k),
            stride: (stride, stride),
            padding: ((k - 1) / 2, (k - 1) / 2),
            groups: channels,
            has_bias: false,
        }
    }

    /// 1×1 pointwise convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.has_bias = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidSpec(format!(
                "conv2d kernel and stride must be >= 1, got kernel {:?} stride {:?}",
                self.kernel, self.stride
            )));
        }
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidSpec(format!(
                "conv2d channels must be divisible by groups: in {} out {} groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Shape of the weight tensor: (out, in/groups, kh, kw).
    pub fn weight_shape(&self) -> Shape {
        Shape {
            n: self.out_channels,
            c: self.in_channels / self.groups,
            h: self.kernel.0,
            w: self.kernel.1,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {} channels, spec expects {}",
                    input.c, self.in_channels
                ),
            ));
        }
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let hp = input.h + 2 * ph;
        let wp = input.w + 2 * pw;
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    kh, kw, hp, wp
                ),
            ));
        }
        Shape::new(
            input.n,
            self.out_channels,
            (hp - kh) / sh + 1,
            (wp - kw) / sw + 1,
        )
    }
}

/// Reduction mode for pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Per-channel batch-normalization parameters (inference form).
#[derive(Debug, Clone)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::from_f64(1e-5),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if v.len() != channels {
                return Err(Error::InvalidSpec(format!(
                    "batch norm {name} has length {}, expected {channels}",
                    v.len()
                )));
            }
        }
        if self.running_var.iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidSpec("batch norm running_var < 0".into()));
        }
        if self.eps <= T::zero() {
            return Err(Error::InvalidSpec("batch norm eps must be > 0".into()));
        }
        Ok(())
    }
}

fn require_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Direct sliding-window 2-D convolution.
///
/// `weight` has shape (out, in/groups, kh, kw); `bias`, when present, one
/// value per output channel. The inner loops accumulate whole output rows so
/// the stride-1 case vectorizes.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let ws = spec.weight_shape();
    if weight.shape() != ws {
        return Err(Error::shape(
            "conv2d",
            format!("weight shape {} does not match spec {}", weight.shape(), ws),
        ));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != out_channels {}", b.len(), spec.out_channels),
            ));
        }
    }
    require_finite("conv2d", input)?;
    require_finite("conv2d", weight)?;
    let in_shape = input.shape();
    let out_shape = spec.output_shape(in_shape)?;
    let mut out = Tensor::zeros(out_shape);

    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (oh, ow) = (out_shape.h, out_shape.w);

    for b in 0..in_shape.n {
        for g in 0..spec.groups {
            for ocl in 0..ocpg {
                let oc = g * ocpg + ocl;
                let out_base = out_shape.index(b, oc, 0, 0);
                if let Some(bias) = bias {
                    let bv = bias[oc];
                    for v in &mut out.data_mut()[out_base..out_base + oh * ow] {
                        *v += bv;
                    }
                }
                for icl in 0..icpg {
                    let ic = g * icpg + icl;
                    let in_base = in_shape.index(b, ic, 0, 0);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight.at(oc, icl, ky, kx);
                            if wv == T::zero() {
                                continue;
                            }
                            // Output-column range with the input column in bounds:
                            // 0 <= ox*sw + kx - pw < w
                            let ox_min = pw.saturating_sub(kx).div_ceil(sw).min(ow);
                            let ox_max = if in_shape.w + pw > kx {
                                (((in_shape.w + pw - kx - 1) / sw) + 1).min(ow)
                            } else {
                                0
                            };
                            if ox_min >= ox_max {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy * sh + ky;
                                if iy < ph || iy - ph >= in_shape.h {
                                    continue;
                                }
                                let iy = iy - ph;
                                let in_row = in_base + iy * in_shape.w;
                                let out_row = out_base + oy * ow;
                                let ix0 = ox_min * sw + kx - pw;
                                if sw == 1 {
                                    let len = ox_max - ox_min;
                                    let src = &input.data()[in_row + ix0..in_row + ix0 + len];
                                    let dst =
                                        &mut out.data_mut()[out_row + ox_min..out_row + ox_max];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += wv * *s;
                                    }
                                } else {
                                    for ox in ox_min..ox_max {
                                        let ix = ox * sw + kx - pw;
                                        out.data_mut()[out_row + ox] +=
                                            wv * input.data()[in_row + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &Conv2dSpec,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Vec<T>>) {
    let in_shape = input.shape();
    let out_shape = grad_out.shape();
    let mut dx = Tensor::zeros(in_shape);
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = if spec.has_bias {
        Some(vec![T::zero(); spec.out_channels])
    } else {
        None
    };

    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let icpg = spec.in_channels / spec.groups;
    let ocpg = spec.out_channels / spec.groups;
    let (oh, ow) = (out_shape.h, out_shape.w);

    for b in 0..in_shape.n {
        for g in 0..spec.groups {
            for ocl in 0..ocpg {
                let oc = g * ocpg + ocl;
                let gout_base = out_shape.index(b, oc, 0, 0);
                if let Some(db) = db.as_mut() {
                    let mut acc = T::zero();
                    for v in &grad_out.data()[gout_base..gout_base + oh * ow] {
                        acc += *v;
                    }
                    db[oc] += acc;
                }
                for icl in 0..icpg {
                    let ic = g * icpg + icl;
                    let in_base = in_shape.index(b, ic, 0, 0);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight.at(oc, icl, ky, kx);
                            let widx = weight.shape().index(oc, icl, ky, kx);
                            let mut wgrad = T::zero();
                            let ox_min = pw.saturating_sub(kx).div_ceil(sw).min(ow);
                            let ox_max = if in_shape.w + pw > kx {
                                (((in_shape.w + pw - kx - 1) / sw) + 1).min(ow)
                            } else {
                                0
                            };
                            if ox_min >= ox_max {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy * sh + ky;
                                if iy < ph || iy - ph >= in_shape.h {
                                    continue;
                                }
                                let iy = iy - ph;
                                let in_row = in_base + iy * in_shape.w;
                                let gout_row = gout_base + oy * ow;
                                for ox in ox_min..ox_max {
                                    let ix = ox * sw + kx - pw;
                                    let go = grad_out.data()[gout_row + ox];
                                    wgrad += go * input.data()[in_row + ix];
                                    dx.data_mut()[in_row + ix] += go * wv;
                                }
                            }
                            dw.data_mut()[widx] += wgrad;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Same-padded 1-D convolution along the channel axis of an (n, C, 1, 1)
/// descriptor. `kernel` must have odd length.
pub fn conv1d_same<T: Scalar>(input: &Tensor<T>, kernel: &[T]) -> Result<Tensor<T>> {
    let k = kernel.len();
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidSpec(format!(
            "conv1d_same kernel length must be odd, got {k}"
        )));
    }
    let s = input.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(
            "conv1d_same",
            format!("expected (n, c, 1, 1) descriptor, got {s}"),
        ));
    }
    require_finite("conv1d_same", input)?;
    let half = (k - 1) / 2;
    let c = s.c;
    let mut out = Tensor::zeros(s);
    for b in 0..s.n {
        let base = s.index(b, 0, 0, 0);
        for i in 0..c {
            let mut acc = T::zero();
            for (j, &kv) in kernel.iter().enumerate() {
                let pos = i + j;
                if pos >= half && pos - half < c {
                    acc += kv * input.data()[base + pos - half];
                }
            }
            out.data_mut()[base + i] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`conv1d_same`] w.r.t. input and kernel.
pub fn conv1d_same_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Vec<T>) {
    let s = input.shape();
    let k = kernel.len();
    let half = (k - 1) / 2;
    let c = s.c;
    let mut dx = Tensor::zeros(s);
    let mut dk = vec![T::zero(); k];
    for b in 0..s.n {
        let base = s.index(b, 0, 0, 0);
        for i in 0..c {
            let go = grad_out.data()[base + i];
            for (j, &kv) in kernel.iter().enumerate() {
                let pos = i + j;
                if pos >= half && pos - half < c {
                    dx.data_mut()[base + pos - half] += go * kv;
                    dk[j] += go * input.data()[base + pos - half];
                }
            }
        }
    }
    (dx, dk)
}

/// Reduce each h×w plane to a single value, producing (n, c, 1, 1).
/// For max pooling the argmax (lowest linear index on ties) is also returned.
pub fn pool_spatial<T: Scalar>(input: &Tensor<T>, mode: PoolMode) -> (Tensor<T>, Vec<usize>) {
    let s = input.shape();
    let out_shape = Shape {
        n: s.n,
        c: s.c,
        h: 1,
        w: 1,
    };
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::new();
    let plane = s.plane();
    let inv = T::from_f64(1.0 / plane as f64);
    for b in 0..s.n {
        for c in 0..s.c {
            let base = s.index(b, c, 0, 0);
            let slice = &input.data()[base..base + plane];
            match mode {
                PoolMode::Avg => {
                    let mut acc = T::zero();
                    for v in slice {
                        acc += *v;
                    }
                    *out.at_mut(b, c, 0, 0) = acc * inv;
                }
                PoolMode::Max => {
                    let mut best = slice[0];
                    let mut best_i = 0;
                    for (i, v) in slice.iter().enumerate().skip(1) {
                        if *v > best {
                            best = *v;
                            best_i = i;
                        }
                    }
                    *out.at_mut(b, c, 0, 0) = best;
                    argmax.push(base + best_i);
                }
            }
        }
    }
    (out, argmax)
}

pub fn pool_spatial_backward<T: Scalar>(
    in_shape: Shape,
    mode: PoolMode,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let plane = in_shape.plane();
    let inv = T::from_f64(1.0 / plane as f64);
    let mut k = 0;
    for b in 0..in_shape.n {
        for c in 0..in_shape.c {
            let g = grad_out.at(b, c, 0, 0);
            match mode {
                PoolMode::Avg => {
                    let base = in_shape.index(b, c, 0, 0);
                    let gi = g * inv;
                    for v in &mut dx.data_mut()[base..base + plane] {
                        *v += gi;
                    }
                }
                PoolMode::Max => {
                    dx.data_mut()[argmax[k]] += g;
                    k += 1;
                }
            }
        }
    }
    dx
}

/// Reduce over the channel axis, producing (n, 1, h, w).
pub fn pool_channel<T: Scalar>(input: &Tensor<T>, mode: PoolMode) -> (Tensor<T>, Vec<usize>) {
    let s = input.shape();
    let out_shape = Shape {
        n: s.n,
        c: 1,
        h: s.h,
        w: s.w,
    };
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::new();
    let plane = s.plane();
    let inv = T::from_f64(1.0 / s.c as f64);
    for b in 0..s.n {
        for p in 0..plane {
            let first = s.index(b, 0, 0, 0) + p;
            match mode {
                PoolMode::Avg => {
                    let mut acc = T::zero();
                    for c in 0..s.c {
                        acc += input.data()[first + c * plane];
                    }
                    out.data_mut()[out_shape.index(b, 0, 0, 0) + p] = acc * inv;
                }
                PoolMode::Max => {
                    let mut best = input.data()[first];
                    let mut best_c = 0;
                    for c in 1..s.c {
                        let v = input.data()[first + c * plane];
                        if v > best {
                            best = v;
                            best_c = c;
                        }
                    }
                    out.data_mut()[out_shape.index(b, 0, 0, 0) + p] = best;
                    argmax.push(first + best_c * plane);
                }
            }
        }
    }
    (out, argmax)
}

pub fn pool_channel_backward<T: Scalar>(
    in_shape: Shape,
    mode: PoolMode,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    let plane = in_shape.plane();
    let inv = T::from_f64(1.0 / in_shape.c as f64);
    let mut k = 0;
    for b in 0..in_shape.n {
        for p in 0..plane {
            let g = grad_out.data()[grad_out.shape().index(b, 0, 0, 0) + p];
            match mode {
                PoolMode::Avg => {
                    let first = in_shape.index(b, 0, 0, 0) + p;
                    let gi = g * inv;
                    for c in 0..in_shape.c {
                        dx.data_mut()[first + c * plane] += gi;
                    }
                }
                PoolMode::Max => {
                    dx.data_mut()[argmax[k]] += g;
                    k += 1;
                }
            }
        }
    }
    dx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_val)
}

#[inline]
pub fn sigmoid_val<T: Scalar>(v: T) -> T {
    // Evaluate via exp of a non-positive argument for stability.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// h-swish: x * relu6(x + 3) / 6.
pub fn hswish<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let three = T::from_f64(3.0);
    let six = T::from_f64(6.0);
    x.map(|v| {
        let r = (v + three).max(T::zero()).min(six);
        v * r / six
    })
}

pub fn hswish_derivative<T: Scalar>(v: T) -> T {
    let three = T::from_f64(3.0);
    if v <= -three {
        T::zero()
    } else if v >= three {
        T::one()
    } else {
        (v + v + three) / T::from_f64(6.0)
    }
}

/// Broadcast-compatible output shape: per axis, extents must match or one
/// side must be 1.
pub fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let dim = |name: &str, x: usize, y: usize| -> Result<usize> {
        if x == y || y == 1 {
            Ok(x)
        } else if x == 1 {
            Ok(y)
        } else {
            Err(Error::shape(
                op,
                format!("{name} extents {x} and {y} are incompatible"),
            ))
        }
    };
    Ok(Shape {
        n: dim("batch", a.n, b.n)?,
        c: dim("channel", a.c, b.c)?,
        h: dim("height", a.h, b.h)?,
        w: dim("width", a.w, b.w)?,
    })
}

fn broadcast_zip<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa == sb {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_vec(sa, data);
    }
    let out_shape = broadcast_shape(op, sa, sb)?;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..out_shape.n {
        for c in 0..out_shape.c {
            for h in 0..out_shape.h {
                for w in 0..out_shape.w {
                    let av = a.at(n % sa.n.max(1), c % sa.c, h % sa.h, w % sa.w);
                    let bv = b.at(n % sb.n, c % sb.c, h % sb.h, w % sb.w);
                    *out.at_mut(n, c, h, w) = f(av, bv);
                }
            }
        }
    }
    Ok(out)
}

/// Sum `grad` (shaped like the broadcast output) down to `target` shape by
/// accumulating over every axis the operand was broadcast along.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target: Shape) -> Tensor<T> {
    let gs = grad.shape();
    if gs == target {
        return grad.clone();
    }
    let mut out = Tensor::zeros(target);
    for n in 0..gs.n {
        for c in 0..gs.c {
            for h in 0..gs.h {
                for w in 0..gs.w {
                    let idx = target.index(n % target.n, c % target.c, h % target.h, w % target.w);
                    out.data_mut()[idx] += grad.at(n, c, h, w);
                }
            }
        }
    }
    out
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("mul", a, b, |x, y| x * y)
}

pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("div", a, b, |x, y| x / y)
}

pub fn minimum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("minimum", a, b, |x, y| if x <= y { x } else { y })
}

pub fn maximum<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_zip("maximum", a, b, |x, y| if x >= y { x } else { y })
}

/// Inference batch norm: per-channel affine with running statistics.
pub fn bn_eval<T: Scalar>(input: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    p.validate(s.c)?;
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    for b in 0..s.n {
        for c in 0..s.c {
            let inv_std = T::one() / (p.running_var[c] + p.eps).sqrt();
            let scale = p.gamma[c] * inv_std;
            let shift = p.beta[c] - p.running_mean[c] * scale;
            let base = s.index(b, c, 0, 0);
            for i in 0..plane {
                out.data_mut()[base + i] = input.data()[base + i] * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2× spatial upsampling.
pub fn upsample_nearest_2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let out_shape = Shape {
        n: s.n,
        c: s.c,
        h: s.h * 2,
        w: s.w * 2,
    };
    let mut out = Tensor::zeros(out_shape);
    for b in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let v = input.at(b, c, y, x);
                    *out.at_mut(b, c, 2 * y, 2 * x) = v;
                    *out.at_mut(b, c, 2 * y, 2 * x + 1) = v;
                    *out.at_mut(b, c, 2 * y + 1, 2 * x) = v;
                    *out.at_mut(b, c, 2 * y + 1, 2 * x + 1) = v;
                }
            }
        }
    }
    out
}

pub fn upsample_nearest_2x_backward<T: Scalar>(in_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    for b in 0..in_shape.n {
        for c in 0..in_shape.c {
            for y in 0..in_shape.h {
                for x in 0..in_shape.w {
                    let g = grad_out.at(b, c, 2 * y, 2 * x)
                        + grad_out.at(b, c, 2 * y, 2 * x + 1)
                        + grad_out.at(b, c, 2 * y + 1, 2 * x)
                        + grad_out.at(b, c, 2 * y + 1, 2 * x + 1);
                    *dx.at_mut(b, c, y, x) = g;
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel axis. All inputs must agree on n, h, w.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "empty input list"))?;
    let s0 = first.shape();
    let mut total_c = 0;
    for t in inputs {
        let s = t.shape();
        if s.n != s0.n || s.h != s0.h || s.w != s0.w {
            return Err(Error::shape(
                "concat_channels",
                format!("input {} incompatible with {}", s, s0),
            ));
        }
        total_c += s.c;
    }
    let out_shape = Shape::new(s0.n, total_c, s0.h, s0.w)?;
    let mut out = Tensor::zeros(out_shape);
    let plane = s0.plane();
    for b in 0..s0.n {
        let mut c_off = 0;
        for t in inputs {
            let s = t.shape();
            let src = s.index(b, 0, 0, 0);
            let dst = out_shape.index(b, c_off, 0, 0);
            let len = s.c * plane;
            out.data_mut()[dst..dst + len].copy_from_slice(&t.data()[src..src + len]);
            c_off += s.c;
        }
    }
    Ok(out)
}

/// Contiguous channel slice [start, start+len).
pub fn slice_channels<T: Scalar>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if start + len > s.c || len == 0 {
        return Err(Error::shape(
            "slice_channels",
            format!("slice [{start}, {}) out of range for {} channels", start + len, s.c),
        ));
    }
    let out_shape = Shape::new(s.n, len, s.h, s.w)?;
    let mut out = Tensor::zeros(out_shape);
    let plane = s.plane();
    for b in 0..s.n {
        let src = s.index(b, start, 0, 0);
        let dst = out_shape.index(b, 0, 0, 0);
        out.data_mut()[dst..dst + len * plane].copy_from_slice(&input.data()[src..src + len * plane]);
    }
    Ok(out)
}

/// Split into consecutive channel blocks. Sizes must sum to the channel count.
pub fn split_channels<T: Scalar>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let c = input.shape().c;
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
        out.push(slice_channels(input, start, len)?);
        start += len;
    }
    Ok(out)
}

/// Pick elements at the given linear indices, producing a (1,1,1,len) row.
pub fn gather_linear<T: Scalar>(input: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let n = input.shape().numel();
    let mut data = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= n {
            return Err(Error::shape(
                "gather",
                format!("index {i} out of range for {n} elements"),
            ));
        }
        data.push(input.data()[i]);
    }
    Tensor::row_vector(data)
}

pub fn sum_all<T: Scalar>(input: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for v in input.data() {
        acc += *v;
    }
    acc
}

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{Result, Scalar, Tensor, TensorError};
use crate::archdsl::Padding;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter in its owner's parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    /// Weight of the old value in the running-statistics moving average.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { epsilon: 1e-5, momentum: 0.9 }
    }
}

/// Per-channel running mean and (unbiased) variance of a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, k: Var, geom: ConvGeom, batch: usize },
    /// Max pooling and SPP: each output copies one input element.
    Gather { x: Var, arg: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, channels: usize, spatial: usize, train: bool },
    Linear { x: Var, w: Var, rows: usize, inner: usize, outer: usize },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<T> },
    Sigmoid { x: Var },
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<usize> },
    Dot { x: Var, weights: Vec<T> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward operations so gradients can be propagated backwards.
///
/// Parameter values are borrowed for the tape's lifetime; everything
/// computed on the tape is owned by it.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value gradients are not propagated into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(value), op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `kernel: [Co,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("conv2d")?;
        let (co, kc, kh, kw) = self.value(kernel).dims4("conv2d")?;
        if kc != c {
            return Err(TensorError::Shape { op: "conv2d", detail: format!("input has {c} channels, kernel expects {kc}") });
        }
        if stride == 0 {
            return Err(TensorError::Invalid { op: "conv2d", detail: "stride must be positive".into() });
        }
        let too_small =
            || TensorError::Shape { op: "conv2d", detail: format!("{kh}x{kw} kernel does not fit {h}x{w} input") };
        let oh = padding.output_len(h, kh, stride).ok_or_else(too_small)?;
        let ow = padding.output_len(w, kw, stride).ok_or_else(too_small)?;
        let geom = ConvGeom {
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad_top: padding.amounts(h, kh, stride).0,
            pad_left: padding.amounts(w, kw, stride).0,
            oh,
            ow,
        };
        let out = kernels::conv_forward(&geom, n, self.value(x).data(), self.value(kernel).data());
        let value = Tensor { shape: vec![n, co, oh, ow], data: out };
        self.push("conv2d", value, Op::Conv { x, k: kernel, geom, batch: n }, &[x, kernel])
    }

    /// Max pooling over fully covered windows.
    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool")?;
        if window == 0 || stride == 0 {
            return Err(TensorError::Invalid { op: "max_pool", detail: "window and stride must be positive".into() });
        }
        if window > h || window > w {
            return Err(TensorError::Invalid {
                op: "max_pool",
                detail: format!("window {window} larger than {h}x{w} input"),
            });
        }
        let (out, arg) = kernels::max_pool_forward(self.value(x).data(), n * c, h, w, window, stride);
        let shape = vec![n, c, (h - window) / stride + 1, (w - window) / stride + 1];
        self.push("max_pool", Tensor { shape, data: out }, Op::Gather { x, arg }, &[x])
    }

    /// Spatial pyramid pooling to `[N, C·Σ level²]`.
    pub fn spp(&mut self, x: Var, levels: &[usize]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("spp")?;
        if levels.is_empty() || levels.contains(&0) {
            return Err(TensorError::Invalid { op: "spp", detail: format!("bad level list {levels:?}") });
        }
        let (out, arg) = kernels::spp_forward(self.value(x).data(), n, c, h, w, levels);
        let features = out.len() / n;
        self.push("spp", Tensor { shape: vec![n, features], data: out }, Op::Gather { x, arg }, &[x])
    }

    /// Batch normalization over `[N,C]` or `[N,C,H,W]` with per-channel
    /// `gamma`/`beta`. Train mode normalizes by batch statistics and folds
    /// them into `stats`; infer mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut RunningStats<T>,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, spatial) = match *shape.as_slice() {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(TensorError::Shape { op: "batch_norm", detail: format!("unsupported shape {shape:?}") }),
        };
        if self.value(gamma).len() != c || self.value(beta).len() != c || stats.mean.len() != c {
            return Err(TensorError::Shape { op: "batch_norm", detail: format!("{c} channels vs affine/stats sizes") });
        }
        let m = n * spatial;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                detail: "train mode needs at least two values per channel".into(),
            });
        }
        let eps = T::of(config.epsilon);
        let data = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let mf = T::from_usize(m).unwrap();
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    mean[ch] += data[base..base + spatial].iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= mf);
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * spatial;
                    var[ch] += data[base..base + spatial].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v /= mf);
            let mom = T::of(config.momentum);
            let unbias = mf / (mf - T::one());
            for ch in 0..c {
                stats.mean[ch] = mom * stats.mean[ch] + (T::one() - mom) * mean[ch];
                stats.var[ch] = mom * stats.var[ch] + (T::one() - mom) * var[ch] * unbias;
            }
        } else {
            mean.clone_from(&stats.mean);
            var.clone_from(&stats.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * spatial;
                for i in base..base + spatial {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, channels: c, spatial, train };
        self.push("batch_norm", Tensor { shape, data: out }, op, &[x, gamma, beta])
    }

    /// `x: [N, ...]` flattened to `[N, I]` times `wᵀ` for `w: [O, I]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        let inner = xv.len() / rows;
        let (outer, w_inner) = match *self.value(w).shape() {
            [o, i] => (o, i),
            ref s => return Err(TensorError::Shape { op: "linear", detail: format!("weight must be [O,I], got {s:?}") }),
        };
        if w_inner != inner {
            return Err(TensorError::Shape { op: "linear", detail: format!("input has {inner} features, weight expects {w_inner}") });
        }
        let mut out = vec![T::zero(); rows * outer];
        T::gemm(
            rows,
            inner,
            outer,
            self.value(x).data(),
            (inner as isize, 1),
            self.value(w).data(),
            (1, inner as isize),
            T::zero(),
            &mut out,
            (outer as isize, 1),
        );
        let value = Tensor { shape: vec![rows, outer], data: out };
        self.push("linear", value, Op::Linear { x, w, rows, inner, outer }, &[x, w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid { x }, &[x])
    }

    /// Inverted dropout: in train mode each unit is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid { op: "dropout", detail: format!("rate {rate} outside [0, 1)") });
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor { shape: xv.shape().to_vec(), data };
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed with the
    /// row maximum subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = match *lv.shape() {
            [r, c] => (r, c),
            [c] => (1, c),
            ref s => return Err(TensorError::Shape { op: "softmax_cross_entropy", detail: format!("{s:?}") }),
        };
        if targets.len() != rows {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                detail: format!("target {t} out of range for {classes} classes"),
            });
        }
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv.data()[r * classes..(r + 1) * classes];
            let (loss, p) = softmax_row(row, t);
            probs[r * classes..(r + 1) * classes].copy_from_slice(&p);
            total += loss;
        }
        let loss = total / T::from_usize(rows).unwrap();
        let op = Op::SoftmaxCe { logits, probs, targets: targets.to_vec() };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// `Σ x ⊙ weights`, a scalar probe used to reduce tensor outputs.
    pub fn dot(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(TensorError::Shape { op: "dot", detail: "length mismatch".into() });
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let op = Op::Dot { x, weights: weights.data().to_vec() };
        self.push("dot", Tensor::scalar(s), op, &[x])
    }

    /// Propagates gradients from the scalar `loss` to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Shape { op: "backward", detail: "loss must be a scalar".into() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::Conv { x, k, geom, batch } => {
                    let need_dx = self.needs(*x);
                    let (dx, dk) = kernels::conv_backward(
                        geom,
                        *batch,
                        self.value(*x).data(),
                        self.value(*k).data(),
                        g.data(),
                        need_dx,
                    );
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    self.accumulate(&mut grads, *k, dk);
                }
                Op::Gather { x, arg } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&src, &gv) in arg.iter().zip(g.data()) {
                        dx[src] += gv;
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, channels, spatial, train } => {
                    let (c, s) = (*channels, *spatial);
                    let n = xhat.len() / (c * s);
                    let gd = g.data();
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            for i in base..base + s {
                                dgamma[ch] += gd[i] * xhat[i];
                                dbeta[ch] += gd[i];
                            }
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); xhat.len()];
                        if *train {
                            let m = T::from_usize(n * s).unwrap();
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * s;
                                    // with dxhat = dy·γ: Σdxhat = γ·dβ, Σ dxhat·xhat = γ·dγ
                                    let sum_d = gam[ch] * dbeta[ch];
                                    let sum_dx = gam[ch] * dgamma[ch];
                                    for i in base..base + s {
                                        let dxhat = gd[i] * gam[ch];
                                        dx[i] = inv_std[ch] / m * (m * dxhat - sum_d - xhat[i] * sum_dx);
                                    }
                                }
                            }
                        } else {
                            for b in 0..n {
                                for ch in 0..c {
                                    let base = (b * c + ch) * s;
                                    for i in base..base + s {
                                        dx[i] = gd[i] * gam[ch] * inv_std[ch];
                                    }
                                }
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                    self.accumulate(&mut grads, *gamma, dgamma);
                    self.accumulate(&mut grads, *beta, dbeta);
                }
                Op::Linear { x, w, rows, inner, outer } => {
                    let (r, i_, o) = (*rows, *inner, *outer);
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); r * i_];
                        T::gemm(r, o, i_, g.data(), (o as isize, 1), self.value(*w).data(), (i_ as isize, 1), T::zero(), &mut dx, (i_ as isize, 1));
                        self.accumulate(&mut grads, *x, dx);
                    }
                    let mut dw = vec![T::zero(); o * i_];
                    T::gemm(o, r, i_, g.data(), (1, o as isize), self.value(*x).data(), (i_ as isize, 1), T::zero(), &mut dw, (i_ as isize, 1));
                    self.accumulate(&mut grads, *w, dw);
                }
                Op::Relu { x } => {
                    let dx = self.value(*x).data().iter().zip(g.data()).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let dx = node.value.data().iter().zip(g.data()).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxCe { logits, probs, targets } => {
                    let classes = probs.len() / targets.len();
                    let scale = g.item() / T::from_usize(targets.len()).unwrap();
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * classes + t] -= scale;
                    }
                    self.accumulate(&mut grads, *logits, dl);
                }
                Op::Dot { x, weights } => {
                    let gv = g.item();
                    let dx = weights.iter().map(|&w| w * gv).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| if let Op::Param(id) = n.op { Some((id, i)) } else { None })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        let shape = self.value(v).shape();
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor { shape: shape.to_vec(), data }),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Cross-entropy of one logit row against `target` and the softmax
/// probabilities, with the row maximum subtracted first.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], target: usize) -> (T, Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() + max - row[target];
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

/// Gradients of every value recorded on a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Summed gradient of a parameter over all its uses.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut out: Option<Tensor<T>> = None;
        for &(pid, node) in &self.params {
            if pid != id {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut out {
                    Some(acc) => acc.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }
}

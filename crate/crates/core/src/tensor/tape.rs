//! Reverse-mode tape over [`Tensor4`] values.
//!
//! Every op evaluates eagerly, appends a node holding its output and
//! whatever the backward rule needs, and returns a [`Var`] handle. Nodes are
//! appended in execution order, so a reverse sweep over the node list is a
//! valid reverse topological order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::{Mode, ParamId, ParamStore, Shape4, Tensor4, TensorError};
use crate::Scalar;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct BnConfig {
    /// Weight of the batch statistic in `new = (1 - m) * old + m * batch`.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor4<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<T> },
    Resize(Var),
    GlobalAvgPool(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Add(Var, Var),
    ScaleChannels { x: Var, s: Var },
    PixelNll { logits: Var, labels: Vec<u8>, probs: Tensor4<T>, ignore: u8 },
    MaskedMean { x: Var, mask: Vec<bool>, count: usize },
    Dot(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every tape node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor4<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor4<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Input whose gradient is wanted, e.g. for gradient checks.
    pub fn leaf(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Reads a parameter slot. Each call is a separate use site; their
    /// gradients add up in the slot.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize, dilation: usize) -> Result<Var, TensorError> {
        let geom = ConvGeom::new(stride, padding, dilation);
        let y = kernels::conv2d(self.value(x), self.value(w), geom)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(y, Op::Conv2d { x, w, geom }, rg))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeom::transposed(stride, padding, output_padding);
        let y = kernels::conv_transpose2d(self.value(x), self.value(w), geom)?;
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(y, Op::ConvTranspose2d { x, w, geom }, rg))
    }

    /// Batch normalization. `gamma` and `beta` hold one value per channel in
    /// any shape. Train mode normalizes with batch statistics and folds them
    /// into `stats`; eval mode reads `stats` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<Var, TensorError> {
        if !(cfg.eps > 0.0) {
            return Err(TensorError::Config(format!("batch_norm eps must be > 0, got {}", cfg.eps)));
        }
        if !(0.0..=1.0).contains(&cfg.momentum) {
            return Err(TensorError::Config(format!(
                "batch_norm momentum must lie in [0, 1], got {}",
                cfg.momentum
            )));
        }
        let c = self.shape(x).c;
        for (what, len) in [
            ("gamma", self.value(gamma).len()),
            ("beta", self.value(beta).len()),
            ("running mean", stats.mean.len()),
            ("running var", stats.var.len()),
        ] {
            if len != c {
                return Err(TensorError::Shape(format!(
                    "batch_norm: {what} has {len} entries for {c} channels"
                )));
            }
        }
        let eps = T::lit(cfg.eps);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let batch_stats = mode == Mode::Train;
        let (y, xhat, inv_std) = if batch_stats {
            let (mean, var) = kernels::channel_moments(self.value(x));
            let m = T::lit(cfg.momentum);
            for ch in 0..c {
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mean[ch];
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * var[ch];
            }
            kernels::batch_norm_apply(self.value(x), &g, &b, &mean, &var, eps)
        } else {
            kernels::batch_norm_apply(self.value(x), &g, &b, &stats.mean, &stats.var, eps)
        };
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` so eval mode
    /// is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut y = self.value(x).clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Dropout { x, mask }, rg))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        if factor == 0 {
            return Err(TensorError::Config("upsample factor must be >= 1".into()));
        }
        let s = self.shape(x);
        self.resize(x, s.h * factor, s.w * factor)
    }

    /// Bilinear resize to an explicit extent.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        if (h, w) == (self.shape(x).h, self.shape(x).w) {
            return Ok(x);
        }
        let y = kernels::resize_bilinear(self.value(x), h, w)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::Resize(x), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = kernels::global_avg_pool(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(y, Op::GlobalAvgPool(x), rg)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (y, argmax) = kernels::max_pool2d(self.value(x), kernel, stride, padding)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Multiplies every channel plane of `x` by the matching entry of
    /// `s`, shaped `(n, c, 1, 1)`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        let ss = self.shape(s);
        if ss != Shape4::new(xs.n, xs.c, 1, 1) {
            return Err(TensorError::Shape(format!("channel scale {ss} does not fit {xs}")));
        }
        let sv = self.value(s).clone();
        let y = Tensor4::from_fn(xs, |n, c, h, w| self.value(x).at(n, c, h, w) * sv.at(n, c, 0, 0));
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(y, Op::ScaleChannels { x, s }, rg))
    }

    /// Negative log-softmax of the labelled class at every pixel, shaped
    /// `(n, 1, h, w)`; ignored pixels carry zero.
    pub fn pixel_nll(&mut self, logits: Var, labels: &[u8], ignore_index: u8) -> Result<Var, TensorError> {
        let s = self.shape(logits);
        if labels.len() != s.n * s.plane() {
            return Err(TensorError::Shape(format!(
                "label map has {} entries for logits {s}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && (l as usize) >= s.c) {
            return Err(TensorError::Input(format!(
                "label {bad} outside [0, {}) and not the ignore index {ignore_index}",
                s.c
            )));
        }
        let probs = kernels::softmax_channels(self.value(logits));
        let loss = Tensor4::from_fn(Shape4::new(s.n, 1, s.h, s.w), |n, _, y, x| {
            let l = labels[(n * s.h + y) * s.w + x];
            if l == ignore_index {
                return T::zero();
            }
            // log-sum-exp with max subtraction
            let z = self.value(logits);
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(z.at(n, c, y, x));
            }
            let mut acc = T::zero();
            for c in 0..s.c {
                acc += (z.at(n, c, y, x) - m).exp();
            }
            m + acc.ln() - z.at(n, l as usize, y, x)
        });
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            loss,
            Op::PixelNll {
                logits,
                labels: labels.to_vec(),
                probs,
                ignore: ignore_index,
            },
            rg,
        ))
    }

    /// Mean of the entries selected by `mask`, as a single-element tensor.
    pub fn masked_mean(&mut self, x: Var, mask: Vec<bool>) -> Result<Var, TensorError> {
        if mask.len() != self.value(x).len() {
            return Err(TensorError::Shape(format!(
                "mask of {} entries for tensor {}",
                mask.len(),
                self.shape(x)
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Input("mean over an empty pixel set".into()));
        }
        let total: T = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .sum();
        let y = Tensor4::scalar(total / T::from_usize(count).unwrap());
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::MaskedMean { x, mask, count }, rg))
    }

    /// Mean pixel cross-entropy over non-ignored pixels. Returns the scalar
    /// loss and the per-pixel loss map.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        ignore_index: u8,
    ) -> Result<(Var, Var), TensorError> {
        let map = self.pixel_nll(logits, labels, ignore_index)?;
        let mask = labels.iter().map(|&l| l != ignore_index).collect();
        let loss = self.masked_mean(map, mask)?;
        Ok((loss, map))
    }

    /// Flat inner product as a single-element tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).dot(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor4::scalar(v), Op::Dot(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor4::scalar(v), Op::Sum(x), rg)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(TensorError::Usage(format!("backward needs a scalar loss, got shape {ls}")));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter-site gradient into
    /// its slot in `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>, TensorError> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate(*id, g)?;
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor4<T>, grads: &mut [Option<Tensor4<T>>]) {
        let mut send = |v: Var, d: Tensor4<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d).expect("gradient shape matches value"),
                slot @ None => *slot = Some(d),
            }
        };
        match &self.nodes[i].op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *geom);
                send(*x, dx);
                send(*w, dw);
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let (dx, dw) = kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), g, *geom);
                send(*x, dx);
                send(*w, dw);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gv = self.value(*gamma).data();
                let (dx, dg, db) = kernels::batch_norm_backward(g, xhat, gv, inv_std, *batch_stats);
                let gs = self.shape(*gamma);
                let bs = self.shape(*beta);
                send(*x, dx);
                send(*gamma, Tensor4::from_vec(gs, dg).unwrap());
                send(*beta, Tensor4::from_vec(bs, db).unwrap());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                send(*x, g.zip_map(xv, |d, v| if v > T::zero() { d } else { T::zero() }).unwrap());
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                send(*x, g.zip_map(y, |d, s| d * s * (T::one() - s)).unwrap());
            }
            Op::Dropout { x, mask } => {
                let mut d = g.clone();
                for (v, &m) in d.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                send(*x, d);
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                send(*x, kernels::resize_bilinear_backward(g, s.h, s.w));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let denom = T::from_usize(s.plane()).unwrap();
                send(*x, Tensor4::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) / denom));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = Tensor4::zeros(self.shape(*x));
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d.data_mut()[src] += gv;
                }
                send(*x, d);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::ScaleChannels { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let xs = xv.shape();
                send(*x, Tensor4::from_fn(xs, |n, c, h, w| g.at(n, c, h, w) * sv.at(n, c, 0, 0)));
                let ds = Tensor4::from_fn(sv.shape(), |n, c, _, _| {
                    let o = xs.offset(n, c, 0, 0);
                    (o..o + xs.plane()).map(|k| g.data()[k] * xv.data()[k]).sum()
                });
                send(*s, ds);
            }
            Op::PixelNll {
                logits,
                labels,
                probs,
                ignore,
            } => {
                let s = probs.shape();
                let d = Tensor4::from_fn(s, |n, c, y, x| {
                    let l = labels[(n * s.h + y) * s.w + x];
                    if l == *ignore {
                        return T::zero();
                    }
                    let onehot = if l as usize == c { T::one() } else { T::zero() };
                    (probs.at(n, c, y, x) - onehot) * g.at(n, 0, y, x)
                });
                send(*logits, d);
            }
            Op::MaskedMean { x, mask, count } => {
                let share = g.item() / T::from_usize(*count).unwrap();
                let d = Tensor4::from_vec(
                    self.shape(*x),
                    mask.iter().map(|&m| if m { share } else { T::zero() }).collect(),
                )
                .unwrap();
                send(*x, d);
            }
            Op::Dot(a, b) => {
                let k = g.item();
                send(*a, self.value(*b).scale(k));
                send(*b, self.value(*a).scale(k));
            }
            Op::Sum(x) => {
                send(*x, Tensor4::full(self.shape(*x), g.item()));
            }
        }
    }
}

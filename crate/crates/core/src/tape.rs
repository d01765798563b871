//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops are
//! recorded only when at least one input requires a gradient; `backward`
//! replays them in reverse and leaves gradients on the nodes, then clears the
//! record.

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvGeometry, Conv2dDims};
use crate::ops::{activation, dense, norm, pool};
use crate::tensor::{dims4, Scalar, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive op kinds, used for fault injection and gradient-check reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    Conv1dChannels,
    MaxPool2d,
    AdaptiveMaxPool2d,
    GlobalAvgPool,
    GlobalMaxPool,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Sigmoid,
    Softmax,
    Dense,
    BroadcastMul,
    Reshape,
    Mul,
    Add,
    Scale,
    Sum,
    Mix,
    CrossEntropyLogits,
    CrossEntropyProbs,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Conv2d,
        OpKind::Conv1dChannels,
        OpKind::MaxPool2d,
        OpKind::AdaptiveMaxPool2d,
        OpKind::GlobalAvgPool,
        OpKind::GlobalMaxPool,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::Dense,
        OpKind::BroadcastMul,
        OpKind::Reshape,
        OpKind::Mul,
        OpKind::Add,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mix,
        OpKind::CrossEntropyLogits,
        OpKind::CrossEntropyProbs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Conv1dChannels => "conv1d_cross_channel",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AdaptiveMaxPool2d => "adaptive_max_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::GlobalMaxPool => "global_max_pool",
            OpKind::BatchNormTrain => "batch_norm_train",
            OpKind::BatchNormEval => "batch_norm_eval",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Dense => "dense",
            OpKind::BroadcastMul => "broadcast_mul",
            OpKind::Reshape => "reshape",
            OpKind::Mul => "mul",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Mix => "mix",
            OpKind::CrossEntropyLogits => "cross_entropy_logits",
            OpKind::CrossEntropyProbs => "cross_entropy_probs",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Batch statistics from a train-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (`M - 1`) variance.
    pub var: Vec<T>,
}

enum Saved<T> {
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: Conv2dDims,
        cols: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        channels: usize,
    },
    ArgMax {
        kind: OpKind,
        x: Var,
        indices: Vec<usize>,
    },
    AvgPool {
        x: Var,
        hw: usize,
    },
    BatchNorm {
        kind: OpKind,
        x: Var,
        gamma: Var,
        beta: Var,
        dims: (usize, usize, usize),
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        k: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
        dims: (usize, usize, usize),
    },
    BroadcastMul {
        f: Var,
        m: Var,
        channel_form: bool,
    },
    Reshape(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mix {
        alpha: Var,
        a: Var,
        b: Var,
    },
    CrossEntropyLogits {
        x: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    CrossEntropyProbs {
        x: Var,
        labels: Vec<usize>,
    },
}

impl<T> Saved<T> {
    fn kind(&self) -> OpKind {
        match self {
            Saved::Conv2d { .. } => OpKind::Conv2d,
            Saved::Conv1d { .. } => OpKind::Conv1dChannels,
            Saved::ArgMax { kind, .. } | Saved::BatchNorm { kind, .. } => *kind,
            Saved::AvgPool { .. } => OpKind::GlobalAvgPool,
            Saved::Relu(_) => OpKind::Relu,
            Saved::Sigmoid(_) => OpKind::Sigmoid,
            Saved::Softmax { .. } => OpKind::Softmax,
            Saved::Dense { .. } => OpKind::Dense,
            Saved::BroadcastMul { .. } => OpKind::BroadcastMul,
            Saved::Reshape(_) => OpKind::Reshape,
            Saved::Mul(..) => OpKind::Mul,
            Saved::Add(..) => OpKind::Add,
            Saved::Scale(..) => OpKind::Scale,
            Saved::Sum(_) => OpKind::Sum,
            Saved::Mix { .. } => OpKind::Mix,
            Saved::CrossEntropyLogits { .. } => OpKind::CrossEntropyLogits,
            Saved::CrossEntropyProbs { .. } => OpKind::CrossEntropyProbs,
        }
    }
}

struct Record<T> {
    out: Var,
    saved: Saved<T>,
}

/// The computation record of one forward pass.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    records: Vec<Record<T>>,
    consumed: bool,
    pattern: u64,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mix_hash(state: u64, value: u64) -> u64 {
    (state ^ value).wrapping_mul(0x0100_0000_01b3).rotate_left(17)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            records: Vec::new(),
            consumed: false,
            pattern: 0xcbf2_9ce4_8422_2325,
            fault: None,
        }
    }

    /// Scales every input gradient produced by ops of `kind` by 1.5.
    /// Used to confirm the gradient checker catches a broken backward rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Fingerprint of every discrete choice made so far (ReLU masks, max-pool
    /// winners, probability clamps). Equal fingerprints mean two evaluations
    /// took the same piecewise-smooth branch.
    pub fn activation_pattern(&self) -> u64 {
        self.pattern
    }

    pub fn recorded_ops(&self) -> usize {
        self.records.len()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn emit(&mut self, value: Tensor<T>, inputs: &[Var], saved: impl FnOnce() -> Saved<T>) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        let out = self.push(value, requires);
        if requires {
            self.records.push(Record {
                out,
                saved: saved(),
            });
        }
        out
    }

    fn note_pattern(&mut self, bits: impl IntoIterator<Item = u64>) {
        for b in bits {
            self.pattern = mix_hash(self.pattern, b);
        }
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, kh, kw]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let bias_len = b.map(|b| self.value(b).numel());
        let dims = conv::conv2d_dims(self.shape(x), self.shape(w), bias_len, geom)?;
        if !self.value(x).is_finite() {
            return Err(Error::NonFinite("conv2d input"));
        }
        if !self.value(w).is_finite() {
            return Err(Error::NonFinite("conv2d kernel"));
        }
        let (out, cols) = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new([dims.n, dims.c_out, dims.ho, dims.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.emit(value, &inputs, || Saved::Conv2d {
            x,
            w,
            b,
            dims,
            cols,
        }))
    }

    /// Zero-padded 1-D convolution along the channel axis of `[N, C, 1, 1]`
    /// with an odd-length kernel `[k]` and scalar bias `[1]`.
    pub fn conv1d_channels(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c) = match shape.as_slice() {
            [n, c, rest @ ..] if rest.iter().all(|&e| e == 1) => (*n, *c),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv1d_cross_channel",
                    shape,
                    reason: "expected N x C x 1 x 1".into(),
                })
            }
        };
        let k = self.value(w).numel();
        conv::check_conv1d_kernel(k, c)?;
        if self.value(b).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "conv1d_cross_channel bias",
                shape: self.shape(b).to_vec(),
                reason: "expected a single value".into(),
            });
        }
        let out = conv::conv1d_forward(
            self.value(x).data(),
            n,
            c,
            self.value(w).data(),
            self.value(b).data()[0],
        );
        let value = Tensor::new(shape, out)?;
        Ok(self.emit(value, &[x, w, b], || Saved::Conv1d {
            x,
            w,
            b,
            rows: n,
            channels: c,
        }))
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "max_pool2d")?;
        if h < 2 || w < 2 {
            return Err(Error::InvalidShape {
                op: "max_pool2d",
                shape: self.shape(x).to_vec(),
                reason: "spatial extents must be at least 2".into(),
            });
        }
        let (out, indices) = pool::max_pool2x2(self.value(x).data(), n * c, h, w);
        self.note_pattern(indices.iter().map(|&i| i as u64));
        let value = Tensor::new([n, c, h / 2, w / 2], out)?;
        Ok(self.emit(value, &[x], || Saved::ArgMax {
            kind: OpKind::MaxPool2d,
            x,
            indices,
        }))
    }

    pub fn adaptive_max_pool2d(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "adaptive_max_pool2d")?;
        if target.0 == 0 || target.1 == 0 || target.0 > h || target.1 > w {
            return Err(Error::InvalidShape {
                op: "adaptive_max_pool2d",
                shape: self.shape(x).to_vec(),
                reason: format!("target {}x{} must lie within 1..=HxW", target.0, target.1),
            });
        }
        let (out, indices) = pool::adaptive_max_pool(self.value(x).data(), n * c, (h, w), target);
        self.note_pattern(indices.iter().map(|&i| i as u64));
        let value = Tensor::new([n, c, target.0, target.1], out)?;
        Ok(self.emit(value, &[x], || Saved::ArgMax {
            kind: OpKind::AdaptiveMaxPool2d,
            x,
            indices,
        }))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "global_max_pool")?;
        let (out, indices) = pool::global_max_pool(self.value(x).data(), n * c, h * w);
        self.note_pattern(indices.iter().map(|&i| i as u64));
        let value = Tensor::new([n, c, 1, 1], out)?;
        Ok(self.emit(value, &[x], || Saved::ArgMax {
            kind: OpKind::GlobalMaxPool,
            x,
            indices,
        }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "global_avg_pool")?;
        let out = pool::global_avg_pool(self.value(x).data(), n * c, h * w);
        let value = Tensor::new([n, c, 1, 1], out)?;
        Ok(self.emit(value, &[x], || Saved::AvgPool { x, hw: h * w }))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = dims4(self.shape(x), "batch_norm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm affine",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((n, c, h * w))
    }

    /// Normalizes with batch statistics; returns the batch mean and unbiased
    /// variance for the caller's running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let dims = self.bn_dims(x, gamma, beta)?;
        let m = dims.0 * dims.2;
        if m < 2 {
            return Err(Error::BatchTooSmall(m));
        }
        let f = norm::bn_train_forward(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::of(eps),
        );
        let unbias = T::of(m as f64 / (m as f64 - 1.0));
        let stats = BatchStats {
            mean: f.mean,
            var: f.var.iter().map(|&v| v * unbias).collect(),
        };
        let value = Tensor::new(self.shape(x).to_vec(), f.out)?;
        let (xhat, inv_std) = (f.xhat, f.inv_std);
        let out = self.emit(value, &[x, gamma, beta], || Saved::BatchNorm {
            kind: OpKind::BatchNormTrain,
            x,
            gamma,
            beta,
            dims,
            xhat,
            inv_std,
        });
        Ok((out, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != dims.1 || running_var.len() != dims.1 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm running stats",
                lhs: self.shape(x).to_vec(),
                rhs: vec![running_mean.len()],
            });
        }
        let (out, xhat, inv_std) = norm::bn_eval_forward(
            self.value(x).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            T::of(eps),
        );
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.emit(value, &[x, gamma, beta], || Saved::BatchNorm {
            kind: OpKind::BatchNormEval,
            x,
            gamma,
            beta,
            dims,
            xhat,
            inv_std,
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = activation::relu(self.value(x).data());
        let mask = out.chunks(64).map(|c| {
            c.iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > T::zero()) << i))
        });
        let mask: Vec<u64> = mask.collect();
        self.note_pattern(mask);
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.emit(value, &[x], || Saved::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| activation::sigmoid(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.emit(value, &[x], || Saved::Sigmoid(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = *self.shape(x).last().ok_or(Error::Empty("softmax input"))?;
        let out = activation::softmax_rows(self.value(x).data(), k);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.emit(value, &[x], || Saved::Softmax { x, k }))
    }

    /// `x[N, D] * w[K, D]^T + b[K]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d, k) = match (self.shape(x), self.shape(w)) {
            ([n, d], [k, wd]) if d == wd && self.value(b).numel() == *k => (*n, *d, *k),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "dense",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(w).to_vec(),
                })
            }
        };
        let out = dense::dense_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            d,
            k,
        );
        let value = Tensor::new([n, k], out)?;
        Ok(self.emit(value, &[x, w, b], || Saved::Dense {
            x,
            w,
            b,
            dims: (n, d, k),
        }))
    }

    /// Multiplies `[N, C, H, W]` by a `[N, C, 1, 1]` or `[N, 1, H, W]` map
    /// expanded along its unit axes.
    pub fn broadcast_mul(&mut self, f: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(f), "broadcast_mul")?;
        let channel_form = match self.shape(m) {
            s if s == [n, c, 1, 1] => true,
            s if s == [n, 1, h, w] => false,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "broadcast_mul",
                    lhs: self.shape(f).to_vec(),
                    rhs: self.shape(m).to_vec(),
                })
            }
        };
        let (fv, mv) = (self.value(f).data(), self.value(m).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(fv.len());
        for s in 0..n {
            for ch in 0..c {
                let plane = &fv[(s * c + ch) * hw..][..hw];
                if channel_form {
                    let g = mv[s * c + ch];
                    out.extend(plane.iter().map(|&v| v * g));
                } else {
                    let map = &mv[s * hw..][..hw];
                    out.extend(plane.iter().zip(map).map(|(&v, &g)| v * g));
                }
            }
        }
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.emit(value, &[f, m], || Saved::BroadcastMul { f, m, channel_form }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.emit(value, &[x], || Saved::Reshape(x)))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.first().ok_or(Error::Empty("flatten input"))?;
        let rest = shape[1..].iter().product::<usize>();
        self.reshape(x, [n, rest])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.emit(value, &[a, b], || Saved::Mul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.emit(value, &[a, b], || Saved::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::of(factor);
        let out = self.value(x).data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.emit(value, &[x], || Saved::Scale(x, c))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.emit(Tensor::scalar(total), &[x], || Saved::Sum(x))
    }

    /// Convex combination `alpha * a + (1 - alpha) * b` with a one-element `alpha`.
    pub fn mix(&mut self, alpha: Var, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mix", a, b)?;
        if self.value(alpha).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "mix",
                shape: self.shape(alpha).to_vec(),
                reason: "expected a single mixing weight".into(),
            });
        }
        let wa = self.value(alpha).data()[0];
        let wb = T::one() - wa;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| wa * x + wb * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.emit(value, &[alpha, a, b], || Saved::Mix { alpha, a, b }))
    }

    fn check_labels(&self, x: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let (n, k) = match *self.shape(x) {
            [n, k] => (n, k),
            _ => {
                return Err(Error::InvalidShape {
                    op: "cross_entropy",
                    shape: self.shape(x).to_vec(),
                    reason: "expected N x K".into(),
                })
            }
        };
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy labels",
                lhs: vec![n, k],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        Ok((n, k))
    }

    /// Mean cross-entropy of raw scores against 1-based labels (stable log-softmax).
    pub fn cross_entropy_logits(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_labels(scores, labels)?;
        let logp = activation::log_softmax_rows(self.value(scores).data(), k);
        let total: T = labels.iter().enumerate().map(|(i, &l)| -logp[i * k + l - 1]).sum();
        let loss = total / T::of(n as f64);
        let labels = labels.to_vec();
        Ok(self.emit(Tensor::scalar(loss), &[scores], || Saved::CrossEntropyLogits {
            x: scores,
            probs: logp.iter().map(|v| v.exp()).collect(),
            labels,
        }))
    }

    /// Mean of `-log(max(p_label, 1e-12))` over rows of probabilities.
    pub fn cross_entropy_probs(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_labels(probs, labels)?;
        let floor = T::of(PROB_FLOOR);
        let p = self.value(probs).data();
        let picked: Vec<T> = labels.iter().enumerate().map(|(i, &l)| p[i * k + l - 1]).collect();
        let clamps: Vec<u64> = picked.iter().map(|&v| u64::from(v <= floor)).collect();
        let total: T = picked.iter().map(|&v| -v.max(floor).ln()).sum();
        self.note_pattern(clamps);
        let loss = total / T::of(n as f64);
        let labels = labels.to_vec();
        Ok(self.emit(Tensor::scalar(loss), &[probs], || Saved::CrossEntropyProbs {
            x: probs,
            labels,
        }))
    }

    /// Propagates `d loss / d v` to every node that requires a gradient, then
    /// clears the record.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_with(loss, &[T::one()])
    }

    /// Like [`Tape::backward`] but seeds `output` with an arbitrary upstream
    /// gradient of the same size, giving vector-Jacobian products.
    pub fn backward_with(&mut self, output: Var, seed: &[T]) -> Result<()> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        if seed.len() != self.value(output).numel() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: self.shape(output).to_vec(),
                rhs: vec![seed.len()],
            });
        }
        self.consumed = true;
        if !self.requires[output.0] {
            self.records.clear();
            return Ok(());
        }
        self.grads[output.0] = Some(seed.to_vec());
        let records = std::mem::take(&mut self.records);
        for record in records.into_iter().rev() {
            let Some(dy) = self.grads[record.out.0].take() else {
                continue;
            };
            let kind = record.saved.kind();
            let mut updates = self.op_backward(record.saved, record.out, &dy);
            self.grads[record.out.0] = Some(dy);
            if self.fault == Some(kind) {
                for (_, g) in &mut updates {
                    g.iter_mut().for_each(|v| *v = *v * T::of(1.5));
                }
            }
            for (v, g) in updates {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.requires[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn op_backward(&self, saved: Saved<T>, out: Var, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.values[v.0].data();
        let req = |v: Var| self.requires[v.0];
        match saved {
            Saved::Conv2d { x, w, b, dims, cols } => {
                let g = conv::conv2d_backward(dy, val(w), &cols, &dims, req(x));
                let mut ups = vec![(w, g.weight)];
                ups.extend(g.input.map(|dx| (x, dx)));
                ups.extend(b.map(|b| (b, g.bias)));
                ups
            }
            Saved::Conv1d {
                x,
                w,
                b,
                rows,
                channels,
            } => {
                let (dx, dw, db) = conv::conv1d_backward(dy, val(x), rows, channels, val(w));
                vec![(x, dx), (w, dw), (b, vec![db])]
            }
            Saved::ArgMax { x, indices, .. } => {
                vec![(x, pool::scatter_max(dy, &indices, val(x).len()))]
            }
            Saved::AvgPool { x, hw } => {
                let scale = T::one() / T::of(hw as f64);
                let dx = dy.iter().flat_map(|&g| std::iter::repeat_n(g * scale, hw)).collect();
                vec![(x, dx)]
            }
            Saved::BatchNorm {
                kind,
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = if kind == OpKind::BatchNormTrain {
                    norm::bn_train_backward(dy, dims, &xhat, &inv_std, val(gamma))
                } else {
                    norm::bn_eval_backward(dy, dims, &xhat, &inv_std, val(gamma))
                };
                vec![(x, dx), (gamma, dg), (beta, db)]
            }
            Saved::Relu(x) => {
                let dx = dy
                    .iter()
                    .zip(val(x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(x, dx)]
            }
            Saved::Sigmoid(x) => {
                let dx = dy
                    .iter()
                    .zip(val(out))
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                vec![(x, dx)]
            }
            Saved::Softmax { x, k } => {
                let y = val(out);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(k).zip(dy.chunks_exact(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                vec![(x, dx)]
            }
            Saved::Dense { x, w, b, dims } => {
                let (dx, dw, db) = dense::dense_backward(dy, val(x), val(w), dims, req(x));
                let mut ups = vec![(w, dw), (b, db)];
                ups.extend(dx.map(|dx| (x, dx)));
                ups
            }
            Saved::BroadcastMul { f, m, channel_form } => {
                let (n, c, h, w) = dims4(self.values[f.0].shape(), "broadcast_mul").expect("checked");
                let hw = h * w;
                let (fv, mv) = (val(f), val(m));
                let mut df = Vec::with_capacity(fv.len());
                let mut dm = vec![T::zero(); mv.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for p in 0..hw {
                            let mi = if channel_form { s * c + ch } else { s * hw + p };
                            df.push(dy[base + p] * mv[mi]);
                            dm[mi] = dm[mi] + dy[base + p] * fv[base + p];
                        }
                    }
                }
                vec![(f, df), (m, dm)]
            }
            Saved::Reshape(x) => vec![(x, dy.to_vec())],
            Saved::Mul(a, b) => {
                let da = dy.iter().zip(val(b)).map(|(&g, &v)| g * v).collect();
                let db = dy.iter().zip(val(a)).map(|(&g, &v)| g * v).collect();
                vec![(a, da), (b, db)]
            }
            Saved::Add(a, b) => vec![(a, dy.to_vec()), (b, dy.to_vec())],
            Saved::Scale(x, c) => vec![(x, dy.iter().map(|&g| g * c).collect())],
            Saved::Sum(x) => vec![(x, vec![dy[0]; val(x).len()])],
            Saved::Mix { alpha, a, b } => {
                let wa = val(alpha)[0];
                let wb = T::one() - wa;
                let (av, bv) = (val(a), val(b));
                let dalpha = dy.iter().zip(av.iter().zip(bv)).map(|(&g, (&x, &y))| g * (x - y)).sum();
                let da = dy.iter().map(|&g| g * wa).collect();
                let db = dy.iter().map(|&g| g * wb).collect();
                vec![(alpha, vec![dalpha]), (a, da), (b, db)]
            }
            Saved::CrossEntropyLogits { x, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / T::of(n as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l - 1] = dx[i * k + l - 1] - scale;
                }
                vec![(x, dx)]
            }
            Saved::CrossEntropyProbs { x, labels } => {
                let p = val(x);
                let n = labels.len();
                let k = p.len() / n;
                let scale = dy[0] / T::of(n as f64);
                let floor = T::of(PROB_FLOOR);
                let mut dx = vec![T::zero(); p.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let v = p[i * k + l - 1];
                    if v > floor {
                        dx[i * k + l - 1] = -scale / v;
                    }
                }
                vec![(x, dx)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let vals = [1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(t(&[4], &vals), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let want: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_pass() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.recorded_ops(), 0);
        assert!(matches!(tape.backward(s), Err(Error::RecordConsumed)));
    }

    #[test]
    fn constant_inputs_are_not_recorded() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), false);
        let y = tape.relu(x);
        assert!(!tape.requires_grad(y));
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn conv2d_rejects_non_finite_and_mismatched_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &[f64::NAN; 9]), false);
        let w = tape.leaf(Tensor::zeros([1, 1, 3, 3]), true);
        assert!(matches!(tape.conv2d(x, w, None, ConvGeometry::VALID), Err(Error::NonFinite(_))));
        let x2 = tape.leaf(Tensor::zeros([1, 2, 3, 3]), false);
        let err = tape.conv2d(x2, w, None, ConvGeometry::VALID).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 3, 3]") && msg.contains("[1, 1, 3, 3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_rejects_label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.5, 0.5]), false);
        assert!(matches!(tape.cross_entropy_probs(x, &[3]), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(tape.cross_entropy_logits(x, &[0]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}

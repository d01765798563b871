//! Backbone conv blocks, the spectral and spatial attention modules, and the
//! auxiliary output heads that supervise them.

use rand::Rng;

use crate::error::Result;
use crate::ops::conv::{check_conv1d_kernel, ConvGeometry};
use crate::params::{uniform_fan_in, Bound, ParamId, ParamStore, RunningStats, BN_EPS};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running stats are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

pub const BACKBONE_KERNEL: usize = 3;

/// 3x3 same-padded convolution, batch norm and ReLU.
///
/// The convolution carries no bias of its own: the batch-norm shift that
/// follows absorbs any per-channel offset.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: RunningStats<T>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        let k = BACKBONE_KERNEL;
        let shape = [out_channels, in_channels, k, k];
        Self {
            weight: store.add(
                format!("{prefix}.conv.weight"),
                uniform_fan_in(rng, &shape, in_channels * k * k),
            ),
            gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::full([out_channels], T::one())),
            beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros([out_channels])),
            running: RunningStats::new(out_channels),
            in_channels,
            out_channels,
        }
    }

    /// `relu(batch_norm(conv2d(x)))`, spatial size preserved.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let geom = ConvGeometry::same(BACKBONE_KERNEL, BACKBONE_KERNEL);
        let conv = tape.conv2d(x, bound.get(self.weight), None, geom)?;
        let (gamma, beta) = (bound.get(self.gamma), bound.get(self.beta));
        let (normed, stats) = match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(conv, gamma, beta, BN_EPS)?;
                (y, Some(stats))
            }
            Mode::Eval => {
                if !self.running.initialized {
                    return Err(Error::UninitializedStats);
                }
                let y = tape.batch_norm_eval(
                    conv,
                    gamma,
                    beta,
                    &self.running.mean,
                    &self.running.var,
                    BN_EPS,
                )?;
                (y, None)
            }
        };
        Ok((tape.relu(normed), stats))
    }
}

/// Channel gate `sigmoid(w2 * relu(w1 * avgpool(F)))` built from two
/// single-filter 1-D convolutions across the channel axis.
#[derive(Clone, Debug)]
pub struct SpectralAttention {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub kernel: usize,
}

impl SpectralAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        check_conv1d_kernel(kernel, channels)?;
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), uniform_fan_in(rng, &[kernel], kernel)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([1])),
            w2: store.add(format!("{prefix}.w2"), uniform_fan_in(rng, &[kernel], kernel)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([1])),
            kernel,
        })
    }

    /// Returns the `[N, C, 1, 1]` attention map.
    pub fn map<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, f: Var) -> Result<Var> {
        let squeezed = tape.global_avg_pool(f)?;
        let inner = tape.conv1d_channels(squeezed, bound.get(self.w1), bound.get(self.b1))?;
        let inner = tape.relu(inner);
        let outer = tape.conv1d_channels(inner, bound.get(self.w2), bound.get(self.b2))?;
        Ok(tape.sigmoid(outer))
    }
}

/// Refines `f` by a channel-form map, copying each gate across H x W.
pub fn apply_spectral<T: Scalar>(tape: &mut Tape<T>, f: Var, map: Var) -> Result<Var> {
    let (n, c, _, _) = crate::tensor::dims4(tape.shape(f), "apply_spectral")?;
    if tape.shape(map) != [n, c, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "apply_spectral",
            lhs: tape.shape(f).to_vec(),
            rhs: tape.shape(map).to_vec(),
        });
    }
    tape.broadcast_mul(f, map)
}

/// Position gate `sigmoid(q1 * relu(q2 * M))` where `M` is a 1x1 convolution
/// collapsing the channels to one map.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub reduce_w: ParamId,
    pub reduce_b: ParamId,
    pub q1_w: ParamId,
    pub q1_b: ParamId,
    pub q2_w: ParamId,
    pub q2_b: ParamId,
    pub kernel: usize,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "spatial attention kernel must be odd, got {kernel}"
            )));
        }
        let kk = kernel * kernel;
        Ok(Self {
            reduce_w: store.add(
                format!("{prefix}.reduce.weight"),
                uniform_fan_in(rng, &[1, channels, 1, 1], channels),
            ),
            reduce_b: store.add(format!("{prefix}.reduce.bias"), Tensor::zeros([1])),
            q1_w: store.add(format!("{prefix}.q1.weight"), uniform_fan_in(rng, &[1, 1, kernel, kernel], kk)),
            q1_b: store.add(format!("{prefix}.q1.bias"), Tensor::zeros([1])),
            q2_w: store.add(format!("{prefix}.q2.weight"), uniform_fan_in(rng, &[1, 1, kernel, kernel], kk)),
            q2_b: store.add(format!("{prefix}.q2.bias"), Tensor::zeros([1])),
            kernel,
        })
    }

    /// Returns the `[N, 1, H, W]` attention map. `q2` is applied first.
    pub fn map<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, f: Var) -> Result<Var> {
        let reduced = tape.conv2d(
            f,
            bound.get(self.reduce_w),
            Some(bound.get(self.reduce_b)),
            ConvGeometry::VALID,
        )?;
        let geom = ConvGeometry::same(self.kernel, self.kernel);
        let inner = tape.conv2d(reduced, bound.get(self.q2_w), Some(bound.get(self.q2_b)), geom)?;
        let inner = tape.relu(inner);
        let outer = tape.conv2d(inner, bound.get(self.q1_w), Some(bound.get(self.q1_b)), geom)?;
        Ok(tape.sigmoid(outer))
    }
}

/// Refines `f` by a spatial-form map, copying each gate across channels.
pub fn apply_spatial<T: Scalar>(tape: &mut Tape<T>, f: Var, map: Var) -> Result<Var> {
    let (n, _, h, w) = crate::tensor::dims4(tape.shape(f), "apply_spatial")?;
    if tape.shape(map) != [n, 1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "apply_spatial",
            lhs: tape.shape(f).to_vec(),
            rhs: tape.shape(map).to_vec(),
        });
    }
    tape.broadcast_mul(f, map)
}

#[derive(Clone, Debug)]
pub enum Attention {
    Spectral(SpectralAttention),
    Spatial(SpatialAttention),
}

impl Attention {
    pub fn map<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, f: Var) -> Result<Var> {
        match self {
            Attention::Spectral(a) => a.map(tape, bound, f),
            Attention::Spatial(a) => a.map(tape, bound, f),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, f: Var, map: Var) -> Result<Var> {
        match self {
            Attention::Spectral(_) => apply_spectral(tape, f, map),
            Attention::Spatial(_) => apply_spatial(tape, f, map),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadPool {
    GlobalMax,
    AdaptiveMax(usize, usize),
}

impl HeadPool {
    pub fn cells(self) -> usize {
        match self {
            HeadPool::GlobalMax => 1,
            HeadPool::AdaptiveMax(h, w) => h * w,
        }
    }
}

/// Pooling followed by a single dense layer to `K` unnormalized class scores.
#[derive(Clone, Debug)]
pub struct OutputBranch {
    pub pool: HeadPool,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub classes: usize,
}

impl OutputBranch {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        pool: HeadPool,
        classes: usize,
    ) -> Self {
        let in_features = channels * pool.cells();
        Self {
            pool,
            weight: store.add(
                format!("{prefix}.fc.weight"),
                uniform_fan_in(rng, &[classes, in_features], in_features),
            ),
            bias: store.add(format!("{prefix}.fc.bias"), Tensor::zeros([classes])),
            in_features,
            classes,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, f: Var) -> Result<Var> {
        let pooled = match self.pool {
            HeadPool::GlobalMax => tape.global_max_pool(f)?,
            HeadPool::AdaptiveMax(h, w) => tape.adaptive_max_pool2d(f, (h, w))?,
        };
        let flat = tape.flatten(pooled)?;
        if tape.shape(flat)[1] != self.in_features {
            return Err(Error::ShapeMismatch {
                op: "output branch",
                lhs: tape.shape(flat).to_vec(),
                rhs: vec![self.classes, self.in_features],
            });
        }
        tape.dense(flat, bound.get(self.weight), bound.get(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn zero_params(store: &mut ParamStore<f64>) {
        for p in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn conv_block_keeps_spatial_size_and_sets_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let block = ConvBlock::new(&mut store, &mut r, "b1", 6, 32);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(random_tensor(&mut r, &[2, 6, 11, 11]), false);
        let (y, stats) = block.forward(&mut tape, &bound, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[2, 32, 11, 11]);
        assert_eq!(stats.unwrap().mean.len(), 32);
    }

    #[test]
    fn zero_kernel_block_outputs_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let block = ConvBlock::new(&mut store, &mut r, "b", 3, 4);
        store.get_mut(block.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(random_tensor(&mut r, &[2, 3, 5, 5]), false);
        let (y, _) = block.forward(&mut tape, &bound, x, Mode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_before_training_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let mut block = ConvBlock::new(&mut store, &mut r, "b", 1, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros([1, 1, 3, 3]), false);
        assert!(matches!(
            block.forward(&mut tape, &bound, x, Mode::Eval),
            Err(Error::UninitializedStats)
        ));
        block.running.mark_initialized();
        assert!(block.forward(&mut tape, &bound, x, Mode::Eval).is_ok());
    }

    #[test]
    fn zero_weight_spectral_map_is_one_half() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let att = SpectralAttention::new(&mut store, &mut r, "a", 8, 3).unwrap();
        zero_params(&mut store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.leaf(random_tensor(&mut r, &[2, 8, 5, 3]), false);
        let map = att.map(&mut tape, &bound, f).unwrap();
        assert_eq!(tape.shape(map), &[2, 8, 1, 1]);
        assert!(tape.value(map).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_spectral_kernels_give_sigmoid_of_channel_means() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let att = SpectralAttention::new(&mut store, &mut r, "a", 4, 3).unwrap();
        zero_params(&mut store);
        store.get_mut(att.w1).data_mut()[1] = 1.0;
        store.get_mut(att.w2).data_mut()[1] = 1.0;
        let consts = [0.0, 0.5, 1.5, 3.0];
        let data: Vec<f64> = consts.iter().flat_map(|&c| [c; 4]).collect();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.leaf(Tensor::new([1, 4, 2, 2], data).unwrap(), false);
        let map = att.map(&mut tape, &bound, f).unwrap();
        for (got, c) in tape.value(map).data().iter().zip(consts) {
            assert!((got - 1.0 / (1.0 + (-c).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_kernel_must_fit_channels() {
        let mut store = ParamStore::<f64>::new();
        assert!(SpectralAttention::new(&mut store, &mut rng(), "a", 3, 7).is_err());
        assert!(SpectralAttention::new(&mut store, &mut rng(), "a", 32, 4).is_err());
    }

    #[test]
    fn zero_weight_spatial_map_is_one_half_and_keeps_size() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let att = SpatialAttention::new(&mut store, &mut r, "s", 128, 3).unwrap();
        zero_params(&mut store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.leaf(random_tensor(&mut r, &[2, 128, 2, 2]), false);
        let map = att.map(&mut tape, &bound, f).unwrap();
        assert_eq!(tape.shape(map), &[2, 1, 2, 2]);
        assert!(tape.value(map).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_pixel_spatial_map_keeps_that_pixel_across_channels() {
        let mut r = rng();
        let mut tape = Tape::new();
        let f = tape.leaf(random_tensor(&mut r, &[1, 3, 2, 2]), false);
        let mut m = vec![0.0; 4];
        m[2] = 1.0;
        let map = tape.leaf(Tensor::new([1, 1, 2, 2], m).unwrap(), false);
        let out = apply_spatial(&mut tape, f, map).unwrap();
        let (fv, ov) = (tape.value(f).data(), tape.value(out).data());
        for c in 0..3 {
            for p in 0..4 {
                let want = if p == 2 { fv[c * 4 + p] } else { 0.0 };
                assert_eq!(ov[c * 4 + p], want);
            }
        }
    }

    #[test]
    fn apply_rejects_wrong_map_form() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::zeros([1, 3, 2, 2]), false);
        let spatial = tape.leaf(Tensor::zeros([1, 1, 2, 2]), false);
        let channel = tape.leaf(Tensor::zeros([1, 3, 1, 1]), false);
        assert!(apply_spectral(&mut tape, f, spatial).is_err());
        assert!(apply_spatial(&mut tape, f, channel).is_err());
    }

    #[test]
    fn output_branch_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let spe = OutputBranch::new(&mut store, &mut r, "h3", 128, HeadPool::GlobalMax, 5);
        let spa = OutputBranch::new(&mut store, &mut r, "h1", 32, HeadPool::AdaptiveMax(4, 4), 5);
        assert_eq!(spa.in_features, 512);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f3 = tape.leaf(random_tensor(&mut r, &[3, 128, 2, 2]), false);
        let f1 = tape.leaf(random_tensor(&mut r, &[3, 32, 11, 11]), false);
        let s3 = spe.forward(&mut tape, &bound, f3).unwrap();
        let s1 = spa.forward(&mut tape, &bound, f1).unwrap();
        assert_eq!(tape.shape(s3), &[3, 5]);
        assert_eq!(tape.shape(s1), &[3, 5]);
    }

    #[test]
    fn zero_dense_head_returns_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let head = OutputBranch::new(&mut store, &mut r, "h", 4, HeadPool::GlobalMax, 3);
        store.get_mut(head.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(head.bias).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = tape.leaf(random_tensor(&mut r, &[2, 4, 3, 3]), false);
        let s = head.forward(&mut tape, &bound, f).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }
}

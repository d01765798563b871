//! Losses, Adam, branch pretraining with deep supervision, and fused
//! fine-tuning.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Mode;
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::network::{BranchKind, FusedModel, SubNetwork, LAYERS};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Per-layer weights of the auxiliary head losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gammas: [f64; LAYERS],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gammas: [0.01, 0.1, 1.0],
        }
    }
}

impl LossWeights {
    pub fn new(gammas: [f64; LAYERS]) -> Result<Self> {
        if gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0, got {gammas:?}")));
        }
        Ok(Self { gammas })
    }

    pub fn for_layer(&self, layer: usize) -> Result<f64> {
        self.gammas
            .get(layer.wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no loss weight for layer {layer}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision '{other}' (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fine-tuning epochs; `epochs` when unset.
    pub finetune_epochs: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
    pub patch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 200,
            finetune_epochs: None,
            seed: 0,
            precision: Precision::F32,
            patch_size: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.epochs == 0 || self.finetune_epochs == Some(0) {
            return fail("epoch counts must be positive".into());
        }
        if self.patch_size.is_multiple_of(2) {
            return fail(format!("patch size must be odd, got {}", self.patch_size));
        }
        Ok(())
    }

    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.epochs)
    }
}

/// Mean cross-entropy; `input_is_probs` selects log with a `1e-12` floor
/// instead of a log-softmax of raw scores.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, x: Var, labels: &[usize], input_is_probs: bool) -> Result<Var> {
    if input_is_probs {
        tape.cross_entropy_probs(x, labels)
    } else {
        tape.cross_entropy_logits(x, labels)
    }
}

/// `sum_i gamma(layer_i) * CE(scores_i, labels)` over heads ordered by layer.
pub fn deep_supervision_loss<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[(usize, Var)],
    labels: &[usize],
    weights: &LossWeights,
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::Empty("head list"));
    }
    if heads.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::InvalidArgument(format!(
            "heads must be in increasing layer order, got {:?}",
            heads.iter().map(|h| h.0).collect::<Vec<_>>()
        )));
    }
    let mut total: Option<Var> = None;
    for &(layer, scores) in heads {
        let gamma = weights.for_layer(layer)?;
        let ce = tape.cross_entropy_logits(scores, labels)?;
        let term = tape.scale(ce, gamma);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty heads"))
}

/// Cross-entropy of fused probabilities.
pub fn fine_tune_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy_probs(probs, labels)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam over the parameters of one or more stores, in order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64, stores: &[&ParamStore<T>]) -> Self {
        let zeros: Vec<Vec<T>> = stores
            .iter()
            .flat_map(|s| s.iter().map(|p| vec![T::zero(); p.value.numel()]))
            .collect();
        Self {
            learning_rate,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    pub fn update(&mut self, stores: &mut [&mut ParamStore<T>], grads: &[Vec<T>]) -> Result<()> {
        let total: usize = stores.iter().map(|s| s.len()).sum();
        if grads.len() != total || total != self.first.len() {
            return Err(Error::MissingGradient(format!(
                "{} gradients for {total} parameters ({} tracked)",
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in stores.iter().flat_map(|s| s.iter()).zip(grads) {
            if p.value.numel() != g.len() {
                return Err(Error::MissingGradient(format!(
                    "{}: {} gradient values for {} elements",
                    p.name,
                    g.len(),
                    p.value.numel()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let (one, eps) = (T::one(), T::of(ADAM_EPS));
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let lr = T::of(self.learning_rate);
        let params = stores.iter_mut().flat_map(|s| s.iter_mut());
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Shuffled mini-batches covering `0..n`; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain(BranchKind),
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Pretrain(kind) => write!(f, "pretrain-{kind}"),
            Phase::Finetune => f.write_str("finetune"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    /// Sample-weighted mean loss over the epoch.
    pub loss: f64,
    pub elapsed_secs: f64,
    /// Spectral fusion weight at the end of the epoch (fine-tuning only).
    pub alpha: Option<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch={} phase={} loss={:.6} elapsed={:.2}",
            self.epoch, self.phase, self.loss, self.elapsed_secs
        );
        if let Some(a) = self.alpha {
            s.push_str(&format!(" alpha={a:.6} beta={:.6}", 1.0 - a));
        }
        s
    }
}

fn shuffle_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let stream = match phase {
        Phase::Pretrain(kind) => 16 + u64::from(kind.code()),
        Phase::Finetune => 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_data<T: Scalar>(net: &SubNetwork<T>, data: &PatchSet) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if (data.bands, data.patch) != (net.spec.bands, net.spec.patch) {
        return Err(Error::ShapeMismatch {
            op: "training data (bands, patch)",
            lhs: vec![data.bands, data.patch],
            rhs: vec![net.spec.bands, net.spec.patch],
        });
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l == 0 || l > net.spec.classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: net.spec.classes,
        });
    }
    Ok(())
}

/// One deep-supervision step on a batch; returns the batch loss.
pub fn pretrain_step<T: Scalar>(
    net: &mut SubNetwork<T>,
    adam: &mut Adam<T>,
    data: &PatchSet,
    batch: &[usize],
    weights: &LossWeights,
) -> Result<f64> {
    let (x, labels) = data.gather::<T>(batch);
    let mut tape = Tape::new();
    let bound = net.params.bind(&mut tape);
    let input = tape.leaf(x, false);
    let out = net.forward(&mut tape, &bound, input, Mode::Train)?;
    let loss = deep_supervision_loss(&mut tape, &out.heads, &labels, weights)?;
    let value = tape.value(loss).data()[0].to_f64();
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    adam.update(&mut [&mut net.params], &grads)?;
    net.update_running_stats(&out.stats)?;
    Ok(value)
}

/// Trains one branch with the deep-supervision loss; returns per-epoch mean
/// losses. `on_epoch` sees each epoch's log and the current network.
pub fn pretrain<T: Scalar>(
    net: &mut SubNetwork<T>,
    data: &PatchSet,
    cfg: &TrainConfig,
    weights: &LossWeights,
    on_epoch: &mut dyn FnMut(&EpochLog, &SubNetwork<T>) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_data(net, data)?;
    let phase = Phase::Pretrain(net.spec.kind);
    let mut rng = shuffle_rng(cfg.seed, phase);
    let mut adam = Adam::new(cfg.learning_rate, &[&net.params]);
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            sum += pretrain_step(net, &mut adam, data, &batch, weights)? * batch.len() as f64;
        }
        let loss = sum / data.len() as f64;
        history.push(loss);
        let log = EpochLog {
            epoch,
            phase,
            loss,
            elapsed_secs: start.elapsed().as_secs_f64(),
            alpha: None,
        };
        on_epoch(&log, net)?;
    }
    Ok(history)
}

/// One fine-tuning step on the fused output; returns the batch loss.
pub fn finetune_step<T: Scalar>(
    model: &mut FusedModel<T>,
    adam: &mut Adam<T>,
    data: &PatchSet,
    batch: &[usize],
) -> Result<f64> {
    let (x, labels) = data.gather::<T>(batch);
    let mut tape = Tape::new();
    let spe = model.spectral.params.bind(&mut tape);
    let spa = model.spatial.params.bind(&mut tape);
    let fusion = model.fusion.bind(&mut tape);
    let input = tape.leaf(x, false);
    let out = model.forward(&mut tape, &spe, &spa, &fusion, input, Mode::Train)?;
    let loss = fine_tune_loss(&mut tape, out.probs, &labels)?;
    let value = tape.value(loss).data()[0].to_f64();
    tape.backward(loss)?;
    let mut grads = spe.grads(&tape);
    grads.extend(spa.grads(&tape));
    grads.extend(fusion.grads(&tape));
    adam.update(&mut [&mut model.spectral.params, &mut model.spatial.params, &mut model.fusion], &grads)?;
    model.spectral.update_running_stats(&out.spectral.stats)?;
    model.spatial.update_running_stats(&out.spatial.stats)?;
    Ok(value)
}

pub fn finetune_optimizer<T: Scalar>(model: &FusedModel<T>, learning_rate: f64) -> Adam<T> {
    Adam::new(learning_rate, &[&model.spectral.params, &model.spatial.params, &model.fusion])
}

/// Optimizes the fused loss over both branches and the fusion logits with a
/// fresh optimizer.
pub fn finetune<T: Scalar>(
    model: &mut FusedModel<T>,
    data: &PatchSet,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &FusedModel<T>) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_data(&model.spectral, data)?;
    let mut rng = shuffle_rng(cfg.seed, Phase::Finetune);
    let mut adam = finetune_optimizer(model, cfg.learning_rate);
    let start = Instant::now();
    let epochs = cfg.finetune_epochs();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut sum = 0.0;
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            sum += finetune_step(model, &mut adam, data, &batch)? * batch.len() as f64;
        }
        let loss = sum / data.len() as f64;
        history.push(loss);
        let log = EpochLog {
            epoch,
            phase: Phase::Finetune,
            loss,
            elapsed_secs: start.elapsed().as_secs_f64(),
            alpha: Some(model.weights().0.to_f64()),
        };
        on_epoch(&log, model)?;
    }
    Ok(history)
}

/// Pretrains both fully attended branches, then fine-tunes the fused model.
pub fn train_fused<T: Scalar>(
    classes: usize,
    data: &PatchSet,
    cfg: &TrainConfig,
    weights: &LossWeights,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<FusedModel<T>> {
    let mut model = FusedModel::<T>::new(classes, data.bands, data.patch, cfg.seed)?;
    pretrain(&mut model.spectral, data, cfg, weights, &mut |l, _| {
        log(l);
        Ok(())
    })?;
    pretrain(&mut model.spatial, data, cfg, weights, &mut |l, _| {
        log(l);
        Ok(())
    })?;
    finetune(&mut model, data, cfg, &mut |l, _| {
        log(l);
        Ok(())
    })?;
    Ok(model)
}

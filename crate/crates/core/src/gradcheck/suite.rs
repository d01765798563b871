//! The standard gradient-check battery: every primitive op on random small
//! shapes, then the layer composites and the full fused model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_with, vjp_check_with, Elements, GradCheckReport, DEFAULT_STEP};
use crate::attention::{apply_spatial, apply_spectral, ConvBlock, HeadPool, Mode, OutputBranch, SpatialAttention, SpectralAttention};
use crate::error::Result;
use crate::network::FusedModel;
use crate::params::{Bound, ParamStore};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::training::{deep_supervision_loss, fine_tune_loss, LossWeights};
use crate::ConvGeometry;

pub const TOLERANCE: f64 = 1e-4;

type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Op,
    Composite,
}

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: EntryKind,
    pub cases: usize,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    /// Random shapes drawn per primitive op.
    pub cases_per_op: usize,
    pub seed: u64,
    /// Broken backward rule to install on every tape.
    pub fault: Option<OpKind>,
    /// Elements checked per parameter tensor of the full model.
    pub model_samples: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            cases_per_op: 20,
            seed: 0,
            fault: None,
            model_samples: 6,
        }
    }
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sizes agree")
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    tensor(rng, shape, -1.0, 1.0)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// One random instance of `kind`: parameter tensors and the op applied to them.
fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, CaseFn) {
    let n = dims(rng, 1, 2);
    let c = dims(rng, 1, 3);
    let (h, w) = (dims(rng, 2, 5), dims(rng, 2, 5));
    match kind {
        OpKind::Conv2d => {
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let o = dims(rng, 1, 3);
            let (h, w) = (h.max(k), w.max(k));
            let geom = if rng.random_bool(0.5) { ConvGeometry::same(k, k) } else { ConvGeometry::VALID };
            let p = vec![randn(rng, &[n, c, h, w]), randn(rng, &[o, c, k, k]), randn(rng, &[o])];
            (p, Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom)))
        }
        OpKind::Conv1dChannels => {
            let ch = dims(rng, 2, 8);
            let k = [1, 3, 5][rng.random_range(0..3)].min(2 * ch - 1);
            let p = vec![randn(rng, &[n, ch, 1, 1]), randn(rng, &[k]), randn(rng, &[1])];
            (p, Box::new(|t, v| t.conv1d_channels(v[0], v[1], v[2])))
        }
        OpKind::MaxPool2d => (vec![randn(rng, &[n, c, h, w])], Box::new(|t, v| t.max_pool2d(v[0]))),
        OpKind::AdaptiveMaxPool2d => {
            let target = (dims(rng, 1, h), dims(rng, 1, w));
            (vec![randn(rng, &[n, c, h, w])], Box::new(move |t, v| t.adaptive_max_pool2d(v[0], target)))
        }
        OpKind::GlobalAvgPool => (vec![randn(rng, &[n, c, h, w])], Box::new(|t, v| t.global_avg_pool(v[0]))),
        OpKind::GlobalMaxPool => (vec![randn(rng, &[n, c, h, w])], Box::new(|t, v| t.global_max_pool(v[0]))),
        OpKind::BatchNormTrain => {
            let p = vec![randn(rng, &[n, c, h, w]), tensor(rng, &[c], 0.5, 1.5), randn(rng, &[c])];
            (p, Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)))
        }
        OpKind::BatchNormEval => {
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let p = vec![randn(rng, &[n, c, h, w]), tensor(rng, &[c], 0.5, 1.5), randn(rng, &[c])];
            (p, Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)))
        }
        OpKind::Relu => (vec![randn(rng, &[n, c, h, w])], Box::new(|t, v| Ok(t.relu(v[0])))),
        OpKind::Sigmoid => (vec![tensor(rng, &[n, c, h, w], -4.0, 4.0)], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        OpKind::Softmax => (vec![tensor(rng, &[n, h + 1], -3.0, 3.0)], Box::new(|t, v| t.softmax(v[0]))),
        OpKind::Dense => {
            let (d, k) = (dims(rng, 1, 6), dims(rng, 1, 4));
            let p = vec![randn(rng, &[n, d]), randn(rng, &[k, d]), randn(rng, &[k])];
            (p, Box::new(|t, v| t.dense(v[0], v[1], v[2])))
        }
        OpKind::BroadcastMul => {
            let map = if rng.random_bool(0.5) { [n, c, 1, 1] } else { [n, 1, h, w] };
            let p = vec![randn(rng, &[n, c, h, w]), tensor(rng, &map, 0.05, 0.95)];
            (p, Box::new(|t, v| t.broadcast_mul(v[0], v[1])))
        }
        OpKind::Reshape => (vec![randn(rng, &[n, c, h, w])], Box::new(move |t, v| t.reshape(v[0], [n * c, h * w]))),
        OpKind::Mul => (
            vec![randn(rng, &[n, c, h]), randn(rng, &[n, c, h])],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        OpKind::Add => (
            vec![randn(rng, &[n, c, h]), randn(rng, &[n, c, h])],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        OpKind::Scale => {
            let f = rng.random_range(-2.0..2.0);
            (vec![randn(rng, &[n, c, h])], Box::new(move |t, v| Ok(t.scale(v[0], f))))
        }
        OpKind::Sum => (vec![randn(rng, &[n, c, h, w])], Box::new(|t, v| Ok(t.sum(v[0])))),
        OpKind::Mix => {
            let p = vec![tensor(rng, &[1], 0.05, 0.95), randn(rng, &[n, h]), randn(rng, &[n, h])];
            (p, Box::new(|t, v| t.mix(v[0], v[1], v[2])))
        }
        OpKind::CrossEntropyLogits => {
            let k = dims(rng, 2, 5);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=k)).collect();
            let p = vec![tensor(rng, &[n, k], -3.0, 3.0)];
            (p, Box::new(move |t, v| t.cross_entropy_logits(v[0], &labels)))
        }
        OpKind::CrossEntropyProbs => {
            let k = dims(rng, 2, 5);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=k)).collect();
            let p = vec![tensor(rng, &[n, k], 0.05, 1.0)];
            (p, Box::new(move |t, v| t.cross_entropy_probs(v[0], &labels)))
        }
    }
}

fn op_entry(kind: OpKind, cfg: &SuiteConfig) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (kind as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut report = GradCheckReport::default();
    for case in 0..cfg.cases_per_op {
        let (params, f) = op_case(kind, &mut rng);
        let r = vjp_check_with(f, &params, DEFAULT_STEP, Elements::All, cfg.seed + case as u64, |t| {
            if let Some(fault) = cfg.fault {
                t.inject_fault(fault);
            }
        })?;
        report.merge(&r);
    }
    Ok(SuiteEntry {
        name: kind.name().to_string(),
        kind: EntryKind::Op,
        cases: cfg.cases_per_op,
        report,
    })
}

fn composite(
    name: &str,
    cfg: &SuiteConfig,
    params: Vec<Tensor<f64>>,
    elements: Elements,
    scalar: bool,
    f: CaseFn,
) -> Result<SuiteEntry> {
    let prepare = |t: &mut Tape<f64>| {
        if let Some(fault) = cfg.fault {
            t.inject_fault(fault);
        }
    };
    let report = if scalar {
        grad_check_with(f, &params, DEFAULT_STEP, elements, prepare)?
    } else {
        vjp_check_with(f, &params, DEFAULT_STEP, elements, cfg.seed, prepare)?
    };
    Ok(SuiteEntry {
        name: name.to_string(),
        kind: EntryKind::Composite,
        cases: 1,
        report,
    })
}

/// Store tensors followed by one input tensor; `f` receives the bound store.
fn store_params(store: &ParamStore<f64>, input: Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut p: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
    p.push(input);
    p
}

fn split_bound(vars: &[Var]) -> (Bound, Var) {
    let (last, rest) = vars.split_last().expect("input present");
    (Bound::from_vars(rest.to_vec()), *last)
}

fn composites(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let block = ConvBlock::new(&mut store, &mut rng, "block", 3, 4);
    let params = store_params(&store, randn(&mut rng, &[2, 3, 5, 5]));
    out.push(composite("conv_block", cfg, params, Elements::All, false, Box::new(move |t, v| {
        let (bound, x) = split_bound(v);
        Ok(block.forward(t, &bound, x, Mode::Train)?.0)
    }))?);

    let mut store = ParamStore::new();
    let att = SpectralAttention::new(&mut store, &mut rng, "att", 6, 3)?;
    let params = store_params(&store, randn(&mut rng, &[2, 6, 4, 4]));
    out.push(composite("spectral_attention", cfg, params, Elements::All, false, Box::new(move |t, v| {
        let (bound, f) = split_bound(v);
        let map = att.map(t, &bound, f)?;
        apply_spectral(t, f, map)
    }))?);

    let mut store = ParamStore::new();
    let att = SpatialAttention::new(&mut store, &mut rng, "att", 4, 3)?;
    let params = store_params(&store, randn(&mut rng, &[2, 4, 5, 5]));
    out.push(composite("spatial_attention", cfg, params, Elements::All, false, Box::new(move |t, v| {
        let (bound, f) = split_bound(v);
        let map = att.map(t, &bound, f)?;
        apply_spatial(t, f, map)
    }))?);

    let mut store = ParamStore::new();
    let head = OutputBranch::new(&mut store, &mut rng, "head", 4, HeadPool::AdaptiveMax(2, 2), 3);
    let params = store_params(&store, randn(&mut rng, &[2, 4, 5, 5]));
    out.push(composite("output_branch", cfg, params, Elements::All, false, Box::new(move |t, v| {
        let (bound, f) = split_bound(v);
        head.forward(t, &bound, f)
    }))?);

    out.push(full_model(cfg, &mut rng)?);
    Ok(out)
}

/// Fused model with `B = 6`, `K = 3`, 11x11 patches and a batch of two; the
/// loss adds both branches' deep-supervision terms to the fused loss so every
/// parameter receives a gradient.
fn full_model(cfg: &SuiteConfig, rng: &mut ChaCha8Rng) -> Result<SuiteEntry> {
    let model = FusedModel::<f64>::new(3, 6, 11, cfg.seed)?;
    let mut params: Vec<Tensor<f64>> = Vec::new();
    for store in [&model.spectral.params, &model.spatial.params, &model.fusion] {
        params.extend(store.iter().map(|p| p.value.clone()));
    }
    params[model.spectral.params.len() + model.spatial.params.len()] = Tensor::from_f64([2], &[0.3, -0.2])?;
    let input = randn(rng, &[2, 6, 11, 11]);
    let labels = vec![1, 3];
    let (n_spe, n_spa) = (model.spectral.params.len(), model.spatial.params.len());
    let f: CaseFn = Box::new(move |t, v| {
        let spe = Bound::from_vars(v[..n_spe].to_vec());
        let spa = Bound::from_vars(v[n_spe..n_spe + n_spa].to_vec());
        let fusion = Bound::from_vars(v[n_spe + n_spa..].to_vec());
        let x = t.leaf(input.clone(), false);
        let out = model.forward(t, &spe, &spa, &fusion, x, Mode::Train)?;
        let fused = fine_tune_loss(t, out.probs, &labels)?;
        let weights = LossWeights::default();
        let a = deep_supervision_loss(t, &out.spectral.heads, &labels, &weights)?;
        let b = deep_supervision_loss(t, &out.spatial.heads, &labels, &weights)?;
        let aux = t.add(a, b)?;
        t.add(fused, aux)
    });
    let elements = Elements::Sampled {
        per_tensor: cfg.model_samples,
        seed: cfg.seed,
    };
    composite("ssatt_model", cfg, params, elements, true, f)
}

/// Runs every primitive op, then the composites.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    let mut entries = OpKind::ALL.iter().map(|&k| op_entry(k, cfg)).collect::<Result<Vec<_>>>()?;
    entries.extend(composites(cfg)?);
    Ok(entries)
}

//! Sub-network assembly for every ablation variant and the fused two-branch
//! model.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    Attention, ConvBlock, HeadPool, Mode, OutputBranch, SpatialAttention, SpectralAttention,
};
use crate::error::{Error, Result};
use crate::ops::activation::sigmoid;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LAYERS: usize = 3;
pub const CHANNELS: [usize; LAYERS] = [32, 64, 128];
pub const SPECTRAL_KERNELS: [usize; LAYERS] = [3, 5, 7];
pub const SPATIAL_KERNELS: [usize; LAYERS] = [7, 5, 3];
pub const SPATIAL_POOLS: [(usize, usize); LAYERS] = [(4, 4), (2, 2), (1, 1)];
pub const DEFAULT_PATCH: usize = 11;
pub const MIN_PATCH: usize = 5;

const BACKBONE_STREAM: u64 = 0;
const ATTENTION_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Plain,
    Spectral,
    Spatial,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Plain => "plain",
            BranchKind::Spectral => "speatt",
            BranchKind::Spatial => "spaatt",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            BranchKind::Plain => 0,
            BranchKind::Spectral => 1,
            BranchKind::Spatial => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BranchKind::Plain),
            1 => Some(BranchKind::Spectral),
            2 => Some(BranchKind::Spatial),
            _ => None,
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which of the three conv layers (1-based) carry an attention module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LayerMask(u8);

impl LayerMask {
    pub const NONE: LayerMask = LayerMask(0);
    pub const ALL: LayerMask = LayerMask(0b111);

    pub fn from_layers(layers: &[usize]) -> Result<Self> {
        let mut bits = 0u8;
        for &l in layers {
            if !(1..=LAYERS).contains(&l) {
                return Err(Error::InvalidArgument(format!(
                    "attended layer {l} outside 1..={LAYERS}"
                )));
            }
            bits |= 1 << (l - 1);
        }
        Ok(LayerMask(bits))
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & !Self::ALL.0 != 0 {
            return Err(Error::InvalidArgument(format!("layer mask {bits:#b} has bits beyond layer {LAYERS}")));
        }
        Ok(LayerMask(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, layer: usize) -> bool {
        (1..=LAYERS).contains(&layer) && self.0 & (1 << (layer - 1)) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn layers(self) -> Vec<usize> {
        (1..=LAYERS).filter(|&l| self.contains(l)).collect()
    }

    /// The seven non-empty subsets in ablation-table order.
    pub fn non_empty() -> Vec<LayerMask> {
        [0b001, 0b010, 0b100, 0b011, 0b101, 0b110, 0b111].into_iter().map(LayerMask).collect()
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.layers().iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LayerMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(LayerMask::NONE);
        }
        let layers = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad layer '{p}' in mask '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        LayerMask::from_layers(&layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub kind: BranchKind,
    pub layers: LayerMask,
    pub classes: usize,
    pub bands: usize,
    pub patch: usize,
}

impl BranchSpec {
    pub fn new(kind: BranchKind, layers: LayerMask, classes: usize, bands: usize, patch: usize) -> Result<Self> {
        let spec = Self {
            kind,
            layers,
            classes,
            bands,
            patch,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == BranchKind::Plain && !self.layers.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "plain branch admits no attended layers, got {}",
                self.layers
            )));
        }
        if self.kind != BranchKind::Plain && self.layers.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} branch needs at least one attended layer",
                self.kind
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.bands == 0 {
            return Err(Error::InvalidArgument("band count must be positive".into()));
        }
        if self.patch.is_multiple_of(2) || self.patch < MIN_PATCH {
            return Err(Error::InvalidArgument(format!(
                "patch size must be odd and at least {MIN_PATCH}, got {}",
                self.patch
            )));
        }
        Ok(())
    }

    /// Spatial extent entering each conv layer.
    pub fn layer_extents(&self) -> [usize; LAYERS] {
        [self.patch, self.patch / 2, self.patch / 4]
    }

    /// Layers producing a score vector, in order; layer 3 always last.
    pub fn head_layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.layers.layers().into_iter().filter(|&l| l < LAYERS).collect();
        layers.push(LAYERS);
        layers
    }

    pub fn head_pool(&self, layer: usize) -> HeadPool {
        match self.kind {
            BranchKind::Spatial => {
                let (h, w) = SPATIAL_POOLS[layer - 1];
                HeadPool::AdaptiveMax(h, w)
            }
            BranchKind::Plain | BranchKind::Spectral => HeadPool::GlobalMax,
        }
    }
}

/// Shapes observed during one forward pass, without the batch axis.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    /// Block outputs and pooled maps in execution order.
    pub features: Vec<Vec<usize>>,
    /// `(layer, map shape)` for each attention module.
    pub attention_maps: Vec<(usize, Vec<usize>)>,
    /// `(layer, pooling)` for each output head.
    pub head_pools: Vec<(usize, HeadPool)>,
}

#[derive(Clone, Debug)]
pub struct BranchOutput<T> {
    /// `(layer, [N, K] scores)` in layer order, layer 3 last.
    pub heads: Vec<(usize, Var)>,
    /// Per-block batch statistics (train mode only).
    pub stats: Vec<BatchStats<T>>,
    pub trace: ShapeTrace,
}

impl<T> BranchOutput<T> {
    pub fn final_scores(&self) -> Var {
        self.heads.last().expect("final head always present").1
    }
}

/// One branch: three conv blocks, optional attention per layer, and an
/// output head per attended layer plus the final layer-3 head.
#[derive(Clone, Debug)]
pub struct SubNetwork<T> {
    pub spec: BranchSpec,
    pub params: ParamStore<T>,
    pub blocks: Vec<ConvBlock<T>>,
    pub attention: Vec<Option<Attention>>,
    pub heads: Vec<(usize, OutputBranch)>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl<T: Scalar> SubNetwork<T> {
    /// Backbone, attention and head weights come from separate seeded streams,
    /// so every variant built from one seed shares its backbone initialization.
    pub fn new(spec: BranchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut backbone_rng = stream_rng(seed, BACKBONE_STREAM);
        let mut attention_rng = stream_rng(seed, ATTENTION_STREAM);
        let mut head_rng = stream_rng(seed, HEAD_STREAM);

        let mut blocks = Vec::with_capacity(LAYERS);
        let mut in_ch = spec.bands;
        for (i, &out_ch) in CHANNELS.iter().enumerate() {
            blocks.push(ConvBlock::new(&mut params, &mut backbone_rng, &format!("block{}", i + 1), in_ch, out_ch));
            in_ch = out_ch;
        }

        let mut attention = Vec::with_capacity(LAYERS);
        for layer in 1..=LAYERS {
            let c = CHANNELS[layer - 1];
            let module = if !spec.layers.contains(layer) {
                None
            } else {
                let prefix = format!("att{layer}");
                Some(match spec.kind {
                    BranchKind::Spectral => Attention::Spectral(SpectralAttention::new(
                        &mut params,
                        &mut attention_rng,
                        &prefix,
                        c,
                        SPECTRAL_KERNELS[layer - 1],
                    )?),
                    BranchKind::Spatial => Attention::Spatial(SpatialAttention::new(
                        &mut params,
                        &mut attention_rng,
                        &prefix,
                        c,
                        SPATIAL_KERNELS[layer - 1],
                    )?),
                    BranchKind::Plain => unreachable!("validated: plain has no attended layers"),
                })
            };
            attention.push(module);
        }

        let extents = spec.layer_extents();
        let mut heads = Vec::new();
        for layer in spec.head_layers() {
            let pool = spec.head_pool(layer);
            if let HeadPool::AdaptiveMax(h, w) = pool {
                let e = extents[layer - 1];
                if h > e || w > e {
                    return Err(Error::InvalidArgument(format!(
                        "head pool {h}x{w} exceeds {e}x{e} features at layer {layer}"
                    )));
                }
            }
            let head = OutputBranch::new(
                &mut params,
                &mut head_rng,
                &format!("head{layer}"),
                CHANNELS[layer - 1],
                pool,
                spec.classes,
            );
            heads.push((layer, head));
        }

        Ok(Self {
            spec,
            params,
            blocks,
            attention,
            heads,
        })
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.spec.bands, self.spec.patch, self.spec.patch]
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.input_shape(0)[1..] {
            return Err(Error::ShapeMismatch {
                op: "branch input",
                lhs: shape.to_vec(),
                rhs: self.input_shape(shape.first().copied().unwrap_or(0)).to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, mode: Mode) -> Result<BranchOutput<T>> {
        self.check_input(tape, x)?;
        let mut trace = ShapeTrace::default();
        let mut stats = Vec::new();
        let mut heads = Vec::new();
        let mut head_iter = self.heads.iter().peekable();
        let mut h = x;
        for layer in 1..=LAYERS {
            let (mut f, s) = self.blocks[layer - 1].forward(tape, bound, h, mode)?;
            stats.extend(s);
            trace.features.push(tape.shape(f)[1..].to_vec());
            if let Some(att) = &self.attention[layer - 1] {
                let map = att.map(tape, bound, f)?;
                trace.attention_maps.push((layer, tape.shape(map)[1..].to_vec()));
                f = att.apply(tape, f, map)?;
            }
            if let Some((_, head)) = head_iter.next_if(|(l, _)| *l == layer) {
                heads.push((layer, head.forward(tape, bound, f)?));
                trace.head_pools.push((layer, head.pool));
            }
            h = if layer < LAYERS {
                let pooled = tape.max_pool2d(f)?;
                trace.features.push(tape.shape(pooled)[1..].to_vec());
                pooled
            } else {
                f
            };
        }
        Ok(BranchOutput { heads, stats, trace })
    }

    /// Folds one training step's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} sets of batch statistics, got {}",
                self.blocks.len(),
                stats.len()
            )));
        }
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.running.update(s)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SubNetwork<U> {
        SubNetwork {
            spec: self.spec,
            params: self.params.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    weight: b.weight,
                    gamma: b.gamma,
                    beta: b.beta,
                    running: b.running.cast(),
                    in_channels: b.in_channels,
                    out_channels: b.out_channels,
                })
                .collect(),
            attention: self.attention.clone(),
            heads: self.heads.clone(),
        }
    }
}

/// The two free fusion logits; the spectral weight is their two-way softmax.
pub fn fusion_weights<T: Scalar>(logits: &[T]) -> (T, T) {
    let alpha = sigmoid(logits[0] - logits[1]);
    (alpha, T::one() - alpha)
}

#[derive(Clone, Debug)]
pub struct FusedOutput<T> {
    /// `[N, K]` mixed probabilities.
    pub probs: Var,
    /// One-element spectral weight on the tape.
    pub alpha: Var,
    pub spectral: BranchOutput<T>,
    pub spatial: BranchOutput<T>,
}

/// Spectral and spatial branches mixed by learned convex weights.
#[derive(Clone, Debug)]
pub struct FusedModel<T> {
    pub spectral: SubNetwork<T>,
    pub spatial: SubNetwork<T>,
    /// Holds a single `[2]` parameter: (spectral logit, spatial logit).
    pub fusion: ParamStore<T>,
    pub logits: ParamId,
}

impl<T: Scalar> FusedModel<T> {
    /// Fully attended spectral and spatial branches with logits (0, 0).
    pub fn new(classes: usize, bands: usize, patch: usize, seed: u64) -> Result<Self> {
        let spe = SubNetwork::new(BranchSpec::new(BranchKind::Spectral, LayerMask::ALL, classes, bands, patch)?, seed)?;
        let spa = SubNetwork::new(BranchSpec::new(BranchKind::Spatial, LayerMask::ALL, classes, bands, patch)?, seed)?;
        Self::from_branches(spe, spa)
    }

    pub fn from_branches(spectral: SubNetwork<T>, spatial: SubNetwork<T>) -> Result<Self> {
        let (a, b) = (&spectral.spec, &spatial.spec);
        if (a.classes, a.bands, a.patch) != (b.classes, b.bands, b.patch) {
            return Err(Error::ShapeMismatch {
                op: "fused branches (classes, bands, patch)",
                lhs: vec![a.classes, a.bands, a.patch],
                rhs: vec![b.classes, b.bands, b.patch],
            });
        }
        let mut fusion = ParamStore::new();
        let logits = fusion.add("fusion.logits", Tensor::zeros([2]));
        Ok(Self {
            spectral,
            spatial,
            fusion,
            logits,
        })
    }

    /// `(alpha, beta)` with `beta = 1 - alpha`.
    pub fn weights(&self) -> (T, T) {
        fusion_weights(self.fusion.get(self.logits).data())
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        spe: &Bound,
        spa: &Bound,
        fusion: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<FusedOutput<T>> {
        let spectral = self.spectral.forward(tape, spe, x, mode)?;
        let spatial = self.spatial.forward(tape, spa, x, mode)?;
        let p_spe = tape.softmax(spectral.final_scores())?;
        let p_spa = tape.softmax(spatial.final_scores())?;
        let alpha = fusion_alpha(tape, fusion.get(self.logits))?;
        let probs = tape.mix(alpha, p_spe, p_spa)?;
        Ok(FusedOutput {
            probs,
            alpha,
            spectral,
            spatial,
        })
    }

    pub fn cast<U: Scalar>(&self) -> FusedModel<U> {
        FusedModel {
            spectral: self.spectral.cast(),
            spatial: self.spatial.cast(),
            fusion: self.fusion.cast(),
            logits: self.logits,
        }
    }
}

/// `sigmoid(logits[0] - logits[1])` as a one-element tape value.
pub fn fusion_alpha<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let row = tape.reshape(logits, [1, 2])?;
    let diff_w = tape.leaf(Tensor::new([1, 2], vec![T::one(), -T::one()])?, false);
    let zero = tape.leaf(Tensor::zeros([1]), false);
    let diff = tape.dense(row, diff_w, zero)?;
    let alpha = tape.sigmoid(diff);
    tape.reshape(alpha, [1])
}

/// A single branch (Plain, SpeAtt, SpaAtt) or the fused two-branch model.
#[derive(Clone, Debug)]
pub enum Model<T> {
    Branch(SubNetwork<T>),
    Fused(FusedModel<T>),
}

pub const EVAL_BATCH: usize = 256;

impl<T: Scalar> Model<T> {
    pub fn classes(&self) -> usize {
        self.spec().classes
    }

    pub fn bands(&self) -> usize {
        self.spec().bands
    }

    pub fn patch(&self) -> usize {
        self.spec().patch
    }

    fn spec(&self) -> &BranchSpec {
        match self {
            Model::Branch(b) => &b.spec,
            Model::Fused(f) => &f.spectral.spec,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Model::Branch(b) => b.spec.kind.name(),
            Model::Fused(_) => "ssatt",
        }
    }

    /// Eval-mode class probabilities for a `[N, B, P, P]` batch.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), false);
        let probs = match self {
            Model::Branch(net) => {
                let bound = net.params.bind_with(&mut tape, false);
                let out = net.forward(&mut tape, &bound, input, Mode::Eval)?;
                tape.softmax(out.final_scores())?
            }
            Model::Fused(m) => {
                let spe = m.spectral.params.bind_with(&mut tape, false);
                let spa = m.spatial.params.bind_with(&mut tape, false);
                let fusion = m.fusion.bind_with(&mut tape, false);
                m.forward(&mut tape, &spe, &spa, &fusion, input, Mode::Eval)?.probs
            }
        };
        Ok(tape.value(probs).clone())
    }

    /// 1-based argmax of the eval-mode probabilities.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.probabilities(x)?;
        Ok(argmax_rows(probs.data(), self.classes()))
    }

    /// Predicts `patches` (each `[B, P, P]`, flattened) in chunks of `batch`.
    pub fn predict_patches(&self, patches: &[Vec<T>], batch: usize) -> Result<Vec<usize>> {
        let (b, p) = (self.bands(), self.patch());
        let per = b * p * p;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(batch.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * per);
            for patch in chunk {
                if patch.len() != per {
                    return Err(Error::ShapeMismatch {
                        op: "predict patch",
                        lhs: vec![patch.len()],
                        rhs: vec![b, p, p],
                    });
                }
                data.extend_from_slice(patch);
            }
            out.extend(self.predict(&Tensor::new([chunk.len(), b, p, p], data)?)?);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        match self {
            Model::Branch(b) => Model::Branch(b.cast()),
            Model::Fused(f) => Model::Fused(f.cast()),
        }
    }
}

/// 1-based index of each row's maximum; ties go to the lower index.
pub fn argmax_rows<T: Scalar>(probs: &[T], classes: usize) -> Vec<usize> {
    probs
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best + 1
        })
        .collect()
}

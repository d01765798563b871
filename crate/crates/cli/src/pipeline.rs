//! Training and prediction shared by the subcommands.

use std::ops::Range;

use ssatt::data::{window, Dataset, PatchSet, Pixel, SceneVolume};
use ssatt::network::{BranchKind, BranchSpec, FusedModel, LayerMask, Model, SubNetwork, EVAL_BATCH};
use ssatt::training::{finetune, pretrain, EpochLog, LossWeights, TrainConfig};
use ssatt::{Error, Scalar, Tensor};

/// Model variants selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Variant {
    Plain,
    Speatt,
    Spaatt,
    Ssatt,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Speatt => "speatt",
            Variant::Spaatt => "spaatt",
            Variant::Ssatt => "ssatt",
        }
    }

    /// Attended layers for this variant: none for plain, all three otherwise
    /// unless `requested` says differently.
    pub fn layers(self, requested: Option<LayerMask>) -> ssatt::Result<LayerMask> {
        match (self, requested) {
            (Variant::Plain, None) => Ok(LayerMask::NONE),
            (Variant::Plain, Some(m)) if m.is_empty() => Ok(m),
            (Variant::Plain, Some(m)) => Err(Error::InvalidArgument(format!(
                "plain admits no attended layers, got --layers {m}"
            ))),
            (_, None) => Ok(LayerMask::ALL),
            (v, Some(m)) if m.is_empty() => Err(Error::InvalidArgument(format!(
                "{} needs at least one attended layer",
                v.name()
            ))),
            (_, Some(m)) => Ok(m),
        }
    }

    /// Validates the branch shapes this variant would build.
    pub fn check(self, layers: LayerMask, classes: usize, bands: usize, patch: usize) -> ssatt::Result<()> {
        let kinds: &[BranchKind] = match self {
            Variant::Plain => &[BranchKind::Plain],
            Variant::Speatt => &[BranchKind::Spectral],
            Variant::Spaatt => &[BranchKind::Spatial],
            Variant::Ssatt => &[BranchKind::Spectral, BranchKind::Spatial],
        };
        for &kind in kinds {
            BranchSpec::new(kind, layers, classes, bands, patch)?;
        }
        Ok(())
    }
}

/// Standardizes with training-pixel statistics and extracts both splits.
pub fn prepare(data: &Dataset, patch: usize) -> ssatt::Result<(PatchSet, PatchSet)> {
    let z = data.standardized()?;
    let train = PatchSet::extract(&z.scene, &z.labels, &z.split.train, patch)?;
    let test = PatchSet::extract(&z.scene, &z.labels, &z.split.test, patch)?;
    Ok((train, test))
}

fn branch<T: Scalar>(kind: BranchKind, layers: LayerMask, classes: usize, data: &PatchSet, seed: u64) -> ssatt::Result<SubNetwork<T>> {
    SubNetwork::new(BranchSpec::new(kind, layers, classes, data.bands, data.patch)?, seed)
}

/// Pretrains one branch with deep supervision.
pub fn train_branch<T: Scalar>(
    kind: BranchKind,
    layers: LayerMask,
    classes: usize,
    data: &PatchSet,
    cfg: &TrainConfig,
    weights: &LossWeights,
    log: &mut dyn FnMut(&EpochLog),
) -> ssatt::Result<SubNetwork<T>> {
    let mut net = branch(kind, layers, classes, data, cfg.seed)?;
    pretrain(&mut net, data, cfg, weights, &mut |l, _| {
        log(l);
        Ok(())
    })?;
    Ok(net)
}

/// Fuses two pretrained branches and fine-tunes the result.
pub fn fuse<T: Scalar>(
    spectral: SubNetwork<T>,
    spatial: SubNetwork<T>,
    data: &PatchSet,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> ssatt::Result<FusedModel<T>> {
    let mut model = FusedModel::from_branches(spectral, spatial)?;
    finetune(&mut model, data, cfg, &mut |l, _| {
        log(l);
        Ok(())
    })?;
    Ok(model)
}

/// Full two-step procedure for `ssatt`, a single pretraining run otherwise.
pub fn train_variant<T: Scalar>(
    variant: Variant,
    layers: LayerMask,
    classes: usize,
    data: &PatchSet,
    cfg: &TrainConfig,
    weights: &LossWeights,
    log: &mut dyn FnMut(&EpochLog),
) -> ssatt::Result<Model<T>> {
    let kind = match variant {
        Variant::Plain => BranchKind::Plain,
        Variant::Speatt => BranchKind::Spectral,
        Variant::Spaatt => BranchKind::Spatial,
        Variant::Ssatt => {
            let spe = train_branch(BranchKind::Spectral, layers, classes, data, cfg, weights, log)?;
            let spa = train_branch(BranchKind::Spatial, layers, classes, data, cfg, weights, log)?;
            return Ok(Model::Fused(fuse(spe, spa, data, cfg, log)?));
        }
    };
    Ok(Model::Branch(train_branch(kind, layers, classes, data, cfg, weights, log)?))
}

/// Predicts `n` samples in `EVAL_BATCH` chunks, handing contiguous runs of
/// whole chunks to up to `threads` workers. Chunk boundaries do not depend
/// on `threads`, so neither do the predictions.
fn predict_chunks<T, F>(model: &Model<T>, n: usize, threads: usize, batch: F) -> ssatt::Result<Vec<usize>>
where
    T: Scalar,
    F: Fn(Range<usize>) -> ssatt::Result<Tensor<T>> + Sync,
{
    let chunks: Vec<Range<usize>> = (0..n).step_by(EVAL_BATCH).map(|s| s..(s + EVAL_BATCH).min(n)).collect();
    let run = |group: &[Range<usize>]| -> ssatt::Result<Vec<usize>> {
        let mut out = Vec::new();
        for r in group {
            out.extend(model.predict(&batch(r.clone())?)?);
        }
        Ok(out)
    };
    let workers = threads.clamp(1, chunks.len().max(1));
    if workers == 1 {
        return run(&chunks);
    }
    let per = chunks.len().div_ceil(workers);
    let parts: Vec<ssatt::Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks.chunks(per).map(|g| s.spawn(move || run(g))).collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn predict_set<T: Scalar>(model: &Model<T>, set: &PatchSet, threads: usize) -> ssatt::Result<Vec<usize>> {
    check_input(model, set.bands, set.patch)?;
    predict_chunks(model, set.len(), threads, |r| Ok(set.gather(&r.collect::<Vec<_>>()).0))
}

/// Predicts arbitrary pixels of an already standardized scene.
pub fn predict_pixels<T: Scalar>(
    model: &Model<T>,
    scene: &SceneVolume,
    pixels: &[Pixel],
    threads: usize,
) -> ssatt::Result<Vec<usize>> {
    let (b, p) = (model.bands(), model.patch());
    check_input(model, scene.bands, p)?;
    predict_chunks(model, pixels.len(), threads, |r| {
        let mut data = Vec::with_capacity(r.len() * b * p * p);
        for &px in &pixels[r.clone()] {
            data.extend(window(scene, px, p)?.into_iter().map(|v| T::of(v as f64)));
        }
        Tensor::new([r.len(), b, p, p], data)
    })
}

fn check_input<T: Scalar>(model: &Model<T>, bands: usize, patch: usize) -> ssatt::Result<()> {
    if (bands, patch) != (model.bands(), model.patch()) {
        return Err(Error::ShapeMismatch {
            op: "model input (bands, patch)",
            lhs: vec![model.bands(), model.patch()],
            rhs: vec![bands, patch],
        });
    }
    Ok(())
}

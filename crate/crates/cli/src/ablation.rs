//! The sixteen-variant attention ablation.
//!
//! For every seed: Plain, SpeAtt and SpaAtt with each of the seven non-empty
//! sets of attended layers, and SSAtt. SSAtt fine-tunes copies of that seed's
//! fully attended SpeAtt and SpaAtt networks, which are exactly the branches
//! its own pretraining step would produce.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ssatt::data::PatchSet;
use ssatt::metrics::ConfusionMatrix;
use ssatt::network::{BranchKind, LayerMask, Model, SubNetwork};
use ssatt::training::{LossWeights, TrainConfig};
use ssatt::Scalar;

use crate::pipeline::{fuse, predict_set, train_branch};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationModel {
    Plain,
    SpeAtt,
    SpaAtt,
    SsAtt,
}

impl AblationModel {
    pub fn name(self) -> &'static str {
        match self {
            AblationModel::Plain => "Plain",
            AblationModel::SpeAtt => "SpeAtt",
            AblationModel::SpaAtt => "SpaAtt",
            AblationModel::SsAtt => "SSAtt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub model: AblationModel,
    pub layers: LayerMask,
    /// Test OA per seed, in seed order.
    pub oa: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.oa.iter().sum::<f64>() / self.oa.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, model: AblationModel, layers: LayerMask) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == model && r.layers == layers)
    }

    /// Mean OA in percent for a row.
    pub fn mean_percent(&self, model: AblationModel, layers: LayerMask) -> Option<f64> {
        self.row(model, layers).map(|r| 100.0 * r.mean())
    }

    pub fn to_text(&self) -> String {
        let mark = |r: &AblationRow, l: usize| if r.layers.contains(l) { "✓" } else { "" };
        let mut out = format!("{:<8} {:^6} {:^6} {:^6} {:>7}\n", "Model", "First", "Second", "Third", "OA");
        for r in &self.rows {
            writeln!(
                out,
                "{:<8} {:^6} {:^6} {:^6} {:>7.2}",
                r.model.name(),
                mark(r, 1),
                mark(r, 2),
                mark(r, 3),
                100.0 * r.mean()
            )
            .expect("write to string");
        }
        out
    }

    /// One line per row: attended-layer flags, mean OA and per-seed OA.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,first,second,third,oa");
        for s in &self.seeds {
            write!(out, ",oa_seed{s}").expect("write to string");
        }
        out.push('\n');
        for r in &self.rows {
            let flag = |l| u8::from(r.layers.contains(l));
            write!(out, "{},{},{},{},{:.6}", r.model.name(), flag(1), flag(2), flag(3), r.mean()).expect("write to string");
            for v in &r.oa {
                write!(out, ",{v:.6}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

/// Row order of the table: Plain, SpeAtt subsets, SpaAtt subsets, SSAtt.
pub fn ablation_rows() -> Vec<(AblationModel, LayerMask)> {
    let mut rows = vec![(AblationModel::Plain, LayerMask::NONE)];
    rows.extend(LayerMask::non_empty().into_iter().map(|m| (AblationModel::SpeAtt, m)));
    rows.extend(LayerMask::non_empty().into_iter().map(|m| (AblationModel::SpaAtt, m)));
    rows.push((AblationModel::SsAtt, LayerMask::ALL));
    rows
}

fn test_oa<T: Scalar>(model: &Model<T>, test: &PatchSet, classes: usize) -> ssatt::Result<f64> {
    let preds = predict_set(model, test, 1)?;
    ConfusionMatrix::from_predictions(classes, &preds, &test.labels)?.overall_accuracy()
}

/// Runs `jobs` on up to `threads` workers; results come back in job order.
fn run_jobs<J: Sync, R: Send>(
    jobs: &[J],
    threads: usize,
    work: impl Fn(&J) -> ssatt::Result<R> + Sync,
) -> ssatt::Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<ssatt::Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(job) = jobs.get(i) else { break };
        let r = work(job);
        slots.lock().expect("job results lock")[i] = Some(r);
    };
    let workers = threads.clamp(1, jobs.len().max(1));
    if workers == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(worker);
            }
        });
    }
    slots
        .into_inner()
        .expect("job results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Fully attended spectral and spatial branches of one seed.
type BranchPair<T> = (Option<SubNetwork<T>>, Option<SubNetwork<T>>);

/// Trains and scores every variant for every seed. `cfg.seed` is replaced
/// by each entry of `seeds`. `log` receives one line per finished model.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<T: Scalar>(
    train: &PatchSet,
    test: &PatchSet,
    classes: usize,
    cfg: &TrainConfig,
    weights: &LossWeights,
    seeds: &[u64],
    threads: usize,
    log: &(dyn Fn(&str) + Sync),
) -> ssatt::Result<AblationTable> {
    cfg.validate()?;
    let rows = ablation_rows();
    let branch_rows: Vec<(usize, AblationModel, LayerMask)> = rows
        .iter()
        .enumerate()
        .filter(|(_, (m, _))| *m != AblationModel::SsAtt)
        .map(|(i, &(m, l))| (i, m, l))
        .collect();
    let jobs: Vec<(u64, usize, AblationModel, LayerMask)> = seeds
        .iter()
        .flat_map(|&s| branch_rows.iter().map(move |&(i, m, l)| (s, i, m, l)))
        .collect();

    let trained = run_jobs(&jobs, threads, |&(seed, _, model, layers)| {
        let kind = match model {
            AblationModel::Plain => BranchKind::Plain,
            AblationModel::SpeAtt => BranchKind::Spectral,
            _ => BranchKind::Spatial,
        };
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let net: SubNetwork<T> = train_branch(kind, layers, classes, train, &cfg, weights, &mut |_| {})?;
        let model_net = Model::Branch(net);
        let oa = test_oa(&model_net, test, classes)?;
        log(&format!("seed={seed} model={} layers={layers} oa={oa:.6}", model.name()));
        let keep = layers == LayerMask::ALL && kind != BranchKind::Plain;
        Ok((oa, keep.then_some(model_net)))
    })?;

    let mut table = AblationTable {
        seeds: seeds.to_vec(),
        rows: rows.iter().map(|&(model, layers)| AblationRow { model, layers, oa: Vec::new() }).collect(),
    };
    let mut full: Vec<BranchPair<T>> = seeds.iter().map(|_| (None, None)).collect();
    for (k, (&(_, row, model, _), (oa, kept))) in jobs.iter().zip(trained).enumerate() {
        table.rows[row].oa.push(oa);
        if let Some(Model::Branch(net)) = kept {
            let pair = &mut full[k / branch_rows.len()];
            match model {
                AblationModel::SpeAtt => pair.0 = Some(net),
                _ => pair.1 = Some(net),
            }
        }
    }

    let fused_jobs: Vec<(u64, SubNetwork<T>, SubNetwork<T>)> = seeds
        .iter()
        .zip(full)
        .map(|(&s, (spe, spa))| (s, spe.expect("fully attended SpeAtt"), spa.expect("fully attended SpaAtt")))
        .collect();
    let fused = run_jobs(&fused_jobs, threads, |(seed, spe, spa)| {
        let cfg = TrainConfig { seed: *seed, ..cfg.clone() };
        let model = Model::Fused(fuse(spe.clone(), spa.clone(), train, &cfg, &mut |_| {})?);
        let oa = test_oa(&model, test, classes)?;
        log(&format!("seed={seed} model=SSAtt layers={} oa={oa:.6}", LayerMask::ALL));
        Ok(oa)
    })?;
    let last = table.rows.len() - 1;
    table.rows[last].oa = fused;
    Ok(table)
}

//! Subcommand bodies. Each validates every input before writing anything.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ssatt::checkpoint;
use ssatt::data::{
    load_labels, load_scene, load_split, nearest_class_mean, save_labels, save_scene, save_split, standardize,
    synth_generate, Dataset, Pixel, SplitIndex,
};
use ssatt::gradcheck::suite::{run_suite, EntryKind, SuiteConfig, TOLERANCE};
use ssatt::metrics::ConfusionMatrix;
use ssatt::network::{LayerMask, Model};
use ssatt::training::{EpochLog, Precision};
use ssatt::{Error, OpKind};

use crate::ablation::run_ablation;
use crate::args::{AblationArgs, Cli, Command, DataArgs, EvalArgs, GradcheckArgs, MapArgs, SplitPart, SynthArgs, TrainArgs};
use crate::failure::{CliResult, Classify, Failure};
use crate::palette::encode_ppm;
use crate::pipeline::{predict_pixels, predict_set, prepare, train_variant, Variant};

pub fn run(cli: Cli) -> CliResult<()> {
    let threads = cli.threads as usize;
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a, threads),
        Command::Eval(a) => eval(&a, threads),
        Command::Map(a) => map(&a, threads),
        Command::Ablation(a) => ablation(&a, threads),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

/// Creates `dir` if needed and checks that files can be written into it.
fn prepare_dir(dir: &Path) -> CliResult<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(Failure::invalid(format!("{} exists and is not a directory", dir.display())));
    }
    fs::create_dir_all(dir).invalid(&format!("cannot create output directory {}", dir.display()))?;
    let probe = dir.join(".ssatt-write-probe");
    fs::write(&probe, b"").invalid(&format!("output directory {} is not writable", dir.display()))?;
    fs::remove_file(&probe).invalid(&format!("output directory {} is not writable", dir.display()))?;
    Ok(())
}

/// Checks that the parent of an output file exists and is a directory.
fn check_file_target(path: &Path) -> CliResult<()> {
    if path.is_dir() {
        return Err(Failure::invalid(format!("{} is a directory", path.display())));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Failure::invalid(format!("directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).runtime(&format!("cannot write {}", path.display()))
}

fn load_data(d: &DataArgs) -> CliResult<Dataset> {
    Dataset::load(&d.scene, &d.labels, &d.split).invalid("cannot load dataset")
}

fn synth(a: &SynthArgs) -> CliResult<()> {
    let spec = a.spec();
    spec.validate().invalid("bad synthetic scene parameters")?;
    let data = synth_generate(&spec).invalid("cannot generate scene")?;
    let (truth, preds) = nearest_class_mean(&data).runtime("nearest-class-mean baseline")?;
    let oa = ConfusionMatrix::from_predictions(spec.classes, &preds, &truth)
        .and_then(|cm| cm.overall_accuracy())
        .runtime("nearest-class-mean baseline")?;
    prepare_dir(&a.out)?;
    save_scene(&data.scene, &a.out.join("scene.hsi")).runtime("cannot write scene")?;
    save_labels(&data.labels, &a.out.join("labels.lbl")).runtime("cannot write labels")?;
    save_split(&data.split, &a.out.join("split.txt")).runtime("cannot write split")?;
    println!(
        "# synth seed={} size={}x{}x{} classes={} style={} noise={} illumination={}",
        spec.seed,
        spec.height,
        spec.width,
        spec.bands,
        spec.classes,
        spec.style.name(),
        spec.noise_std,
        spec.illumination
    );
    println!(
        "labeled={} train={} test={}",
        data.labels.labeled_pixels().len(),
        data.split.train.len(),
        data.split.test.len()
    );
    println!("nearest-class-mean OA={oa:.4}");
    Ok(())
}

fn train(a: &TrainArgs, threads: usize) -> CliResult<()> {
    let data = load_data(&a.data)?;
    let layers = a.variant.layers(a.layers).invalid("bad attended layers")?;
    let cfg = a.opts.config(a.seed);
    cfg.validate().invalid("bad training configuration")?;
    let weights = a.opts.weights().invalid("bad loss weights")?;
    let classes = data.classes();
    a.variant
        .check(layers, classes, data.scene.bands, cfg.patch_size)
        .invalid("bad model shape")?;
    let (train_set, _) = prepare(&data, cfg.patch_size).invalid("cannot extract patches")?;
    prepare_dir(&a.out)?;

    let mut log = format!(
        "# ssatt train variant={} layers={} seed={} {} scene={} train_pixels={}\n",
        a.variant.name(),
        layers,
        a.seed,
        a.opts.header(),
        a.data.scene.display(),
        train_set.len()
    );
    print!("{log}");
    let mut on_epoch = |l: &EpochLog| {
        let line = l.line();
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    };
    let model: Model<f32> = match cfg.precision {
        Precision::F32 => train_variant(a.variant, layers, classes, &train_set, &cfg, &weights, &mut on_epoch),
        Precision::F64 => {
            train_variant::<f64>(a.variant, layers, classes, &train_set, &cfg, &weights, &mut on_epoch).map(|m| m.cast())
        }
    }
    .runtime("training failed")?;

    let preds = predict_set(&model, &train_set, threads).runtime("train-set prediction")?;
    let report = ConfusionMatrix::from_predictions(classes, &preds, &train_set.labels)
        .and_then(|cm| cm.report())
        .runtime("train-set metrics")?;
    if let Model::Fused(m) = &model {
        let (alpha, beta) = m.weights();
        let line = format!("fusion alpha={alpha:.6} beta={beta:.6}");
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    }
    checkpoint::save(&model, &a.out.join("model.ssac")).runtime("cannot write checkpoint")?;
    write(&a.out.join("train.log"), &log)?;
    write(&a.out.join("train_metrics.txt"), report.to_text())?;
    write(&a.out.join("train_metrics.csv"), report.to_csv())?;
    println!("train-set metrics:\n{}", report.to_text());
    Ok(())
}

fn load_model(path: &Path) -> CliResult<Model<f32>> {
    checkpoint::load(path).invalid("cannot load checkpoint")
}

fn check_bands(model: &Model<f32>, bands: usize) -> CliResult<()> {
    if model.bands() != bands {
        return Err(Failure::invalid(format!(
            "checkpoint expects {} bands but the scene has {bands}",
            model.bands()
        )));
    }
    Ok(())
}

fn eval(a: &EvalArgs, threads: usize) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    check_bands(&model, data.scene.bands)?;
    if data.classes() > model.classes() {
        return Err(Failure::invalid(format!(
            "label map has class {} but the checkpoint predicts {} classes",
            data.classes(),
            model.classes()
        )));
    }
    let (train_set, test_set) = prepare(&data, model.patch()).invalid("cannot extract patches")?;
    let (set, pixels) = match a.on {
        SplitPart::Train => (train_set, &data.split.train),
        SplitPart::Test => (test_set, &data.split.test),
    };
    if set.is_empty() {
        return Err(Failure::invalid("the selected split is empty"));
    }
    if let Some(dir) = &a.out {
        prepare_dir(dir)?;
    }
    let preds = predict_set(&model, &set, threads).runtime("prediction")?;
    let report = ConfusionMatrix::from_predictions(model.classes(), &preds, &set.labels)
        .and_then(|cm| cm.report())
        .runtime("metrics")?;
    println!(
        "# ssatt eval variant={} checkpoint={} on={}",
        model.variant_name(),
        a.checkpoint.display(),
        if a.on == SplitPart::Train { "train" } else { "test" }
    );
    print!("{}", report.to_text());
    if let Some(dir) = &a.out {
        let mut dump = String::from("row,col,truth,predicted\n");
        for ((r, c), (t, p)) in pixels.iter().zip(set.labels.iter().zip(&preds)) {
            writeln!(dump, "{r},{c},{t},{p}").expect("write to string");
        }
        write(&dir.join("report.txt"), report.to_text())?;
        write(&dir.join("report.csv"), report.to_csv())?;
        write(&dir.join("predictions.csv"), dump)?;
    }
    Ok(())
}

fn map(a: &MapArgs, threads: usize) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let scene = load_scene(&a.scene).invalid("cannot load scene")?;
    check_bands(&model, scene.bands)?;
    let split: SplitIndex = load_split(&a.split).invalid("cannot load split")?;
    let labels = a.labels.as_ref().map(|p| load_labels(p)).transpose().invalid("cannot load labels")?;
    let pixels: Vec<Pixel> = match (&labels, a.all) {
        (_, true) => (0..scene.height).flat_map(|r| (0..scene.width).map(move |c| (r, c))).collect(),
        (Some(l), false) => l.labeled_pixels(),
        (None, false) => return Err(Failure::invalid("map needs --labels unless --all is given")),
    };
    if let Some(l) = &labels {
        l.check_matches(&scene).invalid("label map does not fit the scene")?;
        split.validate(l).invalid("split does not fit the label map")?;
    } else if let Some(&(row, col)) = split.train.iter().find(|&&(r, c)| r >= scene.height || c >= scene.width) {
        return Err(Failure::Invalid(
            Error::OutOfBounds {
                row,
                col,
                height: scene.height,
                width: scene.width,
            }
            .into(),
        ));
    }
    let z = standardize(&scene, &split.train).invalid("cannot standardize scene")?;
    check_file_target(&a.out)?;
    if let Some(p) = &a.predictions {
        check_file_target(p)?;
    }

    let preds = predict_pixels(&model, &z, &pixels, threads).runtime("prediction")?;
    let mut classes = vec![0usize; scene.height * scene.width];
    let mut dump = String::from("row,col,predicted\n");
    for (&(r, c), &p) in pixels.iter().zip(&preds) {
        classes[r * scene.width + c] = p;
        writeln!(dump, "{r},{c},{p}").expect("write to string");
    }
    write(&a.out, encode_ppm(scene.height, scene.width, &classes))?;
    if let Some(p) = &a.predictions {
        write(p, dump)?;
    }
    println!(
        "# ssatt map variant={} checkpoint={} pixels={} size={}x{}",
        model.variant_name(),
        a.checkpoint.display(),
        pixels.len(),
        scene.height,
        scene.width
    );
    Ok(())
}

fn ablation(a: &AblationArgs, threads: usize) -> CliResult<()> {
    let data = load_data(&a.data)?;
    if a.seeds.is_empty() {
        return Err(Failure::invalid("need at least one seed"));
    }
    let cfg = a.opts.config(a.seeds[0]);
    cfg.validate().invalid("bad training configuration")?;
    let weights = a.opts.weights().invalid("bad loss weights")?;
    let (train_set, test_set) = prepare(&data, cfg.patch_size).invalid("cannot extract patches")?;
    if test_set.is_empty() {
        return Err(Failure::invalid("the test split is empty"));
    }
    Variant::Ssatt
        .check(LayerMask::ALL, data.classes(), data.scene.bands, cfg.patch_size)
        .invalid("bad model shape")?;
    prepare_dir(&a.out)?;

    let seeds: Vec<String> = a.seeds.iter().map(u64::to_string).collect();
    let header = format!("# ssatt ablation seed={} {}", seeds.join(","), a.opts.header());
    println!("{header}");
    let lines = std::sync::Mutex::new(vec![header]);
    let log = |line: &str| {
        println!("{line}");
        lines.lock().expect("log lock").push(line.to_string());
    };
    let classes = data.classes();
    let table = match cfg.precision {
        Precision::F32 => run_ablation::<f32>(&train_set, &test_set, classes, &cfg, &weights, &a.seeds, threads, &log),
        Precision::F64 => run_ablation::<f64>(&train_set, &test_set, classes, &cfg, &weights, &a.seeds, threads, &log),
    }
    .runtime("ablation failed")?;
    let mut text = lines.into_inner().expect("log lock").join("\n");
    text.push('\n');
    write(&a.out.join("ablation.log"), text)?;
    write(&a.out.join("ablation.txt"), table.to_text())?;
    write(&a.out.join("ablation.csv"), table.to_csv())?;
    print!("{}", table.to_text());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(
            OpKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| Failure::invalid(format!("unknown op '{name}'")))?,
        ),
    };
    if a.cases == 0 || a.samples == 0 {
        return Err(Failure::invalid("--cases and --samples must be positive"));
    }
    let cfg = SuiteConfig {
        cases_per_op: a.cases,
        seed: a.seed,
        fault,
        model_samples: a.samples,
    };
    let start = Instant::now();
    let entries = run_suite(&cfg).runtime("gradient check")?;
    println!("# ssatt gradcheck seed={} cases={} samples={} tolerance={TOLERANCE:e}", a.seed, a.cases, a.samples);
    println!("{:<24} {:<9} {:>6} {:>8} {:>8} {:>12}  status", "entry", "kind", "cases", "checked", "skipped", "max_rel_err");
    let mut failed = Vec::new();
    for e in &entries {
        let kind = match e.kind {
            EntryKind::Op => "op",
            EntryKind::Composite => "composite",
        };
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} {:<9} {:>6} {:>8} {:>8} {:>12.3e}  {status}",
            e.name, kind, e.cases, e.report.checked, e.report.skipped, e.report.max_rel_error
        );
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    println!("elapsed={:.2}s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GradCheck(failed.join(", ")))
    }
}


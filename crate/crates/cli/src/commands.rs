//! Subcommand implementations and the artifact layout they share.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rdx_core::archive::{write_atomic, Archive, Payload};
use rdx_core::classical::{ClassicalModel, Matrix};
use rdx_core::dataset::{
    balance_downsample, class_counts, kfold_split, load_manifest, materialize, read_sample, synthetic, write_sample,
    FoldPlan, SampleRecord, SampleRef,
};
use rdx_core::eval::{
    confusion, features_of, fold_partition, history_file, metrics, predictions_file, run_cv, train_network,
    write_report, CvConfig, CvSummary, FoldPredictions, CONFUSION_FILE, METRICS_FILE,
};
use rdx_core::models::{stack_images, Model};
use rdx_core::{ClassLabel, Error, Result};

use crate::config::RunConfig;
use crate::{Cli, Command, SynthArgs};

pub const SAMPLES_INDEX: &str = "samples.csv";
pub const BALANCED_INDEX: &str = "balanced.csv";
pub const FOLDS_FILE: &str = "folds.csv";
pub const SAMPLE_DIR: &str = "samples";

pub fn model_stem(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("model_fold{fold}"))
}

pub fn features_stem(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("features_fold{fold}"))
}

pub fn classical_stem(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("classical_fold{fold}"))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Preprocess => "preprocess",
        Command::Balance => "balance",
        Command::Split => "split",
        Command::Train => "train",
        Command::ExtractFeatures => "extract-features",
        Command::TrainHybrid => "train-hybrid",
        Command::Evaluate => "evaluate",
        Command::Report => "report",
        Command::RunAll => "run-all",
        Command::Synth(_) => "synth",
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.opts.resolve()?;
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Param(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| dispatch(&cli.command, &cfg))
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    let name = command_name(command);
    let written_to = match command {
        Command::Preprocess => preprocess(cfg)?,
        Command::Balance => balance(cfg)?,
        Command::Split => split(cfg)?,
        Command::Train => train(cfg)?,
        Command::ExtractFeatures => extract_features(cfg)?,
        Command::TrainHybrid => train_hybrid(cfg)?,
        Command::Evaluate => evaluate(cfg)?,
        Command::Report => report(cfg)?,
        // run-all records its resolved cache directory itself
        Command::RunAll => return run_all(cfg).map(|_| ()),
        Command::Synth(args) => synth(cfg, args)?,
    };
    cfg.save(&written_to, name)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn index_text(samples: &[SampleRef]) -> String {
    let mut s = String::from("id,label\n");
    for r in samples {
        writeln!(s, "{},{}", r.id, r.label).expect("string write");
    }
    s
}

pub fn read_index(path: &Path) -> Result<Vec<SampleRef>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == "id,label") {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (id, label) = line.split_once(',').ok_or_else(|| err("expected id,label".into()))?;
        let label: ClassLabel = label.parse().map_err(|e: Error| err(e.to_string()))?;
        out.push(SampleRef {
            id: id.to_string(),
            label,
        });
    }
    Ok(out)
}

/// Reads the cached images of `refs`.
pub fn load_samples(cache: &Path, refs: &[SampleRef]) -> Result<Vec<SampleRecord>> {
    refs.par_iter()
        .map(|r| {
            Ok(SampleRecord {
                id: r.id.clone(),
                label: r.label,
                image: read_sample(&cache.join(SAMPLE_DIR).join(format!("{}.rdxs", r.id)))?,
                fold: None,
            })
        })
        .collect()
}

fn counts_line(refs: &[SampleRef]) -> String {
    let c = class_counts(refs);
    ClassLabel::ALL
        .iter()
        .map(|l| format!("{l}={}", c[l.index()]))
        .collect::<Vec<_>>()
        .join(" ")
}

fn preprocess_into(cfg: &RunConfig, manifest: &Path, cache: &Path) -> Result<()> {
    let load = load_manifest(manifest)?;
    for w in &load.warnings {
        eprintln!("warning: {w}");
    }
    let samples = materialize(&load.annotations, &cfg.preprocess_params())?;
    let dir = cache.join(SAMPLE_DIR);
    create_dir(&dir)?;
    samples
        .par_iter()
        .try_for_each(|s| write_sample(&dir.join(format!("{}.rdxs", s.id)), &s.image))?;
    let refs: Vec<SampleRef> = samples
        .iter()
        .map(|s| SampleRef {
            id: s.id.clone(),
            label: s.label,
        })
        .collect();
    write_atomic(&cache.join(SAMPLES_INDEX), index_text(&refs).as_bytes())?;
    println!("preprocessed {} samples ({})", refs.len(), counts_line(&refs));
    Ok(())
}

fn preprocess(cfg: &RunConfig) -> Result<PathBuf> {
    let manifest = require(&cfg.manifest, "manifest")?;
    let cache = require(&cfg.cache_dir, "cache-dir")?;
    preprocess_into(cfg, manifest, cache)?;
    Ok(cache.to_path_buf())
}

fn balance_in(cfg: &RunConfig, cache: &Path) -> Result<()> {
    let refs = read_index(&cache.join(SAMPLES_INDEX))?;
    let kept = balance_downsample(&refs, cfg.seed)?;
    write_atomic(&cache.join(BALANCED_INDEX), index_text(&kept).as_bytes())?;
    println!("balanced {} -> {} samples ({})", refs.len(), kept.len(), counts_line(&kept));
    Ok(())
}

fn balance(cfg: &RunConfig) -> Result<PathBuf> {
    let cache = require(&cfg.cache_dir, "cache-dir")?;
    balance_in(cfg, cache)?;
    Ok(cache.to_path_buf())
}

fn split_in(cfg: &RunConfig, cache: &Path) -> Result<()> {
    let refs = read_index(&cache.join(BALANCED_INDEX))?;
    let plan = kfold_split(&refs, cfg.k, cfg.seed)?;
    plan.save(&cache.join(FOLDS_FILE))?;
    let sizes: Vec<String> = plan.fold_sizes().iter().map(usize::to_string).collect();
    println!("split {} samples into {} folds: {}", refs.len(), cfg.k, sizes.join(","));
    Ok(())
}

fn split(cfg: &RunConfig) -> Result<PathBuf> {
    let cache = require(&cfg.cache_dir, "cache-dir")?;
    split_in(cfg, cache)?;
    Ok(cache.to_path_buf())
}

/// Balanced samples and the fold plan from the cache directory.
fn load_split(cfg: &RunConfig) -> Result<(Vec<SampleRecord>, FoldPlan)> {
    let cache = require(&cfg.cache_dir, "cache-dir")?;
    let refs = read_index(&cache.join(BALANCED_INDEX))?;
    let plan = FoldPlan::load(&cache.join(FOLDS_FILE))?;
    if plan.k != cfg.k {
        return Err(Error::Validation(format!(
            "fold plan has k={} but k={} was requested",
            plan.k, cfg.k
        )));
    }
    Ok((load_samples(cache, &refs)?, plan))
}

fn cv_config(cfg: &RunConfig) -> Result<CvConfig> {
    let mut cv = cfg.cv_config();
    if let Some(w) = &cfg.weights {
        if cfg.pipeline.backbone().is_none() {
            return Err(Error::Validation(format!("--weights only applies to backbone pipelines, not {}", cfg.pipeline)));
        }
        cv.weights = Some(Archive::load(w)?);
    }
    Ok(cv)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let out = require(&cfg.out, "out")?;
    create_dir(out)?;
    Ok(out)
}

fn load_model(cv: &CvConfig, out: &Path, fold: usize, like: &SampleRecord) -> Result<Model> {
    let spec = cv.network_spec(like.image.height(), like.image.width())?;
    Model::from_archive(spec, &Archive::load(&model_stem(out, fold))?)
}

fn train(cfg: &RunConfig) -> Result<PathBuf> {
    let out = out_dir(cfg)?;
    let (samples, plan) = load_split(cfg)?;
    let cv = cv_config(cfg)?;
    let (train, _) = fold_partition(&samples, &plan, cfg.fold)?;
    let (model, history) = train_network(&cv, &train, cv.fold_seed(cfg.fold))?;
    model.to_archive()?.save(&model_stem(out, cfg.fold))?;
    history.save_csv(&out.join(history_file(cfg.fold)))?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} fold {}: {} epochs, best epoch {}, val_acc {:.4}",
        cfg.pipeline,
        cfg.fold,
        history.epochs.len(),
        history.best_epoch,
        last.val_acc
    );
    Ok(out.to_path_buf())
}

fn matrix_entries(a: &mut Archive, prefix: &str, x: &Matrix, y: &[usize]) -> Result<()> {
    a.insert(&format!("{prefix}/x"), vec![x.rows(), x.cols()], Payload::F64(x.data().to_vec()))?;
    a.insert(&format!("{prefix}/y"), vec![y.len()], Payload::I64(y.iter().map(|&v| v as i64).collect()))
}

fn read_matrix(a: &Archive, prefix: &str) -> Result<(Matrix, Vec<usize>)> {
    let (shape, data) = a.f64s(&format!("{prefix}/x"))?;
    if shape.len() != 2 {
        return Err(Error::Archive(vec![format!("{prefix}/x: expected a matrix, shape {shape:?}")]));
    }
    let x = Matrix::new(shape[0], shape[1], data.to_vec())?;
    let (_, y) = a.i64s(&format!("{prefix}/y"))?;
    let y = y
        .iter()
        .map(|&v| usize::try_from(v).map_err(|_| Error::Archive(vec![format!("{prefix}/y: negative label {v}")])))
        .collect::<Result<_>>()?;
    Ok((x, y))
}

fn labels(s: &[&SampleRecord]) -> Vec<usize> {
    s.iter().map(|r| r.label.index()).collect()
}

fn extract_features(cfg: &RunConfig) -> Result<PathBuf> {
    let out = out_dir(cfg)?;
    let (samples, plan) = load_split(cfg)?;
    let cv = cv_config(cfg)?;
    let (train, test) = fold_partition(&samples, &plan, cfg.fold)?;
    let model = load_model(&cv, out, cfg.fold, train[0])?;
    let mut a = Archive::new("features");
    let xtr = features_of(&model, &train, cfg.features)?;
    matrix_entries(&mut a, "train", &xtr, &labels(&train))?;
    matrix_entries(&mut a, "test", &features_of(&model, &test, cfg.features)?, &labels(&test))?;
    a.save(&features_stem(out, cfg.fold))?;
    println!("extracted {}-d features for {} train and {} test samples", xtr.cols(), train.len(), test.len());
    Ok(out.to_path_buf())
}

fn hybrid_kind(cfg: &RunConfig) -> Result<rdx_core::classical::ClassifierKind> {
    cfg.pipeline
        .classifier()
        .ok_or_else(|| Error::Validation(format!("pipeline {} has no classical stage", cfg.pipeline)))
}

fn train_hybrid(cfg: &RunConfig) -> Result<PathBuf> {
    let out = out_dir(cfg)?;
    let kind = hybrid_kind(cfg)?;
    let feats = Archive::load(&features_stem(out, cfg.fold))?;
    let (x, y) = read_matrix(&feats, "train")?;
    let model = ClassicalModel::fit(kind, &x, &y, &cfg.classical(), cfg.cv_config().fold_seed(cfg.fold))?;
    model.to_archive()?.save(&classical_stem(out, cfg.fold))?;
    let train_acc = model.predict(&x)?.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
    println!("fitted {kind} on {} rows, train accuracy {train_acc:.4}", x.rows());
    Ok(out.to_path_buf())
}

fn evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let out = out_dir(cfg)?;
    let (samples, plan) = load_split(cfg)?;
    let cv = cv_config(cfg)?;
    let (_, test) = fold_partition(&samples, &plan, cfg.fold)?;
    let truth = labels(&test);
    let pred = match cfg.pipeline.classifier() {
        None => {
            let model = load_model(&cv, out, cfg.fold, test[0])?;
            let x = stack_images(&test.iter().map(|s| &s.image).collect::<Vec<_>>(), model.spec().input_shape[2])?;
            model.predict(&x)?.labels
        }
        Some(_) => {
            let (x, y) = read_matrix(&Archive::load(&features_stem(out, cfg.fold))?, "test")?;
            if y != truth {
                return Err(Error::Validation(format!(
                    "features for fold {} do not match the fold plan; rerun extract-features",
                    cfg.fold
                )));
            }
            ClassicalModel::from_archive(&Archive::load(&classical_stem(out, cfg.fold))?)?.predict(&x)?
        }
    };
    let preds = FoldPredictions {
        fold: cfg.fold,
        ids: test.iter().map(|s| s.id.clone()).collect(),
        truth,
        pred,
    };
    preds.save(&out.join(predictions_file(cfg.fold)))?;
    let m = metrics(&confusion(&preds.truth, &preds.pred)?)?;
    println!("fold {} accuracy {:.4} macro_f1 {:.4}", cfg.fold, m.accuracy, m.macro_f1);
    Ok(out.to_path_buf())
}

fn print_summary(summary: &CvSummary, out: &Path) {
    let acc = summary.accuracy();
    println!(
        "{}: accuracy {:.4} ± {:.4} over {} folds; wrote {} and {} to {}",
        summary.pipeline,
        acc.mean,
        acc.std,
        summary.folds.len(),
        METRICS_FILE,
        CONFUSION_FILE,
        out.display()
    );
}

fn report(cfg: &RunConfig) -> Result<PathBuf> {
    let out = out_dir(cfg)?;
    let mut folds = Vec::with_capacity(cfg.k);
    for fold in 0..cfg.k {
        let path = out.join(predictions_file(fold));
        let p = FoldPredictions::parse_csv(&read_text(&path)?, fold, &path)?;
        folds.push(metrics(&confusion(&p.truth, &p.pred)?)?);
    }
    let summary = CvSummary::from_folds(cfg.pipeline, folds, vec![None; cfg.k])?;
    write_report(&summary, &[], out)?;
    print_summary(&summary, out);
    Ok(out.to_path_buf())
}

fn run_all(cfg: &RunConfig) -> Result<PathBuf> {
    let out = out_dir(cfg)?.to_path_buf();
    let cache = cfg.cache_dir.clone().unwrap_or_else(|| out.join("cache"));
    let mut cfg = cfg.clone();
    cfg.cache_dir = Some(cache.clone());
    match &cfg.manifest {
        Some(m) => preprocess_into(&cfg, m, &cache)?,
        None if cache.join(SAMPLES_INDEX).exists() => println!("reusing cached samples in {}", cache.display()),
        None => return Err(Error::Usage("--manifest is required unless --cache-dir holds preprocessed samples".into())),
    }
    balance_in(&cfg, &cache)?;
    split_in(&cfg, &cache)?;
    let (samples, plan) = load_split(&cfg)?;
    let (summary, outcomes) = run_cv(&samples, &plan, &cv_config(&cfg)?)?;
    let preds: Vec<FoldPredictions> = outcomes.into_iter().map(|o| o.predictions).collect();
    write_report(&summary, &preds, &out)?;
    print_summary(&summary, &out);
    cfg.save(&out, "run-all")?;
    Ok(out)
}

fn synth(cfg: &RunConfig, args: &SynthArgs) -> Result<PathBuf> {
    let out = out_dir(cfg)?;
    let manifest = synthetic::write_quadrant_dataset(out, args.n_per_class, args.width, args.height, cfg.seed)?;
    println!("{}", manifest.display());
    Ok(out.to_path_buf())
}

//! Resolved run configuration: pipeline defaults, then a key=value file,
//! then command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rdx_core::archive::write_atomic;
use rdx_core::classical::{ClassicalParams, Gamma};
use rdx_core::eval::{CvConfig, PipelineKind};
use rdx_core::models::{AdamConfig, CustomCnnConfig, FeatureSource, TrainConfig};
use rdx_core::preprocess::PipelineParams;
use rdx_core::{Error, Result};

/// File the resolved configuration of subcommand `command` is written to.
pub fn run_config_file(command: &str) -> String {
    format!("run_config_{}.txt", command.replace('-', "_"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub pipeline: PipelineKind,
    pub seed: u64,
    pub k: usize,
    pub fold: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    /// 0 lets the thread pool pick.
    pub threads: usize,
    pub deterministic: bool,
    pub features: FeatureSource,
    pub image_size: usize,
    pub cnn_filters: Vec<usize>,
    pub dense_units: usize,
    pub dropout: f64,
    pub standardize: bool,
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub svm_c: f64,
    pub svm_gamma: Gamma,
    pub svm_tol: f64,
    pub weights: Option<PathBuf>,
}

/// Every key accepted in a config file (and written by [`RunConfig::to_text`]).
pub const KEYS: &[&str] = &[
    "manifest",
    "cache_dir",
    "out",
    "pipeline",
    "seed",
    "k",
    "fold",
    "epochs",
    "batch_size",
    "lr",
    "patience",
    "validation_fraction",
    "threads",
    "deterministic",
    "features",
    "image_size",
    "cnn_filters",
    "dense_units",
    "dropout",
    "standardize",
    "n_trees",
    "max_depth",
    "min_samples_split",
    "svm_c",
    "svm_gamma",
    "svm_tol",
    "weights",
];

fn features_name(f: FeatureSource) -> &'static str {
    match f {
        FeatureSource::Penultimate => "penultimate",
        FeatureSource::Flatten => "flatten",
    }
}

pub fn parse_features(s: &str) -> Result<FeatureSource> {
    match s {
        "penultimate" => Ok(FeatureSource::Penultimate),
        "flatten" => Ok(FeatureSource::Flatten),
        other => Err(Error::Param(format!("unknown feature source {other:?} (penultimate, flatten)"))),
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Param(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Param(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Reference hyperparameters for `pipeline`.
    pub fn defaults(pipeline: PipelineKind) -> Self {
        let train = pipeline.default_train();
        let cnn = CustomCnnConfig::default();
        let classical = ClassicalParams::default();
        RunConfig {
            manifest: None,
            cache_dir: None,
            out: None,
            pipeline,
            seed: train.seed,
            k: 5,
            fold: 0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.adam.lr,
            patience: train.patience,
            validation_fraction: train.validation_fraction,
            threads: 0,
            deterministic: false,
            features: FeatureSource::Penultimate,
            image_size: PipelineParams::default().output_size,
            cnn_filters: cnn.filters,
            dense_units: cnn.dense_units,
            dropout: cnn.dropout,
            standardize: classical.standardize,
            n_trees: classical.forest.n_trees,
            max_depth: classical.forest.max_depth,
            min_samples_split: classical.forest.min_samples_split,
            svm_c: classical.svm.c,
            svm_gamma: classical.svm.gamma,
            svm_tol: classical.svm.tol,
            weights: None,
        }
    }

    /// Builds the configuration from `(key, value)` layers applied in order.
    /// The pipeline is taken from the last layer that sets it so that its
    /// defaults sit underneath everything else.
    pub fn resolve(layers: &[Vec<(String, String)>]) -> Result<Self> {
        let pipeline = layers
            .iter()
            .flatten()
            .filter(|(k, _)| k == "pipeline")
            .last()
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(PipelineKind::Cnn);
        let mut cfg = RunConfig::defaults(pipeline);
        for (k, v) in layers.iter().flatten() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "manifest" => self.manifest = path(),
            "cache_dir" => self.cache_dir = path(),
            "out" => self.out = path(),
            "weights" => self.weights = path(),
            "pipeline" => self.pipeline = v.parse()?,
            "seed" => self.seed = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "fold" => self.fold = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "validation_fraction" => self.validation_fraction = parse_num(key, v)?,
            "threads" => self.threads = parse_num(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "features" => self.features = parse_features(v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "cnn_filters" => {
                self.cnn_filters = v
                    .split(',')
                    .map(|f| parse_num(key, f.trim()))
                    .collect::<Result<_>>()?
            }
            "dense_units" => self.dense_units = parse_num(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "standardize" => self.standardize = parse_bool(key, v)?,
            "n_trees" => self.n_trees = parse_num(key, v)?,
            "max_depth" => {
                self.max_depth = match v {
                    "" | "none" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "min_samples_split" => self.min_samples_split = parse_num(key, v)?,
            "svm_c" => self.svm_c = parse_num(key, v)?,
            "svm_gamma" => {
                self.svm_gamma = match v {
                    "scale" => Gamma::Scale,
                    _ => Gamma::Value(parse_num(key, v)?),
                }
            }
            "svm_tol" => self.svm_tol = parse_num(key, v)?,
            other => return Err(Error::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.fold >= self.k {
            return bad(format!("fold {} out of range for k={}", self.fold, self.k));
        }
        if self.image_size < 8 {
            return bad(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.cnn_filters.is_empty() || self.cnn_filters.contains(&0) {
            return bad("cnn_filters must be a non-empty list of positive counts".into());
        }
        if self.dense_units == 0 {
            return bad("dense_units must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.n_trees == 0 {
            return bad("n_trees must be positive".into());
        }
        if self.min_samples_split < 2 {
            return bad("min_samples_split must be at least 2".into());
        }
        if !(self.svm_c > 0.0) || !(self.svm_tol > 0.0) {
            return bad("svm_c and svm_tol must be positive".into());
        }
        if let Gamma::Value(g) = self.svm_gamma {
            if !(g > 0.0) {
                return bad(format!("svm_gamma must be positive, got {g}"));
            }
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig::with_lr(self.lr),
            batch_size: self.batch_size,
            epochs: self.epochs,
            validation_fraction: self.validation_fraction,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn classical(&self) -> ClassicalParams {
        let mut p = ClassicalParams {
            standardize: self.standardize,
            ..ClassicalParams::default()
        };
        p.tree.max_depth = self.max_depth;
        p.tree.min_samples_split = self.min_samples_split;
        p.forest.n_trees = self.n_trees;
        p.forest.max_depth = self.max_depth;
        p.forest.min_samples_split = self.min_samples_split;
        p.forest.seed = self.seed;
        p.svm.c = self.svm_c;
        p.svm.gamma = self.svm_gamma;
        p.svm.tol = self.svm_tol;
        p
    }

    pub fn preprocess_params(&self) -> PipelineParams {
        PipelineParams {
            output_size: self.image_size,
            ..PipelineParams::default()
        }
    }

    /// Cross-validation settings; `weights` is loaded by the caller.
    pub fn cv_config(&self) -> CvConfig {
        let mut cv = CvConfig::new(self.pipeline);
        cv.train = self.train_config();
        cv.cnn = CustomCnnConfig {
            filters: self.cnn_filters.clone(),
            dense_units: self.dense_units,
            dropout: self.dropout,
            ..CustomCnnConfig::default()
        };
        cv.classical = self.classical();
        cv.features = self.features;
        cv.seed = self.seed;
        cv
    }

    /// `key=value` lines in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# rdx run config\n");
        for &key in KEYS {
            let v = match key {
                "manifest" => opt_path(&self.manifest),
                "cache_dir" => opt_path(&self.cache_dir),
                "out" => opt_path(&self.out),
                "weights" => opt_path(&self.weights),
                "pipeline" => self.pipeline.to_string(),
                "seed" => self.seed.to_string(),
                "k" => self.k.to_string(),
                "fold" => self.fold.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "lr" => self.lr.to_string(),
                "patience" => self.patience.to_string(),
                "validation_fraction" => self.validation_fraction.to_string(),
                "threads" => self.threads.to_string(),
                "deterministic" => self.deterministic.to_string(),
                "features" => features_name(self.features).to_string(),
                "image_size" => self.image_size.to_string(),
                "cnn_filters" => self.cnn_filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
                "dense_units" => self.dense_units.to_string(),
                "dropout" => self.dropout.to_string(),
                "standardize" => self.standardize.to_string(),
                "n_trees" => self.n_trees.to_string(),
                "max_depth" => self.max_depth.map_or("none".into(), |d| d.to_string()),
                "min_samples_split" => self.min_samples_split.to_string(),
                "svm_c" => self.svm_c.to_string(),
                "svm_gamma" => match self.svm_gamma {
                    Gamma::Scale => "scale".into(),
                    Gamma::Value(g) => g.to_string(),
                },
                "svm_tol" => self.svm_tol.to_string(),
                _ => unreachable!("every key is listed"),
            };
            writeln!(s, "{key}={v}").expect("string write");
        }
        s
    }

    pub fn save(&self, dir: &Path, command: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        write_atomic(&dir.join(run_config_file(command)), self.to_text().as_bytes())
    }
}

/// Reads a `key=value` file. Blank lines and `#` comments are skipped;
/// dashes in keys are accepted as underscores.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("unknown key {key:?}"),
            });
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

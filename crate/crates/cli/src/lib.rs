//! Command-line driver. Each subcommand reads and writes fixed artifact
//! names inside `--cache-dir` (preprocessed samples, balanced list, fold
//! plan) and `--out` (models, features, predictions, reports).

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::ErrorKind;

use clap::{Args, Parser, Subcommand};
use rdx_core::Error;

use config::{read_config_file, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "rdx", version, about = "Dental radiograph classification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the image pipeline over a manifest and cache the samples.
    Preprocess,
    /// Downsample every class to the smallest class size.
    Balance,
    /// Assign the balanced samples to stratified folds.
    Split,
    /// Train the network of --pipeline on every fold except --fold.
    Train,
    /// Dump train/test feature matrices of a trained fold model.
    ExtractFeatures,
    /// Fit the classical classifier of a hybrid pipeline on extracted features.
    TrainHybrid,
    /// Predict the held-out fold and write its predictions.
    Evaluate,
    /// Aggregate per-fold predictions into metrics.txt and confusion.csv.
    Report,
    /// Preprocess, balance, split, cross-validate and report in one go.
    RunAll,
    /// Write a synthetic four-class dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
}

/// Shared options. Values are kept as text and parsed by [`RunConfig`] so
/// flags and config files go through the same code.
#[derive(Debug, Args, Default)]
pub struct Opts {
    /// key=value file; flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<String>,
    #[arg(long, global = true)]
    pub manifest: Option<String>,
    #[arg(long, global = true)]
    pub cache_dir: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<String>,
    /// cnn, cnn_dt, cnn_rf, cnn_svm, vgg16, xception or resnet50.
    #[arg(long, global = true)]
    pub pipeline: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    #[arg(long, global = true)]
    pub k: Option<String>,
    /// Held-out fold for train, extract-features, train-hybrid and evaluate.
    #[arg(long, global = true)]
    pub fold: Option<String>,
    #[arg(long, global = true)]
    pub epochs: Option<String>,
    #[arg(long, global = true)]
    pub batch_size: Option<String>,
    #[arg(long, global = true)]
    pub lr: Option<String>,
    #[arg(long, global = true)]
    pub patience: Option<String>,
    #[arg(long, global = true)]
    pub validation_fraction: Option<String>,
    #[arg(long, global = true)]
    pub threads: Option<String>,
    /// Run every numeric path on one thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// penultimate or flatten.
    #[arg(long, global = true)]
    pub features: Option<String>,
    #[arg(long, global = true)]
    pub image_size: Option<String>,
    /// Comma-separated conv widths, one conv/pool block each.
    #[arg(long, global = true)]
    pub cnn_filters: Option<String>,
    #[arg(long, global = true)]
    pub dense_units: Option<String>,
    #[arg(long, global = true)]
    pub dropout: Option<String>,
    #[arg(long, global = true)]
    pub standardize: Option<String>,
    #[arg(long, global = true)]
    pub n_trees: Option<String>,
    #[arg(long, global = true)]
    pub max_depth: Option<String>,
    #[arg(long, global = true)]
    pub min_samples_split: Option<String>,
    #[arg(long, global = true)]
    pub svm_c: Option<String>,
    /// "scale" or a positive number.
    #[arg(long, global = true)]
    pub svm_gamma: Option<String>,
    #[arg(long, global = true)]
    pub svm_tol: Option<String>,
    /// Converted backbone checkpoint for the pretrained pipelines.
    #[arg(long, global = true)]
    pub weights: Option<String>,
}

impl Opts {
    fn pairs(&self) -> Vec<(String, String)> {
        let fields = [
            ("manifest", &self.manifest),
            ("cache_dir", &self.cache_dir),
            ("out", &self.out),
            ("pipeline", &self.pipeline),
            ("seed", &self.seed),
            ("k", &self.k),
            ("fold", &self.fold),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("patience", &self.patience),
            ("validation_fraction", &self.validation_fraction),
            ("threads", &self.threads),
            ("features", &self.features),
            ("image_size", &self.image_size),
            ("cnn_filters", &self.cnn_filters),
            ("dense_units", &self.dense_units),
            ("dropout", &self.dropout),
            ("standardize", &self.standardize),
            ("n_trees", &self.n_trees),
            ("max_depth", &self.max_depth),
            ("min_samples_split", &self.min_samples_split),
            ("svm_c", &self.svm_c),
            ("svm_gamma", &self.svm_gamma),
            ("svm_tol", &self.svm_tol),
            ("weights", &self.weights),
        ];
        let mut out: Vec<(String, String)> = fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        if self.deterministic {
            out.push(("deterministic".into(), "true".into()));
        }
        out
    }

    pub fn resolve(&self) -> rdx_core::Result<RunConfig> {
        let mut layers = Vec::new();
        if let Some(path) = &self.config {
            layers.push(read_config_file(path.as_ref())?);
        }
        layers.push(self.pairs());
        RunConfig::resolve(&layers)
    }
}

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;

fn innermost(e: &Error) -> &Error {
    match e {
        Error::Fold { source, .. } => innermost(source),
        other => other,
    }
}

/// `(kind, exit code)` of an error.
pub fn classify(e: &Error) -> (&'static str, i32) {
    match innermost(e) {
        Error::Usage(_) => ("usage", EXIT_USAGE),
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => ("missing_input", EXIT_MISSING_INPUT),
        Error::Io { .. } => ("io", EXIT_OTHER),
        Error::Param(_) | Error::Validation(_) | Error::Parse { .. } | Error::Archive(_) | Error::Shape { .. } => {
            ("validation", EXIT_VALIDATION)
        }
        Error::Image { .. } => ("image", EXIT_OTHER),
        Error::Fold { .. } => unreachable!("unwrapped above"),
    }
}

/// One JSON object on one line.
pub fn error_line(kind: &str, code: i32, message: &str, e: Option<&Error>) -> String {
    let mut obj = serde_json::json!({ "error": kind, "exit": code, "message": message.replace('\n', " ") });
    if let Some(e) = e {
        if let Error::Fold { fold, stage, .. } = e {
            obj["fold"] = (*fold).into();
            obj["stage"] = (*stage).into();
        }
        if let Error::Io { path, .. } | Error::Parse { path, .. } | Error::Image { path, .. } = innermost(e) {
            obj["path"] = path.display().to_string().into();
        }
    }
    obj.to_string()
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Errors go to stderr as a single JSON line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", EXIT_USAGE, first, None));
            return EXIT_USAGE;
        }
    };
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!("{}", error_line(kind, code, &e.to_string(), Some(&e)));
            code
        }
    }
}

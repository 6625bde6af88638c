//! K-fold cross-validation of the seven pipelines.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{confusion, metrics, CvSummary, MetricsReport};
use crate::archive::{write_atomic, Archive};
use crate::classical::{ClassicalModel, ClassicalParams, ClassifierKind, Matrix};
use crate::dataset::{FoldPlan, SampleRecord};
use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::models::{
    build_custom_cnn_with, build_pretrained_with, fit, stack_images, Backbone, CustomCnnConfig, FeatureSource, Model,
    ModelSpec, TrainConfig, TrainHistory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipelineKind {
    Cnn,
    CnnDt,
    CnnRf,
    CnnSvm,
    Vgg16,
    Xception,
    Resnet50,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 7] = [
        PipelineKind::Cnn,
        PipelineKind::CnnDt,
        PipelineKind::CnnRf,
        PipelineKind::CnnSvm,
        PipelineKind::Vgg16,
        PipelineKind::Xception,
        PipelineKind::Resnet50,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Cnn => "cnn",
            PipelineKind::CnnDt => "cnn_dt",
            PipelineKind::CnnRf => "cnn_rf",
            PipelineKind::CnnSvm => "cnn_svm",
            PipelineKind::Vgg16 => "vgg16",
            PipelineKind::Xception => "xception",
            PipelineKind::Resnet50 => "resnet50",
        }
    }

    /// Classifier trained on CNN features, for the hybrid pipelines.
    pub fn classifier(self) -> Option<ClassifierKind> {
        match self {
            PipelineKind::CnnDt => Some(ClassifierKind::DecisionTree),
            PipelineKind::CnnRf => Some(ClassifierKind::RandomForest),
            PipelineKind::CnnSvm => Some(ClassifierKind::Svm),
            _ => None,
        }
    }

    pub fn backbone(self) -> Option<Backbone> {
        match self {
            PipelineKind::Vgg16 => Some(Backbone::Vgg16),
            PipelineKind::Xception => Some(Backbone::Xception),
            PipelineKind::Resnet50 => Some(Backbone::Resnet50),
            _ => None,
        }
    }

    /// Default training hyperparameters for the network part.
    pub fn default_train(self) -> TrainConfig {
        if self.backbone().is_some() {
            TrainConfig::pretrained()
        } else {
            TrainConfig::custom_cnn()
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        PipelineKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Param(format!(
                    "unknown pipeline {s:?} (cnn, cnn_dt, cnn_rf, cnn_svm, vgg16, xception, resnet50)"
                ))
            })
    }
}

#[derive(Debug, Clone)]
pub struct CvConfig {
    pub pipeline: PipelineKind,
    pub train: TrainConfig,
    /// Custom CNN layout; its input size is replaced by the sample size.
    pub cnn: CustomCnnConfig,
    pub classical: ClassicalParams,
    pub features: FeatureSource,
    /// Base seed; fold `f` uses `seed + f` for training and the classifier.
    pub seed: u64,
    /// Initial backbone weights for the pretrained pipelines.
    pub weights: Option<Archive>,
}

impl CvConfig {
    pub fn new(pipeline: PipelineKind) -> Self {
        let train = pipeline.default_train();
        CvConfig {
            pipeline,
            seed: train.seed,
            train,
            cnn: CustomCnnConfig::default(),
            classical: ClassicalParams::default(),
            features: FeatureSource::Penultimate,
            weights: None,
        }
    }

    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }

    /// Network spec for `height x width` inputs.
    pub fn network_spec(&self, height: usize, width: usize) -> Result<ModelSpec> {
        match self.pipeline.backbone() {
            Some(arch) => {
                if height != width {
                    return Err(Error::Validation(format!("{arch} needs square inputs, got {width}x{height}")));
                }
                build_pretrained_with(arch, height, NUM_CLASSES)
            }
            None => build_custom_cnn_with(&CustomCnnConfig {
                input: [height, width, 1],
                num_classes: NUM_CLASSES,
                ..self.cnn.clone()
            }),
        }
    }
}

/// Test-fold predictions in sample order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPredictions {
    pub fold: usize,
    pub ids: Vec<String>,
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
}

fn label_name(c: usize) -> &'static str {
    ClassLabel::from_index(c).map_or("?", ClassLabel::name)
}

impl FoldPredictions {
    /// `id,true,pred` with class names.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,true,pred\n");
        for ((id, &t), &p) in self.ids.iter().zip(&self.truth).zip(&self.pred) {
            writeln!(s, "{id},{},{}", label_name(t), label_name(p)).expect("string write");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// Parses [`FoldPredictions::to_csv`] output; `origin` names the source in errors.
    pub fn parse_csv(text: &str, fold: usize, origin: &Path) -> Result<Self> {
        let mut out = FoldPredictions {
            fold,
            ids: Vec::new(),
            truth: Vec::new(),
            pred: Vec::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line == "id,true,pred") {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 columns, found {}", cols.len())));
            }
            let t: ClassLabel = cols[1].parse().map_err(|e: Error| err(e.to_string()))?;
            let p: ClassLabel = cols[2].parse().map_err(|e: Error| err(e.to_string()))?;
            out.ids.push(cols[0].to_string());
            out.truth.push(t.index());
            out.pred.push(p.index());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub predictions: FoldPredictions,
    pub metrics: MetricsReport,
    pub history: Option<TrainHistory>,
}

/// Splits `samples` into (train, test) for `fold`.
pub fn fold_partition<'a>(
    samples: &'a [SampleRecord],
    plan: &FoldPlan,
    fold: usize,
) -> Result<(Vec<&'a SampleRecord>, Vec<&'a SampleRecord>)> {
    if fold >= plan.k {
        return Err(Error::Param(format!("fold {fold} out of range for k={}", plan.k)));
    }
    let lookup = plan.lookup();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in samples {
        let f = *lookup
            .get(s.id.as_str())
            .ok_or_else(|| Error::Validation(format!("sample {} is not in the fold plan", s.id)))?;
        if f == fold {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation(format!(
            "fold {fold} has {} training and {} test samples",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

fn wrap(fold: usize, stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Fold {
        fold,
        stage,
        source: Box::new(e),
    }
}

fn is_head_param(name: &str) -> bool {
    name.starts_with("head_dense/") || name.starts_with("predictions/")
}

/// Trains the network of `cfg.pipeline` on `images` and returns it with its
/// history. Backbones start from `cfg.weights` when given.
pub fn train_network(
    cfg: &CvConfig,
    images: &[&SampleRecord],
    seed: u64,
) -> Result<(Model, TrainHistory)> {
    let first = images.first().ok_or_else(|| Error::Validation("no training images".into()))?;
    let spec = cfg.network_spec(first.image.height(), first.image.width())?;
    let mut model = Model::new(spec, seed)?;
    if let (Some(_), Some(w)) = (cfg.pipeline.backbone(), &cfg.weights) {
        model.load_weights_except(w, is_head_param)?;
    }
    let x = stack_images(&images.iter().map(|s| &s.image).collect::<Vec<_>>(), model.spec().input_shape[2])?;
    let y: Vec<usize> = images.iter().map(|s| s.label.index()).collect();
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let history = fit(&mut model, &x, &y, &train_cfg)?;
    Ok((model, history))
}

/// Feature matrix of `images` at `source`.
pub fn features_of(model: &Model, images: &[&SampleRecord], source: FeatureSource) -> Result<Matrix> {
    let x = stack_images(&images.iter().map(|s| &s.image).collect::<Vec<_>>(), model.spec().input_shape[2])?;
    let f = model.extract_features(&x, source)?;
    if f.untrained {
        return Err(Error::Usage("features requested from an untrained model".into()));
    }
    Matrix::from_tensor(&f.matrix)
}

/// Trains on every fold but `fold` and evaluates on `fold`. Failures carry
/// the fold index and the stage that failed.
pub fn run_fold(samples: &[SampleRecord], plan: &FoldPlan, fold: usize, cfg: &CvConfig) -> Result<FoldOutcome> {
    let (train, test) = fold_partition(samples, plan, fold).map_err(wrap(fold, "split"))?;
    let seed = cfg.fold_seed(fold);
    let (model, history) = train_network(cfg, &train, seed).map_err(wrap(fold, "train"))?;
    let pred = match cfg.pipeline.classifier() {
        None => {
            let x = stack_images(&test.iter().map(|s| &s.image).collect::<Vec<_>>(), model.spec().input_shape[2])
                .and_then(|x| model.predict(&x))
                .map_err(wrap(fold, "predict"))?;
            x.labels
        }
        Some(kind) => {
            let xtr = features_of(&model, &train, cfg.features).map_err(wrap(fold, "features"))?;
            let xte = features_of(&model, &test, cfg.features).map_err(wrap(fold, "features"))?;
            let ytr: Vec<usize> = train.iter().map(|s| s.label.index()).collect();
            let clf = ClassicalModel::fit(kind, &xtr, &ytr, &cfg.classical, seed).map_err(wrap(fold, "classical"))?;
            clf.predict(&xte).map_err(wrap(fold, "predict"))?
        }
    };
    let truth: Vec<usize> = test.iter().map(|s| s.label.index()).collect();
    let report = confusion(&truth, &pred)
        .and_then(|cm| metrics(&cm))
        .map_err(wrap(fold, "metrics"))?;
    Ok(FoldOutcome {
        predictions: FoldPredictions {
            fold,
            ids: test.iter().map(|s| s.id.clone()).collect(),
            truth,
            pred,
        },
        metrics: report,
        history: Some(history),
    })
}

/// Runs every fold in order and aggregates them.
pub fn run_cv(samples: &[SampleRecord], plan: &FoldPlan, cfg: &CvConfig) -> Result<(CvSummary, Vec<FoldOutcome>)> {
    let outcomes = (0..plan.k)
        .map(|f| run_fold(samples, plan, f, cfg))
        .collect::<Result<Vec<_>>>()?;
    let summary = CvSummary::from_folds(
        cfg.pipeline,
        outcomes.iter().map(|o| o.metrics.clone()).collect(),
        outcomes.iter().map(|o| o.history.clone()).collect(),
    )?;
    Ok((summary, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::kfold_split;
    use crate::dataset::synthetic::quadrant_samples;

    fn small_cfg(pipeline: PipelineKind) -> CvConfig {
        let mut cfg = CvConfig::new(pipeline);
        cfg.cnn = CustomCnnConfig {
            filters: vec![4, 8],
            dense_units: 16,
            dropout: 0.1,
            ..CustomCnnConfig::default()
        };
        cfg.train.epochs = 6;
        cfg.classical.forest.n_trees = 15;
        cfg
    }

    #[test]
    fn pipeline_names_round_trip() {
        for p in PipelineKind::ALL {
            assert_eq!(p.name().parse::<PipelineKind>().unwrap(), p);
        }
        assert!("gb".parse::<PipelineKind>().is_err());
    }

    #[test]
    fn hybrid_cv_on_separable_data() {
        let samples = quadrant_samples(20, 16, 0.05, 3);
        let plan = kfold_split(&samples, 2, 1).unwrap();
        let cfg = small_cfg(PipelineKind::CnnRf);
        let (summary, outcomes) = run_cv(&samples, &plan, &cfg).unwrap();
        assert_eq!(outcomes.len(), 2);
        assert_eq!(summary.summed.total(), 80);
        assert!(summary.summed_accuracy() > 0.9, "accuracy {}", summary.summed_accuracy());
        let again = run_fold(&samples, &plan, 0, &cfg).unwrap();
        assert_eq!(again.predictions, outcomes[0].predictions);
    }

    #[test]
    fn fold_errors_name_the_stage() {
        let samples = quadrant_samples(3, 8, 0.05, 3);
        let mut plan = kfold_split(&samples, 2, 1).unwrap();
        plan.assignments.pop();
        match run_fold(&samples, &plan, 1, &small_cfg(PipelineKind::Cnn)) {
            Err(Error::Fold { fold: 1, stage: "split", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn predictions_csv_round_trip() {
        let p = FoldPredictions {
            fold: 2,
            ids: vec!["s000001".into(), "s000007".into()],
            truth: vec![0, 3],
            pred: vec![2, 3],
        };
        let back = FoldPredictions::parse_csv(&p.to_csv(), 2, Path::new("mem")).unwrap();
        assert_eq!(back, p);
        assert!(FoldPredictions::parse_csv("id,true,pred\na,x,cavity\n", 0, Path::new("mem")).is_err());
    }

    #[test]
    fn backbone_weights_skip_the_head() {
        let cfg = CvConfig::new(PipelineKind::Vgg16);
        let spec = cfg.network_spec(32, 32).unwrap();
        let donor = Model::<f32>::new(spec.clone(), 5).unwrap();
        let mut ckpt = Archive::new("weights");
        for p in donor.params().iter().filter(|p| !is_head_param(&p.name)) {
            ckpt.insert(&p.name, p.value.shape().to_vec(), crate::archive::Payload::F32(p.value.data().to_vec()))
                .unwrap();
        }
        let mut m = Model::<f32>::new(spec, 9).unwrap();
        let n = m.load_weights_except(&ckpt, is_head_param).unwrap();
        assert_eq!(n, ckpt.len());
        assert_eq!(m.param("block1_conv1/kernel"), donor.param("block1_conv1/kernel"));
        assert_ne!(m.param("predictions/kernel"), donor.param("predictions/kernel"));
        assert!(!m.is_trained());
        assert!(m.load_weights(&ckpt).is_err());
    }
}

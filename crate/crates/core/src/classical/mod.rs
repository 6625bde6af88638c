//! Classifiers for the hybrid path: standardisation, CART trees, random
//! forests and an SMO-trained RBF SVM, all over `f64` feature matrices.

pub mod datasets;
mod forest;
mod svm;
mod tree;

use std::fmt;
use std::str::FromStr;

pub use forest::{ForestParams, RandomForest};
pub use svm::{kkt_residual, tally_votes, BinarySvm, Gamma, SolverReport, SvmModel, SvmParams};
pub use tree::{DecisionTree, MaxFeatures, NodeKind, TreeNode, TreeParams};

use crate::archive::{Archive, Payload};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Dense row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("matrix", "length", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape("matrix", "row length", cols, format!("{} (row {i})", r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Converts an `N x D` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [rows, cols] = t.dims2("matrix")?;
        Matrix::new(rows, cols, t.data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub(crate) fn check_fit_input<Y>(&self, y: &[Y]) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Validation("empty feature matrix".into()));
        }
        if y.len() != self.rows {
            return Err(Error::shape("fit", "label count", self.rows, y.len()));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("feature matrix contains non-finite values".into()));
        }
        Ok(())
    }

    pub(crate) fn check_cols(&self, op: &'static str, cols: usize) -> Result<()> {
        if self.cols != cols {
            return Err(Error::shape(op, "features", cols, self.cols));
        }
        Ok(())
    }
}

/// Smallest standard deviation used when scaling.
pub const STD_FLOOR: f64 = 1e-8;

/// Column-wise standardisation with population statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows == 0 || x.cols == 0 {
            return Err(Error::Validation("cannot fit a scaler on an empty matrix".into()));
        }
        let n = x.rows as f64;
        let mut mean = vec![0.0; x.cols];
        for i in 0..x.rows {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols];
        for i in 0..x.rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        x.check_cols("scaler", self.mean.len())?;
        let mut data = x.data.clone();
        for row in data.chunks_mut(x.cols) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s.max(STD_FLOOR);
            }
        }
        Matrix::new(x.rows, x.cols, data)
    }

    pub fn fit_transform(x: &Matrix) -> Result<(Self, Matrix)> {
        let s = Scaler::fit(x)?;
        let t = s.transform(x)?;
        Ok((s, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassifierKind {
    DecisionTree,
    RandomForest,
    Svm,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::DecisionTree => "dt",
            ClassifierKind::RandomForest => "rf",
            ClassifierKind::Svm => "svm",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt" | "dtree" | "tree" => Ok(ClassifierKind::DecisionTree),
            "rf" | "forest" => Ok(ClassifierKind::RandomForest),
            "svm" => Ok(ClassifierKind::Svm),
            other => Err(Error::Param(format!("unknown classifier {other:?} (dt, rf, svm)"))),
        }
    }
}

/// Hyperparameters for all three classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalParams {
    pub standardize: bool,
    pub tree: TreeParams,
    pub forest: ForestParams,
    pub svm: SvmParams,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        ClassicalParams {
            standardize: true,
            tree: TreeParams::default(),
            forest: ForestParams::default(),
            svm: SvmParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Tree(DecisionTree),
    Forest(RandomForest),
    Svm(SvmModel),
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Tree(_) => ClassifierKind::DecisionTree,
            Classifier::Forest(_) => ClassifierKind::RandomForest,
            Classifier::Svm(_) => ClassifierKind::Svm,
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        match self {
            Classifier::Tree(t) => t.predict(x),
            Classifier::Forest(f) => f.predict(x),
            Classifier::Svm(s) => s.predict(x),
        }
    }
}

/// An optional scaler followed by a fitted classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalModel {
    pub scaler: Option<Scaler>,
    pub classifier: Classifier,
}

const ARCHIVE_PREFIX: &str = "classical-";

impl ClassicalModel {
    /// Fits the scaler (if enabled) and then the classifier of `kind`.
    /// `seed` drives the forest's bootstrap and feature sampling.
    pub fn fit(kind: ClassifierKind, x: &Matrix, y: &[usize], params: &ClassicalParams, seed: u64) -> Result<Self> {
        x.check_fit_input(y)?;
        let (scaler, xs) = if params.standardize {
            let (s, xs) = Scaler::fit_transform(x)?;
            (Some(s), xs)
        } else {
            (None, x.clone())
        };
        let classifier = match kind {
            ClassifierKind::DecisionTree => Classifier::Tree(DecisionTree::fit(&xs, y, &params.tree)?),
            ClassifierKind::RandomForest => {
                let fp = ForestParams {
                    seed,
                    ..params.forest.clone()
                };
                Classifier::Forest(RandomForest::fit(&xs, y, &fp)?)
            }
            ClassifierKind::Svm => Classifier::Svm(SvmModel::fit(&xs, y, &params.svm)?),
        };
        Ok(ClassicalModel { scaler, classifier })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        match &self.scaler {
            Some(s) => self.classifier.predict(&s.transform(x)?),
            None => self.classifier.predict(x),
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(&format!("{ARCHIVE_PREFIX}{}", self.classifier.kind()));
        if let Some(s) = &self.scaler {
            a.insert("scaler/mean", vec![s.mean.len()], Payload::F64(s.mean.clone()))?;
            a.insert("scaler/std", vec![s.std.len()], Payload::F64(s.std.clone()))?;
        }
        match &self.classifier {
            Classifier::Tree(t) => t.write_archive(&mut a, "tree")?,
            Classifier::Forest(f) => f.write_archive(&mut a)?,
            Classifier::Svm(s) => s.write_archive(&mut a)?,
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let kind: ClassifierKind = a
            .kind()
            .strip_prefix(ARCHIVE_PREFIX)
            .ok_or_else(|| Error::Archive(vec![format!("archive kind {:?} is not a classical model", a.kind())]))?
            .parse()?;
        let scaler = match a.get("scaler/mean") {
            Some(_) => Some(Scaler {
                mean: a.f64s("scaler/mean")?.1.to_vec(),
                std: a.f64s("scaler/std")?.1.to_vec(),
            }),
            None => None,
        };
        let classifier = match kind {
            ClassifierKind::DecisionTree => Classifier::Tree(DecisionTree::read_archive(a, "tree")?),
            ClassifierKind::RandomForest => Classifier::Forest(RandomForest::read_archive(a)?),
            ClassifierKind::Svm => Classifier::Svm(SvmModel::read_archive(a)?),
        };
        Ok(ClassicalModel { scaler, classifier })
    }
}

/// Reads a `[1]`-shaped i64 entry as `usize`.
pub(crate) fn read_count(a: &Archive, name: &str) -> Result<usize> {
    let (_, v) = a.i64s(name)?;
    match v {
        [n] if *n >= 0 => Ok(*n as usize),
        _ => Err(Error::Archive(vec![format!("{name}: expected one non-negative count")])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scaler_hand_cases() {
        let x = Matrix::from_rows(&[vec![0.0, 5.0], vec![2.0, 5.0]]).unwrap();
        let (_, t) = Scaler::fit_transform(&x).unwrap();
        assert_eq!(t.data(), &[-1.0, 0.0, 1.0, 0.0]);
        assert!(Scaler::fit(&Matrix::new(0, 3, vec![]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn scaled_columns_are_centred(rows in 2usize..30, cols in 1usize..6, seed in 0u64..1000) {
            let mut rng = crate::tensor::RngState::new(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-50.0, 80.0)).collect();
            let x = Matrix::new(rows, cols, data).unwrap();
            let (s, t) = Scaler::fit_transform(&x).unwrap();
            for c in 0..cols {
                let col: Vec<f64> = (0..rows).map(|r| t.row(r)[c]).collect();
                let mean = col.iter().sum::<f64>() / rows as f64;
                prop_assert!(mean.abs() < 1e-6);
                if s.std[c] > STD_FLOOR {
                    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
                    prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn every_classifier_round_trips_through_an_archive() {
        let (x, y) = datasets::gaussian_blobs(15, 4, 3, 4.0, 1.0, 9);
        let dir = tempfile::tempdir().unwrap();
        let params = ClassicalParams {
            forest: ForestParams {
                n_trees: 7,
                ..ForestParams::default()
            },
            ..ClassicalParams::default()
        };
        for kind in [ClassifierKind::DecisionTree, ClassifierKind::RandomForest, ClassifierKind::Svm] {
            let m = ClassicalModel::fit(kind, &x, &y, &params, 3).unwrap();
            let stem = dir.path().join(kind.name());
            m.to_archive().unwrap().save(&stem).unwrap();
            let back = ClassicalModel::from_archive(&Archive::load(&stem).unwrap()).unwrap();
            assert_eq!(back, m, "{kind}");
            assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        }
    }

    #[test]
    fn foreign_archive_is_rejected() {
        assert!(ClassicalModel::from_archive(&Archive::new("weights")).is_err());
    }
}

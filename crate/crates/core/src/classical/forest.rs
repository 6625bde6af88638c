use rayon::prelude::*;

use super::tree::{majority, DecisionTree, MaxFeatures, TreeParams};
use super::{read_count, Matrix};
use crate::archive::{Archive, Payload};
use crate::error::{Error, Result};
use crate::tensor::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    /// Disable to fit every tree on the full set (test hook).
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub max_depth: Option<usize>,
    /// Tree `t` draws from `seed + t`.
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            min_samples_split: 2,
            max_depth: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    trees: Vec<DecisionTree>,
    n_classes: usize,
    n_features: usize,
}

impl RandomForest {
    pub fn fit(x: &Matrix, y: &[usize], params: &ForestParams) -> Result<Self> {
        x.check_fit_input(y)?;
        if params.n_trees == 0 {
            return Err(Error::Param("forest needs at least one tree".into()));
        }
        let n = y.len();
        let n_classes = y.iter().max().map_or(1, |m| m + 1);
        let tree_params = TreeParams {
            min_samples_split: params.min_samples_split,
            max_depth: params.max_depth,
            max_features: params.max_features,
        };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = RngState::new(params.seed.wrapping_add(t as u64));
                let idx = if params.bootstrap {
                    (0..n).map(|_| rng.below(n)).collect()
                } else {
                    (0..n).collect()
                };
                let sampled = params.max_features.resolve(x.cols()) < x.cols();
                DecisionTree::fit_rows(x, y, idx, n_classes, &tree_params, sampled.then_some(&mut rng))
            })
            .collect();
        Ok(RandomForest {
            trees,
            n_classes,
            n_features: x.cols(),
        })
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    /// Per-class vote counts for one row.
    pub fn votes(&self, row: &[f64]) -> Vec<usize> {
        let mut v = vec![0; self.n_classes];
        for t in &self.trees {
            v[t.predict_row(row)] += 1;
        }
        v
    }

    /// Majority vote; ties go to the lowest class index.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        x.check_cols("forest_predict", self.n_features)?;
        Ok((0..x.rows()).map(|i| majority(&self.votes(x.row(i)))).collect())
    }

    pub(crate) fn write_archive(&self, a: &mut Archive) -> Result<()> {
        a.insert("forest/n_trees", vec![1], Payload::I64(vec![self.trees.len() as i64]))?;
        for (i, t) in self.trees.iter().enumerate() {
            t.write_archive(a, &format!("forest/tree{i}"))?;
        }
        Ok(())
    }

    pub(crate) fn read_archive(a: &Archive) -> Result<Self> {
        let n = read_count(a, "forest/n_trees")?;
        let trees: Vec<DecisionTree> =
            (0..n).map(|i| DecisionTree::read_archive(a, &format!("forest/tree{i}"))).collect::<Result<_>>()?;
        let first = trees.first().ok_or_else(|| Error::Archive(vec!["forest has no trees".into()]))?;
        let (n_classes, n_features) = (first.n_classes(), first.n_features());
        if trees.iter().any(|t| t.n_classes() != n_classes || t.n_features() != n_features) {
            return Err(Error::Archive(vec!["forest trees disagree on classes or features".into()]));
        }
        Ok(RandomForest {
            trees,
            n_classes,
            n_features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::datasets::gaussian_blobs;

    #[test]
    fn degenerate_forest_equals_tree() {
        let (x, y) = gaussian_blobs(20, 3, 4, 2.0, 1.5, 4);
        let f = RandomForest::fit(
            &x,
            &y,
            &ForestParams {
                n_trees: 1,
                bootstrap: false,
                max_features: MaxFeatures::All,
                ..ForestParams::default()
            },
        )
        .unwrap();
        let t = DecisionTree::fit(&x, &y, &TreeParams::default()).unwrap();
        assert_eq!(f.trees()[0], t);
        let (probe, _) = gaussian_blobs(10, 3, 4, 2.0, 2.0, 99);
        assert_eq!(f.predict(&probe).unwrap(), t.predict(&probe).unwrap());
    }

    #[test]
    fn seeded_and_order_invariant() {
        let (x, y) = gaussian_blobs(15, 4, 6, 2.0, 1.5, 5);
        let p = ForestParams {
            n_trees: 15,
            seed: 7,
            ..ForestParams::default()
        };
        let a = RandomForest::fit(&x, &y, &p).unwrap();
        let b = RandomForest::fit(&x, &y, &p).unwrap();
        assert_eq!(a, b);
        let (probe, _) = gaussian_blobs(10, 4, 6, 2.0, 2.0, 77);
        let mut reversed = a.clone();
        reversed.trees.reverse();
        assert_eq!(a.predict(&probe).unwrap(), reversed.predict(&probe).unwrap());
        assert_eq!(a.trees().len(), 15);
    }
}

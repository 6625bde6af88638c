//! CART classification tree with Gini impurity.

use std::cmp::Ordering;

use super::{read_count, Matrix};
use crate::archive::{Archive, Payload};
use crate::error::{Error, Result};
use crate::tensor::RngState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxFeatures {
    All,
    /// `floor(sqrt(D))`, at least 1.
    Sqrt,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> usize {
        match self {
            MaxFeatures::All => d,
            MaxFeatures::Sqrt => ((d as f64).sqrt().floor() as usize).max(1),
            MaxFeatures::Count(n) => n.clamp(1, d.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeParams {
    pub min_samples_split: usize,
    pub max_depth: Option<usize>,
    pub max_features: MaxFeatures,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            min_samples_split: 2,
            max_depth: None,
            max_features: MaxFeatures::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf {
        label: usize,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub kind: NodeKind,
    /// Training rows per class that reached this node.
    pub counts: Vec<usize>,
}

/// Nodes are stored in an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
    n_features: usize,
    n_classes: usize,
}

/// Majority class; ties go to the lowest index.
pub(crate) fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// `sum(left_c^2)/n_l + sum(right_c^2)/n_r` as an exact fraction; larger
/// means lower weighted Gini impurity.
#[derive(Debug, Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn cmp(&self, other: &Score) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

fn sum_sq(counts: &[usize]) -> u128 {
    counts.iter().map(|&c| (c as u128) * (c as u128)).sum()
}

struct Candidate {
    score: Score,
    feature: usize,
    threshold: f64,
}

fn better(new: &Candidate, best: &Option<Candidate>) -> bool {
    let Some(b) = best else { return true };
    match new.score.cmp(&b.score) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (new.feature, new.threshold) < (b.feature, b.threshold),
    }
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [usize],
    n_classes: usize,
    params: &'a TreeParams,
    rng: Option<&'a mut RngState>,
    scratch: Vec<(f64, usize)>,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    /// Scans one feature; `None` if it is constant over `idx`.
    fn scan_feature(&mut self, f: usize, idx: &[usize], best: &mut Option<Candidate>) -> bool {
        let x = self.x;
        self.scratch.clear();
        self.scratch.extend(idx.iter().map(|&i| (x.row(i)[f], self.y[i])));
        self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = self.scratch.len();
        if self.scratch[0].0 == self.scratch[n - 1].0 {
            return false;
        }
        let mut left = vec![0usize; self.n_classes];
        let mut right = vec![0usize; self.n_classes];
        for &(_, c) in &self.scratch {
            right[c] += 1;
        }
        for i in 0..n - 1 {
            let (a, c) = self.scratch[i];
            left[c] += 1;
            right[c] -= 1;
            let b = self.scratch[i + 1].0;
            if a >= b {
                continue;
            }
            let (nl, nr) = ((i + 1) as u128, (n - i - 1) as u128);
            let mut threshold = (a + b) / 2.0;
            if threshold >= b {
                threshold = a;
            }
            let cand = Candidate {
                score: Score {
                    num: sum_sq(&left) * nr + sum_sq(&right) * nl,
                    den: nl * nr,
                },
                feature: f,
                threshold,
            };
            if better(&cand, best) {
                *best = Some(cand);
            }
        }
        true
    }

    fn best_split(&mut self, idx: &[usize], counts: &[usize]) -> Option<(usize, f64)> {
        let d = self.x.cols();
        let want = self.params.max_features.resolve(d);
        let mut best = None;
        if want >= d && self.rng.is_none() {
            for f in 0..d {
                self.scan_feature(f, idx, &mut best);
            }
        } else {
            // Visit features in random order until `want` non-constant ones
            // have been scanned.
            let mut order: Vec<usize> = (0..d).collect();
            let mut visited = 0;
            for k in 0..d {
                if visited == want {
                    break;
                }
                let j = match self.rng.as_deref_mut() {
                    Some(rng) => k + rng.below(d - k),
                    None => k,
                };
                order.swap(k, j);
                if self.scan_feature(order[k], idx, &mut best) {
                    visited += 1;
                }
            }
        }
        let best = best?;
        let parent = Score {
            num: sum_sq(counts),
            den: idx.len() as u128,
        };
        // Weighted child impurity never exceeds the parent's, so a split that
        // only ties it is still taken; XOR-like nodes need one to make
        // progress.
        (best.score.cmp(&parent) != Ordering::Less).then_some((best.feature, best.threshold))
    }

    fn build(mut self, idx: Vec<usize>) -> Vec<TreeNode> {
        let mut nodes = vec![TreeNode {
            kind: NodeKind::Leaf { label: 0 },
            counts: Vec::new(),
        }];
        let mut stack = vec![(0usize, idx, 0usize)];
        while let Some((id, idx, depth)) = stack.pop() {
            let counts = self.counts(&idx);
            let label = majority(&counts);
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            let too_deep = self.params.max_depth.is_some_and(|m| depth >= m);
            let split = if pure || too_deep || idx.len() < self.params.min_samples_split {
                None
            } else {
                self.best_split(&idx, &counts)
            };
            nodes[id].kind = match split {
                None => NodeKind::Leaf { label },
                Some((feature, threshold)) => {
                    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x.row(i)[feature] <= threshold);
                    let left = nodes.len();
                    let right = left + 1;
                    for _ in 0..2 {
                        nodes.push(TreeNode {
                            kind: NodeKind::Leaf { label: 0 },
                            counts: Vec::new(),
                        });
                    }
                    stack.push((right, r, depth + 1));
                    stack.push((left, l, depth + 1));
                    NodeKind::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
            };
            nodes[id].counts = counts;
        }
        nodes
    }
}

impl DecisionTree {
    /// Grows a tree until leaves are pure, too small to split, or constant
    /// on every candidate feature.
    pub fn fit(x: &Matrix, y: &[usize], params: &TreeParams) -> Result<Self> {
        x.check_fit_input(y)?;
        let n_classes = y.iter().max().map_or(1, |m| m + 1);
        Ok(Self::fit_rows(x, y, (0..y.len()).collect(), n_classes, params, None))
    }

    /// Grows on the (possibly repeated) rows `idx`. With `rng`, features are
    /// sampled per node.
    pub(crate) fn fit_rows(
        x: &Matrix,
        y: &[usize],
        idx: Vec<usize>,
        n_classes: usize,
        params: &TreeParams,
        rng: Option<&mut RngState>,
    ) -> Self {
        let builder = Builder {
            x,
            y,
            n_classes,
            params,
            rng,
            scratch: Vec::with_capacity(idx.len()),
        };
        DecisionTree {
            nodes: builder.build(idx),
            n_features: x.cols(),
            n_classes,
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn depth(&self) -> usize {
        let mut max = 0;
        let mut stack = vec![(0, 0)];
        while let Some((id, d)) = stack.pop() {
            max = max.max(d);
            if let NodeKind::Split { left, right, .. } = self.nodes[id].kind {
                stack.push((left, d + 1));
                stack.push((right, d + 1));
            }
        }
        max
    }

    pub fn predict_row(&self, row: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match self.nodes[id].kind {
                NodeKind::Leaf { label } => return label,
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => id = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        x.check_cols("dtree_predict", self.n_features)?;
        Ok((0..x.rows()).map(|i| self.predict_row(x.row(i))).collect())
    }

    pub(crate) fn write_archive(&self, a: &mut Archive, prefix: &str) -> Result<()> {
        let n = self.nodes.len();
        let mut kind = Vec::with_capacity(n * 4);
        let mut thresholds = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n * self.n_classes);
        for node in &self.nodes {
            match node.kind {
                NodeKind::Leaf { label } => {
                    kind.extend([-1, label as i64, 0, 0]);
                    thresholds.push(0.0);
                }
                NodeKind::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    kind.extend([1, feature as i64, left as i64, right as i64]);
                    thresholds.push(threshold);
                }
            }
            counts.extend(node.counts.iter().map(|&c| c as i64));
        }
        a.insert(&format!("{prefix}/n_features"), vec![1], Payload::I64(vec![self.n_features as i64]))?;
        a.insert(&format!("{prefix}/n_classes"), vec![1], Payload::I64(vec![self.n_classes as i64]))?;
        a.insert(&format!("{prefix}/nodes"), vec![n, 4], Payload::I64(kind))?;
        a.insert(&format!("{prefix}/thresholds"), vec![n], Payload::F64(thresholds))?;
        a.insert(&format!("{prefix}/counts"), vec![n, self.n_classes], Payload::I64(counts))
    }

    pub(crate) fn read_archive(a: &Archive, prefix: &str) -> Result<Self> {
        let n_features = read_count(a, &format!("{prefix}/n_features"))?;
        let n_classes = read_count(a, &format!("{prefix}/n_classes"))?;
        let (shape, kind) = a.i64s(&format!("{prefix}/nodes"))?;
        let (_, thresholds) = a.f64s(&format!("{prefix}/thresholds"))?;
        let (_, counts) = a.i64s(&format!("{prefix}/counts"))?;
        let n = shape[0];
        let bad = |what: &str| Error::Archive(vec![format!("{prefix}: {what}")]);
        if thresholds.len() != n || counts.len() != n * n_classes {
            return Err(bad("node arrays disagree in length"));
        }
        let mut nodes = Vec::with_capacity(n);
        for (i, k) in kind.chunks(4).enumerate() {
            let idx = |v: i64, lim: usize| usize::try_from(v).ok().filter(|&u| u < lim);
            let node_kind = match k[0] {
                -1 => NodeKind::Leaf {
                    label: idx(k[1], n_classes).ok_or_else(|| bad("leaf label out of range"))?,
                },
                1 => NodeKind::Split {
                    feature: idx(k[1], n_features).ok_or_else(|| bad("feature out of range"))?,
                    threshold: thresholds[i],
                    // children always follow their parent in the arena
                    left: idx(k[2], n).filter(|&c| c > i).ok_or_else(|| bad("bad child index"))?,
                    right: idx(k[3], n).filter(|&c| c > i).ok_or_else(|| bad("bad child index"))?,
                },
                _ => return Err(bad("unknown node tag")),
            };
            nodes.push(TreeNode {
                kind: node_kind,
                counts: counts[i * n_classes..(i + 1) * n_classes].iter().map(|&c| c as usize).collect(),
            });
        }
        if nodes.is_empty() {
            return Err(bad("tree has no nodes"));
        }
        Ok(DecisionTree {
            nodes,
            n_features,
            n_classes,
        })
    }
}

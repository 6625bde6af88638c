//! RBF-kernel SVM trained by SMO, with one-vs-one multiclass voting.
//!
//! The solver works on the dual `min 1/2 a'Qa - e'a`, `0 <= a <= C`,
//! `y'a = 0` with `Q_ij = y_i y_j K(x_i, x_j)`, choosing the maximal
//! violating pair each iteration.

use rayon::prelude::*;

use super::{read_count, Matrix};
use crate::archive::{Archive, Payload};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    /// `1 / (D * var(X))` over every entry of the training matrix.
    Scale,
    Value(f64),
}

impl Gamma {
    pub fn resolve(self, x: &Matrix) -> f64 {
        match self {
            Gamma::Value(g) => g,
            Gamma::Scale => {
                let n = x.data().len() as f64;
                let mean = x.data().iter().sum::<f64>() / n;
                let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                if var > 0.0 {
                    1.0 / (x.cols() as f64 * var)
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: Gamma,
    /// Stop once the maximal KKT violation drops below this.
    pub tol: f64,
    /// Defaults to `max(100 * N, 10_000)` iterations.
    pub max_iter: Option<usize>,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            gamma: Gamma::Scale,
            tol: 1e-3,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    pub converged: bool,
    /// Final value of the maximised dual `sum(a) - 1/2 a'Qa`.
    pub dual_objective: f64,
    /// False if any iteration decreased the dual objective.
    pub dual_monotone: bool,
    /// Largest KKT residual over the training rows at exit.
    pub max_kkt_residual: f64,
}

/// KKT residual of one training row with multiplier `alpha` and functional
/// margin `y * f(x)`.
pub fn kkt_residual(alpha: f64, c: f64, margin: f64) -> f64 {
    if alpha <= 0.0 {
        (1.0 - margin).max(0.0)
    } else if alpha >= c {
        (margin - 1.0).max(0.0)
    } else {
        (margin - 1.0).abs()
    }
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Full kernel matrix up to this many rows; larger problems compute rows on
/// demand.
const DENSE_KERNEL_LIMIT: usize = 3000;

struct Kernel<'a> {
    x: &'a Matrix,
    gamma: f64,
    dense: Option<Vec<f64>>,
}

impl<'a> Kernel<'a> {
    fn new(x: &'a Matrix, gamma: f64) -> Self {
        let n = x.rows();
        let dense = (n <= DENSE_KERNEL_LIMIT).then(|| {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = rbf(x.row(i), x.row(j), gamma);
                    k[i * n + j] = v;
                    k[j * n + i] = v;
                }
            }
            k
        });
        Kernel { x, gamma, dense }
    }

    fn row(&self, i: usize) -> std::borrow::Cow<'_, [f64]> {
        let n = self.x.rows();
        match &self.dense {
            Some(k) => std::borrow::Cow::Borrowed(&k[i * n..(i + 1) * n]),
            None => std::borrow::Cow::Owned((0..n).map(|j| rbf(self.x.row(i), self.x.row(j), self.gamma)).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    support: Matrix,
    /// `alpha_i * y_i` per support vector.
    coef: Vec<f64>,
    alpha: Vec<f64>,
    /// Training row of each support vector.
    support_index: Vec<usize>,
    b: f64,
    gamma: f64,
    c: f64,
    report: SolverReport,
}

fn check_binary_labels(y: &[f64]) -> Result<()> {
    if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::Validation(format!("binary SVM labels must be +1 or -1, found {bad}")));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::Validation("binary SVM needs both classes present".into()));
    }
    Ok(())
}

impl BinarySvm {
    pub fn fit(x: &Matrix, y: &[f64], params: &SvmParams) -> Result<Self> {
        x.check_fit_input(y)?;
        let gamma = params.gamma.resolve(x);
        Self::fit_with_gamma(x, y, params, gamma)
    }

    pub(crate) fn fit_with_gamma(x: &Matrix, y: &[f64], params: &SvmParams, gamma: f64) -> Result<Self> {
        x.check_fit_input(y)?;
        check_binary_labels(y)?;
        if !(params.c > 0.0 && params.tol > 0.0 && gamma > 0.0) {
            return Err(Error::Param(format!(
                "SVM needs C, tol and gamma positive (C={}, tol={}, gamma={gamma})",
                params.c, params.tol
            )));
        }
        let n = y.len();
        let c = params.c;
        let cap = params.max_iter.unwrap_or((100 * n).max(10_000));
        let kernel = Kernel::new(x, gamma);
        let mut alpha = vec![0.0; n];
        let mut grad = vec![-1.0; n];
        let up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
        let low = |a: f64, yt: f64| (yt < 0.0 && a < c) || (yt > 0.0 && a > 0.0);
        let dual = |alpha: &[f64], grad: &[f64]| -> f64 {
            // f = 1/2 a'(G + e) - e'a = 1/2 sum a (G - 1); dual = -f
            -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
        };
        let select = |alpha: &[f64], grad: &[f64]| {
            let (mut i, mut m) = (usize::MAX, f64::NEG_INFINITY);
            let (mut j, mut mm) = (usize::MAX, f64::INFINITY);
            for t in 0..n {
                let v = -y[t] * grad[t];
                if up(alpha[t], y[t]) && v > m {
                    i = t;
                    m = v;
                }
                if low(alpha[t], y[t]) && v < mm {
                    j = t;
                    mm = v;
                }
            }
            (i, m, j, mm)
        };

        let mut iterations = 0;
        let mut converged = false;
        let mut monotone = true;
        let mut objective = 0.0f64;
        loop {
            let (i, m, j, mm) = select(&alpha, &grad);
            if i == usize::MAX || j == usize::MAX || m - mm < params.tol {
                converged = true;
                break;
            }
            if iterations >= cap {
                break;
            }
            let ki = kernel.row(i);
            let kj = kernel.row(j);
            let mut eta = ki[i] + kj[j] - 2.0 * ki[j];
            if eta <= 0.0 {
                eta = 1e-12;
            }
            let bound_i = if y[i] > 0.0 { c - alpha[i] } else { alpha[i] };
            let bound_j = if y[j] > 0.0 { alpha[j] } else { c - alpha[j] };
            let t = ((m - mm) / eta).min(bound_i).min(bound_j);
            let new_i = if t == bound_i {
                if y[i] > 0.0 {
                    c
                } else {
                    0.0
                }
            } else {
                alpha[i] + y[i] * t
            };
            let new_j = if t == bound_j {
                if y[j] > 0.0 {
                    0.0
                } else {
                    c
                }
            } else {
                alpha[j] - y[j] * t
            };
            let (di, dj) = (new_i - alpha[i], new_j - alpha[j]);
            alpha[i] = new_i;
            alpha[j] = new_j;
            for k in 0..n {
                grad[k] += y[k] * (y[i] * ki[k] * di + y[j] * kj[k] * dj);
            }
            let w = dual(&alpha, &grad);
            if w < objective - 1e-12 * objective.abs().max(1.0) {
                monotone = false;
            }
            objective = w;
            iterations += 1;
        }

        // Intercept: mean over free vectors, else the middle of the
        // feasible interval.
        let free: Vec<f64> = (0..n).filter(|&t| alpha[t] > 0.0 && alpha[t] < c).map(|t| -y[t] * grad[t]).collect();
        let b = if free.is_empty() {
            let (_, m, _, mm) = select(&alpha, &grad);
            match (m.is_finite(), mm.is_finite()) {
                (true, true) => (m + mm) / 2.0,
                (true, false) => m,
                (false, true) => mm,
                (false, false) => 0.0,
            }
        } else {
            free.iter().sum::<f64>() / free.len() as f64
        };
        let max_kkt_residual = (0..n)
            .map(|t| {
                // g_t = sum_j a_j y_j K_tj = y_t (G_t + 1)
                let margin = y[t] * (y[t] * (grad[t] + 1.0) + b);
                kkt_residual(alpha[t], c, margin)
            })
            .fold(0.0, f64::max);

        let support_index: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
        Ok(BinarySvm {
            support: x.select_rows(&support_index),
            coef: support_index.iter().map(|&t| alpha[t] * y[t]).collect(),
            alpha: support_index.iter().map(|&t| alpha[t]).collect(),
            support_index,
            b,
            gamma,
            c,
            report: SolverReport {
                iterations,
                converged,
                dual_objective: objective,
                dual_monotone: monotone,
                max_kkt_residual,
            },
        })
    }

    pub fn report(&self) -> &SolverReport {
        &self.report
    }

    pub fn intercept(&self) -> f64 {
        self.b
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn n_support(&self) -> usize {
        self.coef.len()
    }

    /// Multiplier of training row `row` (zero for non-support rows).
    pub fn alpha_of(&self, row: usize) -> f64 {
        self.support_index
            .binary_search(&row)
            .map_or(0.0, |k| self.alpha[k])
    }

    pub fn decision_row(&self, row: &[f64]) -> f64 {
        (0..self.support.rows())
            .map(|s| self.coef[s] * rbf(self.support.row(s), row, self.gamma))
            .sum::<f64>()
            + self.b
    }

    pub fn decision(&self, x: &Matrix) -> Result<Vec<f64>> {
        x.check_cols("svm_decision", self.support.cols())?;
        Ok((0..x.rows()).map(|i| self.decision_row(x.row(i))).collect())
    }

    fn write(&self, a: &mut Archive, p: &str) -> Result<()> {
        let (n, d) = (self.support.rows(), self.support.cols());
        a.insert(&format!("{p}/support"), vec![n, d], Payload::F64(self.support.data().to_vec()))?;
        a.insert(&format!("{p}/coef"), vec![n], Payload::F64(self.coef.clone()))?;
        a.insert(&format!("{p}/alpha"), vec![n], Payload::F64(self.alpha.clone()))?;
        a.insert(
            &format!("{p}/index"),
            vec![n],
            Payload::I64(self.support_index.iter().map(|&i| i as i64).collect()),
        )?;
        let r = &self.report;
        a.insert(
            &format!("{p}/scalars"),
            vec![5],
            Payload::F64(vec![self.b, self.gamma, self.c, r.dual_objective, r.max_kkt_residual]),
        )?;
        a.insert(
            &format!("{p}/report"),
            vec![3],
            Payload::I64(vec![r.iterations as i64, r.converged as i64, r.dual_monotone as i64]),
        )
    }

    fn read(a: &Archive, p: &str) -> Result<Self> {
        let (shape, sv) = a.f64s(&format!("{p}/support"))?;
        let support = Matrix::new(shape[0], shape.get(1).copied().unwrap_or(0), sv.to_vec())?;
        let coef = a.f64s(&format!("{p}/coef"))?.1.to_vec();
        let alpha = a.f64s(&format!("{p}/alpha"))?.1.to_vec();
        let support_index = a.i64s(&format!("{p}/index"))?.1.iter().map(|&i| i as usize).collect();
        let (_, s) = a.f64s(&format!("{p}/scalars"))?;
        let (_, r) = a.i64s(&format!("{p}/report"))?;
        if s.len() != 5 || r.len() != 3 || coef.len() != support.rows() || alpha.len() != support.rows() {
            return Err(Error::Archive(vec![format!("{p}: inconsistent SVM entries")]));
        }
        Ok(BinarySvm {
            support,
            coef,
            alpha,
            support_index,
            b: s[0],
            gamma: s[1],
            c: s[2],
            report: SolverReport {
                iterations: r[0] as usize,
                converged: r[1] != 0,
                dual_objective: s[3],
                dual_monotone: r[2] != 0,
                max_kkt_residual: s[4],
            },
        })
    }
}

/// Class with the most votes; ties go to the lowest index.
pub fn tally_votes(n_classes: usize, winners: &[usize]) -> usize {
    let mut votes = vec![0usize; n_classes];
    for &w in winners {
        votes[w] += 1;
    }
    super::tree::majority(&votes)
}

/// One-vs-one ensemble: pair `(a, b)` with `a < b` is trained with `a` as
/// `+1`, and a non-negative decision value votes for `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    n_classes: usize,
    n_features: usize,
    pairs: Vec<((usize, usize), BinarySvm)>,
}

impl SvmModel {
    pub fn fit(x: &Matrix, y: &[usize], params: &SvmParams) -> Result<Self> {
        x.check_fit_input(y)?;
        let n_classes = y.iter().max().map_or(0, |m| m + 1);
        if n_classes < 2 {
            return Err(Error::Validation("SVM needs at least two classes".into()));
        }
        if let Some(c) = (0..n_classes).find(|c| !y.contains(c)) {
            return Err(Error::Validation(format!("class {c} has no training rows")));
        }
        let gamma = params.gamma.resolve(x);
        let pair_ids: Vec<(usize, usize)> =
            (0..n_classes).flat_map(|a| (a + 1..n_classes).map(move |b| (a, b))).collect();
        let pairs = pair_ids
            .into_par_iter()
            .map(|(a, b)| {
                let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == a || y[i] == b).collect();
                let yb: Vec<f64> = rows.iter().map(|&i| if y[i] == a { 1.0 } else { -1.0 }).collect();
                let m = BinarySvm::fit_with_gamma(&x.select_rows(&rows), &yb, params, gamma)?;
                Ok(((a, b), m))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SvmModel {
            n_classes,
            n_features: x.cols(),
            pairs,
        })
    }

    /// Assembles a model from already-fitted pairs.
    pub fn from_pairs(n_classes: usize, n_features: usize, pairs: Vec<((usize, usize), BinarySvm)>) -> Self {
        SvmModel {
            n_classes,
            n_features,
            pairs,
        }
    }

    pub fn pairs(&self) -> &[((usize, usize), BinarySvm)] {
        &self.pairs
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        x.check_cols("svm_predict", self.n_features)?;
        let mut ordered = Vec::new();
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                let m = self
                    .pairs
                    .iter()
                    .find(|(p, _)| *p == (a, b))
                    .ok_or_else(|| Error::Validation(format!("missing SVM for class pair ({a}, {b})")))?;
                ordered.push(m);
            }
        }
        Ok((0..x.rows())
            .map(|i| {
                let row = x.row(i);
                let winners: Vec<usize> = ordered
                    .iter()
                    .map(|((a, b), m)| if m.decision_row(row) >= 0.0 { *a } else { *b })
                    .collect();
                tally_votes(self.n_classes, &winners)
            })
            .collect())
    }

    pub(crate) fn write_archive(&self, a: &mut Archive) -> Result<()> {
        a.insert("svm/n_classes", vec![1], Payload::I64(vec![self.n_classes as i64]))?;
        a.insert("svm/n_features", vec![1], Payload::I64(vec![self.n_features as i64]))?;
        let ids = self.pairs.iter().flat_map(|((x, y), _)| [*x as i64, *y as i64]).collect();
        a.insert("svm/pairs", vec![self.pairs.len(), 2], Payload::I64(ids))?;
        for ((x, y), m) in &self.pairs {
            m.write(a, &format!("svm/pair{x}_{y}"))?;
        }
        Ok(())
    }

    pub(crate) fn read_archive(a: &Archive) -> Result<Self> {
        let n_classes = read_count(a, "svm/n_classes")?;
        let n_features = read_count(a, "svm/n_features")?;
        let (_, ids) = a.i64s("svm/pairs")?;
        let pairs = ids
            .chunks(2)
            .map(|p| {
                let (x, y) = (p[0] as usize, p[1] as usize);
                Ok(((x, y), BinarySvm::read(a, &format!("svm/pair{x}_{y}"))?))
            })
            .collect::<Result<_>>()?;
        Ok(SvmModel {
            n_classes,
            n_features,
            pairs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::datasets::{binary_blobs, gaussian_blobs, xor_corners};

    fn residuals(m: &BinarySvm, x: &Matrix, y: &[f64]) -> f64 {
        (0..x.rows())
            .map(|t| kkt_residual(m.alpha_of(t), m.c(), y[t] * m.decision_row(x.row(t))))
            .fold(0.0, f64::max)
    }

    #[test]
    fn separable_blobs_fit_exactly_with_small_kkt() {
        let (x, y) = binary_blobs(40, 2, 3.0, 0.7, 1);
        let m = BinarySvm::fit(&x, &y, &SvmParams::default()).unwrap();
        let f = m.decision(&x).unwrap();
        assert!(f.iter().zip(&y).all(|(f, y)| f * y > 0.0));
        assert!(m.report().converged && m.report().dual_monotone);
        assert!(residuals(&m, &x, &y) < 1e-3);
        assert!(m.report().max_kkt_residual < 1e-3);
    }

    #[test]
    fn xor_corners_are_separated() {
        let (x, y) = xor_corners();
        let m = BinarySvm::fit(&x, &y, &SvmParams::default()).unwrap();
        let f = m.decision(&x).unwrap();
        assert!(f.iter().zip(&y).all(|(f, y)| f * y > 0.0), "{f:?}");
        assert!(residuals(&m, &x, &y) < 1e-3);
    }

    #[test]
    fn single_class_is_validation_error() {
        let (x, _) = xor_corners();
        assert!(matches!(
            BinarySvm::fit(&x, &[1.0; 4], &SvmParams::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn vote_tie_goes_low() {
        assert_eq!(tally_votes(4, &[2, 2, 2, 2, 2, 2]), 2);
        assert_eq!(tally_votes(4, &[1, 3, 1, 3, 0, 2]), 1);
    }

    #[test]
    fn well_separated_four_class_blobs() {
        let (x, y) = gaussian_blobs(50, 4, 2, 10.0 / 2f64.sqrt(), 1.0, 3);
        let m = SvmModel::fit(&x, &y, &SvmParams::default()).unwrap();
        assert_eq!(m.pairs().len(), 6);
        let (xt, yt) = gaussian_blobs(100, 4, 2, 10.0 / 2f64.sqrt(), 1.0, 4);
        let p = m.predict(&xt).unwrap();
        let acc = p.iter().zip(&yt).filter(|(a, b)| a == b).count() as f64 / yt.len() as f64;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn missing_pair_is_error() {
        let (x, y) = gaussian_blobs(5, 3, 2, 5.0, 1.0, 3);
        let m = SvmModel::fit(&x, &y, &SvmParams::default()).unwrap();
        let partial = SvmModel::from_pairs(3, 2, m.pairs()[..2].to_vec());
        assert!(partial.predict(&x).is_err());
    }

    #[test]
    fn duplicating_points_keeps_sign_pattern() {
        let (x, y) = binary_blobs(20, 2, 4.0, 0.6, 8);
        let m = BinarySvm::fit(&x, &y, &SvmParams::default()).unwrap();
        let dup_rows: Vec<usize> = (0..x.rows()).flat_map(|i| [i, i]).collect();
        let xd = x.select_rows(&dup_rows);
        let yd: Vec<f64> = dup_rows.iter().map(|&i| y[i]).collect();
        let md = BinarySvm::fit(&xd, &yd, &SvmParams::default()).unwrap();
        let grid: Vec<f64> = (0..21).flat_map(|i| (0..21).flat_map(move |j| [-6.0 + 0.6 * i as f64, -6.0 + 0.6 * j as f64])).collect();
        let grid = Matrix::new(441, 2, grid).unwrap();
        let a = m.decision(&grid).unwrap();
        let b = md.decision(&grid).unwrap();
        let flips = a.iter().zip(&b).filter(|(p, q)| (**p >= 0.0) != (**q >= 0.0)).count();
        assert_eq!(flips, 0);
    }
}

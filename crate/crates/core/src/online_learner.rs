//! Schedule-robust stage-one classifiers.
//!
//! Both learners keep order-independent sufficient statistics: per-class
//! running means for the nearest-centroid classifier, and the covariance
//! `A = Σ xxᵀ` plus per-class embedding sums for ridge regression. The
//! ridge weights are solved on demand from the statistics, so no inverse is
//! maintained during the stream.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScrollError};

fn check_class(class: usize, class_count: usize) -> Result<()> {
    if class >= class_count {
        return Err(ScrollError::ClassId { class, class_count });
    }
    Ok(())
}

fn check_dim(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(ScrollError::Shape {
            expected: dim,
            actual: x.len(),
        });
    }
    Ok(())
}

/// Index of the largest score; the smallest index wins ties.
pub(crate) fn argmax(scores: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.into_iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Nearest-centroid statistics: one running-mean prototype per class.
#[derive(Clone, Debug, PartialEq)]
pub struct NccState {
    prototypes: DMatrix<f64>,
    counts: Vec<u64>,
}

impl NccState {
    pub fn new(class_count: usize, dim: usize) -> Self {
        Self {
            prototypes: DMatrix::zeros(class_count, dim),
            counts: vec![0; class_count],
        }
    }

    pub fn from_parts(prototypes: DMatrix<f64>, counts: Vec<u64>) -> Result<Self> {
        if prototypes.nrows() != counts.len() {
            return Err(ScrollError::Shape {
                expected: prototypes.nrows(),
                actual: counts.len(),
            });
        }
        Ok(Self { prototypes, counts })
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn prototypes(&self) -> &DMatrix<f64> {
        &self.prototypes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn prototype(&self, class: usize) -> Vec<f64> {
        self.prototypes.row(class).iter().copied().collect()
    }

    /// `c_y ← (n_y c_y + x) / (n_y + 1)`; only row `y` changes.
    pub fn update(&mut self, x: &[f64], class: usize) -> Result<()> {
        check_class(class, self.class_count())?;
        check_dim(x, self.dim())?;
        let n = self.counts[class] as f64;
        for (j, &v) in x.iter().enumerate() {
            let c = &mut self.prototypes[(class, j)];
            *c = (n * *c + v) / (n + 1.0);
        }
        self.counts[class] += 1;
        Ok(())
    }

    /// Class whose prototype is closest in squared Euclidean distance,
    /// among classes with at least one observation.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        check_dim(x, self.dim())?;
        let mut best: Option<(usize, f64)> = None;
        for (class, &count) in self.counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let dist: f64 = self
                .prototypes
                .row(class)
                .iter()
                .zip(x)
                .map(|(c, v)| (v - c) * (v - c))
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((class, dist));
            }
        }
        best.map(|(c, _)| c).ok_or(ScrollError::NoClass)
    }

    /// Linear form of the nearest-centroid rule.
    ///
    /// `‖x − c‖² = ‖x‖² − 2xᵀc + ‖c‖²`, so the argmin over classes equals
    /// the argmax of `xᵀc − ½‖c‖²`: weight row `c_y`, bias `−½ c_yᵀc_y`.
    /// Unseen classes get a zero row and zero bias.
    pub fn to_linear(&self) -> LinearHead {
        let biases = DVector::from_iterator(
            self.class_count(),
            self.prototypes.row_iter().map(|row| -0.5 * row.norm_squared()),
        );
        LinearHead {
            weights: self.prototypes.clone(),
            biases,
        }
    }

    pub fn max_deviation(&self, other: &NccState) -> f64 {
        max_abs_diff(&self.prototypes, &other.prototypes)
    }
}

/// Recursive ridge-regression statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeState {
    cov: DMatrix<f64>,
    class_sums: DMatrix<f64>,
    lambda: f64,
    seen: u64,
}

impl RidgeState {
    pub fn new(class_count: usize, dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(ScrollError::Config(format!("ridge lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            cov: DMatrix::zeros(dim, dim),
            class_sums: DMatrix::zeros(class_count, dim),
            lambda,
            seen: 0,
        })
    }

    pub fn from_parts(cov: DMatrix<f64>, class_sums: DMatrix<f64>, lambda: f64, seen: u64) -> Result<Self> {
        let mut state = Self::new(class_sums.nrows(), class_sums.ncols(), lambda)?;
        if cov.shape() != (class_sums.ncols(), class_sums.ncols()) {
            return Err(ScrollError::Shape {
                expected: class_sums.ncols() * class_sums.ncols(),
                actual: cov.len(),
            });
        }
        state.cov = cov;
        state.class_sums = class_sums;
        state.seen = seen;
        Ok(state)
    }

    pub fn class_count(&self) -> usize {
        self.class_sums.nrows()
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn class_sums(&self) -> &DMatrix<f64> {
        &self.class_sums
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// `A ← A + xxᵀ`, `c_y ← c_y + x`.
    pub fn update(&mut self, x: &[f64], class: usize) -> Result<()> {
        check_class(class, self.class_count())?;
        check_dim(x, self.dim())?;
        let d = self.dim();
        for col in 0..d {
            let xc = x[col];
            for (row, &xr) in x.iter().enumerate() {
                self.cov[(row, col)] += xr * xc;
            }
        }
        for (j, &v) in x.iter().enumerate() {
            self.class_sums[(class, j)] += v;
        }
        self.seen += 1;
        Ok(())
    }

    /// Solves `(A + λ·n·I) w_z = c_z` for every class.
    ///
    /// Scaling λ by the sample count `n` makes the recursive statistics
    /// reproduce the minimizer of the mean squared loss
    /// `1/n Σ ‖Wᵀx − onehot(y)‖² + λ‖W‖²` exactly.
    pub fn solve(&self) -> Result<LinearHead> {
        if self.seen == 0 {
            return Err(ScrollError::NoClass);
        }
        let mut system = self.cov.clone();
        let ridge = self.lambda * self.seen as f64;
        for i in 0..self.dim() {
            system[(i, i)] += ridge;
        }
        let chol = Cholesky::new(system)
            .ok_or_else(|| ScrollError::LinAlg("ridge system is not positive definite".into()))?;
        let solution = chol.solve(&self.class_sums.transpose());
        if solution.iter().any(|v| !v.is_finite()) {
            return Err(ScrollError::LinAlg("ridge solution is not finite".into()));
        }
        Ok(LinearHead {
            weights: solution.transpose(),
            biases: DVector::zeros(self.class_count()),
        })
    }

    /// Largest elementwise gap over `A` and the class sums.
    pub fn max_deviation(&self, other: &RidgeState) -> f64 {
        max_abs_diff(&self.cov, &other.cov).max(max_abs_diff(&self.class_sums, &other.class_sums))
    }
}

pub(crate) fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A linear classifier `argmax_y w_yᵀx + b_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// One row per class.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

impl LinearHead {
    pub fn zeros(class_count: usize, dim: usize) -> Self {
        Self {
            weights: DMatrix::zeros(class_count, dim),
            biases: DVector::zeros(class_count),
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(x, self.dim())?;
        Ok(self
            .weights
            .row_iter()
            .zip(self.biases.iter())
            .map(|(w, b)| w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let scores = self.scores(x)?;
        argmax(scores).ok_or(ScrollError::NoClass)
    }

    /// `max |a − b| / max(max |b|, tiny)` over weights and biases.
    pub fn relative_deviation(&self, other: &LinearHead) -> f64 {
        let scale = other
            .weights
            .iter()
            .chain(other.biases.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let diff = max_abs_diff(&self.weights, &other.weights).max(
            self.biases
                .iter()
                .zip(other.biases.iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
        );
        diff / scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Ncc,
    Ridge,
}

/// Either stage-one learner behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum StageOne {
    Ncc(NccState),
    Ridge(RidgeState),
}

impl StageOne {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            StageOne::Ncc(_) => ClassifierKind::Ncc,
            StageOne::Ridge(_) => ClassifierKind::Ridge,
        }
    }

    pub fn update(&mut self, x: &[f64], class: usize) -> Result<()> {
        match self {
            StageOne::Ncc(s) => s.update(x, class),
            StageOne::Ridge(s) => s.update(x, class),
        }
    }

    pub fn observed(&self) -> u64 {
        match self {
            StageOne::Ncc(s) => s.counts().iter().sum(),
            StageOne::Ridge(s) => s.seen(),
        }
    }

    /// The stage-one predictor as a linear head.
    pub fn head(&self) -> Result<LinearHead> {
        match self {
            StageOne::Ncc(s) => {
                if s.counts().iter().all(|&c| c == 0) {
                    return Err(ScrollError::NoClass);
                }
                Ok(s.to_linear())
            }
            StageOne::Ridge(s) => s.solve(),
        }
    }

    pub fn max_deviation(&self, other: &StageOne) -> f64 {
        match (self, other) {
            (StageOne::Ncc(a), StageOne::Ncc(b)) => a.max_deviation(b),
            (StageOne::Ridge(a), StageOne::Ridge(b)) => a.max_deviation(b),
            _ => f64::INFINITY,
        }
    }
}

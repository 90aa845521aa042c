//! Exhaustive hyperparameter search with stratified k-fold cross-validation.
//!
//! Every configuration of the grid is evaluated for every k in the search
//! range (2..=10 by default); a (config, k) cell scores the mean fold
//! accuracy of a one-vs-rest ensemble. Cells that cannot be evaluated (class
//! support below k, solver non-convergence) are recorded with a reason
//! instead of aborting the search.
//!
//! Features are standardized once with statistics of the whole search set,
//! so a single Gram matrix per (feature params, kernel) serves every fold.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::multiclass::{encode_labels, one_vs_rest_targets, Standardizer};
use super::smo::{solve_dual, solve_dual_warm, DualSolution};
use super::{check_finite, gram_from_dots, self_dots, Kernel, Result, SvmError};
use crate::dataset::{fold_split, kfold, FoldMode, MAX_FOLDS, MIN_FOLDS};
use crate::geometry::{feature_matrix, FeatureParams, LandmarkSequence, Metric, MetricSet, DEFAULT_FRAMES};

/// Anything that can produce a feature matrix for given extraction settings.
pub trait FeatureSource: Sync {
    fn n_samples(&self) -> usize;
    fn features(&self, params: &FeatureParams) -> Result<Array2<f64>>;
}

impl FeatureSource for [LandmarkSequence] {
    fn n_samples(&self) -> usize {
        self.len()
    }

    fn features(&self, params: &FeatureParams) -> Result<Array2<f64>> {
        Ok(feature_matrix(self, params)?)
    }
}

/// A precomputed matrix valid for exactly one set of extraction settings.
#[derive(Debug, Clone)]
pub struct FixedFeatures {
    pub params: FeatureParams,
    pub matrix: Array2<f64>,
}

impl FeatureSource for FixedFeatures {
    fn n_samples(&self) -> usize {
        self.matrix.nrows()
    }

    fn features(&self, params: &FeatureParams) -> Result<Array2<f64>> {
        if *params != self.params {
            return Err(SvmError::InvalidParam(format!(
                "fixed features were extracted with {:?}, grid asked for {params:?}",
                self.params
            )));
        }
        Ok(self.matrix.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub kernels: Vec<Kernel>,
    pub c_values: Vec<f64>,
    pub pivots: Vec<usize>,
    pub metric_sets: Vec<MetricSet>,
    pub frames: Vec<usize>,
}

impl Default for Grid {
    /// Linear plus RBF with gamma in {0.01, 0.1, 1}; C in {0.1, 1, 10, 100};
    /// every pivot; each single metric and all three together; 250 frames.
    fn default() -> Self {
        Self {
            kernels: vec![
                Kernel::Linear,
                Kernel::Rbf { gamma: 0.01 },
                Kernel::Rbf { gamma: 0.1 },
                Kernel::Rbf { gamma: 1.0 },
            ],
            c_values: vec![0.1, 1.0, 10.0, 100.0],
            pivots: (0..8).collect(),
            metric_sets: Metric::ALL
                .into_iter()
                .map(MetricSet::single)
                .chain([MetricSet::all()])
                .collect(),
            frames: vec![DEFAULT_FRAMES],
        }
    }
}

impl Grid {
    /// Grid over SVM settings only, for a fixed feature layout.
    pub fn svm_only(features: FeatureParams, kernels: Vec<Kernel>, c_values: Vec<f64>) -> Self {
        Self {
            kernels,
            c_values,
            pivots: vec![features.pivot],
            metric_sets: vec![features.metrics],
            frames: vec![features.frames],
        }
    }

    /// Feature settings in enumeration order: pivot, then metric set, then frames.
    pub fn feature_params(&self) -> Vec<FeatureParams> {
        let mut out = Vec::new();
        for &pivot in &self.pivots {
            for metrics in &self.metric_sets {
                for &frames in &self.frames {
                    out.push(FeatureParams { pivot, metrics: metrics.clone(), frames });
                }
            }
        }
        out
    }

    /// All configurations; feature settings vary slowest, then kernel, then C.
    pub fn configs(&self) -> Vec<GridConfig> {
        let mut out = Vec::new();
        for features in self.feature_params() {
            for &kernel in &self.kernels {
                for &c in &self.c_values {
                    out.push(GridConfig { kernel, c, features: features.clone() });
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.kernels.len() * self.c_values.len() * self.pivots.len() * self.metric_sets.len() * self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(SvmError::EmptyGrid);
        }
        for k in &self.kernels {
            k.validate()?;
        }
        if let Some(c) = self.c_values.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
            return Err(SvmError::InvalidParam(format!("C must be positive, got {c}")));
        }
        for p in self.feature_params() {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub kernel: Kernel,
    pub c: f64,
    pub features: FeatureParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { k_min: MIN_FOLDS, k_max: MAX_FOLDS, seed: 0, tolerance: 1e-3, max_iter: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: GridConfig,
    pub k: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidCell {
    pub config: GridConfig,
    pub k: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_config: GridConfig,
    pub best_k: usize,
    pub best_cv_accuracy: f64,
    pub full_table: Vec<GridRow>,
    pub invalid: Vec<InvalidCell>,
}

impl GridSearchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid result serializes")
    }

    /// Flat table: kernel, gamma, degree, coef0, c, pivot, metrics, frames, k, mean_accuracy.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kernel", "gamma", "degree", "coef0", "c", "pivot", "metrics", "frames", "k", "mean_accuracy"])
            .expect("in-memory write");
        for row in &self.full_table {
            let cfg = &row.config;
            let (kind, gamma, degree, coef0) = match cfg.kernel {
                Kernel::Linear => ("linear", String::new(), String::new(), String::new()),
                Kernel::Rbf { gamma } => ("rbf", gamma.to_string(), String::new(), String::new()),
                Kernel::Polynomial { gamma, degree, coef0 } => {
                    ("polynomial", gamma.to_string(), degree.to_string(), coef0.to_string())
                }
            };
            w.write_record([
                kind.to_string(),
                gamma,
                degree,
                coef0,
                cfg.c.to_string(),
                cfg.features.pivot.to_string(),
                cfg.features.metrics.to_string(),
                cfg.features.frames.to_string(),
                row.k.to_string(),
                row.mean_accuracy.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

const NON_CONVERGENCE: &str = "non-convergence";

type CellOutcome = std::result::Result<f64, String>;

/// Runs the exhaustive search. Ties on mean accuracy keep the earliest cell
/// in enumeration order (configs as in [`Grid::configs`], k ascending).
pub fn grid_search<S: FeatureSource + ?Sized>(
    source: &S,
    labels: &[String],
    grid: &Grid,
    opts: &SearchOptions,
) -> Result<GridSearchResult> {
    grid.validate()?;
    if source.n_samples() != labels.len() {
        return Err(SvmError::LabelCount { rows: source.n_samples(), labels: labels.len() });
    }
    if !(MIN_FOLDS <= opts.k_min && opts.k_min <= opts.k_max && opts.k_max <= MAX_FOLDS) {
        return Err(SvmError::InvalidParam(format!("k range [{}, {}]", opts.k_min, opts.k_max)));
    }
    let (class_labels, classes) = encode_labels(labels);
    if class_labels.len() < 2 {
        return Err(SvmError::TooFewClasses(class_labels.len()));
    }
    let ks: Vec<usize> = (opts.k_min..=opts.k_max).collect();
    let folds: Vec<std::result::Result<Vec<Vec<usize>>, String>> = ks
        .iter()
        .map(|&k| kfold(&classes, k, opts.seed, FoldMode::Stratified).map_err(|e| e.to_string()))
        .collect();

    let mut full_table = Vec::new();
    let mut invalid = Vec::new();
    for features in grid.feature_params() {
        let x = source.features(&features)?;
        check_finite(x.view())?;
        let xs = Standardizer::fit(x.view()).apply(x.view());
        let dots = self_dots(xs.view());

        // outcomes[kernel][k][c]
        let outcomes: Vec<Vec<Vec<CellOutcome>>> = grid
            .kernels
            .iter()
            .map(|kernel| {
                let gram = gram_from_dots(&dots, kernel);
                folds
                    .par_iter()
                    .map(|f| match f {
                        Err(reason) => vec![Err(reason.clone()); grid.c_values.len()],
                        Ok(f) => evaluate_folds(&gram, &classes, class_labels.len(), f, &grid.c_values, opts),
                    })
                    .collect()
            })
            .collect();

        for (ki, &kernel) in grid.kernels.iter().enumerate() {
            for (ci, &c) in grid.c_values.iter().enumerate() {
                let config = GridConfig { kernel, c, features: features.clone() };
                for (kk, &k) in ks.iter().enumerate() {
                    match &outcomes[ki][kk][ci] {
                        Ok(acc) => full_table.push(GridRow { config: config.clone(), k, mean_accuracy: *acc }),
                        Err(reason) => invalid.push(InvalidCell { config: config.clone(), k, reason: reason.clone() }),
                    }
                }
            }
        }
    }

    let mut best: Option<&GridRow> = None;
    for row in &full_table {
        if best.is_none_or(|b| row.mean_accuracy > b.mean_accuracy) {
            best = Some(row);
        }
    }
    let best = best
        .ok_or_else(|| SvmError::NoValidCell {
            cells: invalid.len(),
            non_convergent: invalid.iter().filter(|c| c.reason.starts_with(NON_CONVERGENCE)).count(),
        })?
        .clone();
    Ok(GridSearchResult {
        best_config: best.config,
        best_k: best.k,
        best_cv_accuracy: best.mean_accuracy,
        full_table,
        invalid,
    })
}

/// Mean fold accuracy for each C value on one fold assignment.
fn evaluate_folds(
    gram: &[f64],
    classes: &[usize],
    n_classes: usize,
    folds: &[Vec<usize>],
    c_values: &[f64],
    opts: &SearchOptions,
) -> Vec<CellOutcome> {
    let n = classes.len();
    let mut sums: Vec<CellOutcome> = vec![Ok(0.0); c_values.len()];
    for i in 0..folds.len() {
        let (train, test) = fold_split(folds, i);
        let m = train.len();
        let mut sub = vec![0.0; m * m];
        for (a, &ra) in train.iter().enumerate() {
            let row = &gram[ra * n..(ra + 1) * n];
            for (b, &rb) in train.iter().enumerate() {
                sub[a * m + b] = row[rb];
            }
        }
        let fold = Fold { gram, n, sub: &sub, train: &train, test: &test, classes, n_classes };
        for (sum, acc) in sums.iter_mut().zip(fold.accuracies(c_values, opts)) {
            match (sum.as_mut(), acc) {
                (Ok(s), Ok(a)) => *s += a,
                (Ok(_), Err(reason)) => *sum = Err(reason),
                (Err(_), _) => {}
            }
        }
    }
    sums.into_iter().map(|s| s.map(|v| v / folds.len() as f64)).collect()
}

struct Fold<'a> {
    gram: &'a [f64],
    n: usize,
    sub: &'a [f64],
    train: &'a [usize],
    test: &'a [usize],
    classes: &'a [usize],
    n_classes: usize,
}

impl Fold<'_> {
    /// Test accuracy for every C. Each one-vs-rest problem is solved for C in
    /// ascending order, warm-starting from the previous solution, which stays
    /// feasible when C grows. With two classes the second binary problem is
    /// the first with negated labels, so its scores are the negated scores.
    fn accuracies(&self, c_values: &[f64], opts: &SearchOptions) -> Vec<CellOutcome> {
        let train_classes: Vec<usize> = self.train.iter().map(|&r| self.classes[r]).collect();
        let mut order: Vec<usize> = (0..c_values.len()).collect();
        order.sort_by(|&a, &b| c_values[a].total_cmp(&c_values[b]));
        let nt = self.test.len();
        let mut scores = vec![vec![0.0; nt * self.n_classes]; c_values.len()];
        let mut failed: Vec<Option<String>> = vec![None; c_values.len()];
        let solved = if self.n_classes == 2 { 1 } else { self.n_classes };

        for class in 0..solved {
            let y = one_vs_rest_targets(&train_classes, class);
            if y.iter().all(|&v| v < 0.0) {
                let reason = format!("class index {class} missing from a training fold");
                return vec![Err(reason); c_values.len()];
            }
            let mut prev: Option<DualSolution> = None;
            for &ci in &order {
                let c = c_values[ci];
                let sol = match &prev {
                    Some(p) => solve_dual_warm(self.sub, &y, c, opts.tolerance, opts.max_iter, p),
                    None => solve_dual(self.sub, &y, c, opts.tolerance, opts.max_iter),
                };
                if !sol.converged {
                    failed[ci] = Some(format!("{NON_CONVERGENCE} after {} iterations", sol.iterations));
                    prev = None;
                    continue;
                }
                let sv: Vec<(usize, f64)> = self
                    .train
                    .iter()
                    .enumerate()
                    .filter(|&(s, _)| sol.alpha[s] > 0.0)
                    .map(|(s, &rs)| (rs, sol.alpha[s] * y[s]))
                    .collect();
                for (t, &rt) in self.test.iter().enumerate() {
                    let row = &self.gram[rt * self.n..(rt + 1) * self.n];
                    let f = sv.iter().map(|&(rs, coef)| coef * row[rs]).sum::<f64>() - sol.rho;
                    scores[ci][t * self.n_classes + class] = f;
                    if self.n_classes == 2 {
                        scores[ci][t * 2 + 1] = -f;
                    }
                }
                prev = Some(sol);
            }
        }

        scores
            .iter()
            .zip(failed)
            .map(|(sc, fail)| match fail {
                Some(reason) => Err(reason),
                None => {
                    let correct = self
                        .test
                        .iter()
                        .enumerate()
                        .filter(|&(t, &rt)| argmax(&sc[t * self.n_classes..(t + 1) * self.n_classes]) == self.classes[rt])
                        .count();
                    Ok(correct as f64 / nt as f64)
                }
            })
            .collect()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-validated accuracy of one configuration on a fixed matrix; used by
/// callers that want a single (config, k) score outside a grid.
pub fn cross_validate(x: ArrayView2<f64>, labels: &[String], kernel: Kernel, c: f64, k: usize, opts: &SearchOptions) -> Result<f64> {
    let fixed = FixedFeatures { params: FeatureParams::default(), matrix: x.to_owned() };
    let grid = Grid::svm_only(FeatureParams::default(), vec![kernel], vec![c]);
    let o = SearchOptions { k_min: k, k_max: k, ..*opts };
    let r = grid_search(&fixed, labels, &grid, &o)?;
    Ok(r.best_cv_accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<String>) {
        let mut rng = SeededRng::new(seed);
        let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| 3.0 * rng.normal()).collect()).collect();
        let mut x = Array2::zeros((classes * per_class, dim));
        let mut labels = Vec::new();
        for r in 0..classes * per_class {
            let c = r % classes;
            for d in 0..dim {
                x[[r, d]] = centers[c][d] + spread * rng.normal();
            }
            labels.push(format!("c{c}"));
        }
        (x, labels)
    }

    fn fixed(x: Array2<f64>) -> FixedFeatures {
        FixedFeatures { params: FeatureParams::default(), matrix: x }
    }

    #[test]
    fn single_config_picks_best_k() {
        let (x, labels) = blobs(3, 20, 4, 2.0, 1);
        let grid = Grid::svm_only(FeatureParams::default(), vec![Kernel::Linear], vec![1.0]);
        let r = grid_search(&fixed(x), &labels, &grid, &SearchOptions::default()).unwrap();
        assert_eq!(r.full_table.len(), 9);
        assert_eq!(r.best_config, grid.configs()[0]);
        let max = r.full_table.iter().map(|row| row.mean_accuracy).fold(f64::MIN, f64::max);
        assert_eq!(r.best_cv_accuracy, max);
        let first = r.full_table.iter().find(|row| row.mean_accuracy == max).unwrap();
        assert_eq!(r.best_k, first.k);
    }

    #[test]
    fn duplicate_configs_first_wins() {
        let (x, labels) = blobs(2, 20, 3, 1.0, 2);
        let grid = Grid::svm_only(
            FeatureParams::default(),
            vec![Kernel::Rbf { gamma: 0.5 }, Kernel::Rbf { gamma: 0.5 }],
            vec![1.0],
        );
        let r = grid_search(&fixed(x), &labels, &grid, &SearchOptions::default()).unwrap();
        assert_eq!(r.full_table.len(), 18);
        let idx = r.full_table.iter().position(|row| row.mean_accuracy == r.best_cv_accuracy).unwrap();
        assert!(idx < 9, "best row must come from the first copy");
        for k in 0..9 {
            assert_eq!(r.full_table[k].mean_accuracy, r.full_table[k + 9].mean_accuracy);
        }
    }

    #[test]
    fn three_configs_give_27_rows_and_csv() {
        let (x, labels) = blobs(2, 15, 3, 1.0, 3);
        let grid = Grid::svm_only(FeatureParams::default(), vec![Kernel::Linear], vec![0.1, 1.0, 10.0]);
        let r = grid_search(&fixed(x), &labels, &grid, &SearchOptions::default()).unwrap();
        assert_eq!(r.full_table.len() + r.invalid.len(), 27);
        assert_eq!(r.full_table.len(), 27);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 28);
        assert!(csv.starts_with("kernel,gamma,degree,coef0,c,pivot,metrics,frames,k,mean_accuracy"));
    }

    #[test]
    fn small_support_marks_cells_invalid() {
        let (x, labels) = blobs(2, 4, 3, 1.0, 4);
        let grid = Grid::svm_only(FeatureParams::default(), vec![Kernel::Linear], vec![1.0]);
        let r = grid_search(&fixed(x), &labels, &grid, &SearchOptions::default()).unwrap();
        assert_eq!(r.full_table.iter().map(|row| row.k).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert_eq!(r.invalid.len(), 6);
        assert!(r.invalid.iter().all(|c| c.reason.contains("support")));
    }

    #[test]
    fn fixed_features_reject_other_params() {
        let (x, labels) = blobs(2, 10, 3, 1.0, 5);
        let mut grid = Grid::svm_only(FeatureParams::default(), vec![Kernel::Linear], vec![1.0]);
        grid.pivots = vec![3];
        assert!(grid_search(&fixed(x), &labels, &grid, &SearchOptions::default()).is_err());
    }

    #[test]
    fn default_grid_size() {
        let g = Grid::default();
        assert_eq!(g.len(), 4 * 4 * 8 * 4);
        assert_eq!(g.configs().len(), g.len());
        assert!(Grid { c_values: vec![], ..g }.validate().is_err());
    }

    #[test]
    fn separable_data_scores_high() {
        let (x, labels) = blobs(4, 20, 5, 0.2, 6);
        let acc = cross_validate(x.view(), &labels, Kernel::Linear, 1.0, 5, &SearchOptions::default()).unwrap();
        assert_eq!(acc, 1.0);
    }
}

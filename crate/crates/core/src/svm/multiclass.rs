//! One-vs-rest ensemble over standardized features.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::smo::{solve_dual, DualSolution, SvmBinaryModel};
use super::{check_finite, gram_from_dots, self_dots, Kernel, Result, SvmError};
use crate::fusion::ScoreMatrix;
use crate::geometry::FeatureParams;
use crate::preprocess::{self, FrameTensor};

pub const MODEL_VERSION: u32 = 1;

/// Per-dimension affine standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics; constant dimensions get a unit scale.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
        let std = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, &m)| {
                let v = c.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / n;
                let s = v.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            self.apply_row(row.as_slice_mut().expect("owned rows are contiguous"));
        }
        out
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub kernel: Kernel,
    pub c: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { kernel: Kernel::Linear, c: 1.0, tolerance: 1e-3, max_iter: 1_000_000 }
    }
}

/// One binary SVM per class (class vs. the rest), all sharing one support
/// vector pool in standardized feature space.
#[derive(Debug, Clone)]
pub struct SvmMulticlassModel {
    class_labels: Vec<String>,
    binaries: Vec<SvmBinaryModel>,
    feature_len: usize,
    standardizer: Standardizer,
    params: TrainParams,
    /// Feature extraction settings the model was trained with, if known.
    pub features: Option<FeatureParams>,
}

/// Sorted distinct labels and the class index of each row.
pub(crate) fn encode_labels(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let idx = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    (classes, idx)
}

pub(crate) fn one_vs_rest_targets(classes: &[usize], class: usize) -> Vec<f64> {
    classes.iter().map(|&c| if c == class { 1.0 } else { -1.0 }).collect()
}

impl SvmMulticlassModel {
    /// Standardizes `x`, then trains one binary per distinct label. Class
    /// labels are kept in sorted order.
    pub fn fit(x: ArrayView2<f64>, labels: &[String], params: &TrainParams) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(SvmError::LabelCount { rows: x.nrows(), labels: labels.len() });
        }
        params.kernel.validate()?;
        if !(params.c > 0.0 && params.tolerance > 0.0) {
            return Err(SvmError::InvalidParam("C and tolerance must be positive".into()));
        }
        check_finite(x)?;
        let (class_labels, classes) = encode_labels(labels);
        if class_labels.len() < 2 {
            return Err(SvmError::TooFewClasses(class_labels.len()));
        }
        let standardizer = Standardizer::fit(x);
        let xs = standardizer.apply(x);
        let gram = gram_from_dots(&self_dots(xs.view()), &params.kernel);

        // With two classes the second problem is the first with negated
        // labels: same multipliers, negated offset.
        let solved = if class_labels.len() == 2 { 1 } else { class_labels.len() };
        let mut solutions: Vec<_> = (0..solved)
            .into_par_iter()
            .map(|c| {
                let y = one_vs_rest_targets(&classes, c);
                let sol = solve_dual(&gram, &y, params.c, params.tolerance, params.max_iter);
                (y, sol)
            })
            .collect();
        if solved == 1 {
            let (y, sol) = &solutions[0];
            let mirrored = DualSolution { rho: -sol.rho, ..sol.clone() };
            solutions.push((y.iter().map(|v| -v).collect(), mirrored));
        }

        // Pool = union of support vectors across binaries, in training order.
        let mut in_pool = vec![false; x.nrows()];
        for (_, sol) in &solutions {
            for (i, &a) in sol.alpha.iter().enumerate() {
                in_pool[i] |= a > 0.0;
            }
        }
        let pool_rows: Vec<usize> = (0..x.nrows()).filter(|&i| in_pool[i]).collect();
        let mut pool_pos = vec![usize::MAX; x.nrows()];
        for (p, &r) in pool_rows.iter().enumerate() {
            pool_pos[r] = p;
        }
        let pool = Arc::new(xs.select(Axis(0), &pool_rows));

        let mut binaries = Vec::with_capacity(solutions.len());
        for (y, sol) in solutions {
            let idx: Vec<usize> = (0..y.len()).filter(|&i| sol.alpha[i] > 0.0).collect();
            let model = SvmBinaryModel {
                pool: Arc::clone(&pool),
                support: idx.iter().map(|&i| pool_pos[i]).collect(),
                coefficients: idx.iter().map(|&i| sol.alpha[i] * y[i]).collect(),
                training_indices: idx,
                bias: -sol.rho,
                kernel: params.kernel,
                c: params.c,
                tolerance: params.tolerance,
                iterations: sol.iterations,
            };
            if !sol.converged {
                return Err(SvmError::NonConvergence { iterations: sol.iterations, last: Box::new(model) });
            }
            binaries.push(model);
        }
        Ok(Self {
            class_labels,
            binaries,
            feature_len: x.ncols(),
            standardizer,
            params: *params,
            features: None,
        })
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn binaries(&self) -> &[SvmBinaryModel] {
        &self.binaries
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn params(&self) -> &TrainParams {
        &self.params
    }

    fn pool(&self) -> &Array2<f64> {
        &self.binaries[0].pool
    }

    /// Raw decision value of every binary for every row of `x`. Column order
    /// follows [`class_labels`](Self::class_labels).
    pub fn predict_scores(&self, x: ArrayView2<f64>, probe_ids: &[String]) -> Result<ScoreMatrix> {
        if x.ncols() != self.feature_len {
            return Err(SvmError::DimensionMismatch { expected: self.feature_len, got: x.ncols() });
        }
        if x.nrows() != probe_ids.len() {
            return Err(SvmError::LabelCount { rows: x.nrows(), labels: probe_ids.len() });
        }
        check_finite(x)?;
        let pool = self.pool();
        let kernel = self.params.kernel;
        let rows: Vec<Vec<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|i| {
                let mut r = x.row(i).to_vec();
                self.standardizer.apply_row(&mut r);
                let krow: Vec<f64> = pool
                    .outer_iter()
                    .map(|sv| kernel.eval(sv.as_slice().expect("contiguous"), &r))
                    .collect();
                self.binaries.iter().map(|b| b.decision_from_pool_kernel(&krow)).collect()
            })
            .collect();
        let flat = rows.into_iter().flatten().collect();
        Ok(ScoreMatrix::new(probe_ids.to_vec(), self.class_labels.clone(), flat)?)
    }

    /// Argmax label per row; ties go to the earlier class label.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<String>> {
        let ids: Vec<String> = (0..x.nrows()).map(|i| i.to_string()).collect();
        let scores = self.predict_scores(x, &ids)?;
        Ok((0..scores.n_probes()).map(|i| scores.argmax_label(i).to_string()).collect())
    }

    /// Writes `<stem>.json` (header), `<stem>.sv.lbtf` (support vector pool)
    /// and `<stem>.coef.lbtf` (coefficients of all binaries, concatenated).
    pub fn save(&self, header_path: &Path) -> Result<()> {
        let sv_path = header_path.with_extension("sv.lbtf");
        let coef_path = header_path.with_extension("coef.lbtf");
        let pool = self.pool();
        let sv = FrameTensor::from_f64(vec![pool.nrows(), pool.ncols()], pool.iter().copied().collect())?;
        preprocess::write_tensor(&sv, &sv_path)?;
        let coefs: Vec<f64> = self.binaries.iter().flat_map(|b| b.coefficients.iter().copied()).collect();
        preprocess::write_tensor(&FrameTensor::from_f64(vec![coefs.len()], coefs)?, &coef_path)?;

        let header = ModelHeader {
            version: MODEL_VERSION,
            kernel: self.params.kernel,
            c: self.params.c,
            tolerance: self.params.tolerance,
            max_iter: self.params.max_iter,
            class_labels: self.class_labels.clone(),
            feature_len: self.feature_len,
            standardization: self.standardizer.clone(),
            features: self.features.clone(),
            binaries: self
                .binaries
                .iter()
                .map(|b| BinaryHeader { bias: b.bias, support: b.support.clone(), iterations: b.iterations })
                .collect(),
            support_vectors_file: file_name(&sv_path),
            coefficients_file: file_name(&coef_path),
        };
        let json = serde_json::to_string_pretty(&header)?;
        std::fs::write(header_path, json).map_err(|source| SvmError::Io { path: header_path.to_path_buf(), source })
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(header_path)
            .map_err(|source| SvmError::Io { path: header_path.to_path_buf(), source })?;
        let h: ModelHeader = serde_json::from_str(&text)?;
        if h.version != MODEL_VERSION {
            return Err(SvmError::Model(format!("unsupported model version {}", h.version)));
        }
        let dir = header_path.parent().unwrap_or(Path::new("."));
        let sv = preprocess::read_tensor(&dir.join(&h.support_vectors_file))?;
        let dims = sv.dims().to_vec();
        let sv = sv.into_f64().ok_or_else(|| SvmError::Model("support vectors must be f64".into()))?;
        if dims.len() != 2 || dims[1] != h.feature_len || h.standardization.dim() != h.feature_len {
            return Err(SvmError::Model(format!("support vector shape {dims:?} does not match feature_len")));
        }
        let pool = Arc::new(Array2::from_shape_vec((dims[0], dims[1]), sv).expect("shape checked"));
        let coefs = preprocess::read_tensor(&dir.join(&h.coefficients_file))?
            .into_f64()
            .ok_or_else(|| SvmError::Model("coefficients must be f64".into()))?;
        let total: usize = h.binaries.iter().map(|b| b.support.len()).sum();
        if coefs.len() != total || h.binaries.len() != h.class_labels.len() {
            return Err(SvmError::Model("coefficient count does not match header".into()));
        }
        let mut offset = 0;
        let mut binaries = Vec::with_capacity(h.binaries.len());
        for b in h.binaries {
            if b.support.iter().any(|&r| r >= pool.nrows()) {
                return Err(SvmError::Model("support index outside pool".into()));
            }
            let n = b.support.len();
            binaries.push(SvmBinaryModel {
                pool: Arc::clone(&pool),
                training_indices: Vec::new(),
                coefficients: coefs[offset..offset + n].to_vec(),
                support: b.support,
                bias: b.bias,
                kernel: h.kernel,
                c: h.c,
                tolerance: h.tolerance,
                iterations: b.iterations,
            });
            offset += n;
        }
        Ok(Self {
            class_labels: h.class_labels,
            binaries,
            feature_len: h.feature_len,
            standardizer: h.standardization,
            params: TrainParams { kernel: h.kernel, c: h.c, tolerance: h.tolerance, max_iter: h.max_iter },
            features: h.features,
        })
    }
}

fn file_name(p: &Path) -> PathBuf {
    PathBuf::from(p.file_name().expect("file path"))
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    kernel: Kernel,
    c: f64,
    tolerance: f64,
    max_iter: usize,
    class_labels: Vec<String>,
    feature_len: usize,
    standardization: Standardizer,
    features: Option<FeatureParams>,
    binaries: Vec<BinaryHeader>,
    support_vectors_file: PathBuf,
    coefficients_file: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    bias: f64,
    support: Vec<usize>,
    iterations: usize,
}

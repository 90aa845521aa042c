//! Support vector machines trained by sequential minimal optimization.
//!
//! - [`smo`]: the binary dual solver and [`SvmBinaryModel`].
//! - [`multiclass`]: feature standardization and the one-vs-rest ensemble.
//! - [`grid`]: exhaustive hyperparameter search under stratified k-fold CV.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod grid;
pub mod multiclass;
pub mod smo;

pub use grid::{grid_search, FeatureSource, FixedFeatures, Grid, GridConfig, GridSearchResult, SearchOptions};
pub use multiclass::{SvmMulticlassModel, Standardizer, TrainParams};
pub use smo::{smo_train, SmoParams, SvmBinaryModel};

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training data must contain both labels, found only {0:+}")]
    SingleClass(i8),
    #[error("need at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("labels must be -1 or +1, got {0}")]
    InvalidLabel(f64),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("SMO did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        /// Model built from the last iterate.
        last: Box<SvmBinaryModel>,
    },
    #[error("grid is empty")]
    EmptyGrid,
    #[error("every grid cell was invalid ({non_convergent} of {cells} from solver non-convergence)")]
    NoValidCell { cells: usize, non_convergent: usize },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Tensor(#[from] crate::preprocess::TensorError),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model file: {0}")]
    Model(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = SvmError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
    Polynomial { gamma: f64, degree: u32, coef0: f64 },
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Linear => Ok(()),
            Kernel::Rbf { gamma } if gamma > 0.0 && gamma.is_finite() => Ok(()),
            Kernel::Polynomial { gamma, degree, coef0 }
                if gamma > 0.0 && gamma.is_finite() && degree >= 1 && coef0.is_finite() =>
            {
                Ok(())
            }
            k => Err(SvmError::InvalidParam(format!("{k:?}"))),
        }
    }

    /// Direct evaluation on two rows.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Rbf { gamma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-gamma * d2).exp()
            }
            Kernel::Polynomial { gamma, degree, coef0 } => (gamma * dot(a, b) + coef0).powi(degree as i32),
        }
    }

    /// Kernel value from an inner product and the two squared norms.
    fn eval_dot(&self, ab: f64, aa: f64, bb: f64) -> f64 {
        match *self {
            Kernel::Linear => ab,
            Kernel::Rbf { gamma } => (-gamma * (aa + bb - 2.0 * ab).max(0.0)).exp(),
            Kernel::Polynomial { gamma, degree, coef0 } => (gamma * ab + coef0).powi(degree as i32),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Kernel::Linear => "linear".into(),
            Kernel::Rbf { gamma } => format!("rbf(gamma={gamma})"),
            Kernel::Polynomial { gamma, degree, coef0 } => {
                format!("poly(gamma={gamma},degree={degree},coef0={coef0})")
            }
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = SvmError;

    /// `linear`, `rbf:<gamma>` or `polynomial:<gamma>:<degree>:<coef0>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || SvmError::InvalidParam(format!("kernel {s:?}"));
        let num = |p: &str| p.trim().parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let k = match parts.as_slice() {
            ["linear"] => Kernel::Linear,
            ["rbf", g] => Kernel::Rbf { gamma: num(g)? },
            ["polynomial" | "poly", g, d, c0] => Kernel::Polynomial {
                gamma: num(g)?,
                degree: d.trim().parse().map_err(|_| bad())?,
                coef0: num(c0)?,
            },
            _ => return Err(bad()),
        };
        k.validate()?;
        Ok(k)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major Gram matrix of `x` against itself via one matrix product.
pub(crate) fn gram_from_dots(dots: &Array2<f64>, kernel: &Kernel) -> Vec<f64> {
    let n = dots.nrows();
    let diag: Vec<f64> = (0..n).map(|i| dots[[i, i]]).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = kernel.eval_dot(dots[[i, j]], diag[i], diag[j]);
        }
    }
    out
}

pub(crate) fn self_dots(x: ArrayView2<f64>) -> Array2<f64> {
    x.dot(&x.t())
}

pub(crate) fn check_finite(x: ArrayView2<f64>) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SvmError::NonFinite)
    }
}

//! Binary C-SVM dual solver.
//!
//! Minimizes `0.5 a'Qa - sum(a)` subject to `0 <= a_i <= C` and `y'a = 0`,
//! where `Q_ij = y_i y_j K(x_i, x_j)`. Each iteration optimizes two
//! multipliers in closed form. The pair is the maximal violating pair with
//! second-order selection of the second index; iteration stops once the
//! violation gap `m(a) - M(a)` drops below the tolerance, which bounds every
//! KKT residual by the same tolerance.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};

use super::{check_finite, gram_from_dots, self_dots, Kernel, Result, SvmError};

/// Curvature floor for non-positive-definite pairs.
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoParams {
    pub c: f64,
    pub kernel: Kernel,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SmoParams {
    fn default() -> Self {
        Self { c: 1.0, kernel: Kernel::Linear, tolerance: 1e-3, max_iter: 1_000_000 }
    }
}

impl SmoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SvmError::InvalidParam(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(SvmError::InvalidParam(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        self.kernel.validate()
    }
}

/// Raw dual solution.
#[derive(Debug, Clone)]
pub(crate) struct DualSolution {
    pub alpha: Vec<f64>,
    /// Gradient of the dual objective at `alpha`.
    pub grad: Vec<f64>,
    /// Decision function is `sum_i alpha_i y_i K(x_i, x) - rho`.
    pub rho: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the dual over a row-major `n x n` Gram matrix.
pub(crate) fn solve_dual(gram: &[f64], y: &[f64], c: f64, eps: f64, max_iter: usize) -> DualSolution {
    let n = y.len();
    solve_dual_from(gram, y, c, eps, max_iter, vec![0.0; n], vec![-1.0; n])
}

/// Continues from a feasible point, e.g. the solution for a smaller C.
pub(crate) fn solve_dual_warm(gram: &[f64], y: &[f64], c: f64, eps: f64, max_iter: usize, start: &DualSolution) -> DualSolution {
    debug_assert!(start.alpha.iter().all(|&a| a <= c));
    solve_dual_from(gram, y, c, eps, max_iter, start.alpha.clone(), start.grad.clone())
}

fn solve_dual_from(
    gram: &[f64],
    y: &[f64],
    c: f64,
    eps: f64,
    max_iter: usize,
    mut alpha: Vec<f64>,
    grad: Vec<f64>,
) -> DualSolution {
    let n = y.len();
    debug_assert_eq!(gram.len(), n * n);
    let diag: Vec<f64> = (0..n).map(|i| gram[i * n + i]).collect();
    // The loop tracks yg_t = y_t G_t; with y_t = +-1 its update needs no sign.
    let mut yg: Vec<f64> = grad.iter().zip(y).map(|(g, y)| g * y).collect();
    let mut up: Vec<bool> = (0..n).map(|t| in_up(y[t], alpha[t], c)).collect();
    let mut low: Vec<bool> = (0..n).map(|t| in_low(y[t], alpha[t], c)).collect();
    let mut iterations = 0;
    let mut top = max_up(&yg, &up);

    let converged = loop {
        let Some((i, j)) = select_working_set(gram, &diag, &yg, &low, eps, top) else {
            // Rebuild the gradient from scratch before accepting convergence so
            // accumulated rounding cannot fake it.
            recompute(gram, y, &alpha, &mut yg);
            top = max_up(&yg, &up);
            if select_working_set(gram, &diag, &yg, &low, eps, top).is_none() {
                break true;
            }
            continue;
        };
        if iterations >= max_iter {
            break false;
        }
        iterations += 1;

        let (gi, gj) = (y[i] * yg[i], y[j] * yg[j]);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        let quad = (diag[i] + diag[j] - 2.0 * gram[i * n + j]).max(TAU);
        if y[i] != y[j] {
            let delta = (-gi - gj) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let delta = (gi - gj) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        for t in [i, j] {
            up[t] = in_up(y[t], alpha[t], c);
            low[t] = in_low(y[t], alpha[t], c);
        }
        let (ci, cj) = (y[i] * (ai - old_i), y[j] * (aj - old_j));
        let (ri, rj) = (&gram[i * n..(i + 1) * n], &gram[j * n..(j + 1) * n]);
        // Gradient update fused with the up-set scan of the next selection.
        let mut gmax = f64::NEG_INFINITY;
        let mut best = usize::MAX;
        for (t, (((g, a), b), &u)) in yg.iter_mut().zip(ri).zip(rj).zip(&up).enumerate() {
            *g += ci * a + cj * b;
            if u && -*g >= gmax {
                gmax = -*g;
                best = t;
            }
        }
        top = (best != usize::MAX).then_some((best, gmax));
    };

    let grad: Vec<f64> = yg.iter().zip(y).map(|(v, y)| v * y).collect();
    let rho = compute_rho(y, &alpha, &grad, c);
    DualSolution { alpha, grad, rho, iterations, converged }
}

/// Recomputes `yg_t = sum_s alpha_s y_s K_ts - y_t` from scratch.
fn recompute(gram: &[f64], y: &[f64], alpha: &[f64], yg: &mut [f64]) {
    let n = y.len();
    let coef: Vec<(usize, f64)> = (0..n).filter(|&s| alpha[s] != 0.0).map(|s| (s, alpha[s] * y[s])).collect();
    for t in 0..n {
        let row = &gram[t * n..(t + 1) * n];
        yg[t] = coef.iter().map(|&(s, a)| a * row[s]).sum::<f64>() - y[t];
    }
}

#[inline]
fn in_up(y: f64, a: f64, c: f64) -> bool {
    if y > 0.0 {
        a < c
    } else {
        a > 0.0
    }
}

#[inline]
fn in_low(y: f64, a: f64, c: f64) -> bool {
    if y > 0.0 {
        a > 0.0
    } else {
        a < c
    }
}

/// Index and value of `max -y_t G_t` over the up set; ties go to the later index.
fn max_up(yg: &[f64], up: &[bool]) -> Option<(usize, f64)> {
    let mut best = None;
    let mut gmax = f64::NEG_INFINITY;
    for (t, (&v, &u)) in yg.iter().zip(up).enumerate() {
        if u && -v >= gmax {
            gmax = -v;
            best = Some(t);
        }
    }
    best.map(|t| (t, gmax))
}

/// Completes the maximal violating pair given the up-set maximum, picking the
/// second index by the largest second-order objective decrease
/// `(m + y_t G_t)^2 / quad_t`. Returns `None` when the gap is below `eps`.
fn select_working_set(
    gram: &[f64],
    diag: &[f64],
    yg: &[f64],
    low: &[bool],
    eps: f64,
    top: Option<(usize, f64)>,
) -> Option<(usize, usize)> {
    let n = yg.len();
    let (i, gmax) = top?;
    let kii = diag[i];
    let row_i = &gram[i * n..(i + 1) * n];
    let mut gmax2 = f64::NEG_INFINITY;
    let mut best = None;
    // Ratios are compared by cross-multiplication; denominators are positive.
    let (mut best_num, mut best_den) = (0.0, 1.0);
    for (t, (((&v, &l), &d), &k)) in yg.iter().zip(low).zip(diag).zip(row_i).enumerate() {
        if !l {
            continue;
        }
        if v > gmax2 {
            gmax2 = v;
        }
        let grad_diff = gmax + v;
        if grad_diff > 0.0 {
            let num = grad_diff * grad_diff;
            let den = kii + d - 2.0 * k;
            let den = if den > TAU { den } else { TAU };
            if num * best_den >= best_num * den {
                best_num = num;
                best_den = den;
                best = Some(t);
            }
        }
    }
    if gmax + gmax2 < eps {
        return None;
    }
    best.map(|j| (i, j))
}

fn compute_rho(y: &[f64], alpha: &[f64], grad: &[f64], c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free_n) = (0.0, 0usize);
    for t in 0..y.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free_n += 1;
            free_sum += yg;
        }
    }
    if free_n > 0 {
        free_sum / free_n as f64
    } else {
        (ub + lb) / 2.0
    }
}

/// A trained binary SVM.
///
/// Support vectors live as rows of a pool matrix that may be shared with
/// other models (the one-vs-rest ensemble shares one pool).
#[derive(Debug, Clone)]
pub struct SvmBinaryModel {
    pub(crate) pool: Arc<Array2<f64>>,
    pub(crate) support: Vec<usize>,
    pub(crate) training_indices: Vec<usize>,
    pub(crate) coefficients: Vec<f64>,
    pub(crate) bias: f64,
    pub(crate) kernel: Kernel,
    pub(crate) c: f64,
    pub(crate) tolerance: f64,
    pub(crate) iterations: usize,
}

impl SvmBinaryModel {
    pub fn feature_len(&self) -> usize {
        self.pool.ncols()
    }

    pub fn n_support(&self) -> usize {
        self.support.len()
    }

    /// Support vectors as an owned matrix, one row per vector.
    pub fn support_vectors(&self) -> Array2<f64> {
        self.pool.select(Axis(0), &self.support)
    }

    /// Row index in the training set of each support vector.
    pub fn training_indices(&self) -> &[usize] {
        &self.training_indices
    }

    /// `alpha_i * y_i` for each support vector.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `sum_i coef_i K(sv_i, x) + bias`.
    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_len() {
            return Err(SvmError::DimensionMismatch { expected: self.feature_len(), got: x.len() });
        }
        let s: f64 = self
            .support
            .iter()
            .zip(&self.coefficients)
            .map(|(&r, &coef)| {
                let sv = self.pool.row(r);
                coef * self.kernel.eval(sv.as_slice().expect("pool rows are contiguous"), x)
            })
            .sum();
        Ok(s + self.bias)
    }

    /// Decision value given kernel values against every pool row.
    pub(crate) fn decision_from_pool_kernel(&self, kernel_row: &[f64]) -> f64 {
        let s: f64 = self
            .support
            .iter()
            .zip(&self.coefficients)
            .map(|(&r, &coef)| coef * kernel_row[r])
            .sum();
        s + self.bias
    }
}

pub(crate) fn check_labels(y: &[f64]) -> Result<()> {
    if let Some(&bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(SvmError::InvalidLabel(bad));
    }
    let pos = y.iter().filter(|&&v| v > 0.0).count();
    if pos == 0 {
        return Err(SvmError::SingleClass(-1));
    }
    if pos == y.len() {
        return Err(SvmError::SingleClass(1));
    }
    Ok(())
}

/// Maximum KKT residual of a dual solution, measured on the Gram matrix.
pub(crate) fn kkt_violation(gram: &[f64], y: &[f64], alpha: &[f64], rho: f64, c: f64) -> f64 {
    let n = y.len();
    let mut worst: f64 = 0.0;
    for t in 0..n {
        let row = &gram[t * n..(t + 1) * n];
        let f: f64 = (0..n).filter(|&s| alpha[s] != 0.0).map(|s| alpha[s] * y[s] * row[s]).sum::<f64>() - rho;
        let margin = y[t] * f;
        let v = if alpha[t] <= 0.0 {
            (1.0 - margin).max(0.0)
        } else if alpha[t] >= c {
            (margin - 1.0).max(0.0)
        } else {
            (margin - 1.0).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Trains a binary SVM on rows of `x` with labels in {-1, +1}.
///
/// The KKT conditions are audited after training; a run that stops at
/// `max_iter` or fails the audit is returned as
/// [`SvmError::NonConvergence`] carrying the last iterate.
pub fn smo_train(x: ArrayView2<f64>, y: &[f64], params: &SmoParams) -> Result<SvmBinaryModel> {
    params.validate()?;
    if x.nrows() != y.len() {
        return Err(SvmError::LabelCount { rows: x.nrows(), labels: y.len() });
    }
    check_labels(y)?;
    check_finite(x)?;
    let gram = gram_from_dots(&self_dots(x), &params.kernel);
    let sol = solve_dual(&gram, y, params.c, params.tolerance, params.max_iter);
    let audit_ok = sol.converged
        && kkt_violation(&gram, y, &sol.alpha, sol.rho, params.c) <= params.tolerance + 1e-12;

    let idx: Vec<usize> = (0..y.len()).filter(|&i| sol.alpha[i] > 0.0).collect();
    let model = SvmBinaryModel {
        pool: Arc::new(x.select(Axis(0), &idx)),
        support: (0..idx.len()).collect(),
        coefficients: idx.iter().map(|&i| sol.alpha[i] * y[i]).collect(),
        training_indices: idx,
        bias: -sol.rho,
        kernel: params.kernel,
        c: params.c,
        tolerance: params.tolerance,
        iterations: sol.iterations,
    };
    if !audit_ok {
        return Err(SvmError::NonConvergence { iterations: sol.iterations, last: Box::new(model) });
    }
    Ok(model)
}

//! Linear error estimators over residual activations.
//!
//! All models are bias-free: `p(h) = w·h` (or `sigmoid(w·h)` for the
//! logistic kind). Matrices are `nalgebra` column-major, which keeps the
//! coordinate-descent column sweeps contiguous.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeraError, Result};
use crate::trace_store::{split_dataset, SplitTag, TraceSet};

/// Regularization grid used for regression probes; `0.0` is the
/// unregularized least-squares fit.
pub const DEFAULT_ETA_GRID: [f64; 7] = [0.0, 0.005, 0.01, 0.05, 0.1, 0.25, 0.5];

pub const LASSO_TOL: f64 = 1e-7;
pub const LASSO_MAX_ITER: usize = 10_000;
pub const LOGISTIC_GRAD_TOL: f64 = 1e-6;
pub const LOGISTIC_MAX_ITER: usize = 200;
pub const LOGISTIC_MAX_NORM: f64 = 1e3;
/// Magnitude above which a weight counts as nonzero.
pub const NONZERO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Regression,
    Logistic,
    Contrastive,
}

/// Validation error of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub eta: f64,
    pub val_rmse: f64,
    pub converged: bool,
}

/// A per-layer linear probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub layer: usize,
    pub kind: ProbeKind,
    pub weights: Vec<f64>,
    pub eta: f64,
    /// RMSE for regression, AUCROC for logistic, absent for contrastive.
    pub val_metric: Option<f64>,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<GridPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub weights: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: DVector<f64>,
    pub converged: bool,
    /// Set when the weight norm hit [`LOGISTIC_MAX_NORM`] (separable data).
    pub norm_capped: bool,
    pub iterations: usize,
}

fn check_xy(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(MeraError::validation("design matrix has no rows"));
    }
    if x.nrows() != y.len() {
        return Err(MeraError::Shape(format!("{} rows but {} targets", x.nrows(), y.len())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(MeraError::validation("non-finite value in design matrix or target"));
    }
    Ok(())
}

/// Minimum-norm least-squares solution of `Xw ≈ y` without intercept.
pub fn fit_ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_xy(x, y)?;
    if x.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    if max_sv == 0.0 {
        return Ok(DVector::zeros(x.ncols()));
    }
    let eps = max_sv * x.nrows().max(x.ncols()) as f64 * f64::EPSILON;
    svd.solve(y, eps).map_err(|e| MeraError::Optimization(e.to_string()))
}

fn soft_threshold(value: f64, threshold: f64) -> f64 {
    if value > threshold {
        value - threshold
    } else if value < -threshold {
        value + threshold
    } else {
        0.0
    }
}

/// Lasso by cyclic coordinate descent on `(1/n)·‖y − Xw‖² + eta·‖w‖₁`.
pub fn fit_lasso(x: &DMatrix<f64>, y: &DVector<f64>, eta: f64) -> Result<LassoFit> {
    fit_lasso_with(x, y, eta, LASSO_TOL, LASSO_MAX_ITER)
}

pub fn fit_lasso_with(x: &DMatrix<f64>, y: &DVector<f64>, eta: f64, tol: f64, max_iter: usize) -> Result<LassoFit> {
    check_xy(x, y)?;
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(MeraError::validation(format!("lasso penalty must be finite and >= 0, got {eta}")));
    }
    let (n, d) = x.shape();
    let threshold = n as f64 * eta / 2.0;
    let col_sq: Vec<f64> = (0..d).map(|j| x.column(j).norm_squared()).collect();
    let mut w: DVector<f64> = DVector::zeros(d);
    let mut residual = y.clone();

    for iter in 1..=max_iter {
        let mut max_delta = 0.0f64;
        for j in 0..d {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = x.column(j);
            let rho = col.dot(&residual) + col_sq[j] * w[j];
            let updated = soft_threshold(rho, threshold) / col_sq[j];
            let delta = updated - w[j];
            if delta != 0.0 {
                residual.axpy(-delta, &col, 1.0);
                w[j] = updated;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            return Ok(LassoFit {
                weights: w,
                converged: true,
                iterations: iter,
            });
        }
    }
    Ok(LassoFit {
        weights: w,
        converged: false,
        iterations: max_iter,
    })
}

/// Largest violation of the lasso subgradient optimality conditions.
pub fn lasso_kkt_violation(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>, eta: f64) -> f64 {
    let n = x.nrows() as f64;
    let grad = x.transpose() * (x * w - y) * (2.0 / n);
    grad.iter()
        .zip(w.iter())
        .map(|(g, wj)| {
            if wj.abs() > NONZERO_EPS {
                (g + wj.signum() * eta).abs()
            } else {
                (g.abs() - eta).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean Bernoulli log-likelihood of `sigmoid(Xw)`.
pub fn logistic_log_likelihood(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let z = x * w;
    z.iter().zip(y.iter()).map(|(z, y)| y * z - softplus(*z)).sum::<f64>() / x.nrows() as f64
}

fn logistic_gradient(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let p = (x * w).map(sigmoid);
    x.transpose() * (y - p) / x.nrows() as f64
}

/// Bias-free logistic regression by damped Newton ascent on the mean
/// log-likelihood.
pub fn fit_logistic(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LogisticFit> {
    check_xy(x, y)?;
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(MeraError::validation("logistic targets must be 0 or 1"));
    }
    let positives = y.iter().filter(|v| **v == 1.0).count();
    if positives == 0 || positives == y.len() {
        return Err(MeraError::validation("logistic probe needs both classes present"));
    }
    let (n, d) = x.shape();
    let mut w = DVector::zeros(d);
    let mut ll = logistic_log_likelihood(x, y, &w);

    for iter in 1..=LOGISTIC_MAX_ITER {
        let grad = logistic_gradient(x, y, &w);
        if grad.norm() < LOGISTIC_GRAD_TOL {
            return Ok(LogisticFit {
                weights: w,
                converged: true,
                norm_capped: false,
                iterations: iter - 1,
            });
        }
        let p = (x * &w).map(sigmoid);
        let mut hessian = DMatrix::zeros(d, d);
        for i in 0..n {
            let s = p[i] * (1.0 - p[i]);
            let row = x.row(i);
            hessian.ger(s / n as f64, &row.transpose(), &row.transpose(), 1.0);
        }
        let ridge = 1e-10 * (1.0 + hessian.diagonal().max());
        for j in 0..d {
            hessian[(j, j)] += ridge;
        }
        let step = hessian.cholesky().map(|c| c.solve(&grad)).unwrap_or_else(|| grad.clone());

        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &w + &step * t;
            let cand_ll = logistic_log_likelihood(x, y, &candidate);
            if cand_ll >= ll {
                w = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let norm = w.norm();
        if norm > LOGISTIC_MAX_NORM {
            w *= LOGISTIC_MAX_NORM / norm;
            return Ok(LogisticFit {
                weights: w,
                converged: false,
                norm_capped: true,
                iterations: iter,
            });
        }
        if !accepted {
            // no ascent direction left at floating-point resolution
            let converged = logistic_gradient(x, y, &w).norm() < LOGISTIC_GRAD_TOL * 10.0;
            return Ok(LogisticFit {
                weights: w,
                converged,
                norm_capped: false,
                iterations: iter,
            });
        }
    }
    Ok(LogisticFit {
        weights: w,
        converged: false,
        norm_capped: false,
        iterations: LOGISTIC_MAX_ITER,
    })
}

pub fn rmse(w: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if x.ncols() != w.len() || x.nrows() != y.len() {
        return Err(MeraError::Shape(format!(
            "weights {} / design {}x{} / target {}",
            w.len(),
            x.nrows(),
            x.ncols(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(MeraError::validation("rmse of an empty sample"));
    }
    Ok(((x * w - y).norm_squared() / y.len() as f64).sqrt())
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half. Computed from midranks.
pub fn aucroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MeraError::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MeraError::validation("AUCROC needs both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MeraError::validation("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

pub fn probe_sparsity(probe: &Probe) -> f64 {
    if probe.weights.is_empty() {
        return 0.0;
    }
    probe.weights.iter().filter(|w| w.abs() > NONZERO_EPS).count() as f64 / probe.weights.len() as f64
}

fn rows_matrix(data: &[f64], rows: &[usize], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), d, |r, c| data[rows[r] * d + c])
}

/// Trains one probe per layer on a seeded 70/30 train/validation split.
///
/// Regression probes fit every point of `eta_grid` (0 meaning plain least
/// squares) against the error vector and keep the lowest validation RMSE,
/// ties going to the smaller penalty. Logistic probes fit the error
/// indicator `1[predicted != true]` and report validation AUCROC.
pub fn train_layer_probes(traces: &TraceSet, kind: ProbeKind, eta_grid: &[f64], split_seed: u64) -> Result<Vec<Probe>> {
    if traces.is_empty() {
        return Err(MeraError::validation("cannot train probes on an empty trace set"));
    }
    if traces.n_layers == 0 {
        return Err(MeraError::validation("trace set has no layers"));
    }
    let mut grid: Vec<f64> = eta_grid.to_vec();
    if kind == ProbeKind::Regression {
        if grid.is_empty() {
            return Err(MeraError::validation("empty eta grid"));
        }
        if grid.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(MeraError::validation("eta grid values must be finite and >= 0"));
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
    }

    let split = split_dataset(traces.n_examples(), split_seed, [0.7, 0.3, 0.0, 0.0])?;
    let train_idx = split.indices(SplitTag::Train);
    let mut val_idx = split.indices(SplitTag::Val);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let d = traces.hidden_dim;

    (0..traces.n_layers)
        .into_par_iter()
        .map(|layer| {
            let data = traces.layer_matrix(layer);
            let x_train = rows_matrix(&data, &train_idx, d);
            let x_val = rows_matrix(&data, &val_idx, d);
            match kind {
                ProbeKind::Regression => {
                    let target = |rows: &[usize]| DVector::from_iterator(rows.len(), rows.iter().map(|&i| f64::from(traces.errors[i])));
                    let (y_train, y_val) = (target(&train_idx), target(&val_idx));
                    let mut best: Option<(f64, DVector<f64>, f64, bool)> = None;
                    let mut points = Vec::with_capacity(grid.len());
                    for &eta in &grid {
                        let (w, converged) = if eta == 0.0 {
                            (fit_ols(&x_train, &y_train)?, true)
                        } else {
                            let fit = fit_lasso(&x_train, &y_train, eta)?;
                            (fit.weights, fit.converged)
                        };
                        let score = rmse(&w, &x_val, &y_val)?;
                        points.push(GridPoint {
                            eta,
                            val_rmse: score,
                            converged,
                        });
                        if best.as_ref().is_none_or(|b| score < b.2) {
                            best = Some((eta, w, score, converged));
                        }
                    }
                    let (eta, w, score, converged) = best.expect("grid is nonempty");
                    Ok(Probe {
                        layer,
                        kind,
                        weights: w.iter().copied().collect(),
                        eta,
                        val_metric: Some(score),
                        converged,
                        grid: points,
                    })
                }
                ProbeKind::Logistic => {
                    let wrong = traces.true_labels.iter().zip(&traces.predicted_labels).map(|(t, p)| t != p).collect::<Vec<_>>();
                    let y_train = DVector::from_iterator(train_idx.len(), train_idx.iter().map(|&i| f64::from(u8::from(wrong[i]))));
                    let fit = fit_logistic(&x_train, &y_train)?;
                    let scores: Vec<f64> = (&x_val * &fit.weights).iter().copied().collect();
                    let val_labels: Vec<bool> = val_idx.iter().map(|&i| wrong[i]).collect();
                    Ok(Probe {
                        layer,
                        kind,
                        weights: fit.weights.iter().copied().collect(),
                        eta: 0.0,
                        val_metric: aucroc(&scores, &val_labels).ok(),
                        converged: fit.converged,
                        grid: Vec::new(),
                    })
                }
                ProbeKind::Contrastive => Err(MeraError::validation(
                    "contrastive directions are built by steering::contrastive_probes, not trained",
                )),
            }
        })
        .collect()
}

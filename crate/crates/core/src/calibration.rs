//! Threshold selection with a union-bound Hoeffding guarantee, or
//! abstention when no candidate clears the bound.
//!
//! Per-example performance deltas live in `[-1, 1]`. Hoeffding for a
//! variable of range 2 needs twice the unit-range bound, so validity is
//! gated on `2·b(δ, K, N)`; the unit-range value is reported alongside.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeraError, Result};
use crate::trace_store::{split_dataset, SplitTag};

pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_EPSILON: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    NegativeError,
}

impl std::str::FromStr for Metric {
    type Err = MeraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Self::Accuracy),
            "negative_error" => Ok(Self::NegativeError),
            other => Err(MeraError::validation(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Bonferroni,
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub alpha: f64,
    pub delta_hat: f64,
    /// Unit-range Hoeffding radius `b(δ, K, N)`.
    pub bound_literal: f64,
    /// Radius for deltas in `[-1, 1]`; this one decides validity.
    pub bound: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub delta: f64,
    pub epsilon: f64,
    pub k: usize,
    pub n: usize,
    pub metric: Metric,
}

/// Result of testing the half-A winner on half B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutCheck {
    pub alpha: f64,
    pub n: usize,
    pub delta_hat: f64,
    pub bound: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub procedure: Procedure,
    pub candidates: Vec<Candidate>,
    pub selected_alpha: Option<f64>,
    pub abstained: bool,
    pub params: CalibrationParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<HoldoutCheck>,
}

impl CalibrationResult {
    pub fn selected(&self) -> Option<&Candidate> {
        let alpha = self.selected_alpha?;
        self.candidates.iter().find(|c| c.alpha == alpha)
    }
}

/// `sqrt(ln(2K/δ) / (2N))`, defined for `δ ∈ (0, 2K]`.
pub fn hoeffding_bound(delta: f64, k: usize, n: usize) -> Result<f64> {
    if k == 0 || n == 0 {
        return Err(MeraError::validation(format!("hoeffding bound needs K >= 1 and N >= 1, got K={k}, N={n}")));
    }
    let two_k = 2.0 * k as f64;
    if !(delta > 0.0 && delta <= two_k) {
        return Err(MeraError::validation(format!("delta must lie in (0, {two_k}], got {delta}")));
    }
    Ok(((two_k / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// Ten midpoints 0.05, 0.15, ..., 0.95.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..10).map(|i| f64::from(2 * i + 1) / 20.0).collect()
}

fn check_performance(values: &[f64], what: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MeraError::validation(format!("{what} performance {v} outside [0, 1]")));
    }
    Ok(())
}

/// Mean and per-example values of `steered − unsteered`.
pub fn delta_cal(steered: &[f64], unsteered: &[f64]) -> Result<(f64, Vec<f64>)> {
    if steered.is_empty() {
        return Err(MeraError::validation("empty calibration set"));
    }
    if steered.len() != unsteered.len() {
        return Err(MeraError::Shape(format!("{} steered vs {} unsteered values", steered.len(), unsteered.len())));
    }
    check_performance(steered, "steered")?;
    check_performance(unsteered, "unsteered")?;
    let deltas: Vec<f64> = steered.iter().zip(unsteered).map(|(s, u)| s - u).collect();
    Ok((mean(&deltas), deltas))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn check_settings(alpha_grid: &[f64], delta: f64, epsilon: f64) -> Result<()> {
    if alpha_grid.is_empty() {
        return Err(MeraError::validation("empty alpha grid"));
    }
    if alpha_grid.iter().any(|a| !a.is_finite()) {
        return Err(MeraError::validation("alpha grid contains a non-finite value"));
    }
    let mut sorted = alpha_grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|p| p[0] == p[1]) {
        return Err(MeraError::validation("alpha grid contains duplicates"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(MeraError::validation(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(MeraError::validation(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    Ok(())
}

/// Index of the largest `delta_hat` among valid candidates, ties going to
/// the smaller alpha.
fn best_valid(candidates: &[Candidate]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.valid)
        .max_by(|(_, a), (_, b)| a.delta_hat.total_cmp(&b.delta_hat).then(b.alpha.total_cmp(&a.alpha)))
        .map(|(i, _)| i)
}

/// Builds the candidate table from per-alpha deltas and selects.
pub fn select_from_deltas(alpha_grid: &[f64], deltas: &[Vec<f64>], delta: f64, epsilon: f64, metric: Metric) -> Result<CalibrationResult> {
    check_settings(alpha_grid, delta, epsilon)?;
    if deltas.len() != alpha_grid.len() {
        return Err(MeraError::Shape(format!("{} delta rows for {} candidates", deltas.len(), alpha_grid.len())));
    }
    let n = deltas[0].len();
    if n == 0 {
        return Err(MeraError::validation("empty calibration set"));
    }
    if deltas.iter().any(|row| row.len() != n) {
        return Err(MeraError::Shape("delta rows differ in length".into()));
    }
    let k = alpha_grid.len();
    let literal = hoeffding_bound(delta, k, n)?;
    let bound = 2.0 * literal;
    let candidates: Vec<Candidate> = alpha_grid
        .iter()
        .zip(deltas)
        .map(|(&alpha, row)| {
            let delta_hat = mean(row);
            Candidate {
                alpha,
                delta_hat,
                bound_literal: literal,
                bound,
                valid: delta_hat > epsilon + bound,
            }
        })
        .collect();
    let selected_alpha = best_valid(&candidates).map(|i| candidates[i].alpha);
    Ok(CalibrationResult {
        procedure: Procedure::Bonferroni,
        abstained: selected_alpha.is_none(),
        selected_alpha,
        candidates,
        params: CalibrationParams { delta, epsilon, k, n, metric },
        holdout: None,
    })
}

fn steered_deltas<F>(eval: &F, unsteered: &[f64], alpha_grid: &[f64]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64) -> Result<Vec<f64>> + Sync,
{
    if unsteered.is_empty() {
        return Err(MeraError::validation("empty calibration set"));
    }
    alpha_grid
        .par_iter()
        .map(|&alpha| delta_cal(&eval(alpha)?, unsteered).map(|(_, d)| d))
        .collect()
}

/// Evaluates every candidate threshold on the calibration set and keeps
/// the best one whose improvement clears `epsilon` plus the union bound.
///
/// `eval(alpha)` returns per-example steered performance in `[0, 1]`;
/// `unsteered` holds the same examples without steering.
pub fn calibrate<F>(eval: F, unsteered: &[f64], alpha_grid: &[f64], delta: f64, epsilon: f64, metric: Metric) -> Result<CalibrationResult>
where
    F: Fn(f64) -> Result<Vec<f64>> + Sync,
{
    check_settings(alpha_grid, delta, epsilon)?;
    let deltas = steered_deltas(&eval, unsteered, alpha_grid)?;
    select_from_deltas(alpha_grid, &deltas, delta, epsilon, metric)
}

fn split_from_deltas(alpha_grid: &[f64], deltas: &[Vec<f64>], delta: f64, epsilon: f64, metric: Metric, split_seed: u64) -> Result<CalibrationResult> {
    check_settings(alpha_grid, delta, epsilon)?;
    let n = deltas.first().map_or(0, Vec::len);
    if n < 2 {
        return Err(MeraError::validation(format!("split calibration needs at least 2 examples, got {n}")));
    }
    let split = split_dataset(n, split_seed, [0.5, 0.5, 0.0, 0.0])?;
    let (half_a, half_b) = (split.indices(SplitTag::Train), split.indices(SplitTag::Val));
    let pick = |row: &Vec<f64>, idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| row[i]).collect() };

    let deltas_a: Vec<Vec<f64>> = deltas.iter().map(|row| pick(row, &half_a)).collect();
    let candidates: Vec<Candidate> = alpha_grid
        .iter()
        .zip(&deltas_a)
        .map(|(&alpha, row)| Candidate {
            alpha,
            delta_hat: mean(row),
            bound_literal: 0.0,
            bound: 0.0,
            valid: true,
        })
        .collect();
    let winner = best_valid(&candidates).expect("every half-A candidate is eligible");

    let literal = hoeffding_bound(delta, 1, half_b.len())?;
    let held = pick(&deltas[winner], &half_b);
    let delta_hat_b = mean(&held);
    let accepted = delta_hat_b - 2.0 * literal > epsilon;
    let selected_alpha = accepted.then_some(candidates[winner].alpha);
    Ok(CalibrationResult {
        procedure: Procedure::Split,
        abstained: !accepted,
        selected_alpha,
        candidates,
        params: CalibrationParams {
            delta,
            epsilon,
            k: alpha_grid.len(),
            n,
            metric,
        },
        holdout: Some(HoldoutCheck {
            alpha: alpha_grid[winner],
            n: half_b.len(),
            delta_hat: delta_hat_b,
            bound: 2.0 * literal,
            accepted,
        }),
    })
}

/// Selects on one half of the calibration set and tests that single choice
/// on the other half with a one-hypothesis bound.
pub fn split_calibrate<F>(
    eval: F,
    unsteered: &[f64],
    alpha_grid: &[f64],
    delta: f64,
    epsilon: f64,
    metric: Metric,
    split_seed: u64,
) -> Result<CalibrationResult>
where
    F: Fn(f64) -> Result<Vec<f64>> + Sync,
{
    check_settings(alpha_grid, delta, epsilon)?;
    if unsteered.len() < 2 {
        return Err(MeraError::validation(format!(
            "split calibration needs at least 2 examples, got {}",
            unsteered.len()
        )));
    }
    let deltas = steered_deltas(&eval, unsteered, alpha_grid)?;
    split_from_deltas(alpha_grid, &deltas, delta, epsilon, metric, split_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeParams {
    pub trials: usize,
    pub n: usize,
    pub k: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub effect_size: f64,
    pub seed: u64,
    pub procedure: Procedure,
}

impl Default for GuaranteeParams {
    fn default() -> Self {
        Self {
            trials: 2000,
            n: 250,
            k: 10,
            delta: DEFAULT_DELTA,
            epsilon: DEFAULT_EPSILON,
            effect_size: 0.0,
            seed: 0,
            procedure: Procedure::Bonferroni,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub params: GuaranteeParams,
    pub violations: usize,
    pub violation_rate: f64,
    pub selections: usize,
    pub selection_rate: f64,
    /// 95% Wilson interval for the violation rate.
    pub violation_ci: [f64; 2],
    /// `δ + 3·sqrt(δ(1−δ)/trials)`.
    pub acceptance_upper: f64,
}

/// 95% Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: usize, trials: usize) -> [f64; 2] {
    let z = 1.959_963_984_540_054f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    [(centre - half).max(0.0), (centre + half).min(1.0)]
}

/// Monte-Carlo check of the selection guarantee.
///
/// Each trial draws, for every one of `k` candidates, `n` independent
/// per-example deltas equal to `+1` with probability `(1 + e)/2` and `-1`
/// otherwise, so the true improvement of every candidate is `e`. A trial
/// violates the guarantee when it selects while `e <= epsilon`. Trial `i`
/// uses seed `seed + i`, so results do not depend on scheduling.
pub fn guarantee_simulation(params: &GuaranteeParams) -> Result<GuaranteeReport> {
    if params.trials < 1 {
        return Err(MeraError::validation("guarantee simulation needs at least one trial"));
    }
    if params.n == 0 || params.k == 0 {
        return Err(MeraError::validation("guarantee simulation needs N >= 1 and K >= 1"));
    }
    if !(-1.0..=1.0).contains(&params.effect_size) {
        return Err(MeraError::validation(format!("effect size {} outside [-1, 1]", params.effect_size)));
    }
    let grid: Vec<f64> = (0..params.k).map(|i| (i as f64 + 0.5) / params.k as f64).collect();
    check_settings(&grid, params.delta, params.epsilon)?;
    let p_up = (1.0 + params.effect_size) / 2.0;

    let outcomes: Vec<bool> = (0..params.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(trial as u64));
            let deltas: Vec<Vec<f64>> = (0..params.k)
                .map(|_| (0..params.n).map(|_| if rng.random_bool(p_up) { 1.0 } else { -1.0 }).collect())
                .collect();
            let result = match params.procedure {
                Procedure::Bonferroni => select_from_deltas(&grid, &deltas, params.delta, params.epsilon, Metric::Accuracy)?,
                Procedure::Split => split_from_deltas(&grid, &deltas, params.delta, params.epsilon, Metric::Accuracy, rng.random())?,
            };
            Ok(!result.abstained)
        })
        .collect::<Result<_>>()?;

    let selections = outcomes.iter().filter(|s| **s).count();
    let violations = if params.effect_size <= params.epsilon { selections } else { 0 };
    let trials = params.trials as f64;
    Ok(GuaranteeReport {
        params: params.clone(),
        violations,
        violation_rate: violations as f64 / trials,
        selections,
        selection_rate: selections as f64 / trials,
        violation_ci: wilson_interval(violations, params.trials),
        acceptance_upper: params.delta + 3.0 * (params.delta * (1.0 - params.delta) / trials).sqrt(),
    })
}

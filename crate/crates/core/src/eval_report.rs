//! Evaluation quantities and the JSON/CSV report.

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationResult;
use crate::error::{MeraError, Result};
use crate::trace_store::PositionStrategy;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_PERCENTILES: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

/// Steering Performance Impact: the fraction of the attainable gain that
/// was realized, or of the existing accuracy that was lost.
pub fn spi(a: f64, a_tilde: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&a_tilde) {
        return Err(MeraError::validation(format!("accuracies must lie in [0, 1], got {a} and {a_tilde}")));
    }
    Ok(if a_tilde > a {
        (a_tilde - a) / (1.0 - a)
    } else if a_tilde < a {
        (a_tilde - a) / a
    } else {
        0.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub c00: usize,
    pub c01: usize,
    pub c10: usize,
    pub c11: usize,
}

impl TransitionMatrix {
    pub fn total(&self) -> usize {
        self.c00 + self.c01 + self.c10 + self.c11
    }
}

/// Counts of (before, after) correctness pairs.
pub fn transitions(before: &[bool], after: &[bool]) -> Result<TransitionMatrix> {
    if before.len() != after.len() {
        return Err(MeraError::Shape(format!("{} before vs {} after", before.len(), after.len())));
    }
    let mut m = TransitionMatrix::default();
    for (&b, &a) in before.iter().zip(after) {
        match (b, a) {
            (false, false) => m.c00 += 1,
            (false, true) => m.c01 += 1,
            (true, false) => m.c10 += 1,
            (true, true) => m.c11 += 1,
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentile {
    pub p: f64,
    pub value: f64,
}

/// Linear interpolation between order statistics at rank `p/100·(n−1)`.
pub fn error_percentiles(errors: &[f64], percentiles: &[f64]) -> Result<Vec<Percentile>> {
    if errors.is_empty() {
        return Err(MeraError::validation("percentiles of an empty sample"));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(MeraError::validation("NaN in error sample"));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentiles
        .iter()
        .map(|&p| {
            if !(0.0..=100.0).contains(&p) {
                return Err(MeraError::validation(format!("percentile {p} outside [0, 100]")));
            }
            let rank = p / 100.0 * (sorted.len() - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            let value = sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]);
            Ok(Percentile { p, value })
        })
        .collect()
}

/// Per-example outcomes of one method, before and after steering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub method: String,
    pub mode: PositionStrategy,
    pub correct_before: Vec<bool>,
    pub correct_after: Vec<bool>,
    pub errors_before: Vec<f64>,
    pub errors_after: Vec<f64>,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

impl EvalRun {
    pub fn new(
        method: impl Into<String>,
        mode: PositionStrategy,
        correct_before: Vec<bool>,
        correct_after: Vec<bool>,
        errors_before: Vec<f64>,
        errors_after: Vec<f64>,
    ) -> Result<Self> {
        let n = correct_before.len();
        if correct_after.len() != n || errors_before.len() != n || errors_after.len() != n {
            return Err(MeraError::Shape("evaluation vectors differ in length".into()));
        }
        if n == 0 {
            return Err(MeraError::validation("evaluation run with no examples"));
        }
        Ok(Self {
            method: method.into(),
            mode,
            correct_before,
            correct_after,
            errors_before,
            errors_after,
        })
    }

    pub fn n(&self) -> usize {
        self.correct_before.len()
    }

    pub fn accuracy_before(&self) -> f64 {
        mean(self.correct_before.iter().map(|&c| f64::from(u8::from(c))))
    }

    pub fn accuracy_after(&self) -> f64 {
        mean(self.correct_after.iter().map(|&c| f64::from(u8::from(c))))
    }

    pub fn error_before(&self) -> f64 {
        mean(self.errors_before.iter().copied())
    }

    pub fn error_after(&self) -> f64 {
        mean(self.errors_after.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub method: String,
    pub mode: PositionStrategy,
    pub delta_accuracy: f64,
    pub delta_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatter {
    pub points: Vec<ScatterPoint>,
    pub correlation: Option<f64>,
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn acc_error_scatter(runs: &[EvalRun]) -> Scatter {
    let points: Vec<ScatterPoint> = runs
        .iter()
        .map(|r| ScatterPoint {
            method: r.method.clone(),
            mode: r.mode,
            delta_accuracy: r.accuracy_after() - r.accuracy_before(),
            delta_error: r.error_after() - r.error_before(),
        })
        .collect();
    let dx: Vec<f64> = points.iter().map(|p| p.delta_accuracy).collect();
    let dy: Vec<f64> = points.iter().map(|p| p.delta_error).collect();
    Scatter {
        correlation: pearson(&dx, &dy),
        points,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub mode: PositionStrategy,
    pub n: usize,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub delta_accuracy: f64,
    pub error_before: f64,
    pub error_after: f64,
    pub delta_error: f64,
    pub spi: f64,
    pub transitions: TransitionMatrix,
    pub error_percentiles_before: Vec<Percentile>,
    pub error_percentiles_after: Vec<Percentile>,
}

impl ReportRow {
    pub fn from_run(run: &EvalRun) -> Result<Self> {
        let (a, at) = (run.accuracy_before(), run.accuracy_after());
        let (e, et) = (run.error_before(), run.error_after());
        Ok(Self {
            method: run.method.clone(),
            mode: run.mode,
            n: run.n(),
            accuracy_before: a,
            accuracy_after: at,
            delta_accuracy: at - a,
            error_before: e,
            error_after: et,
            delta_error: et - e,
            spi: spi(a, at)?,
            transitions: transitions(&run.correct_before, &run.correct_after)?,
            error_percentiles_before: error_percentiles(&run.errors_before, &DEFAULT_PERCENTILES)?,
            error_percentiles_after: error_percentiles(&run.errors_after, &DEFAULT_PERCENTILES)?,
        })
    }
}

/// Calibration outcome attached to a report, per position mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub mode: PositionStrategy,
    pub method: String,
    pub abstained: bool,
    pub result: CalibrationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub rows: Vec<ReportRow>,
    pub calibration: Vec<CalibrationEntry>,
    pub scatter: Scatter,
}

pub fn build_report(runs: &[EvalRun], calibration: Vec<CalibrationEntry>, config_hash: Option<String>) -> Result<EvalReport> {
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash,
        rows: runs.iter().map(ReportRow::from_run).collect::<Result<_>>()?,
        calibration,
        scatter: acc_error_scatter(runs),
    })
}

/// Pretty JSON with a trailing newline. Key order follows field order, so
/// identical inputs render identical bytes.
pub fn render_report(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

pub fn parse_report(text: &str) -> Result<EvalReport> {
    let report: EvalReport = serde_json::from_str(text)?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(MeraError::UnsupportedVersion(report.schema_version));
    }
    Ok(report)
}

pub fn candidates_csv(result: &CalibrationResult) -> String {
    let mut out = String::from("alpha,delta_hat,bound_literal,bound,valid,selected\n");
    for c in &result.candidates {
        let selected = result.selected_alpha == Some(c.alpha);
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.alpha, c.delta_hat, c.bound_literal, c.bound, c.valid, selected
        ));
    }
    out
}

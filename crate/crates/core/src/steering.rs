//! Conditional steering: the closed-form minimal correction that brings a
//! linear error estimate down to a threshold, plus the sigmoid, Taylor and
//! penalty variants and the fixed-strength baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeraError, Result};
use crate::linmodel::{logit, sigmoid, Probe, ProbeKind};
use crate::trace_store::TraceSet;

pub const POLICY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MeraRegression,
    MeraLogistic,
    MeraContrastive,
    /// Adds the stored direction with strength 1 at every in-scope site.
    BaseFixedLambda1,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MeraRegression => "mera_regression",
            Self::MeraLogistic => "mera_logistic",
            Self::MeraContrastive => "mera_contrastive",
            Self::BaseFixedLambda1 => "base_fixed_lambda1",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = MeraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mera_regression" => Ok(Self::MeraRegression),
            "mera_logistic" => Ok(Self::MeraLogistic),
            "mera_contrastive" => Ok(Self::MeraContrastive),
            "base_fixed_lambda1" => Ok(Self::BaseFixedLambda1),
            other => Err(MeraError::validation(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    #[default]
    All,
    GenerationOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScope {
    #[default]
    All,
    Single(usize),
}

impl LayerScope {
    pub fn includes(self, layer: usize) -> bool {
        match self {
            Self::All => true,
            Self::Single(l) => l == layer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Scope {
    pub token_scope: TokenScope,
    pub layer_scope: LayerScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: usize,
    pub kind: ProbeKind,
    pub weights: Vec<f64>,
}

/// Per-layer directions plus one global threshold. `alpha == None` means
/// the threshold has not been calibrated yet; such a policy never steers,
/// and neither does an abstained one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPolicy {
    pub version: u32,
    pub alpha: Option<f64>,
    pub variant: Variant,
    pub scope: Scope,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub abstained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerDecision {
    pub triggered: bool,
    pub lambda: f64,
    pub v: Vec<f64>,
    pub predicted_before: f64,
    pub predicted_after: f64,
}

impl SteerDecision {
    fn untriggered(dim: usize, predicted: f64) -> Self {
        Self {
            triggered: false,
            lambda: 0.0,
            v: vec![0.0; dim],
            predicted_before: predicted,
            predicted_after: predicted,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(w: &[f64], h: &[f64]) -> Result<()> {
    if w.len() != h.len() {
        return Err(MeraError::Shape(format!("weights have {} entries, activation {}", w.len(), h.len())));
    }
    if w.iter().chain(h).any(|x| !x.is_finite()) {
        return Err(MeraError::validation("non-finite weight or activation"));
    }
    Ok(())
}

pub fn predicted_error(kind: ProbeKind, w: &[f64], h: &[f64]) -> Result<f64> {
    check_pair(w, h)?;
    let score = dot(w, h);
    Ok(match kind {
        ProbeKind::Logistic => sigmoid(score),
        ProbeKind::Regression | ProbeKind::Contrastive => score,
    })
}

/// Smallest `v` with `w·(h + v) <= alpha`.
pub fn steer_linear(w: &[f64], h: &[f64], alpha: f64) -> Result<SteerDecision> {
    check_pair(w, h)?;
    if !alpha.is_finite() {
        return Err(MeraError::validation("alpha must be finite"));
    }
    let score = dot(w, h);
    let norm_sq = dot(w, w);
    if norm_sq == 0.0 {
        if alpha < 0.0 {
            return Err(MeraError::Infeasible(format!("zero direction cannot reach alpha = {alpha}")));
        }
        return Ok(SteerDecision::untriggered(w.len(), score));
    }
    if score <= alpha {
        return Ok(SteerDecision::untriggered(w.len(), score));
    }
    let lambda = (alpha - score) / norm_sq;
    let v: Vec<f64> = w.iter().map(|wi| lambda * wi).collect();
    let steered: Vec<f64> = h.iter().zip(&v).map(|(a, b)| a + b).collect();
    Ok(SteerDecision {
        triggered: true,
        lambda,
        predicted_before: score,
        predicted_after: dot(w, &steered),
        v,
    })
}

/// Logistic variant: steer until `sigmoid(w·(h + v)) == alpha`.
pub fn steer_sigmoid(w: &[f64], h: &[f64], alpha: f64) -> Result<SteerDecision> {
    check_pair(w, h)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MeraError::Infeasible(format!("sigmoid threshold must lie in (0, 1), got {alpha}")));
    }
    let score = dot(w, h);
    let before = sigmoid(score);
    let norm_sq = dot(w, w);
    if norm_sq == 0.0 || before <= alpha {
        return Ok(SteerDecision::untriggered(w.len(), before));
    }
    let lambda = (logit(alpha) - score) / norm_sq;
    let v: Vec<f64> = w.iter().map(|wi| lambda * wi).collect();
    let steered: Vec<f64> = h.iter().zip(&v).map(|(a, b)| a + b).collect();
    Ok(SteerDecision {
        triggered: true,
        lambda,
        predicted_before: before,
        predicted_after: sigmoid(dot(w, &steered)),
        v,
    })
}

pub fn fixed_lambda_vector(w: &[f64], lambda: f64) -> Vec<f64> {
    w.iter().map(|x| lambda * x).collect()
}

/// Mean activation of the `k` highest-error examples minus that of the `k`
/// lowest-error ones at `layer`. Equal errors are ordered by example index.
pub fn contrastive_vector(traces: &TraceSet, layer: usize, k: usize) -> Result<Vec<f64>> {
    let n = traces.n_examples();
    if k == 0 {
        return Err(MeraError::validation("contrastive k must be at least 1"));
    }
    if 2 * k > n {
        return Err(MeraError::validation(format!(
            "contrastive k = {k} needs at least {} examples, have {n}",
            2 * k
        )));
    }
    if layer >= traces.n_layers {
        return Err(MeraError::validation(format!("layer {layer} out of range ({} layers)", traces.n_layers)));
    }
    let mut high: Vec<usize> = (0..n).collect();
    high.sort_by(|&a, &b| traces.errors[b].total_cmp(&traces.errors[a]).then(a.cmp(&b)));
    let mut low: Vec<usize> = (0..n).collect();
    low.sort_by(|&a, &b| traces.errors[a].total_cmp(&traces.errors[b]).then(a.cmp(&b)));

    let d = traces.hidden_dim;
    let mut v = vec![0.0; d];
    for (&hi, &lo) in high[..k].iter().zip(&low[..k]) {
        let (a, b) = (traces.activation(hi, layer), traces.activation(lo, layer));
        for j in 0..d {
            v[j] += f64::from(a[j]) - f64::from(b[j]);
        }
    }
    v.iter_mut().for_each(|x| *x /= k as f64);
    Ok(v)
}

pub fn contrastive_probes(traces: &TraceSet, k: usize) -> Result<Vec<Probe>> {
    (0..traces.n_layers)
        .map(|layer| {
            Ok(Probe {
                layer,
                kind: ProbeKind::Contrastive,
                weights: contrastive_vector(traces, layer, k)?,
                eta: 0.0,
                val_metric: None,
                converged: true,
                grid: Vec::new(),
            })
        })
        .collect()
}

/// A differentiable scalar error estimate over activations.
pub trait ErrorEstimator {
    fn value(&self, h: &[f64]) -> f64;
    fn gradient(&self, h: &[f64]) -> Vec<f64>;
}

pub struct LinearEstimator(pub Vec<f64>);

impl ErrorEstimator for LinearEstimator {
    fn value(&self, h: &[f64]) -> f64 {
        dot(&self.0, h)
    }

    fn gradient(&self, _h: &[f64]) -> Vec<f64> {
        self.0.clone()
    }
}

pub struct LogisticEstimator(pub Vec<f64>);

impl ErrorEstimator for LogisticEstimator {
    fn value(&self, h: &[f64]) -> f64 {
        sigmoid(dot(&self.0, h))
    }

    fn gradient(&self, h: &[f64]) -> Vec<f64> {
        let p = self.value(h);
        self.0.iter().map(|w| p * (1.0 - p) * w).collect()
    }
}

/// Estimator built from a value closure and a gradient closure.
pub struct FnEstimator<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> ErrorEstimator for FnEstimator<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, h: &[f64]) -> f64 {
        (self.value)(h)
    }

    fn gradient(&self, h: &[f64]) -> Vec<f64> {
        (self.gradient)(h)
    }
}

/// Linearizes `p_hat` at `h` and applies the closed form to the linearized
/// constraint `p(h) + ∇p(h)·v <= alpha`. Reported predictions are on the
/// estimator's own scale.
pub fn steer_taylor(p_hat: &dyn ErrorEstimator, h: &[f64], alpha: f64) -> Result<SteerDecision> {
    let value = p_hat.value(h);
    let grad = p_hat.gradient(h);
    let shifted = alpha - value + dot(&grad, h);
    let mut decision = steer_linear(&grad, h, shifted)?;
    decision.predicted_before = value;
    decision.predicted_after = value + dot(&grad, &decision.v);
    Ok(decision)
}

pub const PENALTY_GRAD_TOL: f64 = 1e-7;

/// Minimizes `‖v‖² + zeta·max(0, p(h + v) − alpha)²` by gradient descent from
/// `v = 0`, with Armijo backtracking starting at `step`.
pub fn steer_penalty(p_hat: &dyn ErrorEstimator, h: &[f64], alpha: f64, zeta: f64, step: f64, max_iter: usize) -> Result<Vec<f64>> {
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(MeraError::validation(format!("penalty weight must be positive, got {zeta}")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(MeraError::validation(format!("step must be positive, got {step}")));
    }
    let d = h.len();
    let shifted = |v: &[f64]| -> Vec<f64> { h.iter().zip(v).map(|(a, b)| a + b).collect() };
    let objective = |v: &[f64]| -> f64 {
        let excess = (p_hat.value(&shifted(v)) - alpha).max(0.0);
        dot(v, v) + zeta * excess * excess
    };
    let gradient = |v: &[f64]| -> Vec<f64> {
        let at = shifted(v);
        let excess = (p_hat.value(&at) - alpha).max(0.0);
        let gp = p_hat.gradient(&at);
        v.iter().zip(&gp).map(|(vi, gi)| 2.0 * vi + 2.0 * zeta * excess * gi).collect()
    };

    let mut v = vec![0.0; d];
    let mut f = objective(&v);
    if !f.is_finite() {
        return Err(MeraError::Optimization("objective is not finite at v = 0".into()));
    }
    let mut t = step;
    let mut increases = 0;
    for _ in 0..max_iter {
        let g = gradient(&v);
        let g_sq = dot(&g, &g);
        if g_sq.sqrt() < PENALTY_GRAD_TOL {
            break;
        }
        let mut accepted = None;
        while t > 1e-300 {
            let cand: Vec<f64> = v.iter().zip(&g).map(|(vi, gi)| vi - t * gi).collect();
            let fc = objective(&cand);
            if fc <= f - 1e-4 * t * g_sq {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            // no decrease representable at this precision
            break;
        };
        if !fc.is_finite() {
            return Err(MeraError::Optimization("objective became non-finite".into()));
        }
        increases = if fc > f { increases + 1 } else { 0 };
        if increases >= 50 {
            return Err(MeraError::Optimization("objective increased for 50 consecutive steps".into()));
        }
        v = cand;
        f = fc;
        t *= 2.0;
    }
    Ok(v)
}

impl SteeringPolicy {
    pub fn from_probes(probes: &[Probe], variant: Variant, scope: Scope) -> Result<Self> {
        let policy = Self {
            version: POLICY_VERSION,
            alpha: None,
            variant,
            scope,
            layers: probes
                .iter()
                .map(|p| LayerEntry {
                    layer: p.layer,
                    kind: p.kind,
                    weights: p.weights.clone(),
                })
                .collect(),
            abstained: false,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// A fixed-strength baseline that adds `-w` (away from the error
    /// direction) at every in-scope site.
    pub fn baseline(probes: &[Probe], scope: Scope) -> Result<Self> {
        let mut policy = Self::from_probes(probes, Variant::BaseFixedLambda1, scope)?;
        for entry in &mut policy.layers {
            entry.weights = fixed_lambda_vector(&entry.weights, -1.0);
        }
        Ok(policy)
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha: Some(alpha),
            abstained: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != POLICY_VERSION {
            return Err(MeraError::UnsupportedVersion(self.version));
        }
        if self.layers.is_empty() {
            return Err(MeraError::validation("policy has no layer entries"));
        }
        let dim = self.layers[0].weights.len();
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.layers {
            if !seen.insert(entry.layer) {
                return Err(MeraError::validation(format!("layer {} listed twice", entry.layer)));
            }
            if entry.weights.len() != dim {
                return Err(MeraError::Shape(format!(
                    "layer {} has {} weights, expected {dim}",
                    entry.layer,
                    entry.weights.len()
                )));
            }
            if entry.weights.iter().any(|w| !w.is_finite()) {
                return Err(MeraError::validation(format!("non-finite weight at layer {}", entry.layer)));
            }
        }
        if let Some(alpha) = self.alpha {
            if !alpha.is_finite() {
                return Err(MeraError::validation("alpha must be finite"));
            }
            let probability_scale = matches!(self.variant, Variant::MeraRegression | Variant::MeraLogistic);
            if probability_scale && !(0.0..=1.0).contains(&alpha) {
                return Err(MeraError::validation(format!("alpha {alpha} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn validate_for_model(&self, n_layers: usize, dim: usize) -> Result<()> {
        self.validate()?;
        if let Some(entry) = self.layers.iter().find(|e| e.layer >= n_layers) {
            return Err(MeraError::validation(format!(
                "policy references layer {} of a {n_layers}-layer model",
                entry.layer
            )));
        }
        if self.layers[0].weights.len() != dim {
            return Err(MeraError::Shape(format!(
                "policy weights have {} entries, model width is {dim}",
                self.layers[0].weights.len()
            )));
        }
        if let LayerScope::Single(l) = self.scope.layer_scope {
            if l >= n_layers {
                return Err(MeraError::validation(format!("layer scope {l} out of range")));
            }
        }
        Ok(())
    }

    pub fn entry(&self, layer: usize) -> Option<&LayerEntry> {
        self.layers.iter().find(|e| e.layer == layer)
    }

    /// Steering decision at one site, or `None` when the site is out of
    /// scope or the policy is inactive.
    pub fn decide(&self, layer: usize, h: &[f64], generation_position: bool) -> Result<Option<SteerDecision>> {
        if !self.scope.layer_scope.includes(layer) {
            return Ok(None);
        }
        if self.scope.token_scope == TokenScope::GenerationOnly && !generation_position {
            return Ok(None);
        }
        self.steer_at(layer, h)
    }

    /// Like [`SteeringPolicy::decide`] but without the scope check, for
    /// callers that apply their own scope.
    pub fn steer_at(&self, layer: usize, h: &[f64]) -> Result<Option<SteerDecision>> {
        let Some(entry) = self.entry(layer) else {
            return Ok(None);
        };
        if self.variant == Variant::BaseFixedLambda1 {
            check_pair(&entry.weights, h)?;
            let before = dot(&entry.weights, h);
            return Ok(Some(SteerDecision {
                triggered: true,
                lambda: 1.0,
                v: fixed_lambda_vector(&entry.weights, 1.0),
                predicted_before: before,
                predicted_after: before + dot(&entry.weights, &entry.weights),
            }));
        }
        let alpha = match self.alpha {
            Some(a) if !self.abstained => a,
            _ => return Ok(None),
        };
        let decision = match self.variant {
            Variant::MeraLogistic => steer_sigmoid(&entry.weights, h, alpha)?,
            _ => steer_linear(&entry.weights, h, alpha)?,
        };
        Ok(Some(decision))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let policy: Self = serde_json::from_str(text)?;
        policy.validate()?;
        Ok(policy)
    }
}

/// One `(w, h, alpha)` case with the engine's closed-form answer, for
/// cross-implementation parity checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringTestVector {
    pub kind: ProbeKind,
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    pub alpha: f64,
    pub triggered: bool,
    pub lambda: f64,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringTestVectors {
    pub version: u32,
    pub seed: u64,
    pub cases: Vec<SteeringTestVector>,
}

/// Random cases, alternating regression and logistic kinds.
pub fn generate_test_vectors(count: usize, dim: usize, seed: u64) -> Result<SteeringTestVectors> {
    if dim == 0 {
        return Err(MeraError::validation("test vector dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(count);
    for i in 0..count {
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let alpha = rng.random_range(0.05..0.95);
        let (kind, decision) = if i % 2 == 0 {
            (ProbeKind::Regression, steer_linear(&w, &h, alpha)?)
        } else {
            (ProbeKind::Logistic, steer_sigmoid(&w, &h, alpha)?)
        };
        cases.push(SteeringTestVector {
            kind,
            w,
            h,
            alpha,
            triggered: decision.triggered,
            lambda: decision.lambda,
            v: decision.v,
        });
    }
    Ok(SteeringTestVectors {
        version: POLICY_VERSION,
        seed,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_store::PositionStrategy;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Projected gradient on `‖v‖²` over the half-space `w·(h+v) <= alpha`,
    /// started away from the origin.
    fn projected_gradient_oracle(w: &[f64], h: &[f64], alpha: f64) -> Vec<f64> {
        let c = alpha - dot(w, h);
        let nn = dot(w, w);
        let project = |u: Vec<f64>| -> Vec<f64> {
            let excess = dot(w, &u) - c;
            if excess > 0.0 {
                u.iter().zip(w).map(|(ui, wi)| ui - excess / nn * wi).collect()
            } else {
                u
            }
        };
        let mut v = project(vec![1.0; w.len()]);
        for _ in 0..2000 {
            v = project(v.iter().map(|x| x - 0.1 * 2.0 * x).collect());
        }
        v
    }

    #[test]
    fn predicted_error_examples() {
        assert_eq!(predicted_error(ProbeKind::Regression, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(predicted_error(ProbeKind::Logistic, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 0.5);
        assert_eq!(predicted_error(ProbeKind::Regression, &[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert_eq!(
            predicted_error(ProbeKind::Regression, &[1.0], &[3.0, -1.0]).unwrap_err().code(),
            "shape_mismatch"
        );
    }

    #[test]
    fn linear_untriggered_when_satisfied() {
        let d = steer_linear(&[1.0, 0.0], &[0.5, 0.0], 1.0).unwrap();
        assert!(!d.triggered);
        assert_eq!(d.v, vec![0.0, 0.0]);
        assert_eq!(d.lambda, 0.0);
    }

    #[test]
    fn linear_examples_match_oracle() {
        let d = steer_linear(&[1.0, 1.0], &[2.0, 0.0], 1.0).unwrap();
        assert!(d.triggered && d.lambda < 0.0);
        assert!(close(&d.v, &[-0.5, -0.5], 1e-15));
        assert!(close(&d.v, &projected_gradient_oracle(&[1.0, 1.0], &[2.0, 0.0], 1.0), 1e-6));
        assert!((d.predicted_after - 1.0).abs() < 1e-12);

        let d = steer_linear(&[2.0, 0.0], &[3.0, 4.0], 2.0).unwrap();
        assert!(close(&d.v, &[-2.0, 0.0], 1e-15));
        assert!(close(&d.v, &projected_gradient_oracle(&[2.0, 0.0], &[3.0, 4.0], 2.0), 1e-6));
    }

    #[test]
    fn zero_direction() {
        assert!(!steer_linear(&[0.0, 0.0], &[1.0, 1.0], 0.3).unwrap().triggered);
        assert_eq!(steer_linear(&[0.0, 0.0], &[1.0, 1.0], -0.1).unwrap_err().code(), "infeasible");
        assert!(!steer_sigmoid(&[0.0], &[1.0], 0.1).unwrap().triggered);
    }

    #[test]
    fn sigmoid_examples() {
        let d = steer_sigmoid(&[1.0], &[1.0], 0.5).unwrap();
        assert!(d.triggered);
        assert!((d.v[0] + 1.0).abs() < 1e-12);
        assert!((d.predicted_after - 0.5).abs() < 1e-12);

        let d = steer_sigmoid(&[1.0], &[0.0], 0.5).unwrap();
        assert!(!d.triggered && d.v == vec![0.0]);
        assert!(!steer_sigmoid(&[1.0], &[-3.0], 0.2).unwrap().triggered);

        for alpha in [0.0, 1.0] {
            assert_eq!(steer_sigmoid(&[1.0], &[1.0], alpha).unwrap_err().code(), "infeasible");
        }
    }

    #[test]
    fn sigmoid_matches_bisection_root() {
        let (w, h, alpha) = ([0.7, -0.4], [2.0, -1.0], 0.3);
        let d = steer_sigmoid(&w, &h, alpha).unwrap();
        // bisection on t with v = t·w
        let g = |t: f64| sigmoid(dot(&w, &[h[0] + t * w[0], h[1] + t * w[1]])) - alpha;
        let (mut lo, mut hi) = (-50.0, 0.0);
        for _ in 0..200 {
            let mid = (lo + hi) / 2.0;
            if g(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((d.lambda - lo).abs() < 1e-9);
        assert!((d.predicted_after - alpha).abs() < 1e-9);
    }

    #[test]
    fn taylor_examples() {
        let quad = FnEstimator {
            value: |h: &[f64]| h[0] * h[0],
            gradient: |h: &[f64]| vec![2.0 * h[0]],
        };
        let d = steer_taylor(&quad, &[2.0], 1.0).unwrap();
        assert!(d.triggered);
        assert!((d.v[0] + 0.75).abs() < 1e-15);
        assert!((d.predicted_after - 1.0).abs() < 1e-15);
        assert!(!steer_taylor(&quad, &[0.5], 1.0).unwrap().triggered);

        let w = vec![0.3, -1.2, 0.5];
        let h = [1.0, -2.0, 0.4];
        let a = steer_taylor(&LinearEstimator(w.clone()), &h, 0.4).unwrap();
        let b = steer_linear(&w, &h, 0.4).unwrap();
        assert!(close(&a.v, &b.v, 1e-12));
    }

    #[test]
    fn penalty_cases() {
        let w = vec![1.0, -0.5];
        let h = [1.0, -1.0];
        let est = LinearEstimator(w.clone());
        let closed = steer_linear(&w, &h, 0.2).unwrap().v;
        let v = steer_penalty(&est, &h, 0.2, 1e6, 1.0, 100_000).unwrap();
        assert!(close(&v, &closed, 1e-3));

        let v = steer_penalty(&est, &[0.0, 0.0], 0.2, 1e6, 1.0, 1000).unwrap();
        assert!(dot(&v, &v).sqrt() < 1e-6);

        let v = steer_penalty(&est, &h, 0.2, 1e-9, 1.0, 1000).unwrap();
        assert!(dot(&v, &v).sqrt() < 1e-6);

        assert_eq!(steer_penalty(&est, &h, 0.2, 0.0, 1.0, 10).unwrap_err().code(), "validation");
    }

    #[test]
    fn penalty_gap_matches_analytic_value() {
        // for linear p the penalty optimum undershoots by c / (‖w‖(1 + ζ‖w‖²))
        let w = vec![0.6, 0.8];
        let h = [2.0, 1.0];
        let alpha = 0.5;
        let c = dot(&w, &h) - alpha;
        let closed = steer_linear(&w, &h, alpha).unwrap().v;
        for zeta in [1e2, 1e4, 1e6] {
            let v = steer_penalty(&LinearEstimator(w.clone()), &h, alpha, zeta, 1.0, 100_000).unwrap();
            let gap: f64 = v.iter().zip(&closed).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let expected = c / (1.0 + zeta);
            assert!((gap - expected).abs() < 1e-7 * (1.0 + expected), "zeta {zeta}: {gap} vs {expected}");
        }
    }

    #[test]
    fn fixed_lambda() {
        assert_eq!(fixed_lambda_vector(&[2.0, 3.0], 0.0), vec![0.0, 0.0]);
        assert_eq!(fixed_lambda_vector(&[2.0, 3.0], 1.0), vec![2.0, 3.0]);
        assert_eq!(fixed_lambda_vector(&[2.0, 3.0], -1.0), vec![-2.0, -3.0]);
    }

    fn traces_from_rows(rows: &[[f32; 2]], errors: &[f32]) -> TraceSet {
        let n = rows.len();
        TraceSet {
            n_layers: 1,
            hidden_dim: 2,
            activations: rows.iter().flatten().copied().collect(),
            errors: errors.to_vec(),
            true_labels: vec![0; n],
            predicted_labels: vec![0; n],
            label_probs: vec![0.5; n],
            position_strategy: PositionStrategy::Last,
            label_set: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn contrastive_examples() {
        let t = traces_from_rows(&[[1.0, 0.0], [0.0, 0.0], [3.0, 0.0], [2.0, 0.0]], &[0.9, 0.1, 0.8, 0.2]);
        assert_eq!(contrastive_vector(&t, 0, 2).unwrap(), vec![1.0, 0.0]);
        assert_eq!(contrastive_vector(&t, 0, 3).unwrap_err().code(), "validation");

        let swapped = traces_from_rows(&[[1.0, 0.0], [0.0, 0.0], [3.0, 0.0], [2.0, 0.0]], &[0.1, 0.9, 0.2, 0.8]);
        assert_eq!(contrastive_vector(&swapped, 0, 2).unwrap(), vec![-1.0, 0.0]);

        let same = traces_from_rows(&[[1.0, 2.0], [1.0, 2.0]], &[0.9, 0.1]);
        assert_eq!(contrastive_vector(&same, 0, 1).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn contrastive_ties_break_by_index() {
        // all errors equal: highest picks indices 0,1 and lowest picks 0,1 too
        let t = traces_from_rows(&[[1.0, 0.0], [2.0, 0.0], [5.0, 0.0], [7.0, 0.0]], &[0.5; 4]);
        assert_eq!(contrastive_vector(&t, 0, 2).unwrap(), vec![0.0, 0.0]);
        let t = traces_from_rows(&[[1.0, 0.0], [2.0, 0.0], [5.0, 0.0], [7.0, 0.0]], &[0.5, 0.5, 0.5, 0.0]);
        // highest: 0,1 ; lowest: 3,0
        assert_eq!(contrastive_vector(&t, 0, 2).unwrap(), vec![(1.5 - 4.0), 0.0]);
    }

    fn policy(variant: Variant, alpha: Option<f64>, weights: Vec<f64>) -> SteeringPolicy {
        SteeringPolicy {
            version: POLICY_VERSION,
            alpha,
            variant,
            scope: Scope::default(),
            layers: vec![LayerEntry {
                layer: 1,
                kind: ProbeKind::Regression,
                weights,
            }],
            abstained: false,
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let mut p = policy(Variant::MeraRegression, Some(0.35), vec![0.25, -1.0]);
        p.scope = Scope {
            token_scope: TokenScope::GenerationOnly,
            layer_scope: LayerScope::Single(1),
        };
        let text = p.to_json().unwrap();
        assert!(text.contains("\"single\": 1") && text.contains("generation_only"));
        assert!(!text.contains("abstained"));
        assert_eq!(SteeringPolicy::from_json(&text).unwrap(), p);

        let unset = policy(Variant::MeraRegression, None, vec![1.0]);
        assert!(unset.to_json().unwrap().contains("\"alpha\": null"));
    }

    #[test]
    fn policy_validation() {
        assert!(policy(Variant::MeraRegression, Some(1.5), vec![1.0]).validate().is_err());
        assert!(policy(Variant::MeraContrastive, Some(1.5), vec![1.0]).validate().is_ok());
        assert!(policy(Variant::MeraRegression, Some(0.5), vec![f64::NAN]).validate().is_err());
        let mut empty = policy(Variant::MeraRegression, None, vec![1.0]);
        empty.layers.clear();
        assert!(empty.validate().is_err());
        let p = policy(Variant::MeraRegression, Some(0.5), vec![1.0, 0.0]);
        assert!(p.validate_for_model(2, 2).is_ok());
        assert!(p.validate_for_model(1, 2).is_err());
        assert_eq!(p.validate_for_model(2, 3).unwrap_err().code(), "shape_mismatch");
    }

    #[test]
    fn policy_decisions_respect_scope_and_state() {
        let h = [2.0, 0.0];
        let p = policy(Variant::MeraRegression, Some(0.5), vec![1.0, 0.0]);
        assert!(p.decide(1, &h, false).unwrap().unwrap().triggered);
        assert!(p.decide(0, &h, false).unwrap().is_none());

        let mut gen_only = p.clone();
        gen_only.scope.token_scope = TokenScope::GenerationOnly;
        assert!(gen_only.decide(1, &h, false).unwrap().is_none());
        assert!(gen_only.decide(1, &h, true).unwrap().is_some());

        let mut abstained = p.clone();
        abstained.abstained = true;
        assert!(abstained.decide(1, &h, false).unwrap().is_none());
        assert!(policy(Variant::MeraRegression, None, vec![1.0, 0.0]).decide(1, &h, false).unwrap().is_none());

        let base = policy(Variant::BaseFixedLambda1, None, vec![-1.0, 0.5]);
        assert_eq!(base.decide(1, &h, false).unwrap().unwrap().v, vec![-1.0, 0.5]);
    }

    #[test]
    fn baseline_points_away_from_error() {
        let probe = Probe {
            layer: 0,
            kind: ProbeKind::Regression,
            weights: vec![0.5, -2.0],
            eta: 0.0,
            val_metric: None,
            converged: true,
            grid: vec![],
        };
        let p = SteeringPolicy::baseline(&[probe], Scope::default()).unwrap();
        assert_eq!(p.layers[0].weights, vec![-0.5, 2.0]);
        assert_eq!(p.variant, Variant::BaseFixedLambda1);
    }

    #[test]
    fn test_vectors_are_reproducible_and_consistent() {
        let a = generate_test_vectors(100, 8, 42).unwrap();
        assert_eq!(a, generate_test_vectors(100, 8, 42).unwrap());
        assert_eq!(a.cases.len(), 100);
        for case in &a.cases {
            let d = match case.kind {
                ProbeKind::Logistic => steer_sigmoid(&case.w, &case.h, case.alpha).unwrap(),
                _ => steer_linear(&case.w, &case.h, case.alpha).unwrap(),
            };
            assert_eq!(d.v, case.v);
        }
        assert!(a.cases.iter().any(|c| c.triggered) && a.cases.iter().any(|c| !c.triggered));
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, d)
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (1usize..12).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d), -2.0f64..2.0))
    }

    proptest! {
        #[test]
        fn triggered_decisions_land_on_the_boundary((w, h, alpha) in triple()) {
            prop_assume!(dot(&w, &w) > 1e-6);
            let d = steer_linear(&w, &h, alpha).unwrap();
            if d.triggered {
                prop_assert!((d.predicted_after - alpha).abs() < 1e-9);
                prop_assert!(d.lambda < 0.0);
            } else {
                prop_assert!(d.v.iter().all(|x| *x == 0.0) && d.lambda == 0.0);
                prop_assert!(dot(&w, &h) <= alpha);
            }
        }

        #[test]
        fn closed_form_is_minimal((w, h, alpha) in triple(), dirs in proptest::collection::vec(vec_strategy(12), 20)) {
            prop_assume!(dot(&w, &w) > 1e-6);
            let d = steer_linear(&w, &h, alpha).unwrap();
            let norm = dot(&d.v, &d.v).sqrt();
            let nn = dot(&w, &w);
            for dir in &dirs {
                // push a random perturbation into the feasible half-space
                let mut u: Vec<f64> = dir[..w.len()].to_vec();
                let excess = dot(&w, &h) + dot(&w, &u) - alpha;
                if excess > 0.0 {
                    u.iter_mut().zip(&w).for_each(|(ui, wi)| *ui -= excess / nn * wi);
                }
                prop_assert!(dot(&u, &u).sqrt() >= norm - 1e-9);
            }
        }

        #[test]
        fn scale_covariance((w, h, alpha) in triple(), c in 0.1f64..10.0) {
            prop_assume!(dot(&w, &w) > 1e-6);
            let base = steer_linear(&w, &h, alpha).unwrap();
            let scaled_w: Vec<f64> = w.iter().map(|x| c * x).collect();
            let scaled = steer_linear(&scaled_w, &h, c * alpha).unwrap();
            prop_assert_eq!(base.triggered, scaled.triggered);
            prop_assert!(close(&base.v, &scaled.v, 1e-9));
        }

        #[test]
        fn sigmoid_lands_on_alpha((w, h, _a) in triple(), alpha in 0.01f64..0.99) {
            prop_assume!(dot(&w, &w) > 1e-6);
            let d = steer_sigmoid(&w, &h, alpha).unwrap();
            if d.triggered {
                prop_assert!((d.predicted_after - alpha).abs() < 1e-9);
            } else {
                prop_assert!(sigmoid(dot(&w, &h)) <= alpha);
            }
        }
    }
}

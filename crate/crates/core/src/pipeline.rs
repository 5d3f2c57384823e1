//! The three-stage run on the toy model (cache traces, fit probes,
//! calibrate a threshold) plus the evaluation matrix against baselines.
//!
//! Every stage can run in memory or against an output directory:
//!
//! ```text
//! <out>/config.json
//! <out>/traces/<mode>/{train,cal,test}/      trace bundles
//! <out>/probes/<mode>/{policy,metrics}.json
//! <out>/calibration/<mode>/{result.json,candidates.csv,policy.json}
//! <out>/report.json
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{self, default_alpha_grid, CalibrationResult, Metric, Procedure, DEFAULT_DELTA, DEFAULT_EPSILON};
use crate::error::{MeraError, Result};
use crate::eval_report::{build_report, candidates_csv, render_report, CalibrationEntry, EvalReport, EvalRun};
use crate::linmodel::{probe_sparsity, train_layer_probes, GridPoint, Probe, ProbeKind, DEFAULT_ETA_GRID};
use crate::steering::{contrastive_probes, LayerScope, Scope, SteeringPolicy, Variant};
use crate::toy_lm::{build_model, run_instances, shuffle_labels, synth_task, HookSpec, InstanceOutcome, TaskConfig, TaskInstance, ToyLM, ToyLMConfig};
use crate::trace_store::{read_bundle, read_manifest, split_dataset, write_bundle_with_hash, PositionStrategy, SplitTag, TraceSet};

/// Everything that determines the cached traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub model: ToyLMConfig,
    /// `n_instances` is ignored; the split sizes below decide it.
    pub task: TaskConfig,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    /// Tokens generated per prompt in exact mode.
    pub generation_len: usize,
    /// Permute labels across all instances (the null control).
    pub shuffle_labels: bool,
    pub task_seed: u64,
    pub split_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            model: ToyLMConfig::default(),
            task: TaskConfig::default(),
            n_train: 2000,
            n_cal: 250,
            n_test: 250,
            generation_len: 8,
            shuffle_labels: false,
            task_seed: 1,
            split_seed: 2,
            shuffle_seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Kind behind the policy written by the probe stage.
    pub kind: ProbeKind,
    pub eta_grid: Vec<f64>,
    /// `k` for the contrastive kind.
    pub contrastive_k: usize,
    pub split_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::Regression,
            eta_grid: DEFAULT_ETA_GRID.to_vec(),
            contrastive_k: 100,
            split_seed: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub alpha_grid: Vec<f64>,
    pub delta: f64,
    pub epsilon: f64,
    pub metric: Metric,
    pub procedure: Procedure,
    /// Only used by the split procedure.
    pub split_seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            alpha_grid: default_alpha_grid(),
            delta: DEFAULT_DELTA,
            epsilon: DEFAULT_EPSILON,
            metric: Metric::Accuracy,
            procedure: Procedure::Bonferroni,
            split_seed: 5,
        }
    }
}

/// A row of the evaluation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    NoSteering,
    /// Contrastive mean over the top/bottom `k` training errors, added with
    /// strength 1 at the best layer.
    BaseMu(usize),
    BaseProbe,
    BaseProbeLogistic,
    Mera,
    MeraMu(usize),
    MeraLogistic,
}

impl Method {
    pub fn all() -> Vec<Method> {
        vec![
            Method::NoSteering,
            Method::BaseMu(50),
            Method::BaseMu(100),
            Method::BaseMu(200),
            Method::BaseProbe,
            Method::BaseProbeLogistic,
            Method::Mera,
            Method::MeraMu(100),
            Method::MeraLogistic,
        ]
    }

    fn is_calibrated(self) -> bool {
        matches!(self, Method::Mera | Method::MeraMu(_) | Method::MeraLogistic)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::NoSteering => f.write_str("no_steering"),
            Method::BaseMu(k) => write!(f, "base_mu_{k}"),
            Method::BaseProbe => f.write_str("base_p"),
            Method::BaseProbeLogistic => f.write_str("base_p_log"),
            Method::Mera => f.write_str("mera"),
            Method::MeraMu(k) => write!(f, "mera_mu_{k}"),
            Method::MeraLogistic => f.write_str("mera_p_log"),
        }
    }
}

impl FromStr for Method {
    type Err = MeraError;

    fn from_str(s: &str) -> Result<Self> {
        let k = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| MeraError::validation(format!("bad contrastive k in method {s:?}")))
        };
        match s {
            "no_steering" => Ok(Method::NoSteering),
            "base_p" => Ok(Method::BaseProbe),
            "base_p_log" => Ok(Method::BaseProbeLogistic),
            "mera" => Ok(Method::Mera),
            "mera_p_log" => Ok(Method::MeraLogistic),
            _ => {
                if let Some(rest) = s.strip_prefix("base_mu_") {
                    Ok(Method::BaseMu(k(rest)?))
                } else if let Some(rest) = s.strip_prefix("mera_mu_") {
                    Ok(Method::MeraMu(k(rest)?))
                } else {
                    Err(MeraError::validation(format!("unknown method {s:?}")))
                }
            }
        }
    }
}

impl TryFrom<String> for Method {
    type Error = MeraError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub modes: Vec<PositionStrategy>,
    pub probes: ProbeConfig,
    pub calibration: CalibrationConfig,
    /// Scope of the calibrated policies. Baselines always use the best
    /// layer with this token scope.
    pub scope: Scope,
    pub methods: Vec<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            modes: vec![PositionStrategy::Last, PositionStrategy::Exact],
            probes: ProbeConfig::default(),
            calibration: CalibrationConfig::default(),
            scope: Scope::default(),
            methods: Method::all(),
            out_dir: None,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| MeraError::validation(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(MeraError::validation(format!("config file {} does not exist", path.display())));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Derives every seed from `root`.
    pub fn with_seed(mut self, root: u64) -> Self {
        let s = |k: u64| root.wrapping_mul(10).wrapping_add(k);
        self.data.model.seed = s(0);
        self.data.task_seed = s(1);
        self.data.split_seed = s(2);
        self.data.shuffle_seed = s(3);
        self.probes.split_seed = s(4);
        self.calibration.split_seed = s(5);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        d.model.validate()?;
        d.task.validate()?;
        if d.n_train == 0 || d.n_cal == 0 || d.n_test == 0 {
            return Err(MeraError::validation("n_train, n_cal and n_test must all be positive"));
        }
        if self.modes.is_empty() {
            return Err(MeraError::validation("no position modes selected"));
        }
        if self.modes.contains(&PositionStrategy::Exact) && d.generation_len == 0 {
            return Err(MeraError::validation("exact mode needs generation_len >= 1"));
        }
        let c = &self.calibration;
        if !(c.delta > 0.0 && c.delta < 1.0) {
            return Err(MeraError::validation(format!("delta must lie in (0, 1), got {}", c.delta)));
        }
        if !(c.epsilon >= 0.0 && c.epsilon.is_finite()) {
            return Err(MeraError::validation(format!("epsilon must be finite and >= 0, got {}", c.epsilon)));
        }
        if c.alpha_grid.is_empty() || c.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(MeraError::validation("alpha grid must be non-empty with values in [0, 1]"));
        }
        if let LayerScope::Single(l) = self.scope.layer_scope {
            if l >= d.model.n_layers {
                return Err(MeraError::validation(format!("layer scope {l} out of range")));
            }
        }
        for m in &self.methods {
            if let Method::BaseMu(k) | Method::MeraMu(k) = m {
                if *k == 0 || 2 * k > d.n_train {
                    return Err(MeraError::validation(format!("method {m} needs 1 <= 2k <= n_train")));
                }
            }
        }
        if self.probes.kind == ProbeKind::Contrastive && (self.probes.contrastive_k == 0 || 2 * self.probes.contrastive_k > d.n_train) {
            return Err(MeraError::validation("contrastive_k needs 1 <= 2k <= n_train"));
        }
        Ok(())
    }

    /// SHA-256 of the full config.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    /// SHA-256 of the data section; recorded in every bundle manifest so
    /// later stages can reject traces cached under a different config.
    pub fn data_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.data)?.as_bytes()))
    }
}

/// Model and task instances for one config.
pub struct Workspace {
    pub config: RunConfig,
    pub model: ToyLM,
    pub train: Vec<TaskInstance>,
    pub cal: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

pub fn prepare(config: &RunConfig) -> Result<Workspace> {
    config.validate()?;
    let d = &config.data;
    let model = build_model(&d.model)?;
    let n = d.n_train + d.n_cal + d.n_test;
    let task = TaskConfig { n_instances: n, ..d.task };
    let mut instances = synth_task(&model, &task, d.task_seed)?.instances;
    if d.shuffle_labels {
        shuffle_labels(&mut instances, d.shuffle_seed);
    }
    let fractions = [d.n_train as f64 / n as f64, 0.0, d.n_cal as f64 / n as f64, d.n_test as f64 / n as f64];
    let split = split_dataset(n, d.split_seed, fractions)?;
    let pick = |tag| split.indices(tag).into_iter().map(|i| instances[i].clone()).collect::<Vec<_>>();
    let (train, cal, test) = (pick(SplitTag::Train), pick(SplitTag::Cal), pick(SplitTag::Test));
    if (train.len(), cal.len(), test.len()) != (d.n_train, d.n_cal, d.n_test) {
        return Err(MeraError::validation("split sizes do not match the requested counts"));
    }
    Ok(Workspace {
        config: config.clone(),
        model,
        train,
        cal,
        test,
    })
}

fn outcomes_to_traces(ws: &Workspace, instances: &[TaskInstance], outcomes: &[InstanceOutcome], mode: PositionStrategy) -> Result<TraceSet> {
    let mut traces = TraceSet::empty(ws.model.n_layers(), ws.model.dim(), mode, ws.model.config.labels.clone());
    for (inst, out) in instances.iter().zip(outcomes) {
        traces.activations.extend(out.activations.iter().map(|&x| x as f32));
        traces.errors.push(out.error as f32);
        traces.true_labels.push(inst.true_label as i32);
        traces.predicted_labels.push(out.parse.predicted);
        traces.label_probs.push(out.parse.prob as f32);
    }
    traces.validate()?;
    Ok(traces)
}

/// Unsteered traces of one mode for the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTraces {
    pub train: TraceSet,
    pub cal: TraceSet,
    pub test: TraceSet,
}

impl SplitTraces {
    fn parts(&self) -> [(&'static str, &TraceSet); 3] {
        [("train", &self.train), ("cal", &self.cal), ("test", &self.test)]
    }
}

impl Workspace {
    fn run(&self, instances: &[TaskInstance], mode: PositionStrategy, hook: Option<&HookSpec>) -> Result<Vec<InstanceOutcome>> {
        run_instances(&self.model, instances, mode, self.config.data.generation_len, hook)
    }

    pub fn cache(&self, mode: PositionStrategy) -> Result<SplitTraces> {
        let traces = |instances: &[TaskInstance]| {
            let outcomes = self.run(instances, mode, None)?;
            outcomes_to_traces(self, instances, &outcomes, mode)
        };
        Ok(SplitTraces {
            train: traces(&self.train)?,
            cal: traces(&self.cal)?,
            test: traces(&self.test)?,
        })
    }
}

fn traces_dir(out: &Path, mode: PositionStrategy) -> PathBuf {
    out.join("traces").join(mode.as_str())
}

pub fn probes_dir(out: &Path, mode: PositionStrategy) -> PathBuf {
    out.join("probes").join(mode.as_str())
}

pub fn calibration_dir(out: &Path, mode: PositionStrategy) -> PathBuf {
    out.join("calibration").join(mode.as_str())
}

pub fn write_traces(out: &Path, traces: &SplitTraces, data_hash: &str) -> Result<()> {
    let dir = traces_dir(out, traces.train.position_strategy);
    for (name, set) in traces.parts() {
        write_bundle_with_hash(set, &dir.join(name), Some(data_hash))?;
    }
    Ok(())
}

/// Reads the cached traces of `mode`, rejecting bundles cached under a
/// different data config.
pub fn read_traces(out: &Path, mode: PositionStrategy, data_hash: &str) -> Result<SplitTraces> {
    let dir = traces_dir(out, mode);
    let read = |name: &str| -> Result<TraceSet> {
        let path = dir.join(name);
        let manifest = read_manifest(&path)?;
        if manifest.config_hash.as_deref() != Some(data_hash) {
            return Err(MeraError::validation(format!(
                "{} was cached under a different data config; rerun cache",
                path.display()
            )));
        }
        if manifest.strategy != mode {
            return Err(MeraError::validation(format!(
                "{} holds {} traces, expected {}",
                path.display(),
                manifest.strategy.as_str(),
                mode.as_str()
            )));
        }
        read_bundle(&path)
    };
    Ok(SplitTraces {
        train: read("train")?,
        cal: read("cal")?,
        test: read("test")?,
    })
}

/// One layer's line in the probe metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub eta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_aucroc: Option<f64>,
    pub sparsity: f64,
    pub converged: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<GridPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub mode: PositionStrategy,
    pub kind: ProbeKind,
    pub layers: Vec<LayerMetrics>,
    /// Layer with the lowest regression validation RMSE.
    pub best_layer: usize,
}

fn layer_metrics(probes: &[Probe]) -> Vec<LayerMetrics> {
    probes
        .iter()
        .map(|p| LayerMetrics {
            layer: p.layer,
            eta: p.eta,
            val_rmse: if p.kind == ProbeKind::Regression { p.val_metric } else { None },
            val_aucroc: if p.kind == ProbeKind::Logistic { p.val_metric } else { None },
            sparsity: probe_sparsity(p),
            converged: p.converged,
            grid: p.grid.clone(),
        })
        .collect()
}

/// Lowest validation RMSE; ties go to the earlier layer.
pub fn best_layer(regression: &[Probe]) -> usize {
    let mut best = (0, f64::INFINITY);
    for p in regression {
        let rmse = p.val_metric.unwrap_or(f64::INFINITY);
        if rmse < best.1 {
            best = (p.layer, rmse);
        }
    }
    best.0
}

pub fn fit_probes(train: &TraceSet, kind: ProbeKind, config: &RunConfig) -> Result<Vec<Probe>> {
    match kind {
        ProbeKind::Contrastive => contrastive_probes(train, config.probes.contrastive_k),
        _ => train_layer_probes(train, kind, &config.probes.eta_grid, config.probes.split_seed),
    }
}

fn variant_for(kind: ProbeKind) -> Variant {
    match kind {
        ProbeKind::Regression => Variant::MeraRegression,
        ProbeKind::Logistic => Variant::MeraLogistic,
        ProbeKind::Contrastive => Variant::MeraContrastive,
    }
}

pub fn kind_for(variant: Variant) -> Result<ProbeKind> {
    match variant {
        Variant::MeraRegression => Ok(ProbeKind::Regression),
        Variant::MeraLogistic => Ok(ProbeKind::Logistic),
        Variant::MeraContrastive => Ok(ProbeKind::Contrastive),
        Variant::BaseFixedLambda1 => Err(MeraError::validation("baselines are not trained as standalone policies")),
    }
}

/// Output of the probe stage for one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbes {
    pub policy: SteeringPolicy,
    pub metrics: ProbeMetrics,
}

pub fn train_probes(train: &TraceSet, config: &RunConfig) -> Result<TrainedProbes> {
    let kind = config.probes.kind;
    let probes = fit_probes(train, kind, config)?;
    let regression = if kind == ProbeKind::Regression {
        probes.clone()
    } else {
        fit_probes(train, ProbeKind::Regression, config)?
    };
    let policy = SteeringPolicy::from_probes(&probes, variant_for(kind), config.scope)?;
    Ok(TrainedProbes {
        policy,
        metrics: ProbeMetrics {
            mode: train.position_strategy,
            kind,
            layers: layer_metrics(&probes),
            best_layer: best_layer(&regression),
        },
    })
}

pub fn write_probes(out: &Path, trained: &TrainedProbes) -> Result<()> {
    let dir = probes_dir(out, trained.metrics.mode);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("policy.json"), trained.policy.to_json()?)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&trained.metrics)? + "\n")?;
    Ok(())
}

pub fn read_policy(path: &Path) -> Result<SteeringPolicy> {
    if !path.is_file() {
        return Err(MeraError::MissingFile(path.to_path_buf()));
    }
    SteeringPolicy::from_json(&fs::read_to_string(path)?)
}

fn performance(outcomes: &[InstanceOutcome], metric: Metric) -> Vec<f64> {
    outcomes
        .iter()
        .map(|o| match metric {
            Metric::Accuracy => f64::from(u8::from(o.correct)),
            Metric::NegativeError => 1.0 - o.error,
        })
        .collect()
}

/// A policy with its threshold chosen (or abstained) on the calibration
/// split.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub mode: PositionStrategy,
    pub result: CalibrationResult,
    pub policy: SteeringPolicy,
}

/// Chooses `alpha` for `template` on the calibration split of `mode`.
pub fn calibrate_policy(ws: &Workspace, template: &SteeringPolicy, mode: PositionStrategy) -> Result<Calibrated> {
    let c = &ws.config.calibration;
    template.validate_for_model(ws.model.n_layers(), ws.model.dim())?;
    let unsteered = performance(&ws.run(&ws.cal, mode, None)?, c.metric);
    let eval = |alpha: f64| -> Result<Vec<f64>> {
        let hook = HookSpec::new(template.with_alpha(alpha));
        Ok(performance(&ws.run(&ws.cal, mode, Some(&hook))?, c.metric))
    };
    let result = match c.procedure {
        Procedure::Bonferroni => calibration::calibrate(eval, &unsteered, &c.alpha_grid, c.delta, c.epsilon, c.metric)?,
        Procedure::Split => calibration::split_calibrate(eval, &unsteered, &c.alpha_grid, c.delta, c.epsilon, c.metric, c.split_seed)?,
    };
    let policy = match result.selected_alpha {
        Some(alpha) => template.with_alpha(alpha),
        None => SteeringPolicy {
            alpha: None,
            abstained: true,
            ..template.clone()
        },
    };
    Ok(Calibrated { mode, result, policy })
}

pub fn write_calibration(out: &Path, calibrated: &Calibrated) -> Result<()> {
    let dir = calibration_dir(out, calibrated.mode);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("result.json"), serde_json::to_string_pretty(&calibrated.result)? + "\n")?;
    fs::write(dir.join("candidates.csv"), candidates_csv(&calibrated.result))?;
    fs::write(dir.join("policy.json"), calibrated.policy.to_json()?)?;
    Ok(())
}

/// A method that could not be evaluated, e.g. a logistic probe on a train
/// split with no errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub mode: PositionStrategy,
    pub method: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeEvaluation {
    pub runs: Vec<EvalRun>,
    pub calibration: Vec<CalibrationEntry>,
    pub skipped: Vec<Skipped>,
}

/// Evaluates `config.methods` on the test split of one mode.
///
/// `mera` replaces the in-place calibration of the `mera` row, so a policy
/// finalized by an earlier stage is evaluated as-is.
pub fn evaluate_mode(ws: &Workspace, traces: &SplitTraces, mera: Option<&Calibrated>) -> Result<ModeEvaluation> {
    let mode = traces.train.position_strategy;
    let config = &ws.config;
    let before = ws.run(&ws.test, mode, None)?;
    let correct_before: Vec<bool> = before.iter().map(|o| o.correct).collect();
    let errors_before: Vec<f64> = before.iter().map(|o| o.error).collect();

    let regression = fit_probes(&traces.train, ProbeKind::Regression, config)?;
    let best = best_layer(&regression);
    let baseline_scope = Scope {
        token_scope: config.scope.token_scope,
        layer_scope: LayerScope::Single(best),
    };
    let logistic = match fit_probes(&traces.train, ProbeKind::Logistic, config) {
        Ok(p) => Ok(p),
        Err(e) if e.is_validation() => Err(e.to_string()),
        Err(e) => return Err(e),
    };

    let mut out = ModeEvaluation {
        runs: Vec::new(),
        calibration: Vec::new(),
        skipped: Vec::new(),
    };
    for &method in &config.methods {
        let name = method.to_string();
        let probes: Result<Vec<Probe>> = match method {
            Method::NoSteering => Ok(Vec::new()),
            Method::BaseProbe | Method::Mera => Ok(regression.clone()),
            Method::BaseProbeLogistic | Method::MeraLogistic => logistic.clone().map_err(MeraError::Validation),
            Method::BaseMu(k) | Method::MeraMu(k) => contrastive_probes(&traces.train, k),
        };
        let probes = match probes {
            Ok(p) => p,
            Err(e) if e.is_validation() => {
                out.skipped.push(Skipped {
                    mode,
                    method: name,
                    reason: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let policy = if method == Method::NoSteering {
            None
        } else if method.is_calibrated() {
            let kind = probes[0].kind;
            let calibrated = match (method, mera) {
                (Method::Mera, Some(given)) => given.clone(),
                _ => calibrate_policy(ws, &SteeringPolicy::from_probes(&probes, variant_for(kind), config.scope)?, mode)?,
            };
            out.calibration.push(CalibrationEntry {
                mode,
                method: name.clone(),
                abstained: calibrated.result.abstained,
                result: calibrated.result.clone(),
            });
            Some(calibrated.policy)
        } else {
            Some(SteeringPolicy::baseline(&probes, baseline_scope)?)
        };
        let after = match &policy {
            Some(p) => ws.run(&ws.test, mode, Some(&HookSpec::new(p.clone())))?,
            None => before.clone(),
        };
        out.runs.push(EvalRun::new(
            name,
            mode,
            correct_before.clone(),
            after.iter().map(|o| o.correct).collect(),
            errors_before.clone(),
            after.iter().map(|o| o.error).collect(),
        )?);
    }
    Ok(out)
}

/// The evaluation report plus methods that could not be run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<Skipped>,
}

pub fn assemble(config: &RunConfig, parts: Vec<ModeEvaluation>) -> Result<Evaluation> {
    let mut runs = Vec::new();
    let mut calibration = Vec::new();
    let mut skipped = Vec::new();
    for p in parts {
        runs.extend(p.runs);
        calibration.extend(p.calibration);
        skipped.extend(p.skipped);
    }
    Ok(Evaluation {
        report: build_report(&runs, calibration, Some(config.config_hash()?))?,
        skipped,
    })
}

pub fn write_evaluation(out: &Path, evaluation: &Evaluation) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), render_report(&evaluation.report)?)?;
    if !evaluation.skipped.is_empty() {
        fs::write(out.join("skipped.json"), serde_json::to_string_pretty(&evaluation.skipped)? + "\n")?;
    }
    Ok(())
}

/// Per-mode outcome of [`run_in_memory`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModeRun {
    pub traces: SplitTraces,
    pub probes: TrainedProbes,
    pub calibrated: Calibrated,
}

/// All stages without touching disk.
pub fn run_in_memory(config: &RunConfig) -> Result<(Vec<ModeRun>, Evaluation)> {
    let ws = prepare(config)?;
    let mut modes = Vec::new();
    let mut parts = Vec::new();
    for &mode in &config.modes {
        let traces = ws.cache(mode)?;
        let probes = train_probes(&traces.train, config)?;
        let calibrated = calibrate_policy(&ws, &probes.policy, mode)?;
        parts.push(evaluate_mode(&ws, &traces, Some(&calibrated))?);
        modes.push(ModeRun { traces, probes, calibrated });
    }
    Ok((modes, assemble(config, parts)?))
}

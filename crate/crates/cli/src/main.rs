use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mera_core::calibration::{guarantee_simulation, GuaranteeParams, Procedure};
use mera_core::linmodel::ProbeKind;
use mera_core::pipeline::{
    assemble, calibrate_policy, calibration_dir, evaluate_mode, kind_for, prepare, probes_dir, read_policy, read_traces, train_probes, write_calibration,
    write_evaluation, write_probes, write_traces, Calibrated, Evaluation, RunConfig,
};
use mera_core::steering::{generate_test_vectors, Variant};
use mera_core::trace_store::PositionStrategy;
use mera_core::{MeraError, Result};

const OUT_ENV: &str = "MERA_OUT_DIR";

#[derive(Parser)]
#[command(name = "mera", version, about = "Calibrated conditional activation steering on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the model on every split and write activation bundles.
    Cache(StageArgs),
    /// Fit per-layer error probes on the cached train split.
    TrainProbes(StageArgs),
    /// Pick the steering threshold on the calibration split, or abstain.
    Calibrate(StageArgs),
    /// Evaluate all configured methods on the test split.
    Evaluate(StageArgs),
    /// cache, train-probes, calibrate and evaluate in one go.
    Run(StageArgs),
    /// Monte-Carlo check of the calibration guarantee.
    SimulateGuarantee(SimulateArgs),
    /// Write closed-form steering cases for cross-implementation checks.
    ExportTestVectors(VectorArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Last,
    Exact,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProcedureArg {
    Bonferroni,
    Split,
}

impl From<ProcedureArg> for Procedure {
    fn from(p: ProcedureArg) -> Self {
        match p {
            ProcedureArg::Bonferroni => Procedure::Bonferroni,
            ProcedureArg::Split => Procedure::Split,
        }
    }
}

#[derive(Args)]
struct StageArgs {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides MERA_OUT_DIR and the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// mera_regression, mera_logistic or mera_contrastive.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Root seed; every seed in the config is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Policy to calibrate instead of the one written by train-probes.
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 250)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Mean per-example improvement of every candidate, in [-1, 1].
    #[arg(long, default_value_t = 0.0)]
    effect_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "bonferroni")]
    procedure: ProcedureArg,
    /// Also write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VectorArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Config and output directory after applying flags and the environment.
struct Resolved {
    config: RunConfig,
    out: PathBuf,
}

fn resolve(args: &StageArgs) -> Result<Resolved> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    if let Some(mode) = args.mode {
        config.modes = match mode {
            ModeArg::Last => vec![PositionStrategy::Last],
            ModeArg::Exact => vec![PositionStrategy::Exact],
            ModeArg::Both => vec![PositionStrategy::Last, PositionStrategy::Exact],
        };
    }
    if let Some(variant) = args.variant {
        config.probes.kind = kind_for(variant)?;
    }
    if let Some(delta) = args.delta {
        config.calibration.delta = delta;
    }
    if let Some(epsilon) = args.epsilon {
        config.calibration.epsilon = epsilon;
    }
    let out = args
        .out
        .clone()
        .or_else(|| env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| MeraError::validation(format!("no output directory: pass --out, set {OUT_ENV} or set out_dir in the config")))?;
    config.out_dir = None;
    config.validate()?;
    Ok(Resolved { config, out })
}

fn modes_str(config: &RunConfig) -> String {
    config.modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")
}

fn cmd_cache(r: &Resolved) -> Result<String> {
    let ws = prepare(&r.config)?;
    let hash = r.config.data_hash()?;
    fs::create_dir_all(&r.out)?;
    fs::write(r.out.join("config.json"), r.config.to_json()?)?;
    for &mode in &r.config.modes {
        eprintln!("caching {} traces", mode.as_str());
        write_traces(&r.out, &ws.cache(mode)?, &hash)?;
    }
    let d = &r.config.data;
    Ok(format!(
        "cached {} traces (train={} cal={} test={}) in {}",
        modes_str(&r.config),
        d.n_train,
        d.n_cal,
        d.n_test,
        r.out.display()
    ))
}

fn cmd_train_probes(r: &Resolved) -> Result<String> {
    let hash = r.config.data_hash()?;
    let mut parts = Vec::new();
    for &mode in &r.config.modes {
        let traces = read_traces(&r.out, mode, &hash)?;
        let trained = train_probes(&traces.train, &r.config)?;
        write_probes(&r.out, &trained)?;
        let m = &trained.metrics;
        for layer in &m.layers {
            eprintln!(
                "{} layer {}: eta={} rmse={} aucroc={} sparsity={:.3}",
                mode.as_str(),
                layer.layer,
                layer.eta,
                layer.val_rmse.map_or("-".into(), |v| format!("{v:.4}")),
                layer.val_aucroc.map_or("-".into(), |v| format!("{v:.4}")),
                layer.sparsity
            );
        }
        parts.push(format!("{}: best layer {}", mode.as_str(), m.best_layer));
    }
    let kind = match r.config.probes.kind {
        ProbeKind::Regression => "regression",
        ProbeKind::Logistic => "logistic",
        ProbeKind::Contrastive => "contrastive",
    };
    Ok(format!("trained {kind} probes; {}", parts.join("; ")))
}

fn describe(c: &Calibrated) -> String {
    match c.result.selected() {
        Some(s) => format!("{}: alpha={} delta_hat={:.4} bound={:.4}", c.mode.as_str(), s.alpha, s.delta_hat, s.bound),
        None => format!("{}: abstained", c.mode.as_str()),
    }
}

fn cmd_calibrate(r: &Resolved, policy: Option<&Path>) -> Result<String> {
    let ws = prepare(&r.config)?;
    let mut parts = Vec::new();
    for &mode in &r.config.modes {
        let path = policy.map_or_else(|| probes_dir(&r.out, mode).join("policy.json"), Path::to_path_buf);
        let template = read_policy(&path)?;
        let calibrated = calibrate_policy(&ws, &template, mode)?;
        write_calibration(&r.out, &calibrated)?;
        parts.push(describe(&calibrated));
    }
    Ok(format!("calibrated {}", parts.join("; ")))
}

fn read_calibrated(out: &Path, mode: PositionStrategy) -> Result<Option<Calibrated>> {
    let dir = calibration_dir(out, mode);
    let result_path = dir.join("result.json");
    if !result_path.is_file() {
        return Ok(None);
    }
    let result = serde_json::from_str(&fs::read_to_string(&result_path)?).map_err(|source| MeraError::MalformedJson { path: result_path, source })?;
    let policy = read_policy(&dir.join("policy.json"))?;
    Ok(Some(Calibrated { mode, result, policy }))
}

fn summarize(evaluation: &Evaluation) -> String {
    let mera: Vec<String> = evaluation
        .report
        .rows
        .iter()
        .filter(|row| row.method == "mera")
        .map(|row| format!("{} {:+.3} acc, spi {:+.3}", row.mode.as_str(), row.delta_accuracy, row.spi))
        .collect();
    let mut line = format!("evaluated {} rows", evaluation.report.rows.len());
    if !mera.is_empty() {
        line.push_str(&format!("; mera {}", mera.join(", ")));
    }
    if !evaluation.skipped.is_empty() {
        line.push_str(&format!("; {} skipped", evaluation.skipped.len()));
    }
    line
}

fn cmd_evaluate(r: &Resolved) -> Result<String> {
    let ws = prepare(&r.config)?;
    let hash = r.config.data_hash()?;
    let mut parts = Vec::new();
    for &mode in &r.config.modes {
        let traces = read_traces(&r.out, mode, &hash)?;
        let mera = read_calibrated(&r.out, mode)?;
        if mera.is_none() {
            eprintln!("no calibration for {} mode; calibrating in place", mode.as_str());
        }
        parts.push(evaluate_mode(&ws, &traces, mera.as_ref())?);
    }
    let evaluation = assemble(&r.config, parts)?;
    for s in &evaluation.skipped {
        eprintln!("skipped {} ({}): {}", s.method, s.mode.as_str(), s.reason);
    }
    write_evaluation(&r.out, &evaluation)?;
    Ok(format!("{} -> {}", summarize(&evaluation), r.out.join("report.json").display()))
}

fn cmd_run(r: &Resolved, policy: Option<&Path>) -> Result<String> {
    for line in [cmd_cache(r)?, cmd_train_probes(r)?, cmd_calibrate(r, policy)?] {
        eprintln!("{line}");
    }
    cmd_evaluate(r)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<String> {
    let params = GuaranteeParams {
        trials: args.trials,
        n: args.n,
        k: args.k,
        delta: args.delta,
        epsilon: args.epsilon,
        effect_size: args.effect_size,
        seed: args.seed,
        procedure: args.procedure.into(),
    };
    let report = guarantee_simulation(&params)?;
    if let Some(out) = &args.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(format!(
        "violations {}/{} rate={:.4} ci95=[{:.4}, {:.4}] upper={:.4} selection_rate={:.4}",
        report.violations, params.trials, report.violation_rate, report.violation_ci[0], report.violation_ci[1], report.acceptance_upper, report.selection_rate
    ))
}

fn cmd_export_vectors(args: &VectorArgs) -> Result<String> {
    let vectors = generate_test_vectors(args.count, args.dim, args.seed)?;
    fs::write(&args.out, serde_json::to_string_pretty(&vectors)? + "\n")?;
    Ok(format!("wrote {} steering cases to {}", vectors.cases.len(), args.out.display()))
}

fn dispatch(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Cache(a) => cmd_cache(&resolve(a)?),
        Command::TrainProbes(a) => cmd_train_probes(&resolve(a)?),
        Command::Calibrate(a) => cmd_calibrate(&resolve(a)?, a.policy.as_deref()),
        Command::Evaluate(a) => cmd_evaluate(&resolve(a)?),
        Command::Run(a) => cmd_run(&resolve(a)?, a.policy.as_deref()),
        Command::SimulateGuarantee(a) => cmd_simulate(a),
        Command::ExportTestVectors(a) => cmd_export_vectors(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

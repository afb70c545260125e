//! Command-line surface. Every subcommand writes its results to files; exit
//! status is 0 on success, 2 for invalid input and 3 for numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{analyze, AnalysisPlan, ReportDocument};
use crate::clifford::{clifford_group, compile_all, leaked_action_histogram, total_variation, GateSet};
use crate::dataset::{ingest, RBDataset, DATASET_SCHEMA};
use crate::error::{Error, Result};
use crate::experiment::{cell_noise, heatmap_sweep, sequence_lengths, spam_perturbation_audit, SweepSpec};
use crate::fit::{fit_model, ModelKind, Regime};
use crate::io::{to_json_rounded, write_atomic, Provenance};
use crate::noise::NoiseModel;
use crate::simulate::{estimate_decays, find_curve, run_protocol, DecayCurve, Estimator, Protocol, RBProtocolConfig};

pub const FIT_SCHEMA: &str = "leakrb/fit/v1";
pub const SWEEP_RESULT_SCHEMA: &str = "leakrb/sweep-result/v1";
pub const AUDIT_SCHEMA: &str = "leakrb/spam-audit/v1";
pub const GATESET_AUDIT_SCHEMA: &str = "leakrb/gateset-audit/v1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Compile depth used by `gateset-audit` and gateset-induced simulation.
pub const COMPILE_DEPTH: usize = 12;

#[derive(Debug, Parser)]
#[command(name = "leakrb", version, about = "Leakage-aware randomized benchmarking toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an RB experiment and write a dataset.
    Simulate(SimulateArgs),
    /// Fit one decay model to a curve, or to a curve built from a dataset.
    Fit(FitArgs),
    /// Run a relative-difference heat-map sweep.
    Sweep(SweepArgs),
    /// Reanalyze a dataset according to a plan.
    Analyze(AnalyzeArgs),
    /// Exact SPAM perturbation audit of the Comp. SPAM decay.
    Audit(AuditArgs),
    /// Leaked-action histograms of a gateset's compiled Cliffords.
    GatesetAudit(GatesetAuditArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub protocol: Protocol,
    /// Regime used by --auto-lengths; no-seepage also switches seepage off.
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long = "lambda", default_value_t = 0.0)]
    pub lambda_s: f64,
    #[arg(long = "tau", default_value_t = 0.0)]
    pub tau_s: f64,
    #[arg(long, value_delimiter = ',', conflicts_with = "auto_lengths")]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub auto_lengths: bool,
    #[arg(long, default_value_t = crate::simulate::DEFAULT_SEQUENCES)]
    pub sequences: usize,
    #[arg(long, default_value_t = crate::simulate::DEFAULT_SHOTS)]
    pub shots: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise model JSON replacing the one built from --lambda/--tau.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// Record leakage-gadget bits whatever the protocol.
    #[arg(long)]
    pub gadget: bool,
    #[arg(long, default_value = "dataset.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// A decay-curve JSON or a dataset JSON.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub model: ModelKind,
    /// Curve to build when the input is a dataset.
    #[arg(long)]
    pub estimator: Option<Estimator>,
    #[arg(long, default_value = "fit.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value = "sweep.csv")]
    pub out_csv: PathBuf,
    #[arg(long, default_value = "sweep.json")]
    pub out_json: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long = "lambda", default_value_t = 0.0)]
    pub lambda_s: f64,
    #[arg(long = "tau", default_value_t = 0.0)]
    pub tau_s: f64,
    #[arg(long, default_value_t = 0.0)]
    pub delta_rho: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub delta_pi: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 9, 17, 24, 32, 40])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value = "audit.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GatesetAuditArgs {
    /// Built-in gateset name, or a path to a gateset JSON.
    #[arg(long)]
    pub gateset: String,
    #[arg(long, default_value_t = COMPILE_DEPTH)]
    pub max_depth: usize,
    #[arg(long, default_value = "gateset-audit.json")]
    pub out: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text)
        .map_err(|e| Error::Schema { path: format!("line {} column {}", e.line(), e.column()), message: e.to_string() })
}

fn with_provenance<T: Serialize>(schema: &str, provenance: &Provenance, body: &T) -> Result<Value> {
    let mut v = json!({ "schema": schema, "provenance": provenance });
    match serde_json::to_value(body)? {
        Value::Object(m) => v.as_object_mut().expect("object").extend(m),
        other => {
            v["result"] = other;
        }
    }
    Ok(v)
}

fn simulate(a: &SimulateArgs, command: &str) -> Result<()> {
    let regime = a.regime;
    let lengths = match (&a.lengths, a.auto_lengths) {
        (Some(ls), _) => ls.clone(),
        (None, true) => {
            let r = regime.ok_or_else(|| Error::InvalidArgument("--auto-lengths needs --regime".into()))?;
            sequence_lengths(r, a.protocol, a.lambda_s, a.tau_s)?
        }
        (None, false) => return Err(Error::InvalidArgument("give --lengths or --auto-lengths".into())),
    };
    let mut noise = match &a.noise {
        Some(p) => parse_json::<NoiseModel>(&read(p)?)?,
        None => cell_noise(regime.unwrap_or(Regime::Short), a.protocol, a.lambda_s, a.tau_s),
    };
    if a.gadget && noise.gadget.is_none() {
        noise.gadget = Some(Default::default());
    }
    let mut cfg = RBProtocolConfig::new(a.protocol, lengths, noise, a.seed);
    cfg.n_sequences = a.sequences;
    cfg.n_shots = a.shots;
    let mut ds = run_protocol(&cfg)?;
    ds.provenance = Some(Provenance::new(&cfg, Some(a.seed), Some(command.into()))?);
    write_atomic(&a.out, &to_json_rounded(&ds)?)
}

fn fit(a: &FitArgs, command: &str) -> Result<()> {
    let text = read(&a.input)?;
    let v: Value = parse_json(&text)?;
    let curve: DecayCurve = if v.get("schema").and_then(Value::as_str) == Some(DATASET_SCHEMA) {
        let ds = RBDataset::from_json_str(&text)?;
        let est = a.estimator.ok_or_else(|| Error::InvalidArgument("--estimator is required for dataset input".into()))?;
        find_curve(&estimate_decays(&ds)?, est)?.clone()
    } else {
        parse_json(&text)?
    };
    let result = fit_model(&curve, a.model)?;
    let prov = Provenance::new(&(&curve, a.model), None, Some(command.into()))?;
    let doc = with_provenance(FIT_SCHEMA, &prov, &json!({ "curve": curve, "fit": result }))?;
    write_atomic(&a.out, &to_json_rounded(&doc)?)
}

fn sweep(a: &SweepArgs, command: &str) -> Result<()> {
    let spec: SweepSpec = parse_json(&read(&a.spec)?)?;
    let result = heatmap_sweep(&spec)?;
    let prov = Provenance::new(&spec, Some(spec.seed), Some(command.into()))?;
    write_atomic(&a.out_csv, &result.to_csv()?)?;
    let doc = with_provenance(SWEEP_RESULT_SCHEMA, &prov, &result)?;
    write_atomic(&a.out_json, &to_json_rounded(&doc)?)
}

fn analyze_cmd(a: &AnalyzeArgs, command: &str) -> Result<()> {
    let ds = ingest(&a.data)?;
    let plan: AnalysisPlan = parse_json(&read(&a.plan)?)?;
    let analysis = analyze(&ds, &plan)?;
    let prov = Provenance::new(&(&plan, &ds), Some(plan.seed), Some(command.into()))?;
    write_atomic(&a.out, &to_json_rounded(&ReportDocument::new(analysis, Some(plan), prov))?)
}

fn audit(a: &AuditArgs, command: &str) -> Result<()> {
    let nm = NoiseModel::new(a.lambda_s, a.tau_s, true);
    nm.validate()?;
    let full = spam_perturbation_audit(&nm, a.delta_rho, a.delta_pi, &a.lengths)?;
    let half = spam_perturbation_audit(&nm, a.delta_rho / 2.0, a.delta_pi / 2.0, &a.lengths)?;
    let ratio = (full.max_deviation > 0.0).then(|| half.max_deviation / full.max_deviation);
    let prov = Provenance::new(&(&nm, a.delta_rho, a.delta_pi, &a.lengths), None, Some(command.into()))?;
    let doc = with_provenance(
        AUDIT_SCHEMA,
        &prov,
        &json!({ "noise": nm, "audit": full, "halved": half, "halving_ratio": ratio }),
    )?;
    write_atomic(&a.out, &to_json_rounded(&doc)?)
}

/// Histograms for both qubits plus their distances from uniform and from
/// each other.
pub fn gateset_audit_value(gs: &GateSet, max_depth: usize) -> Result<Value> {
    let comp = compile_all(clifford_group(2)?, gs, max_depth)?;
    let h0 = leaked_action_histogram(&comp, 0)?;
    let h1 = leaked_action_histogram(&comp, 1)?;
    Ok(json!({
        "gateset": gs.name,
        "max_depth": max_depth,
        "n_reachable": comp.n_reachable(),
        "bins": h0.probabilities.len(),
        "histograms": [h0, h1],
        "tvd_between_qubits": total_variation(&h0.probabilities, &h1.probabilities),
    }))
}

fn gateset_audit(a: &GatesetAuditArgs, command: &str) -> Result<()> {
    let gs = if Path::new(&a.gateset).is_file() { GateSet::from_json(&read(Path::new(&a.gateset))?)? } else { GateSet::builtin(&a.gateset)? };
    let body = gateset_audit_value(&gs, a.max_depth)?;
    let prov = Provenance::new(&(&gs.name, a.max_depth), None, Some(command.into()))?;
    write_atomic(&a.out, &to_json_rounded(&with_provenance(GATESET_AUDIT_SCHEMA, &prov, &body)?)?)
}

pub fn execute(cli: &Cli, command: &str) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a, command),
        Command::Fit(a) => fit(a, command),
        Command::Sweep(a) => sweep(a, command),
        Command::Analyze(a) => analyze_cmd(a, command),
        Command::Audit(a) => audit(a, command),
        Command::GatesetAudit(a) => gateset_audit(a, command),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INVALID
    }
}

/// Parses and runs; messages go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let command = argv.iter().skip(1).map(|s| s.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" ");
    match execute(&cli, &command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

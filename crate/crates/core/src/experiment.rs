//! Sequence-length rules, single-cell runs, (λ_s, τ_s) heat-map sweeps and
//! the SPAM perturbation audit.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{cell_fits, estimate_cell, EstimateReport, Regime};
use crate::noise::{total_error_channel, LeakAssignment, NoiseModel};
use crate::simulate::{estimate_decays, task_seed, ExactMode, Protocol, RBProtocolConfig, Simulator, DEFAULT_SEQUENCES, DEFAULT_SHOTS};
use crate::space::{c, CMat, SpaceLayout};
use crate::twirl::{average_fidelity, extract_parameters, process_fidelity, twirl};

pub const SWEEP_SPEC_SCHEMA: &str = "leakrb/sweep-spec/v1";
pub const N_LENGTHS: usize = 6;

/// z evenly spaced values from x to y.
pub fn space(x: f64, y: f64, z: usize) -> Vec<f64> {
    if z == 1 {
        return vec![x];
    }
    (0..z).map(|i| x + (y - x) * i as f64 / (z - 1) as f64).collect()
}

fn round_lengths(vals: impl IntoIterator<Item = f64>) -> Vec<usize> {
    let mut out: Vec<usize> = vec![];
    for v in vals {
        let l = ((v + 0.5).floor() as usize).max(1);
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

fn positive_min(a: f64, b: f64) -> Option<f64> {
    [a, b].into_iter().filter(|v| *v > 0.0).reduce(f64::min)
}

/// Six lengths per the regime's rule, rounded half-up and deduplicated in
/// order. Naive cells reuse the Comp. SPAM rule.
pub fn sequence_lengths(regime: Regime, protocol: Protocol, lambda_s: f64, tau_s: f64) -> Result<Vec<usize>> {
    if !(lambda_s >= 0.0 && tau_s >= 0.0) {
        return Err(Error::OutOfRange(format!("rates must be ≥ 0, got λ_s = {lambda_s}, τ_s = {tau_s}")));
    }
    let no_rate = || Error::InvalidArgument("length rule needs a nonzero error rate".into());
    let decades = |m: f64| round_lengths(space(0.0, -m.log10(), N_LENGTHS).into_iter().map(|e| 10f64.powf(e)));
    match (regime, protocol) {
        (Regime::Short, _) => {
            let m = lambda_s.max(tau_s);
            if m == 0.0 {
                return Err(no_rate());
            }
            Ok(round_lengths(space(1.0, 1.0 / (25.0 * m), N_LENGTHS)))
        }
        (Regime::CompDominant, Protocol::CompSpam | Protocol::Naive) => {
            let top = [1.0 / lambda_s, 1.0 / (25.0 * tau_s)].into_iter().filter(|v| v.is_finite()).reduce(f64::max).ok_or_else(no_rate)?;
            Ok(round_lengths(space(1.0, top, N_LENGTHS)))
        }
        (Regime::CompDominant, _) => {
            if lambda_s == 0.0 {
                return Err(no_rate());
            }
            Ok(decades(lambda_s))
        }
        (Regime::NoSeepage, _) | (Regime::PopTransfer, Protocol::AvgMb | Protocol::Naive) => {
            Ok(decades(positive_min(lambda_s, tau_s).ok_or_else(no_rate)?))
        }
        (Regime::PopTransfer, p) => Err(Error::Plan(format!("no length rule for {p} in the pop-transfer regime"))),
    }
}

/// Simulation noise for a cell: readout flips at λ_s, seepage off in the
/// no-seepage regime, gadget channels only for LPS, every leak outcome read
/// as the reference for naive RB.
pub fn cell_noise(regime: Regime, protocol: Protocol, lambda_s: f64, tau_s: f64) -> NoiseModel {
    let mut nm = NoiseModel::simulation_default(lambda_s, tau_s, regime != Regime::NoSeepage);
    if protocol != Protocol::Lps {
        nm.gadget = None;
    }
    if protocol == Protocol::Naive {
        if let Ok(layout) = SpaceLayout::new(2) {
            nm.leak_readout_assignment = LeakAssignment::all_to("00", &layout);
        }
    }
    nm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellMode {
    /// Shot-free expectations from the twirled channel.
    Exact,
    Shots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub mode: CellMode,
    pub n_sequences: usize,
    pub n_shots: usize,
    pub seed: u64,
    /// Avg. MB reads t from gadget retention.
    #[serde(default)]
    pub retention_for_ic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengths: Option<Vec<usize>>,
}

impl Default for CellConfig {
    fn default() -> Self {
        CellConfig { mode: CellMode::Shots, n_sequences: DEFAULT_SEQUENCES, n_shots: DEFAULT_SHOTS, seed: 0, retention_for_ic: false, lengths: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub r: f64,
    pub t: f64,
    pub lambda: f64,
    pub tau: f64,
    pub fidelity: f64,
    pub infidelity: f64,
    pub process_fidelity: f64,
}

/// Truth from the built channel, never from the nominal knobs.
pub fn channel_truth(nm: &NoiseModel, layout: &SpaceLayout) -> Result<Truth> {
    let p = extract_parameters(&total_error_channel(nm, layout)?);
    let f = average_fidelity(&p);
    Ok(Truth { r: p.r, t: p.t, lambda: p.lambda, tau: p.tau, fidelity: f, infidelity: 1.0 - f, process_fidelity: process_fidelity(&p) })
}

/// Quantities scored in sweeps: 1−F, 1−r and τ.
pub const SCORED: [&str; 3] = ["infidelity", "one_minus_r", "tau"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub quantity: String,
    pub truth: f64,
    pub estimate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<f64>,
    /// |x − x_s|/x_s; absent when the truth is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub lambda_s: f64,
    pub tau_s: f64,
    pub regime: Regime,
    pub protocol: Protocol,
    pub lengths: Vec<usize>,
    pub truth: Truth,
    pub truth_zero: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EstimateReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub scores: Vec<Score>,
}

impl CellResult {
    pub fn score(&self, quantity: &str) -> Option<&Score> {
        self.scores.iter().find(|s| s.quantity == quantity)
    }

    pub fn rel_diff(&self, quantity: &str) -> Option<f64> {
        self.score(quantity).and_then(|s| s.rel_diff)
    }
}

fn scores(report: &EstimateReport, truth: &Truth) -> Vec<Score> {
    let mut out = vec![];
    let mut push = |name: &str, truth: f64, q: Option<(f64, Option<f64>)>| {
        if let Some((est, ci)) = q {
            let rel = (truth != 0.0).then(|| (est - truth).abs() / truth.abs());
            out.push(Score { quantity: name.into(), truth, estimate: est, ci, rel_diff: rel });
        }
    };
    push("infidelity", truth.infidelity, report.infidelity.as_ref().map(|q| (q.value, q.ci)));
    push("one_minus_r", 1.0 - truth.r, report.r.as_ref().map(|q| (1.0 - q.value, q.ci)));
    push("tau", truth.tau, report.tau.as_ref().map(|q| (q.value, q.ci)));
    out
}

/// Simulate (or compute exactly), estimate, fit and score one cell.
pub fn run_cell(lambda_s: f64, tau_s: f64, regime: Regime, protocol: Protocol, cfg: &CellConfig) -> Result<CellResult> {
    run_cell_with_noise(&cell_noise(regime, protocol, lambda_s, tau_s), regime, protocol, cfg)
}

/// As [`run_cell`] with an explicit noise model. Failures after the truth is
/// known are recorded in the result instead of returned.
pub fn run_cell_with_noise(nm: &NoiseModel, regime: Regime, protocol: Protocol, cfg: &CellConfig) -> Result<CellResult> {
    cell_fits(protocol, regime, cfg.retention_for_ic)?;
    let layout = SpaceLayout::new(2)?;
    let truth = channel_truth(nm, &layout)?;
    let lengths = match &cfg.lengths {
        Some(l) => l.clone(),
        None => sequence_lengths(regime, protocol, nm.lambda_s, nm.tau_s)?,
    };
    let mut result = CellResult {
        lambda_s: nm.lambda_s,
        tau_s: nm.tau_s,
        regime,
        protocol,
        lengths: lengths.clone(),
        truth,
        truth_zero: truth.infidelity.abs() < 1e-15,
        report: None,
        error: None,
        scores: vec![],
    };
    let mut rb = RBProtocolConfig::new(protocol, lengths.clone(), nm.clone(), cfg.seed);
    rb.n_sequences = cfg.n_sequences;
    rb.n_shots = cfg.n_shots;
    let attempt = || -> Result<EstimateReport> {
        let sim = Simulator::new(rb.clone())?;
        let curves = match cfg.mode {
            CellMode::Exact => sim.exact_curves(&lengths, ExactMode::Ideal)?,
            CellMode::Shots => estimate_decays(&sim.run()?)?,
        };
        estimate_cell(&curves, protocol, regime, cfg.retention_for_ic)
    };
    match attempt() {
        Ok(report) => {
            result.scores = scores(&report, &truth);
            result.report = Some(report);
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    Ok(result)
}

fn default_sweep_protocols() -> Vec<Protocol> {
    vec![Protocol::CompSpam, Protocol::AvgMb, Protocol::Lps]
}

fn default_grid() -> Vec<f64> {
    log_grid(1e-4, 1e-2, 7)
}

fn default_schema() -> String {
    SWEEP_SPEC_SCHEMA.into()
}

fn default_mode() -> CellMode {
    CellMode::Shots
}

fn default_sequences() -> usize {
    DEFAULT_SEQUENCES
}

fn default_shots() -> usize {
    DEFAULT_SHOTS
}

/// n log-spaced values from lo to hi inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    space(lo.log10(), hi.log10(), n).into_iter().map(|e| 10f64.powf(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub regime: Regime,
    #[serde(default = "default_sweep_protocols")]
    pub protocols: Vec<Protocol>,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_grid")]
    pub tau_grid: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: CellMode,
    #[serde(default = "default_sequences")]
    pub n_sequences: usize,
    #[serde(default = "default_shots")]
    pub n_shots: usize,
    #[serde(default)]
    pub retention_for_ic: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(regime: Regime, protocols: Vec<Protocol>, seed: u64) -> Self {
        SweepSpec {
            schema: default_schema(),
            regime,
            protocols,
            lambda_grid: default_grid(),
            tau_grid: default_grid(),
            mode: CellMode::Shots,
            n_sequences: DEFAULT_SEQUENCES,
            n_shots: DEFAULT_SHOTS,
            retention_for_ic: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SWEEP_SPEC_SCHEMA {
            return Err(Error::Schema { path: "schema".into(), message: format!("expected {SWEEP_SPEC_SCHEMA:?}, got {:?}", self.schema) });
        }
        if self.protocols.is_empty() || self.lambda_grid.is_empty() || self.tau_grid.is_empty() {
            return Err(Error::InvalidArgument("sweep needs protocols and nonempty grids".into()));
        }
        for v in self.lambda_grid.iter().chain(&self.tau_grid) {
            if !(0.0..=0.1).contains(v) {
                return Err(Error::OutOfRange(format!("grid value {v} outside [0, 0.1]")));
            }
        }
        for p in &self.protocols {
            cell_fits(*p, self.regime, self.retention_for_ic)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub protocol: Protocol,
    pub quantity: String,
    pub n_cells: usize,
    pub max: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
}

/// One CSV row per cell and scored quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub protocol: Protocol,
    pub lambda_s: f64,
    pub tau_s: f64,
    pub quantity: String,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub ci: Option<f64>,
    pub rel_diff: Option<f64>,
    pub rel_diff_clipped: Option<f64>,
}

pub fn heatmap_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let mut tasks = vec![];
    for (pi, p) in spec.protocols.iter().enumerate() {
        for (i, lam) in spec.lambda_grid.iter().enumerate() {
            for (j, tau) in spec.tau_grid.iter().enumerate() {
                tasks.push((pi, *p, i, *lam, j, *tau));
            }
        }
    }
    let cells: Vec<CellResult> = tasks
        .par_iter()
        .map(|&(pi, p, i, lam, j, tau)| {
            let cfg = CellConfig {
                mode: spec.mode,
                n_sequences: spec.n_sequences,
                n_shots: spec.n_shots,
                seed: task_seed(spec.seed, i, j, pi),
                retention_for_ic: spec.retention_for_ic,
                lengths: None,
            };
            run_cell(lam, tau, spec.regime, p, &cfg)
        })
        .collect::<Result<_>>()?;
    let summary = summarize(&spec.protocols, &cells);
    Ok(SweepResult { spec: spec.clone(), cells, summary })
}

fn summarize(protocols: &[Protocol], cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut out = vec![];
    for p in protocols {
        for q in SCORED {
            let mut v: Vec<f64> = cells.iter().filter(|c| c.protocol == *p).filter_map(|c| c.rel_diff(q)).collect();
            if v.is_empty() {
                continue;
            }
            v.sort_by(|a, b| a.total_cmp(b));
            let n = v.len();
            let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
            out.push(SummaryRow { protocol: *p, quantity: q.into(), n_cells: n, max: v[n - 1], median });
        }
    }
    out
}

impl SweepResult {
    /// Rows for every cell and every quantity the cell's analysis identifies.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let mut rows = vec![];
        for c in &self.cells {
            let identified: Vec<&str> = match (&c.report, c.regime) {
                (Some(_), _) => c.scores.iter().map(|s| s.quantity.as_str()).collect(),
                (None, Regime::PopTransfer) => vec!["infidelity", "one_minus_r"],
                (None, Regime::Short) if c.protocol == Protocol::CompSpam => vec!["infidelity"],
                (None, _) if c.protocol == Protocol::Naive => vec!["infidelity"],
                (None, _) => SCORED.to_vec(),
            };
            for q in identified {
                let s = c.score(q);
                let truth = match q {
                    "infidelity" => c.truth.infidelity,
                    "one_minus_r" => 1.0 - c.truth.r,
                    _ => c.truth.tau,
                };
                let rel = s.and_then(|s| s.rel_diff);
                rows.push(CsvRow {
                    protocol: c.protocol,
                    lambda_s: c.lambda_s,
                    tau_s: c.tau_s,
                    quantity: q.into(),
                    truth,
                    estimate: s.map(|s| s.estimate),
                    ci: s.and_then(|s| s.ci),
                    rel_diff: rel,
                    rel_diff_clipped: rel.map(|r| r.min(1.0)),
                });
            }
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        for mut row in self.csv_rows() {
            for v in [&mut row.lambda_s, &mut row.tau_s, &mut row.truth] {
                *v = crate::io::round_sig(*v);
            }
            for v in [&mut row.estimate, &mut row.ci, &mut row.rel_diff, &mut row.rel_diff_clipped].into_iter().flatten() {
                *v = crate::io::round_sig(*v);
            }
            w.serialize(row).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamRow {
    pub length: usize,
    pub ideal: f64,
    pub perturbed: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamAudit {
    pub delta_rho: f64,
    pub delta_pi: f64,
    pub rows: Vec<SpamRow>,
    pub max_deviation: f64,
    /// Smallest c with every deviation ≤ c·(δρ + δΠ); absent when both are 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
}

/// Per-qubit independent bit flips, as a distribution over computational
/// labels given the ideal label.
fn flip_weights(layout: &SpaceLayout, from: usize, p: f64) -> Vec<f64> {
    let n = layout.n_qubits;
    (0..layout.d_c)
        .map(|k| {
            let diff = (k ^ from).count_ones() as i32;
            p.powi(diff) * (1.0 - p).powi(n as i32 - diff)
        })
        .collect()
}

/// |p_SPAM(ℓ) − p(ℓ)| for Comp. SPAM, exactly, with a preparation flipped
/// per qubit with probability δρ and readout flipped with probability δΠ.
pub fn spam_perturbation_audit(nm: &NoiseModel, delta_rho: f64, delta_pi: f64, lengths: &[usize]) -> Result<SpamAudit> {
    for (name, v) in [("delta_rho", delta_rho), ("delta_pi", delta_pi)] {
        if !(0.0..=1e-2).contains(&v) {
            return Err(Error::OutOfRange(format!("{name} = {v} outside [0, 1e-2]")));
        }
    }
    let layout = SpaceLayout::new(2)?;
    let mut clean = nm.clone();
    clean.readout_flip = 0.0;
    clean.gadget = None;
    let group = crate::clifford::clifford_group(2)?;
    let bar = twirl(&total_error_channel(&clean, &layout)?, group)?;
    let comp = layout.comp_indices();
    let state = |p: f64| {
        let w = flip_weights(&layout, 0, p);
        let mut m = CMat::zeros(layout.d, layout.d);
        for (k, &i) in comp.iter().enumerate() {
            m[(i, i)] = c(w[k], 0.0);
        }
        m
    };
    // Effect for reading "0…0": label k is read as 0 with weight flip(k→0).
    let effect = |p: f64| -> Vec<f64> {
        let w = flip_weights(&layout, 0, p);
        let mut e = vec![0.0; layout.d];
        for (k, &i) in comp.iter().enumerate() {
            e[i] = w[k];
        }
        e
    };
    let (rho0, rho1) = (state(0.0), state(delta_rho));
    let (e0, e1) = (effect(0.0), effect(delta_pi));
    let max_l = lengths.iter().copied().max().unwrap_or(0);
    let (mut a, mut b) = (rho0, rho1);
    let mut rows = vec![];
    for l in 0..=max_l {
        if lengths.contains(&l) {
            let ideal: f64 = (0..layout.d).map(|i| e0[i] * a[(i, i)].re).sum();
            let perturbed: f64 = (0..layout.d).map(|i| e1[i] * b[(i, i)].re).sum();
            rows.push(SpamRow { length: l, ideal, perturbed, deviation: (perturbed - ideal).abs() });
        }
        a = bar.apply_matrix(&a);
        b = bar.apply_matrix(&b);
    }
    let max_deviation = rows.iter().map(|r| r.deviation).fold(0.0, f64::max);
    let total = delta_rho + delta_pi;
    Ok(SpamAudit { delta_rho, delta_pi, rows, max_deviation, constant: (total > 0.0).then(|| max_deviation / total) })
}

/// Relative-difference table keyed by quantity for quick inspection.
pub fn rel_diffs(cell: &CellResult) -> BTreeMap<String, f64> {
    cell.scores.iter().filter_map(|s| s.rel_diff.map(|r| (s.quantity.clone(), r))).collect()
}

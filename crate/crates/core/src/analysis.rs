//! Analysis plans for externally collected or simulated datasets, and the
//! report document written by the CLI.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::RBDataset;
use crate::error::{Error, Result};
use crate::fit::{bootstrap, cell_fits, fit_model, BootstrapSummary, EstimateReport, FitResult, ModelKind, Regime, DEFAULT_RESAMPLES};
use crate::io::Provenance;
use crate::simulate::{estimate_decays_with, DecayCurve, EstimateOptions, Estimator, Protocol};

pub const PLAN_SCHEMA: &str = "leakrb/plan/v1";
pub const REPORT_SCHEMA: &str = "leakrb/report/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Truncation {
    /// Remove this many of the longest lengths.
    #[serde(default)]
    pub drop_longest: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_length: Option<usize>,
    /// Drop the longest points of any curve whose first-order fit breaks
    /// its guard, keeping at least three.
    #[serde(default)]
    pub guard: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtraFit {
    pub estimator: Estimator,
    pub model: ModelKind,
}

fn default_plan_schema() -> String {
    PLAN_SCHEMA.into()
}

fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisPlan {
    #[serde(default = "default_plan_schema")]
    pub schema: String,
    pub protocol: Protocol,
    pub regime: Regime,
    /// Comp. SPAM hybrid: count an accepted outcome only when the gadget
    /// reports no leak, which removes its leakage projection.
    #[serde(default)]
    pub post_select: bool,
    /// Avg. MB hybrid: take t from the gadget retention rate.
    #[serde(default)]
    pub retention_for_ic: bool,
    #[serde(default)]
    pub truncation: Truncation,
    /// Additional fits reported alongside the cell's own.
    #[serde(default)]
    pub extra_fits: Vec<ExtraFit>,
    /// 0 disables the bootstrap.
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl AnalysisPlan {
    pub fn new(protocol: Protocol, regime: Regime) -> Self {
        AnalysisPlan {
            schema: default_plan_schema(),
            protocol,
            regime,
            post_select: false,
            retention_for_ic: false,
            truncation: Truncation::default(),
            extra_fits: vec![],
            bootstrap_resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }

    /// Checks the plan against what the dataset actually contains.
    pub fn validate(&self, ds: &RBDataset) -> Result<()> {
        if self.schema != PLAN_SCHEMA {
            return Err(Error::Schema { path: "schema".into(), message: format!("expected {PLAN_SCHEMA:?}, got {:?}", self.schema) });
        }
        let cell = cell_fits(self.protocol, self.regime, self.retention_for_ic)?;
        let needs_gadget = self.post_select
            || cell.iter().chain(self.extra_fits.iter().map(|e| (e.estimator, e.model)).collect::<Vec<_>>().iter()).any(|(e, _)| matches!(e, Estimator::PRetention | Estimator::PPost));
        if needs_gadget && !ds.has_gadget_data() {
            return Err(Error::Plan(format!(
                "plan ({} / {}{}) needs leakage-gadget counts, but the dataset has none",
                self.protocol,
                self.regime,
                if self.post_select { ", post-selected" } else { "" }
            )));
        }
        let needs_perm = cell.iter().any(|(e, _)| *e == Estimator::PIc);
        if needs_perm && ds.circuits.iter().any(|c| c.permutation.is_none()) {
            return Err(Error::Plan("p_IC needs every circuit to carry its permutation label".into()));
        }
        if self.bootstrap_resamples != 0 && self.bootstrap_resamples < 100 {
            return Err(Error::Plan(format!("bootstrap_resamples must be 0 or ≥ 100, got {}", self.bootstrap_resamples)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub report: EstimateReport,
    pub curves: Vec<DecayCurve>,
    pub extra_fits: Vec<FitResult>,
    pub lengths_used: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSummary>,
}

fn is_guarded(f: &FitResult) -> bool {
    f.has_flag("short-guard-violated") || f.has_flag("leak-guard-violated")
}

fn curves_for(ds: &RBDataset, plan: &AnalysisPlan, max_len: usize, per_curve: &BTreeMap<Estimator, usize>) -> Result<Vec<DecayCurve>> {
    let mut curves: Vec<DecayCurve> = estimate_decays_with(ds, &EstimateOptions { post_select: plan.post_select })?
        .iter()
        .map(|c| c.truncated(per_curve.get(&c.estimator).copied().unwrap_or(max_len).min(max_len)))
        .filter(|c| !c.points.is_empty())
        .collect();
    curves.sort_by_key(|c| c.estimator);
    Ok(curves)
}

fn estimate(ds: &RBDataset, plan: &AnalysisPlan, max_len: usize, per_curve: &BTreeMap<Estimator, usize>) -> Result<(EstimateReport, Vec<DecayCurve>)> {
    let curves = curves_for(ds, plan, max_len, per_curve)?;
    let report = crate::fit::estimate_cell(&curves, plan.protocol, plan.regime, plan.retention_for_ic)?;
    Ok((report, curves))
}

/// Curves, cell fits, and bootstrap uncertainties per the plan.
pub fn analyze(ds: &RBDataset, plan: &AnalysisPlan) -> Result<Analysis> {
    plan.validate(ds)?;
    let mut lengths = ds.lengths();
    if let Some(m) = plan.truncation.max_length {
        lengths.retain(|l| *l <= m);
    }
    lengths.truncate(lengths.len().saturating_sub(plan.truncation.drop_longest));
    let max_len = *lengths.last().ok_or_else(|| Error::Plan("truncation removed every length".into()))?;

    // Guarded truncation acts per curve: only a curve whose first-order fit
    // breaks its guard loses its longest point, one at a time.
    let mut per_curve: BTreeMap<Estimator, usize> = BTreeMap::new();
    let (mut report, curves) = loop {
        let (report, curves) = estimate(ds, plan, max_len, &per_curve)?;
        if !plan.truncation.guard {
            break (report, curves);
        }
        let offender = report.fits.iter().filter(|f| is_guarded(f)).find_map(|f| {
            let c = curves.iter().find(|c| Some(c.estimator) == f.estimator)?;
            (c.points.len() > 3).then(|| (c.estimator, c.points[c.points.len() - 2].length))
        });
        match offender {
            Some((est, keep_to)) => {
                per_curve.insert(est, keep_to);
            }
            None => break (report, curves),
        }
    };
    for (est, l) in &per_curve {
        report.flags.push(format!("{est} truncated to ℓ ≤ {l} by guard"));
    }
    let mut extra_fits = vec![];
    for e in &plan.extra_fits {
        let c = curves.iter().find(|c| c.estimator == e.estimator).ok_or_else(|| Error::MissingCurve(e.estimator.name().into()))?;
        extra_fits.push(fit_model(c, e.model)?);
    }
    let bootstrap = if plan.bootstrap_resamples > 0 {
        let b = bootstrap(ds, |r| estimate(r, plan, max_len, &per_curve).map(|x| x.0), plan.bootstrap_resamples, plan.seed)?;
        report.set_cis(&b.sd, "bootstrap");
        Some(b)
    } else {
        None
    };
    Ok(Analysis { report, curves, extra_fits, lengths_used: lengths, bootstrap })
}

/// The JSON document written by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<AnalysisPlan>,
    #[serde(flatten)]
    pub analysis: Analysis,
}

impl ReportDocument {
    pub fn new(analysis: Analysis, plan: Option<AnalysisPlan>, provenance: Provenance) -> Self {
        ReportDocument { schema: REPORT_SCHEMA.into(), provenance, plan, analysis }
    }
}

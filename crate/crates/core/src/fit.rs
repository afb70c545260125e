//! Decay models, damped least squares, per-regime report assembly and the
//! two-stage bootstrap.
//!
//! Rate parameters are fitted through a logistic reparameterization so the
//! optimizer works on an unbounded space while the model always sees values
//! in (0, 1).

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CircuitRecord, RBDataset};
use crate::error::{Error, Result};
use crate::simulate::{task_seed, DecayCurve, Estimator, Protocol};
use crate::twirl::{fidelity_bounds, midpoint_infidelity, FidelityBounds};

pub const MAX_ITER: usize = 500;
pub const GRAD_TOL: f64 = 1e-10;
pub const STEP_TOL: f64 = 1e-12;

/// Multistart grid for two-rate models, crossed.
pub const RATE_STARTS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Short,
    CompDominant,
    NoSeepage,
    PopTransfer,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Short, Regime::CompDominant, Regime::NoSeepage, Regime::PopTransfer];

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Short => "short",
            Regime::CompDominant => "comp-dominant",
            Regime::NoSeepage => "no-seepage",
            Regime::PopTransfer => "pop-transfer",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown regime {s:?}")))
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    ExponentialPlusFloor,
    DoubleExponential,
    CompDominantProduct,
    RetentionLinear,
    RetentionExponential,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Linear,
        ModelKind::ExponentialPlusFloor,
        ModelKind::DoubleExponential,
        ModelKind::CompDominantProduct,
        ModelKind::RetentionLinear,
        ModelKind::RetentionExponential,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::ExponentialPlusFloor => "exponential-plus-floor",
            ModelKind::DoubleExponential => "double-exponential",
            ModelKind::CompDominantProduct => "comp-dominant-product",
            ModelKind::RetentionLinear => "retention-linear",
            ModelKind::RetentionExponential => "retention-exponential",
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ModelKind::Linear | ModelKind::RetentionLinear => &["intercept", "slope"],
            ModelKind::ExponentialPlusFloor => &["A", "p", "B"],
            ModelKind::RetentionExponential => &["A", "p"],
            ModelKind::DoubleExponential | ModelKind::CompDominantProduct => &["lambda", "tau"],
        }
    }

    /// p(ℓ; θ) in natural parameters.
    pub fn predict(&self, theta: &[f64], l: f64, d_c: usize) -> f64 {
        let k = (d_c as f64 - 1.0) / d_c as f64;
        let dc = d_c as f64;
        match self {
            ModelKind::Linear | ModelKind::RetentionLinear => theta[0] + theta[1] * l,
            ModelKind::ExponentialPlusFloor => theta[0] * theta[1].powf(l) + theta[2],
            ModelKind::RetentionExponential => theta[0] * theta[1].powf(l),
            ModelKind::DoubleExponential => {
                let (lam, tau) = (theta[0], theta[1]);
                k * (1.0 - lam - tau).powf(l) + (1.0 - tau).powf(l) / dc
            }
            ModelKind::CompDominantProduct => {
                let (lam, tau) = (theta[0], theta[1]);
                k * (1.0 - lam - l * tau) * (1.0 - lam).powf(l - 1.0) + (1.0 - l * tau) / dc
            }
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model {s:?}")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Floor {
    Fixed(f64),
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<Estimator>,
    pub d_c: usize,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Weighted residual sum of squares.
    pub rss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduced_chi2: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub n_points: usize,
    pub weighted: bool,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl FitResult {
    fn index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.params[i])
    }

    pub fn stderr(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.covariance[i][i].max(0.0).sqrt())
    }

    pub fn predict(&self, l: f64) -> f64 {
        self.model.predict(&self.params, l, self.d_c)
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    (p / (1.0 - p)).ln()
}

/// Data prepared for least squares: lengths, values and √weights.
struct Data {
    x: Vec<f64>,
    y: Vec<f64>,
    sw: Vec<f64>,
    weighted: bool,
}

impl Data {
    fn from_curve(curve: &DecayCurve) -> Data {
        let weighted = !curve.points.is_empty() && curve.points.iter().all(|p| p.stderr > 0.0);
        Data {
            x: curve.points.iter().map(|p| p.length as f64).collect(),
            y: curve.points.iter().map(|p| p.value).collect(),
            sw: curve.points.iter().map(|p| if weighted { 1.0 / p.stderr } else { 1.0 }).collect(),
            weighted,
        }
    }

    fn n(&self) -> usize {
        self.x.len()
    }

    fn distinct_lengths(&self) -> usize {
        let mut v: Vec<u64> = self.x.iter().map(|x| *x as u64).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    }
}

struct LmOutcome {
    theta: Vec<f64>,
    rss: f64,
    jtj: DMatrix<f64>,
    converged: bool,
    iterations: usize,
}

/// Levenberg–Marquardt on internal parameters. `model` returns the value and
/// its gradient at one length.
fn levenberg_marquardt<F>(data: &Data, theta0: &[f64], model: &F) -> LmOutcome
where
    F: Fn(&[f64], f64) -> (f64, Vec<f64>),
{
    let (n, m) = (data.n(), theta0.len());
    let eval = |th: &[f64]| {
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, m);
        for i in 0..n {
            let (f, g) = model(th, data.x[i]);
            r[i] = data.sw[i] * (data.y[i] - f);
            for a in 0..m {
                j[(i, a)] = data.sw[i] * g[a];
            }
        }
        (r, j)
    };
    let mut theta = DVector::from_column_slice(theta0);
    let (mut r, mut j) = eval(theta.as_slice());
    let mut rss = r.norm_squared();
    let mut mu = 1e-3;
    let mut nu = 2.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER && rss.is_finite() {
        let jtj = j.tr_mul(&j);
        let g = j.tr_mul(&r);
        if g.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let mut a = jtj.clone();
        for i in 0..m {
            a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
        }
        let Some(chol) = a.cholesky() else {
            mu *= nu;
            nu *= 2.0;
            continue;
        };
        let delta = chol.solve(&g);
        if delta.amax() < STEP_TOL {
            converged = true;
            break;
        }
        let trial = &theta + &delta;
        let (r2, j2) = eval(trial.as_slice());
        let rss2 = r2.norm_squared();
        if rss2.is_finite() && rss2 < rss {
            theta = trial;
            r = r2;
            j = j2;
            rss = rss2;
            mu = (mu / 3.0).max(1e-15);
            nu = 2.0;
        } else {
            mu *= nu;
            nu *= 2.0;
            if mu > 1e30 {
                // No descent direction left at working precision.
                converged = true;
                break;
            }
        }
    }
    LmOutcome { theta: theta.as_slice().to_vec(), rss, jtj: j.tr_mul(&j), converged, iterations }
}

fn invert_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    match m.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => (inv, false),
        _ => {
            let p = m.clone().pseudo_inverse(1e-14).unwrap_or_else(|_| DMatrix::zeros(m.nrows(), m.ncols()));
            (p, true)
        }
    }
}

/// Covariance scale: absolute weights, inflated by χ²_red when it exceeds 1;
/// for unweighted data, the residual variance.
fn covariance_scale(data: &Data, rss: f64, n_free: usize) -> (f64, Option<f64>) {
    let dof = data.n().saturating_sub(n_free);
    let red = (dof > 0).then(|| rss / dof as f64);
    let s2 = match (data.weighted, red) {
        (true, Some(c)) => c.max(1.0),
        (true, None) => 1.0,
        (false, Some(c)) => c,
        (false, None) => 0.0,
    };
    (s2, red)
}

fn symmetrize(c: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..c.nrows()).map(|i| (0..c.ncols()).map(|j| 0.5 * (c[(i, j)] + c[(j, i)])).collect()).collect()
}

fn check_points(curve: &DecayCurve, min_lengths: usize, what: &str) -> Result<Data> {
    let data = Data::from_curve(curve);
    if data.distinct_lengths() < min_lengths {
        return Err(Error::Fit(format!("{what} needs ≥ {min_lengths} distinct lengths, got {}", data.distinct_lengths())));
    }
    if data.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit(format!("{what}: non-finite survival value")));
    }
    Ok(data)
}

/// Weighted least squares line a + sℓ.
pub fn fit_linear(curve: &DecayCurve) -> Result<FitResult> {
    fit_linear_as(curve, ModelKind::Linear)
}

pub fn fit_retention_linear(curve: &DecayCurve) -> Result<FitResult> {
    fit_linear_as(curve, ModelKind::RetentionLinear)
}

fn fit_linear_as(curve: &DecayCurve, model: ModelKind) -> Result<FitResult> {
    let data = check_points(curve, 2, "linear fit")?;
    let n = data.n();
    let x = DMatrix::from_fn(n, 2, |i, j| data.sw[i] * if j == 0 { 1.0 } else { data.x[i] });
    let y = DVector::from_fn(n, |i, _| data.sw[i] * data.y[i]);
    let xtx = x.tr_mul(&x);
    let (inv, singular) = invert_psd(&xtx);
    let theta = &inv * x.tr_mul(&y);
    let rss = (&y - &x * &theta).norm_squared();
    let (s2, red) = covariance_scale(&data, rss, 2);
    let mut flags = vec![];
    if singular {
        flags.push("singular-design".to_string());
    }
    let (a, s) = (theta[0], theta[1]);
    let lmax = data.x.iter().cloned().fold(0.0, f64::max);
    if s > 0.0 {
        flags.push("increasing-survival".into());
    }
    if a + s * lmax < 0.0 || a > 1.0 + 1e-6 + 3.0 * (inv[(0, 0)] * s2).sqrt() {
        flags.push("unphysical-trend".into());
    }
    if lmax * s.abs() > 0.1 {
        flags.push("short-guard-violated".into());
    }
    Ok(FitResult {
        model,
        estimator: Some(curve.estimator),
        d_c: curve.d_c,
        param_names: model.param_names().iter().map(|s| s.to_string()).collect(),
        params: vec![a, s],
        covariance: symmetrize(&inv.scale(s2)),
        rss,
        reduced_chi2: red,
        converged: true,
        iterations: 0,
        n_points: n,
        weighted: data.weighted,
        flags,
    })
}

/// A·p^ℓ + B with p = σ(u). `Floor::Fixed(0.0)` gives the retention form.
pub fn fit_exponential(curve: &DecayCurve, floor: Floor) -> Result<FitResult> {
    fit_exponential_as(curve, floor, ModelKind::ExponentialPlusFloor)
}

/// A·t^ℓ.
pub fn fit_retention_exponential(curve: &DecayCurve) -> Result<FitResult> {
    fit_exponential_as(curve, Floor::Fixed(0.0), ModelKind::RetentionExponential)
}

fn fit_exponential_as(curve: &DecayCurve, floor: Floor, kind: ModelKind) -> Result<FitResult> {
    let data = check_points(curve, 3, "exponential fit")?;
    let free_b = floor == Floor::Free;
    let fixed_b = match floor {
        Floor::Fixed(b) => b,
        Floor::Free => 0.0,
    };
    // internal: [A, u, (B)]
    let model = |th: &[f64], l: f64| {
        let p = sigmoid(th[1]);
        let q = sigmoid(-th[1]);
        let pl = p.powf(l);
        let b = if free_b { th[2] } else { fixed_b };
        let mut g = vec![pl, th[0] * l * pl * q];
        if free_b {
            g.push(1.0);
        }
        (th[0] * pl + b, g)
    };
    let first = data.x.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_first = data.x.iter().zip(&data.y).find(|(x, _)| **x == first).map(|(_, y)| *y).unwrap_or(1.0);
    let b_starts: Vec<f64> = if free_b { vec![0.0, 1.0 / curve.d_c as f64] } else { vec![fixed_b] };
    let mut p_starts = vec![0.9, 0.99, 0.999, 0.9999];
    if let Some(p) = log_linear_rate(&data, if free_b { 0.0 } else { fixed_b }) {
        p_starts.push(p);
    }
    let mut best: Option<LmOutcome> = None;
    for &b0 in &b_starts {
        for &p0 in &p_starts {
            let a0 = (y_first - b0) / p0.powf(first);
            let mut th0 = vec![a0, logit(p0)];
            if free_b {
                th0.push(b0);
            }
            let out = levenberg_marquardt(&data, &th0, &model);
            if best.as_ref().map_or(true, |b| out.rss < b.rss) {
                best = Some(out);
            }
        }
    }
    let out = best.expect("nonempty multistart");
    let n_free = if free_b { 3 } else { 2 };
    let (s2, red) = covariance_scale(&data, out.rss, n_free);
    let (inv, singular) = invert_psd(&out.jtj);
    let p = sigmoid(out.theta[1]);
    let dp = p * sigmoid(-out.theta[1]);
    let mut dmat = DMatrix::identity(n_free, n_free);
    dmat[(1, 1)] = dp;
    let cov_int = inv.scale(s2);
    let cov_nat = &dmat * cov_int * &dmat;
    let (params, covariance) = match kind {
        ModelKind::RetentionExponential => (vec![out.theta[0], p], symmetrize(&cov_nat)),
        _ => {
            let b = if free_b { out.theta[2] } else { fixed_b };
            let mut c = DMatrix::zeros(3, 3);
            c.view_mut((0, 0), (n_free, n_free)).copy_from(&cov_nat);
            (vec![out.theta[0], p, b], symmetrize(&c))
        }
    };
    let mut flags = vec![];
    if !out.converged {
        flags.push("not-converged".to_string());
    }
    if singular {
        flags.push("singular-jacobian".into());
    }
    if p > 1.0 - 1e-9 || p < 1e-9 {
        flags.push("p-at-boundary".into());
    }
    if !out.converged {
        return Err(Error::Fit(format!("exponential fit did not converge in {MAX_ITER} iterations")));
    }
    Ok(FitResult {
        model: kind,
        estimator: Some(curve.estimator),
        d_c: curve.d_c,
        param_names: kind.param_names().iter().map(|s| s.to_string()).collect(),
        params,
        covariance,
        rss: out.rss,
        reduced_chi2: red,
        converged: out.converged,
        iterations: out.iterations,
        n_points: data.n(),
        weighted: data.weighted,
        flags,
    })
}

/// Rate from a weighted line through ln(y − B), when every point allows it.
fn log_linear_rate(data: &Data, b: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = data.x.iter().zip(&data.y).filter(|(_, y)| **y - b > 1e-12).map(|(x, y)| (*x, (y - b).ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let s = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx;
    let p = s.exp();
    (p > 0.0 && p < 1.0).then_some(p)
}

/// Two-rate models over (λ, τ) = (σ(a), σ(b)), multistarted on
/// [`RATE_STARTS`] crossed.
fn fit_two_rate(curve: &DecayCurve, kind: ModelKind) -> Result<FitResult> {
    let data = check_points(curve, 4, kind.name())?;
    let d_c = curve.d_c;
    let k = (d_c as f64 - 1.0) / d_c as f64;
    let dc = d_c as f64;
    let model = |th: &[f64], l: f64| {
        let (lam, tau) = (sigmoid(th[0]), sigmoid(th[1]));
        let (dl, dt) = (lam * sigmoid(-th[0]), tau * sigmoid(-th[1]));
        match kind {
            ModelKind::DoubleExponential => {
                let r = 1.0 - lam - tau;
                let t = 1.0 - tau;
                let rl1 = r.powf(l - 1.0);
                let tl1 = t.powf(l - 1.0);
                let f = k * rl1 * r + tl1 * t / dc;
                let d_lam = -k * l * rl1;
                let d_tau = -k * l * rl1 - l * tl1 / dc;
                (f, vec![d_lam * dl, d_tau * dt])
            }
            _ => {
                let s = 1.0 - lam;
                let sl1 = s.powf(l - 1.0);
                let sl2 = if l >= 2.0 { s.powf(l - 2.0) } else { 0.0 };
                let lin = 1.0 - lam - l * tau;
                let f = k * lin * sl1 + (1.0 - l * tau) / dc;
                let d_lam = k * (-sl1 - lin * (l - 1.0) * sl2);
                let d_tau = -k * l * sl1 - l / dc;
                (f, vec![d_lam * dl, d_tau * dt])
            }
        }
    };
    let mut best: Option<LmOutcome> = None;
    for &l0 in &RATE_STARTS {
        for &t0 in &RATE_STARTS {
            let out = levenberg_marquardt(&data, &[logit(l0), logit(t0)], &model);
            if best.as_ref().map_or(true, |b| out.rss < b.rss) {
                best = Some(out);
            }
        }
    }
    let out = best.expect("nonempty multistart");
    if !out.converged {
        return Err(Error::Fit(format!("{kind} fit did not converge in {MAX_ITER} iterations")));
    }
    let (s2, red) = covariance_scale(&data, out.rss, 2);
    let (inv, singular) = invert_psd(&out.jtj);
    let (lam, tau) = (sigmoid(out.theta[0]), sigmoid(out.theta[1]));
    let dmat = DMatrix::from_diagonal(&DVector::from_vec(vec![lam * sigmoid(-out.theta[0]), tau * sigmoid(-out.theta[1])]));
    let cov = &dmat * inv.scale(s2) * &dmat;
    let mut flags = vec![];
    if singular {
        flags.push("singular-jacobian".to_string());
    }
    if kind == ModelKind::DoubleExponential {
        // The two decay rates are λ+τ and τ; they differ by λ.
        let se = cov[(0, 0)].max(0.0).sqrt();
        if lam < 10.0 * se {
            flags.push("indistinguishable-exponents".into());
        }
    }
    if kind == ModelKind::CompDominantProduct {
        let lmax = data.x.iter().cloned().fold(0.0, f64::max);
        if lmax * tau > 0.1 {
            flags.push("leak-guard-violated".into());
        }
    }
    Ok(FitResult {
        model: kind,
        estimator: Some(curve.estimator),
        d_c,
        param_names: kind.param_names().iter().map(|s| s.to_string()).collect(),
        params: vec![lam, tau],
        covariance: symmetrize(&cov),
        rss: out.rss,
        reduced_chi2: red,
        converged: true,
        iterations: out.iterations,
        n_points: data.n(),
        weighted: data.weighted,
        flags,
    })
}

/// ((d_C−1)/d_C)(1−λ−τ)^ℓ + (1/d_C)(1−τ)^ℓ.
pub fn fit_double_exponential(curve: &DecayCurve) -> Result<FitResult> {
    fit_two_rate(curve, ModelKind::DoubleExponential)
}

/// ((d_C−1)/d_C)(1−λ−ℓτ)(1−λ)^(ℓ−1) + (1−ℓτ)/d_C.
pub fn fit_comp_dominant(curve: &DecayCurve) -> Result<FitResult> {
    fit_two_rate(curve, ModelKind::CompDominantProduct)
}

/// Two-exponential form fitted directly in (r, t), without the r ≤ t
/// constraint. Returns [r, t].
pub fn fit_double_exponential_rt(curve: &DecayCurve) -> Result<Vec<f64>> {
    let data = check_points(curve, 4, "double-exponential (r, t)")?;
    let dc = curve.d_c as f64;
    let k = (dc - 1.0) / dc;
    let model = |th: &[f64], l: f64| {
        let (r, t) = (sigmoid(th[0]), sigmoid(th[1]));
        let (dr, dt) = (r * sigmoid(-th[0]), t * sigmoid(-th[1]));
        let (rl1, tl1) = (r.powf(l - 1.0), t.powf(l - 1.0));
        (k * rl1 * r + tl1 * t / dc, vec![k * l * rl1 * dr, l * tl1 / dc * dt])
    };
    let mut best: Option<LmOutcome> = None;
    for &a in &RATE_STARTS {
        for &b in &RATE_STARTS {
            let out = levenberg_marquardt(&data, &[logit(1.0 - a - b), logit(1.0 - b)], &model);
            if best.as_ref().map_or(true, |x| out.rss < x.rss) {
                best = Some(out);
            }
        }
    }
    let out = best.expect("nonempty multistart");
    Ok(vec![sigmoid(out.theta[0]), sigmoid(out.theta[1])])
}

/// Dispatch on the model name. Exponential floors follow the model: 1/d_C
/// for survival curves, 0 for retention.
pub fn fit_model(curve: &DecayCurve, model: ModelKind) -> Result<FitResult> {
    match model {
        ModelKind::Linear => fit_linear(curve),
        ModelKind::RetentionLinear => fit_retention_linear(curve),
        ModelKind::ExponentialPlusFloor => fit_exponential(curve, Floor::Fixed(1.0 / curve.d_c as f64)),
        ModelKind::RetentionExponential => fit_retention_exponential(curve),
        ModelKind::DoubleExponential => fit_double_exponential(curve),
        ModelKind::CompDominantProduct => fit_comp_dominant(curve),
    }
}

/// Curve and model each (protocol, regime) cell fits. With
/// `retention_for_ic`, Avg. MB reads t from the gadget retention curve
/// instead of the computational identity measurement.
pub fn cell_fits(protocol: Protocol, regime: Regime, retention_for_ic: bool) -> Result<Vec<(Estimator, ModelKind)>> {
    use Estimator::*;
    use ModelKind::*;
    let t_curve = if retention_for_ic { PRetention } else { PIc };
    let cell = match (regime, protocol) {
        (Regime::Short, Protocol::CompSpam) => vec![(PComp, Linear)],
        (Regime::Short, Protocol::AvgMb) => vec![(PAvg, Linear), (t_curve, RetentionLinear)],
        (Regime::Short, Protocol::Lps) => vec![(PPost, Linear), (PRetention, RetentionLinear)],
        (Regime::Short, Protocol::Naive) => vec![(PNaive, Linear)],
        (Regime::CompDominant, Protocol::CompSpam) => vec![(PComp, CompDominantProduct)],
        (Regime::CompDominant, Protocol::AvgMb) => vec![(PAvg, ExponentialPlusFloor), (t_curve, RetentionLinear)],
        (Regime::CompDominant, Protocol::Lps) => vec![(PPost, ExponentialPlusFloor), (PRetention, RetentionLinear)],
        (Regime::NoSeepage, Protocol::CompSpam) => vec![(PComp, DoubleExponential)],
        (Regime::NoSeepage, Protocol::AvgMb) => vec![(PAvg, ExponentialPlusFloor), (t_curve, RetentionExponential)],
        (Regime::NoSeepage, Protocol::Lps) => vec![(PPost, ExponentialPlusFloor), (PRetention, RetentionExponential)],
        (Regime::PopTransfer, Protocol::AvgMb) => vec![(PAvg, ExponentialPlusFloor)],
        (_, Protocol::Naive) => vec![(PNaive, ExponentialPlusFloor)],
        (r, p) => return Err(Error::Plan(format!("no {p} analysis exists for the {r} regime"))),
    };
    Ok(cell)
}

/// Fits every curve a cell needs.
pub fn fit_cell(curves: &[DecayCurve], protocol: Protocol, regime: Regime, retention_for_ic: bool) -> Result<Vec<FitResult>> {
    cell_fits(protocol, regime, retention_for_ic)?
        .into_iter()
        .map(|(est, model)| {
            let curve = curves.iter().find(|c| c.estimator == est).ok_or_else(|| Error::MissingCurve(est.name().into()))?;
            fit_model(curve, model)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    /// One-sigma uncertainty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<f64>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub protocol: Protocol,
    pub regime: Regime,
    pub d_c: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<Quantity>,
    /// 1 − F.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infidelity: Option<Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process_fidelity: Option<Quantity>,
    /// Present when only r is identified.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<FidelityBounds>,
    pub ci_method: String,
    pub weighted_fits: bool,
    pub fits: Vec<FitResult>,
    #[serde(default)]
    pub flags: Vec<String>,
}

pub const QUANTITY_NAMES: [&str; 7] = ["r", "t", "lambda", "tau", "infidelity", "fidelity", "process_fidelity"];

impl EstimateReport {
    pub fn quantity(&self, name: &str) -> Option<&Quantity> {
        match name {
            "r" => self.r.as_ref(),
            "t" => self.t.as_ref(),
            "lambda" => self.lambda.as_ref(),
            "tau" => self.tau.as_ref(),
            "infidelity" => self.infidelity.as_ref(),
            "fidelity" => self.fidelity.as_ref(),
            "process_fidelity" => self.process_fidelity.as_ref(),
            _ => None,
        }
    }

    fn quantity_mut(&mut self, name: &str) -> Option<&mut Quantity> {
        match name {
            "r" => self.r.as_mut(),
            "t" => self.t.as_mut(),
            "lambda" => self.lambda.as_mut(),
            "tau" => self.tau.as_mut(),
            "infidelity" => self.infidelity.as_mut(),
            "fidelity" => self.fidelity.as_mut(),
            "process_fidelity" => self.process_fidelity.as_mut(),
            _ => None,
        }
    }

    /// (name, value) of every reported quantity.
    pub fn values(&self) -> BTreeMap<String, f64> {
        QUANTITY_NAMES.iter().filter_map(|n| self.quantity(n).map(|q| (n.to_string(), q.value))).collect()
    }

    /// Replaces fit-propagated uncertainties with externally computed ones.
    pub fn set_cis(&mut self, cis: &BTreeMap<String, f64>, method: &str) {
        for (name, ci) in cis {
            if let Some(q) = self.quantity_mut(name) {
                q.ci = Some(*ci);
            }
        }
        self.ci_method = method.into();
    }
}

/// What a cell identifies before clamping.
#[derive(Debug, Clone, Copy, Default)]
struct Raw {
    r: Option<f64>,
    t: Option<f64>,
    infidelity: Option<f64>,
}

fn finalize(raw: Raw, d_c: usize) -> BTreeMap<&'static str, f64> {
    let d = d_c as f64;
    let k = (d - 1.0) / d;
    let mut out = BTreeMap::new();
    match (raw.r, raw.t) {
        (Some(r), Some(t)) => {
            let t = t.clamp(0.0, 1.0);
            let r = r.clamp(0.0, t);
            let f = k * r + t / d;
            out.insert("r", r);
            out.insert("t", t);
            out.insert("lambda", t - r);
            out.insert("tau", 1.0 - t);
            out.insert("fidelity", f);
            out.insert("infidelity", 1.0 - f);
            out.insert("process_fidelity", (d * d - 1.0) / (d * d) * r + t / (d * d));
        }
        (Some(r), None) => {
            let r = r.clamp(0.0, 1.0);
            let mid = midpoint_infidelity(r, d_c);
            out.insert("r", r);
            out.insert("infidelity", mid);
            out.insert("fidelity", 1.0 - mid);
        }
        _ => {
            if let Some(inf) = raw.infidelity {
                let inf = inf.clamp(0.0, 1.0);
                out.insert("infidelity", inf);
                out.insert("fidelity", 1.0 - inf);
            }
        }
    }
    out
}

/// Combines a cell's fits into r, t, λ, τ, F and f, propagating the fit
/// covariances to first order.
pub fn assemble_report(protocol: Protocol, regime: Regime, fits: &[FitResult]) -> Result<EstimateReport> {
    let plan = cell_fits(protocol, regime, false)?;
    let d_c = fits.first().map(|f| f.d_c).ok_or_else(|| Error::MissingCurve("no fits supplied".into()))?;
    let k = (d_c as f64 - 1.0) / d_c as f64;

    // Locate each required fit; Avg. MB accepts p_retention in place of p_IC.
    let mut used: Vec<&FitResult> = vec![];
    for (est, model) in &plan {
        let found = fits.iter().find(|f| f.model == *model && f.estimator == Some(*est)).or_else(|| {
            (*est == Estimator::PIc)
                .then(|| fits.iter().find(|f| f.model == *model && f.estimator == Some(Estimator::PRetention)))
                .flatten()
        });
        used.push(found.ok_or_else(|| Error::MissingCurve(format!("{est} {model} fit")))?);
    }
    let offsets: Vec<usize> = used.iter().scan(0, |acc, f| {
        let o = *acc;
        *acc += f.params.len();
        Some(o)
    }).collect();
    let x0: Vec<f64> = used.iter().flat_map(|f| f.params.iter().copied()).collect();
    let get = |x: &[f64], i: usize, name: &str| -> f64 {
        let f = used[i];
        x[offsets[i] + f.param_names.iter().position(|n| n == name).expect("model parameter")]
    };

    let src = |i: usize, what: &str| format!("{} {}: {what}", used[i].estimator.map(|e| e.name()).unwrap_or("?"), used[i].model);
    let mut sources: BTreeMap<&'static str, String> = BTreeMap::new();
    let compute = |x: &[f64]| -> Raw {
        match (regime, protocol) {
            (_, Protocol::Naive) => match regime {
                Regime::Short => Raw { infidelity: Some(-get(x, 0, "slope")), ..Raw::default() },
                _ => Raw { infidelity: Some(k * (1.0 - get(x, 0, "p"))), ..Raw::default() },
            },
            (Regime::Short, Protocol::CompSpam) => Raw { infidelity: Some(-get(x, 0, "slope")), ..Raw::default() },
            (Regime::Short, Protocol::AvgMb) => {
                let tau = -get(x, 1, "slope");
                Raw { r: Some(1.0 + get(x, 0, "slope") / k), t: Some(1.0 - tau), infidelity: None }
            }
            (Regime::Short, Protocol::Lps) => {
                let lam = -get(x, 0, "slope") / k;
                let t = 1.0 + get(x, 1, "slope");
                Raw { r: Some(t - lam), t: Some(t), infidelity: None }
            }
            (Regime::CompDominant | Regime::NoSeepage, Protocol::CompSpam) => {
                let (lam, tau) = (get(x, 0, "lambda"), get(x, 0, "tau"));
                Raw { r: Some(1.0 - lam - tau), t: Some(1.0 - tau), infidelity: None }
            }
            (Regime::CompDominant, Protocol::AvgMb) => {
                Raw { r: Some(get(x, 0, "p")), t: Some(1.0 + get(x, 1, "slope")), infidelity: None }
            }
            (Regime::CompDominant, Protocol::Lps) => {
                let lam = 1.0 - get(x, 0, "p");
                let t = 1.0 + get(x, 1, "slope");
                Raw { r: Some(t - lam), t: Some(t), infidelity: None }
            }
            (Regime::NoSeepage, Protocol::AvgMb) => Raw { r: Some(get(x, 0, "p")), t: Some(get(x, 1, "p")), infidelity: None },
            (Regime::NoSeepage, Protocol::Lps) => {
                let t = get(x, 1, "p");
                Raw { r: Some(t * get(x, 0, "p")), t: Some(t), infidelity: None }
            }
            (Regime::PopTransfer, _) => Raw { r: Some(get(x, 0, "p")), ..Raw::default() },
        }
    };
    match (regime, protocol) {
        (_, Protocol::Naive) | (Regime::Short, Protocol::CompSpam) => {
            sources.insert("infidelity", src(0, if regime == Regime::Short { "−slope" } else { "((d_C−1)/d_C)(1−p)" }));
        }
        (Regime::CompDominant | Regime::NoSeepage, Protocol::CompSpam) => {
            sources.insert("r", src(0, "1 − λ − τ"));
            sources.insert("t", src(0, "1 − τ"));
        }
        (Regime::Short, Protocol::AvgMb) => {
            sources.insert("r", src(0, "1 + slope·d_C/(d_C−1)"));
            sources.insert("t", src(1, "1 + slope"));
        }
        (Regime::Short, Protocol::Lps) => {
            sources.insert("r", format!("t − λ with λ from {}", src(0, "−slope·d_C/(d_C−1)")));
            sources.insert("t", src(1, "1 + slope"));
        }
        (Regime::CompDominant, Protocol::AvgMb) => {
            sources.insert("r", src(0, "p"));
            sources.insert("t", src(1, "1 + slope"));
        }
        (Regime::CompDominant, Protocol::Lps) => {
            sources.insert("r", format!("t − λ with λ from {}", src(0, "1 − p")));
            sources.insert("t", src(1, "1 + slope"));
        }
        (Regime::NoSeepage, Protocol::AvgMb) => {
            sources.insert("r", src(0, "p"));
            sources.insert("t", src(1, "p"));
        }
        (Regime::NoSeepage, Protocol::Lps) => {
            sources.insert("r", format!("t·(r/t) with r/t from {}", src(0, "p")));
            sources.insert("t", src(1, "p"));
        }
        (Regime::PopTransfer, _) => {
            sources.insert("r", src(0, "p"));
            sources.insert("infidelity", "midpoint of the fidelity bounds".into());
        }
    }

    let center = finalize(compute(&x0), d_c);
    // Block-diagonal covariance over all used parameters.
    let n = x0.len();
    let mut cov = DMatrix::zeros(n, n);
    for (i, f) in used.iter().enumerate() {
        for a in 0..f.params.len() {
            for b in 0..f.params.len() {
                cov[(offsets[i] + a, offsets[i] + b)] = f.covariance[a][b];
            }
        }
    }
    let mut grads: BTreeMap<&'static str, Vec<f64>> = center.keys().map(|k| (*k, vec![0.0; n])).collect();
    for j in 0..n {
        let h = 1e-7 * x0[j].abs().max(1e-3);
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (finalize(compute(&xp), d_c), finalize(compute(&xm), d_c));
        for (name, g) in grads.iter_mut() {
            if let (Some(a), Some(b)) = (fp.get(name), fm.get(name)) {
                g[j] = (a - b) / (2.0 * h);
            }
        }
    }
    let ci_of = |name: &str| -> f64 {
        let g = DVector::from_column_slice(&grads[name]);
        (g.transpose() * &cov * &g)[(0, 0)].max(0.0).sqrt()
    };
    let quantity = |name: &'static str| -> Option<Quantity> {
        center.get(name).map(|v| Quantity {
            value: *v,
            ci: Some(ci_of(name)),
            source: sources.get(name).cloned().unwrap_or_else(|| match name {
                "lambda" => "t − r".into(),
                "tau" => "1 − t".into(),
                "fidelity" if center.contains_key("t") => "((d_C−1)/d_C)·r + t/d_C".into(),
                "process_fidelity" => "((d_C²−1)/d_C²)·r + t/d_C²".into(),
                "fidelity" | "infidelity" => sources.get("infidelity").cloned().unwrap_or_else(|| "1 − F".into()),
                _ => "derived".into(),
            }),
        })
    };

    let mut flags: Vec<String> = vec![];
    for f in &used {
        for fl in &f.flags {
            flags.push(format!("{}: {fl}", f.estimator.map(|e| e.name()).unwrap_or("?")));
        }
    }
    let raw = compute(&x0);
    if let (Some(r), Some(t)) = (raw.r, raw.t) {
        if r > t || t > 1.0 || r < 0.0 || t < 0.0 {
            flags.push(format!("clamped to 0 ≤ r ≤ t ≤ 1 (raw r = {r:.6e}, t = {t:.6e})"));
        }
    }
    if protocol == Protocol::Naive {
        flags.push("leakage ignored: infidelity may be underestimated".into());
    }
    let bounds = (center.contains_key("r") && !center.contains_key("t")).then(|| fidelity_bounds(center["r"], d_c));

    Ok(EstimateReport {
        protocol,
        regime,
        d_c,
        r: quantity("r"),
        t: quantity("t"),
        lambda: quantity("lambda"),
        tau: quantity("tau"),
        infidelity: quantity("infidelity"),
        fidelity: quantity("fidelity"),
        process_fidelity: quantity("process_fidelity"),
        bounds,
        ci_method: "fit-covariance".into(),
        weighted_fits: used.iter().all(|f| f.weighted),
        fits: used.into_iter().cloned().collect(),
        flags,
    })
}

/// Fits and assembles in one step.
pub fn estimate_cell(curves: &[DecayCurve], protocol: Protocol, regime: Regime, retention_for_ic: bool) -> Result<EstimateReport> {
    let fits = fit_cell(curves, protocol, regime, retention_for_ic)?;
    assemble_report(protocol, regime, &fits)
}

pub const DEFAULT_RESAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub n_resamples: usize,
    /// Resamples on which the pipeline failed; they are left out of `sd`.
    pub n_failed: usize,
    pub seed: u64,
    /// Standard deviation of each reported quantity across resamples.
    pub sd: BTreeMap<String, f64>,
}

/// Multinomial redraw via successive conditional binomials.
fn multinomial(n: u64, weights: &[u64], rng: &mut ChaCha8Rng) -> Vec<u64> {
    let mut left = n;
    let mut mass: u64 = weights.iter().sum();
    let mut out = Vec::with_capacity(weights.len());
    for &w in weights {
        if left == 0 || mass == 0 {
            out.push(0);
            continue;
        }
        let p = (w as f64 / mass as f64).clamp(0.0, 1.0);
        let x = Binomial::new(left, p).map(|b| b.sample(rng)).unwrap_or(0);
        out.push(x);
        left -= x;
        mass -= w;
    }
    out
}

fn redraw(rec: &CircuitRecord, rng: &mut ChaCha8Rng) -> CircuitRecord {
    let mut out = rec.clone();
    let n = rec.total();
    if let Some(g) = &rec.gadget_counts {
        let draws = multinomial(n, &g.iter().map(|x| x.count).collect::<Vec<_>>(), rng);
        let mut counts: BTreeMap<String, u64> = rec.counts.keys().map(|k| (k.clone(), 0)).collect();
        let mut gc = g.clone();
        for (x, c) in gc.iter_mut().zip(draws) {
            x.count = c;
            *counts.entry(x.outcome.clone()).or_default() += c;
        }
        out.gadget_counts = Some(gc);
        out.counts = counts;
    } else {
        let keys: Vec<String> = rec.counts.keys().cloned().collect();
        let draws = multinomial(n, &rec.counts.values().copied().collect::<Vec<_>>(), rng);
        out.counts = keys.into_iter().zip(draws).collect();
    }
    out
}

/// One semi-parametric resample: sequences drawn with replacement within
/// each length, then every kept circuit's counts redrawn at its empirical
/// frequencies.
pub fn resample_dataset(ds: &RBDataset, rng: &mut ChaCha8Rng) -> RBDataset {
    let mut grouped: BTreeMap<usize, BTreeMap<usize, Vec<&CircuitRecord>>> = BTreeMap::new();
    for rec in &ds.circuits {
        grouped.entry(rec.length).or_default().entry(rec.sequence_id).or_default().push(rec);
    }
    let mut circuits = Vec::with_capacity(ds.circuits.len());
    for seqs in grouped.values() {
        let ids: Vec<&Vec<&CircuitRecord>> = seqs.values().collect();
        for j in 0..ids.len() {
            let pick = ids[rng.gen_range(0..ids.len())];
            for rec in pick {
                let mut r = redraw(rec, rng);
                r.sequence_id = j;
                circuits.push(r);
            }
        }
    }
    RBDataset { circuits, ..ds.clone() }
}

/// Standard deviation of the pipeline's outputs over `n_resamples`
/// resamples, run in parallel with per-resample seeds.
pub fn bootstrap<F>(ds: &RBDataset, pipeline: F, n_resamples: usize, seed: u64) -> Result<BootstrapSummary>
where
    F: Fn(&RBDataset) -> Result<EstimateReport> + Sync,
{
    if n_resamples < 100 {
        return Err(Error::InvalidArgument(format!("bootstrap needs ≥ 100 resamples, got {n_resamples}")));
    }
    let outs: Vec<Option<BTreeMap<String, f64>>> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(task_seed(seed, b, 0, 0));
            pipeline(&resample_dataset(ds, &mut rng)).ok().map(|r| r.values())
        })
        .collect();
    let ok: Vec<&BTreeMap<String, f64>> = outs.iter().flatten().collect();
    let n_failed = n_resamples - ok.len();
    if ok.len() < 2 {
        return Err(Error::Fit(format!("bootstrap: {n_failed} of {n_resamples} resamples failed")));
    }
    let mut sd = BTreeMap::new();
    for name in QUANTITY_NAMES {
        let vals: Vec<f64> = ok.iter().filter_map(|m| m.get(name).copied()).collect();
        if vals.len() >= 2 {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            sd.insert(name.to_string(), (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        }
    }
    if n_failed > 0 {
        log::warn!("bootstrap: dropped {n_failed} failed resamples");
    }
    Ok(BootstrapSummary { n_resamples, n_failed, seed, sd })
}

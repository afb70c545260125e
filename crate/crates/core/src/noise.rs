//! Error channels, readout POVMs and the leakage-gadget model.
//!
//! The total error is the generator sum ℐ + (Λ_dep − ℐ) + (Λ_L^⊗n − ℐ).
//! Both components are built as exact Kraus maps rather than single Euler
//! steps so that every piece is CP on its own; see `leakage_channel`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{QuantumChannel, CP_TOL, TP_TOL};
use crate::clifford::{kron_all, pauli_strings};
use crate::error::{Error, Result};
use crate::space::{c, CMat, DensityOperator, ObservableOperator, SpaceLayout};

pub const MAX_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionMode {
    #[default]
    GeneratorAdditive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeakAssignment {
    /// Each leaked qubit reads as this classical bit.
    PerQubit(char),
    /// Explicit map from leak labels ("0l", "ll", ...) to bitstrings.
    Patterns(BTreeMap<String, String>),
}

impl Default for LeakAssignment {
    fn default() -> Self {
        LeakAssignment::PerQubit('1')
    }
}

impl LeakAssignment {
    /// Every leak pattern reads as `reference` (naive RB with Π_L = 𝟙_L on the
    /// accepted outcome).
    pub fn all_to(reference: &str, layout: &SpaceLayout) -> Self {
        LeakAssignment::Patterns(layout.leak_indices().into_iter().map(|i| (layout.label_of(i), reference.to_string())).collect())
    }

    fn classical(&self, label: &str) -> Result<String> {
        match self {
            LeakAssignment::PerQubit(bit) => {
                if *bit != '0' && *bit != '1' {
                    return Err(Error::InvalidArgument(format!("leak assignment bit {bit:?}")));
                }
                Ok(label.chars().map(|ch| if ch == 'l' { *bit } else { ch }).collect())
            }
            LeakAssignment::Patterns(map) => map
                .get(label)
                .cloned()
                .ok_or_else(|| Error::IncompletePovm(format!("leak pattern {label:?} has no assigned outcome"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GadgetConfig {
    #[serde(default)]
    pub false_negative: f64,
    #[serde(default)]
    pub false_positive: f64,
    /// Copies of the total error channel applied before the gadget and readout.
    #[serde(default = "default_extra_copies")]
    pub extra_error_copies: usize,
}

fn default_extra_copies() -> usize {
    2
}

impl Default for GadgetConfig {
    fn default() -> Self {
        GadgetConfig { false_negative: 0.0, false_positive: 0.0, extra_error_copies: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct GadgetModel {
    pub false_negative: f64,
    pub false_positive: f64,
    pub extra_channels: Vec<QuantumChannel>,
}

impl GadgetModel {
    pub fn ideal() -> Self {
        GadgetModel { false_negative: 0.0, false_positive: 0.0, extra_channels: vec![] }
    }

    /// P(observed bit = 1 | qubit leaked or not).
    pub fn flag_probability(&self, leaked: bool) -> f64 {
        if leaked {
            1.0 - self.false_negative
        } else {
            self.false_positive
        }
    }

    /// Distribution over observed patterns (index = bitmask, qubit 0 most
    /// significant) given the true per-qubit leak pattern.
    pub fn pattern_distribution(&self, leaked: &[bool]) -> Vec<f64> {
        let n = leaked.len();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|q| {
                        let p1 = self.flag_probability(leaked[q]);
                        if (mask >> (n - 1 - q)) & 1 == 1 {
                            p1
                        } else {
                            1.0 - p1
                        }
                    })
                    .product()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub lambda_s: f64,
    pub tau_s: f64,
    #[serde(default = "yes")]
    pub seepage_enabled: bool,
    #[serde(default)]
    pub readout_flip: f64,
    #[serde(default)]
    pub leak_readout_assignment: LeakAssignment,
    #[serde(default)]
    pub gadget: Option<GadgetConfig>,
    #[serde(default)]
    pub composition_mode: CompositionMode,
}

fn yes() -> bool {
    true
}

impl NoiseModel {
    pub fn new(lambda_s: f64, tau_s: f64, seepage_enabled: bool) -> Self {
        NoiseModel {
            lambda_s,
            tau_s,
            seepage_enabled,
            readout_flip: 0.0,
            leak_readout_assignment: LeakAssignment::default(),
            gadget: None,
            composition_mode: CompositionMode::GeneratorAdditive,
        }
    }

    /// Simulation model with readout flips at λ_s and the default gadget.
    pub fn simulation_default(lambda_s: f64, tau_s: f64, seepage_enabled: bool) -> Self {
        NoiseModel { readout_flip: lambda_s, gadget: Some(GadgetConfig::default()), ..Self::new(lambda_s, tau_s, seepage_enabled) }
    }

    pub fn noiseless() -> Self {
        Self::new(0.0, 0.0, true)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_s", self.lambda_s), ("tau_s", self.tau_s), ("readout_flip", self.readout_flip)] {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(Error::OutOfRange(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if let Some(g) = &self.gadget {
            for (name, v) in [("false_negative", g.false_negative), ("false_positive", g.false_positive)] {
                if !(0.0..=1.0).contains(&v) || v.is_nan() {
                    return Err(Error::OutOfRange(format!("gadget {name} = {v} not in [0, 1]")));
                }
            }
        }
        Ok(())
    }

    pub fn gadget_model(&self, total: &QuantumChannel) -> GadgetModel {
        let cfg = self.gadget.unwrap_or_default();
        GadgetModel {
            false_negative: cfg.false_negative,
            false_positive: cfg.false_positive,
            extra_channels: vec![total.clone(); cfg.extra_error_copies],
        }
    }
}

/// Depolarizes χ_C, fixes χ_L. Kraus set: √p_I·𝟙, √(λ/d_C²)·(P ⊕ 0) for the
/// non-identity Paulis, √(1−p_I)·(0 ⊕ 𝟙_L), with p_I = 1 − λ(d_C²−1)/d_C².
/// C–L coherences are damped by √p_I, which is the price of complete positivity.
pub fn depolarizing_channel(lambda_s: f64, layout: &SpaceLayout) -> Result<QuantumChannel> {
    if !(0.0..=1.0).contains(&lambda_s) || lambda_s.is_nan() {
        return Err(Error::OutOfRange(format!("lambda_s = {lambda_s}")));
    }
    let dc2 = (layout.d_c * layout.d_c) as f64;
    let p_i = 1.0 - lambda_s * (dc2 - 1.0) / dc2;
    let mut kraus = vec![CMat::identity(layout.d, layout.d).scale(p_i.sqrt())];
    for p in pauli_strings(layout.n_qubits).iter().skip(1) {
        kraus.push(layout.embed_comp(p).scale((lambda_s / dc2).sqrt()));
    }
    let (_, il) = crate::space::subspace_projectors(layout);
    kraus.push(il.matrix.scale((1.0 - p_i).max(0.0).sqrt()));
    QuantumChannel::from_kraus(*layout, &kraus)?.check_tp()
}

/// Per-qubit leakage probability so that the n-qubit product keeps
/// computational population exactly 1 − τ_s.
pub fn per_qubit_leak_probability(tau_s: f64, n_qubits: usize) -> f64 {
    1.0 - (1.0 - tau_s).powf(1.0 / n_qubits as f64)
}

fn qutrit_leak_kraus(g: f64, seepage: bool) -> Vec<CMat> {
    let unit = |i: usize, j: usize, w: f64| {
        let mut m = CMat::zeros(3, 3);
        m[(i, j)] = c(w, 0.0);
        m
    };
    let mut k = vec![CMat::identity(3, 3).scale((1.0 - g).sqrt()), unit(2, 0, g.sqrt()), unit(2, 1, g.sqrt())];
    if seepage {
        k.push(unit(0, 2, (g / 2.0).sqrt()));
        k.push(unit(1, 2, (g / 2.0).sqrt()));
    } else {
        // Keeps |l⟩ fixed and TP; only dephases |l⟩ against χ_C.
        k.push(unit(2, 2, g.sqrt()));
    }
    k
}

/// Incoherent leakage |i⟩→|l⟩ (and seepage |l⟩→|i⟩ at half rate per level)
/// on every qutrit, as an exact Kraus map that agrees with one Euler step of
/// the Lindblad evolution to first order.
pub fn leakage_channel(tau_s: f64, seepage: bool, layout: &SpaceLayout) -> Result<QuantumChannel> {
    if !(0.0..=MAX_TAU).contains(&tau_s) || tau_s.is_nan() {
        return Err(Error::OutOfRange(format!("tau_s = {tau_s} outside [0, {MAX_TAU}]")));
    }
    let g = per_qubit_leak_probability(tau_s, layout.n_qubits);
    let single = qutrit_leak_kraus(g, seepage);
    let mut kraus: Vec<CMat> = vec![];
    let n = layout.n_qubits;
    let m = single.len();
    for idx in 0..m.pow(n as u32) {
        let ops: Vec<CMat> = (0..n).map(|q| single[(idx / m.pow((n - 1 - q) as u32)) % m].clone()).collect();
        kraus.push(kron_all(&ops));
    }
    QuantumChannel::from_kraus(*layout, &kraus)?.check_tp()
}

pub fn total_error_channel(nm: &NoiseModel, layout: &SpaceLayout) -> Result<QuantumChannel> {
    nm.validate()?;
    let dep = depolarizing_channel(nm.lambda_s, layout)?;
    let leak = leakage_channel(nm.tau_s, nm.seepage_enabled, layout)?;
    let total = QuantumChannel::generator_sum(&[&dep, &leak])?;
    let dev = total.tp_defect();
    if dev > TP_TOL {
        return Err(Error::NotTracePreserving(dev));
    }
    let ev = total.min_choi_eigenvalue();
    if ev < -CP_TOL {
        return Err(Error::NotCompletelyPositive(ev));
    }
    Ok(QuantumChannel { cp_checked: true, tp_flag: true, ..total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutKind {
    ComputationalOnly,
    LeakAssigned,
    LeakResolving,
}

pub const DISCARD: &str = "discard";

/// Diagonal POVM. `effects[o][i]` is ⟨i|Π_o|i⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub layout: SpaceLayout,
    pub kind: ReadoutKind,
    pub labels: Vec<String>,
    pub effects: Vec<Vec<f64>>,
}

impl MeasurementModel {
    pub fn outcome_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn povm(&self) -> Vec<(String, ObservableOperator)> {
        self.labels
            .iter()
            .zip(&self.effects)
            .map(|(l, e)| (l.clone(), ObservableOperator::from_diagonal(self.layout, e)))
            .collect()
    }

    /// Outcome probabilities for a state with the given basis populations.
    pub fn probabilities(&self, populations: &[f64]) -> Vec<f64> {
        self.effects.iter().map(|e| e.iter().zip(populations).map(|(a, b)| a * b).sum()).collect()
    }

    /// P(outcome | basis state i).
    pub fn conditional(&self, i: usize) -> Vec<f64> {
        self.effects.iter().map(|e| e[i]).collect()
    }

    pub fn completeness_defect(&self) -> f64 {
        (0..self.layout.d)
            .map(|i| (self.effects.iter().map(|e| e[i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Bit-flip noise on the '0'/'1' symbols of a label; 'l' symbols are untouched.
fn flipped_distribution(label: &str, p: f64) -> Vec<(String, f64)> {
    let chars: Vec<char> = label.chars().collect();
    let binary: Vec<usize> = (0..chars.len()).filter(|&i| chars[i] == '0' || chars[i] == '1').collect();
    let mut out = vec![];
    for mask in 0..1usize << binary.len() {
        let mut cs = chars.clone();
        let mut prob = 1.0;
        for (bit, &pos) in binary.iter().enumerate() {
            if (mask >> bit) & 1 == 1 {
                cs[pos] = if cs[pos] == '0' { '1' } else { '0' };
                prob *= p;
            } else {
                prob *= 1.0 - p;
            }
        }
        if prob > 0.0 {
            out.push((cs.into_iter().collect(), prob));
        }
    }
    out
}

pub fn readout_model(nm: &NoiseModel, layout: &SpaceLayout, kind: ReadoutKind) -> Result<MeasurementModel> {
    if !(0.0..=1.0).contains(&nm.readout_flip) {
        return Err(Error::OutOfRange(format!("readout_flip = {}", nm.readout_flip)));
    }
    let mut labels: Vec<String> = (0..layout.d_c).map(|k| layout.comp_label(k)).collect();
    match kind {
        ReadoutKind::ComputationalOnly => labels.push(DISCARD.into()),
        ReadoutKind::LeakAssigned => {}
        ReadoutKind::LeakResolving => labels.extend(layout.leak_indices().into_iter().map(|i| layout.label_of(i))),
    }
    let mut effects = vec![vec![0.0; layout.d]; labels.len()];
    for i in 0..layout.d {
        let raw = layout.label_of(i);
        let ideal = if layout.is_computational(i) {
            Some(raw.clone())
        } else {
            match kind {
                ReadoutKind::ComputationalOnly => None,
                ReadoutKind::LeakAssigned => Some(nm.leak_readout_assignment.classical(&raw)?),
                ReadoutKind::LeakResolving => Some(raw.clone()),
            }
        };
        match ideal {
            None => effects[labels.len() - 1][i] = 1.0,
            Some(lab) => {
                for (o, p) in flipped_distribution(&lab, nm.readout_flip) {
                    let k = labels
                        .iter()
                        .position(|l| *l == o)
                        .ok_or_else(|| Error::IncompletePovm(format!("outcome {o:?} is not a valid label")))?;
                    effects[k][i] += p;
                }
            }
        }
    }
    let mm = MeasurementModel { layout: *layout, kind, labels, effects };
    let dev = mm.completeness_defect();
    if dev > 1e-10 {
        return Err(Error::IncompletePovm(format!("effects sum deviates from identity by {dev:.2e}")));
    }
    Ok(mm)
}

/// Leak flags per qubit: extra channels, then a basis-state draw from the
/// populations, then false-negative/false-positive flips.
pub fn gadget_outcomes<R: Rng + ?Sized>(state: &DensityOperator, g: &GadgetModel, rng: &mut R) -> Result<Vec<bool>> {
    let mut rho = state.clone();
    for ch in &g.extra_channels {
        rho = ch.apply(&rho)?;
    }
    let pops = rho.diagonal();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut pick = pops.len() - 1;
    for (i, p) in pops.iter().enumerate() {
        acc += p.max(0.0);
        if u < acc {
            pick = i;
            break;
        }
    }
    let leaked = rho.layout.leak_pattern(pick);
    Ok(leaked.into_iter().map(|l| rng.gen::<f64>() < g.flag_probability(l)).collect())
}

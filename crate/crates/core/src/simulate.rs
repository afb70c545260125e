//! Noisy Clifford-sequence simulation, shot sampling and the survival
//! estimators of the four protocols.
//!
//! A circuit is: ρ_in, then for each Clifford its ideal unitary followed by
//! the total error channel, then the final gate Q_k·C_inv followed by the
//! same error channel, then (when a gadget is modelled) its extra error
//! channels, then a diagonal POVM together with the gadget flags.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::QuantumChannel;
use crate::clifford::{
    clifford_group, compile_all, extend_to_full_space, permutation_gate, CliffordElement, CliffordGroup, GateSet,
    LeakPolicy,
};
use crate::dataset::{CircuitRecord, GadgetCount, Metadata, RBDataset, DATASET_SCHEMA};
use crate::error::{Error, Result};
use crate::noise::{readout_model, total_error_channel, GadgetModel, MeasurementModel, NoiseModel, ReadoutKind};
use crate::space::{c, CMat, SpaceLayout};
use crate::twirl::{twirl, twirl_over};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    CompSpam,
    AvgMb,
    Lps,
    Naive,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::CompSpam, Protocol::AvgMb, Protocol::Lps, Protocol::Naive];

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::CompSpam => "comp-spam",
            Protocol::AvgMb => "avg-mb",
            Protocol::Lps => "lps",
            Protocol::Naive => "naive",
        }
    }

    pub fn default_readout(&self) -> ReadoutKind {
        match self {
            Protocol::CompSpam => ReadoutKind::ComputationalOnly,
            _ => ReadoutKind::LeakAssigned,
        }
    }

    fn accepts(&self, kind: ReadoutKind) -> bool {
        match self {
            Protocol::CompSpam => kind == ReadoutKind::ComputationalOnly,
            Protocol::AvgMb | Protocol::Naive => kind == ReadoutKind::LeakAssigned,
            Protocol::Lps => true,
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown protocol {s:?}")))
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_SEQUENCES: usize = 30;
pub const DEFAULT_SHOTS: usize = 200;

fn default_sequences() -> usize {
    DEFAULT_SEQUENCES
}
fn default_shots() -> usize {
    DEFAULT_SHOTS
}
fn default_qubits() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RBProtocolConfig {
    pub protocol: Protocol,
    pub lengths: Vec<usize>,
    #[serde(default = "default_sequences")]
    pub n_sequences: usize,
    #[serde(default = "default_shots")]
    pub n_shots: usize,
    #[serde(default)]
    pub rng_seed: u64,
    pub noise: NoiseModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout: Option<ReadoutKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default = "default_qubits")]
    pub n_qubits: usize,
    #[serde(default)]
    pub leak_policy: LeakPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateset: Option<String>,
}

impl RBProtocolConfig {
    pub fn new(protocol: Protocol, lengths: Vec<usize>, noise: NoiseModel, rng_seed: u64) -> Self {
        RBProtocolConfig {
            protocol,
            lengths,
            n_sequences: DEFAULT_SEQUENCES,
            n_shots: DEFAULT_SHOTS,
            rng_seed,
            noise,
            readout: None,
            reference: None,
            n_qubits: 2,
            leak_policy: LeakPolicy::IdentityOnLeak,
            gateset: None,
        }
    }

    pub fn readout_kind(&self) -> ReadoutKind {
        self.readout.unwrap_or_else(|| self.protocol.default_readout())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::InvalidArgument("lengths must be nonempty and ≥ 1".into()));
        }
        if self.n_sequences == 0 || self.n_shots == 0 {
            return Err(Error::InvalidArgument("n_sequences and n_shots must be ≥ 1".into()));
        }
        if !self.protocol.accepts(self.readout_kind()) {
            return Err(Error::ProtocolMismatch(format!(
                "{} cannot use {:?} readout",
                self.protocol,
                self.readout_kind()
            )));
        }
        self.noise.validate()
    }

    fn uses_gadget(&self) -> bool {
        self.protocol == Protocol::Lps || self.noise.gadget.is_some()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one (length, sequence, variant) task; variant 0 draws the gates.
pub fn task_seed(seed: u64, length: usize, sequence: usize, variant: usize) -> u64 {
    let mut h = splitmix64(seed);
    for v in [length as u64, sequence as u64, variant as u64] {
        h = splitmix64(h ^ v);
    }
    h
}

/// Superoperator as a list of nonzero entries, used in the hot loop.
#[derive(Debug, Clone)]
struct SparseSuperop {
    d: usize,
    entries: Vec<(usize, usize, num_complex::Complex64)>,
}

impl SparseSuperop {
    fn new(ch: &QuantumChannel) -> Self {
        let n = ch.superop.nrows();
        let mut entries = vec![];
        for col in 0..n {
            for row in 0..n {
                let v = ch.superop[(row, col)];
                if v.norm() > 1e-15 {
                    entries.push((row, col, v));
                }
            }
        }
        SparseSuperop { d: ch.layout.d, entries }
    }

    fn apply(&self, rho: &CMat) -> CMat {
        let src = rho.as_slice();
        let mut out = vec![c(0.0, 0.0); self.d * self.d];
        for &(r, col, v) in &self.entries {
            out[r] += v * src[col];
        }
        CMat::from_vec(self.d, self.d, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExactMode {
    /// Tr[Π Λ̄^ℓ(ρ_in)] with ideal readout: no final-gate error, no flips,
    /// no gadget channels.
    Ideal,
    /// Mirrors the shot simulator: final error, gadget channels, readout flips.
    WithSpam,
}

/// One measured circuit variant: joint weights over (outcome, gadget flags).
#[derive(Debug, Clone)]
pub struct Observation {
    pub permutation: Option<usize>,
    pub accepted: String,
    pub joint: Vec<(String, Option<String>, f64)>,
}

impl Observation {
    fn total(&self, clean_only: bool) -> f64 {
        self.joint.iter().filter(|e| !clean_only || is_clean(&e.1)).map(|e| e.2).sum()
    }

    fn weight_of(&self, label: &str, clean_only: bool) -> f64 {
        self.joint.iter().filter(|e| e.0 == label && (!clean_only || is_clean(&e.1))).map(|e| e.2).sum()
    }

    fn has_gadget(&self) -> bool {
        self.joint.iter().all(|e| e.1.is_some())
    }

    pub fn from_record(rec: &CircuitRecord, accepted: String) -> Self {
        let joint = match &rec.gadget_counts {
            Some(g) => g.iter().map(|x| (x.outcome.clone(), Some(x.gadget.clone()), x.count as f64)).collect(),
            None => rec.counts.iter().map(|(o, &n)| (o.clone(), None, n as f64)).collect(),
        };
        Observation { permutation: rec.permutation, accepted, joint }
    }
}

fn is_clean(g: &Option<String>) -> bool {
    g.as_deref().is_some_and(|s| s.chars().all(|ch| ch == '0'))
}

pub struct Simulator {
    pub cfg: RBProtocolConfig,
    pub layout: SpaceLayout,
    pub group: &'static CliffordGroup,
    unitaries: Vec<CMat>,
    extended: Option<Vec<CliffordElement>>,
    pub channel: QuantumChannel,
    sparse: SparseSuperop,
    pub measurement: MeasurementModel,
    ideal_measurement: MeasurementModel,
    pub gadget: Option<GadgetModel>,
    reference: usize,
    twirled: OnceLock<QuantumChannel>,
}

impl Simulator {
    pub fn new(cfg: RBProtocolConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = SpaceLayout::new(cfg.n_qubits)?;
        let group = clifford_group(cfg.n_qubits)?;
        let (unitaries, extended) = match cfg.leak_policy {
            LeakPolicy::IdentityOnLeak => (group.elements.iter().map(|e| e.u_full.clone()).collect(), None),
            LeakPolicy::GatesetInduced => {
                let name = cfg.gateset.as_deref().ok_or(Error::MissingWord)?;
                let gs = GateSet::builtin(name)?;
                let comp = compile_all(group, &gs, 12)?;
                let ext: Vec<CliffordElement> = group
                    .elements
                    .iter()
                    .map(|e| {
                        let w = comp.words[e.id].as_deref().ok_or(Error::MissingWord)?;
                        extend_to_full_space(e, LeakPolicy::GatesetInduced, &layout, Some((w, &gs)))
                    })
                    .collect::<Result<_>>()?;
                (ext.iter().map(|e| e.u_full.clone()).collect(), Some(ext))
            }
        };
        let channel = total_error_channel(&cfg.noise, &layout)?;
        let sparse = SparseSuperop::new(&channel);
        let kind = cfg.readout_kind();
        let measurement = readout_model(&cfg.noise, &layout, kind)?;
        let ideal_nm = NoiseModel { readout_flip: 0.0, ..cfg.noise.clone() };
        let ideal_measurement = readout_model(&ideal_nm, &layout, kind)?;
        let gadget = cfg.uses_gadget().then(|| cfg.noise.gadget_model(&channel));
        let reference = match &cfg.reference {
            Some(r) => (0..layout.d_c)
                .find(|&k| layout.comp_label(k) == *r)
                .ok_or_else(|| Error::InvalidArgument(format!("reference {r:?} is not a computational label")))?,
            None => 0,
        };
        Ok(Simulator {
            cfg,
            layout,
            group,
            unitaries,
            extended,
            channel,
            sparse,
            measurement,
            ideal_measurement,
            gadget,
            reference,
            twirled: OnceLock::new(),
        })
    }

    pub fn reference_label(&self) -> String {
        self.layout.comp_label(self.reference)
    }

    pub fn initial_state(&self) -> CMat {
        let mut m = CMat::zeros(self.layout.d, self.layout.d);
        let i = self.layout.comp_index(self.reference);
        m[(i, i)] = c(1.0, 0.0);
        m
    }

    /// Q_k for this reference: X on the bits where k and the reference differ.
    pub fn q_unitary(&self, k: usize) -> Result<CMat> {
        Ok(permutation_gate(k ^ self.reference, &self.layout)?.u)
    }

    fn conj(u: &CMat, rho: &CMat) -> CMat {
        u * rho * u.adjoint()
    }

    /// ρ after the ℓ noisy random Cliffords (before the final gate).
    pub fn pre_final_state(&self, seq: &[usize]) -> CMat {
        let mut rho = self.initial_state();
        for &g in seq {
            rho = self.sparse.apply(&Self::conj(&self.unitaries[g], &rho));
        }
        rho
    }

    fn finish(&self, rho: &CMat, u_final: &CMat, noisy: bool) -> Result<CMat> {
        let mut out = Self::conj(u_final, rho);
        if noisy {
            out = self.sparse.apply(&out);
            if let Some(g) = &self.gadget {
                for ch in &g.extra_channels {
                    out = ch.apply_matrix(&out);
                }
            }
        }
        Ok(out)
    }

    fn observe(&self, rho: &CMat, k: Option<usize>, noisy: bool) -> Observation {
        let mm = if noisy { &self.measurement } else { &self.ideal_measurement };
        let ideal_gadget = GadgetModel::ideal();
        let gadget = if noisy { self.gadget.as_ref() } else { self.gadget.as_ref().map(|_| &ideal_gadget) };
        let n = self.layout.n_qubits;
        let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for i in 0..self.layout.d {
            let p = rho[(i, i)].re.max(0.0);
            if p == 0.0 {
                continue;
            }
            let outs = mm.conditional(i);
            let gd = match gadget {
                Some(g) => g.pattern_distribution(&self.layout.leak_pattern(i)),
                None => vec![1.0],
            };
            for (o, po) in outs.iter().enumerate() {
                if *po == 0.0 {
                    continue;
                }
                for (gm, pg) in gd.iter().enumerate() {
                    if *pg > 0.0 {
                        *joint.entry((o, gm)).or_default() += p * po * pg;
                    }
                }
            }
        }
        let glabel = |mask: usize| -> String {
            (0..n).map(|q| if (mask >> (n - 1 - q)) & 1 == 1 { '1' } else { '0' }).collect()
        };
        let joint = joint
            .into_iter()
            .map(|((o, gm), w)| (mm.labels[o].clone(), gadget.map(|_| glabel(gm)), w))
            .collect();
        let accepted = self.layout.comp_label(k.unwrap_or(self.reference));
        Observation { permutation: k, accepted, joint }
    }

    /// Outcome distribution of one sequence realization (optionally with Q_k).
    pub fn simulate_circuit(&self, seq: &[usize], inverse: usize, k: Option<usize>) -> Result<Vec<(String, f64)>> {
        let pre = self.pre_final_state(seq);
        let u_final = self.q_unitary(k.unwrap_or(self.reference))? * &self.unitaries[inverse];
        let out = self.finish(&pre, &u_final, true)?;
        Ok(self.measurement.labels.iter().cloned().zip(self.measurement.probabilities(&diag(&out))).collect())
    }

    pub fn sample_sequence<R: Rng + ?Sized>(&self, l: usize, rng: &mut R) -> Result<(Vec<usize>, usize)> {
        let seq: Vec<usize> = (0..l).map(|_| self.group.sample(rng)).collect();
        let inv = self.group.invert_sequence(&seq)?;
        Ok((seq, inv))
    }

    fn variants(&self) -> Vec<Option<usize>> {
        if self.cfg.protocol == Protocol::AvgMb {
            (0..self.layout.d_c).map(Some).collect()
        } else {
            vec![None]
        }
    }

    fn run_task(&self, l: usize, s: usize) -> Result<Vec<CircuitRecord>> {
        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(self.cfg.rng_seed, l, s, 0));
        let (seq, inv) = self.sample_sequence(l, &mut rng)?;
        let pre = self.pre_final_state(&seq);
        let mut out = vec![];
        for (vi, k) in self.variants().into_iter().enumerate() {
            let u_final = self.q_unitary(k.unwrap_or(self.reference))? * &self.unitaries[inv];
            let rho = self.finish(&pre, &u_final, true)?;
            let obs = self.observe(&rho, k, true);
            let mut shot_rng = ChaCha8Rng::seed_from_u64(task_seed(self.cfg.rng_seed, l, s, vi + 1));
            out.push(self.sample_record(&obs, l, s, &mut shot_rng)?);
        }
        Ok(out)
    }

    fn sample_record(&self, obs: &Observation, l: usize, s: usize, rng: &mut ChaCha8Rng) -> Result<CircuitRecord> {
        let weights: Vec<f64> = obs.joint.iter().map(|e| e.2).collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("outcome weights: {e}")))?;
        let mut hits = vec![0u64; weights.len()];
        for _ in 0..self.cfg.n_shots {
            hits[dist.sample(rng)] += 1;
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut gadget: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (e, &h) in obs.joint.iter().zip(&hits) {
            if h == 0 {
                continue;
            }
            *counts.entry(e.0.clone()).or_default() += h;
            if let Some(g) = &e.1 {
                *gadget.entry((e.0.clone(), g.clone())).or_default() += h;
            }
        }
        let gadget_counts = self.gadget.as_ref().map(|_| {
            gadget.into_iter().map(|((outcome, gadget), count)| GadgetCount { outcome, gadget, count }).collect()
        });
        Ok(CircuitRecord {
            length: l,
            sequence_id: s,
            permutation: obs.permutation,
            accepted_outcome: Some(obs.accepted.clone()),
            counts,
            gadget_counts,
            shots: Some(self.cfg.n_shots as u64),
            extra: Default::default(),
        })
    }

    pub fn run(&self) -> Result<RBDataset> {
        let tasks: Vec<(usize, usize)> =
            self.cfg.lengths.iter().flat_map(|&l| (0..self.cfg.n_sequences).map(move |s| (l, s))).collect();
        let records: Vec<Vec<CircuitRecord>> =
            tasks.par_iter().map(|&(l, s)| self.run_task(l, s)).collect::<Result<_>>()?;
        Ok(RBDataset {
            schema: DATASET_SCHEMA.into(),
            metadata: Metadata {
                system: Some("simulation".into()),
                date: None,
                d_c: self.layout.d_c,
                protocol: Some(self.cfg.protocol),
                reference: Some(self.reference_label()),
                extra: Default::default(),
            },
            config: Some(self.cfg.clone()),
            provenance: None,
            circuits: records.into_iter().flatten().collect(),
            extra: Default::default(),
        })
    }

    /// Λ̄ for this configuration, computed once.
    pub fn twirled_channel(&self) -> Result<&QuantumChannel> {
        if let Some(t) = self.twirled.get() {
            return Ok(t);
        }
        let t = match &self.extended {
            None => twirl(&self.channel, self.group)?,
            Some(ext) => twirl_over(&self.channel, ext)?,
        };
        Ok(self.twirled.get_or_init(|| t))
    }

    /// Shot-free observations at each length, from the twirled channel.
    pub fn exact_observations(&self, lengths: &[usize], mode: ExactMode) -> Result<Vec<(usize, Vec<Observation>)>> {
        let bar = self.twirled_channel()?;
        let sparse = SparseSuperop::new(bar);
        let max_l = lengths.iter().copied().max().unwrap_or(0);
        let mut rho = self.initial_state();
        let mut states = BTreeMap::new();
        for l in 0..=max_l {
            if lengths.contains(&l) {
                states.insert(l, rho.clone());
            }
            rho = sparse.apply(&rho);
        }
        let noisy = mode == ExactMode::WithSpam;
        let mut out = vec![];
        for &l in lengths {
            let pre = &states[&l];
            let mut obs = vec![];
            for k in self.variants() {
                let q = self.q_unitary(k.unwrap_or(self.reference))?;
                let rho = self.finish(pre, &q, noisy)?;
                obs.push(self.observe(&rho, k, noisy));
            }
            out.push((l, obs));
        }
        Ok(out)
    }

    pub fn exact_curves(&self, lengths: &[usize], mode: ExactMode) -> Result<Vec<DecayCurve>> {
        let obs = self.exact_observations(lengths, mode)?;
        let per_length: Vec<(usize, Vec<Vec<Observation>>)> = obs.into_iter().map(|(l, o)| (l, vec![o])).collect();
        Ok(curves_from_observations(
            &Estimator::for_protocol(self.cfg.protocol),
            &per_length,
            self.layout.d_c,
            &self.reference_label(),
            &EstimateOptions::default(),
            true,
        ))
    }
}

fn diag(m: &CMat) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, i)].re).collect()
}

pub fn run_protocol(cfg: &RBProtocolConfig) -> Result<RBDataset> {
    Simulator::new(cfg.clone())?.run()
}

pub fn exact_twirled_decay(
    nm: &NoiseModel,
    protocol: Protocol,
    lengths: &[usize],
    layout: &SpaceLayout,
    mode: ExactMode,
) -> Result<Vec<DecayCurve>> {
    let mut cfg = RBProtocolConfig::new(protocol, lengths.to_vec(), nm.clone(), 0);
    cfg.n_qubits = layout.n_qubits;
    Simulator::new(cfg)?.exact_curves(lengths, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "p_comp")]
    PComp,
    #[serde(rename = "p_avg")]
    PAvg,
    #[serde(rename = "p_IC")]
    PIc,
    #[serde(rename = "p_retention")]
    PRetention,
    #[serde(rename = "p_post")]
    PPost,
    #[serde(rename = "p_naive")]
    PNaive,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::PComp => "p_comp",
            Estimator::PAvg => "p_avg",
            Estimator::PIc => "p_IC",
            Estimator::PRetention => "p_retention",
            Estimator::PPost => "p_post",
            Estimator::PNaive => "p_naive",
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator {s:?}")))
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub length: usize,
    pub value: f64,
    pub stderr: f64,
    pub n_sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub estimator: Estimator,
    pub points: Vec<CurvePoint>,
    pub d_c: usize,
}

impl DecayCurve {
    pub fn lengths(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.length).collect()
    }

    pub fn value_at(&self, l: usize) -> Option<f64> {
        self.points.iter().find(|p| p.length == l).map(|p| p.value)
    }

    pub fn truncated(&self, max_len: usize) -> DecayCurve {
        DecayCurve { points: self.points.iter().filter(|p| p.length <= max_len).copied().collect(), ..self.clone() }
    }
}

/// Hybrid curve construction switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EstimateOptions {
    /// Keep only gadget-clean shots when forming p_comp.
    #[serde(default)]
    pub post_select: bool,
}

/// Frequency x/n with a smoothed binomial variance p̃(1−p̃)/n, p̃ = (x+½)/(n+1).
fn freq(x: f64, n: f64) -> (f64, f64) {
    let q = (x + 0.5) / (n + 1.0);
    (x / n, q * (1.0 - q) / n)
}

fn mean_of(parts: Vec<(f64, f64)>) -> Option<(f64, f64)> {
    if parts.is_empty() {
        return None;
    }
    let m = parts.len() as f64;
    Some((parts.iter().map(|p| p.0).sum::<f64>() / m, parts.iter().map(|p| p.1).sum::<f64>() / (m * m)))
}

/// Per-sequence estimator value and its shot-noise variance.
fn sequence_value(
    est: Estimator,
    obs: &[Observation],
    d_c: usize,
    reference: &str,
    opt: &EstimateOptions,
) -> Option<(f64, f64)> {
    match est {
        Estimator::PComp => mean_of(
            obs.iter()
                .filter_map(|o| {
                    // Post-selection only narrows the accepted effect to its
                    // leak-free part; the denominator stays all shots.
                    let tot = o.total(false);
                    (tot > 0.0).then(|| freq(o.weight_of(&o.accepted, opt.post_select), tot))
                })
                .collect(),
        ),
        Estimator::PNaive | Estimator::PAvg => {
            mean_of(obs.iter().map(|o| freq(o.weight_of(&o.accepted, false), o.total(false))).collect())
        }
        Estimator::PIc => {
            let mut ks: Vec<usize> = obs.iter().filter_map(|o| o.permutation).collect();
            ks.sort_unstable();
            ks.dedup();
            if ks.len() != d_c || obs.len() != d_c {
                return None;
            }
            let parts: Vec<(f64, f64)> = obs.iter().map(|o| freq(o.weight_of(reference, false), o.total(false))).collect();
            Some((parts.iter().map(|p| p.0).sum(), parts.iter().map(|p| p.1).sum()))
        }
        Estimator::PRetention => {
            if !obs.iter().all(|o| o.has_gadget()) {
                return None;
            }
            mean_of(obs.iter().map(|o| freq(o.total(true), o.total(false))).collect())
        }
        Estimator::PPost => {
            if !obs.iter().all(|o| o.has_gadget()) {
                return None;
            }
            let kept: f64 = obs.iter().map(|o| o.total(true)).sum();
            let hit: f64 = obs.iter().map(|o| o.weight_of(&o.accepted, true)).sum();
            (kept > 0.0).then(|| freq(hit, kept))
        }
    }
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::PComp,
        Estimator::PAvg,
        Estimator::PIc,
        Estimator::PRetention,
        Estimator::PPost,
        Estimator::PNaive,
    ];

    /// Curves a protocol is designed to produce.
    pub fn for_protocol(protocol: Protocol) -> Vec<Estimator> {
        match protocol {
            Protocol::CompSpam => vec![Estimator::PComp, Estimator::PRetention],
            Protocol::AvgMb => vec![Estimator::PAvg, Estimator::PIc, Estimator::PRetention],
            Protocol::Lps => vec![Estimator::PRetention, Estimator::PPost],
            Protocol::Naive => vec![Estimator::PNaive],
        }
    }
}

/// Builds the requested curves from per-length, per-sequence observations.
/// Curves with no usable point are left out.
pub fn curves_from_observations(
    estimators: &[Estimator],
    per_length: &[(usize, Vec<Vec<Observation>>)],
    d_c: usize,
    reference: &str,
    opt: &EstimateOptions,
    exact: bool,
) -> Vec<DecayCurve> {
    let mut curves = vec![];
    for &est in estimators {
        let mut points = vec![];
        for (l, seqs) in per_length {
            let vals: Vec<(f64, f64)> =
                seqs.iter().filter_map(|o| sequence_value(est, o, d_c, reference, opt)).collect();
            if vals.is_empty() {
                if !exact && est == Estimator::PPost {
                    log::warn!("{est}: no retained shots at length {l}; point omitted");
                }
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().map(|v| v.0).sum::<f64>() / n;
            // Sample spread of per-sequence values, floored by the pooled
            // binomial error so identical sequences never claim zero noise.
            let stderr = if exact {
                0.0
            } else {
                let sample = if vals.len() > 1 {
                    (vals.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
                } else {
                    0.0
                };
                let floor = vals.iter().map(|v| v.1).sum::<f64>().sqrt() / n;
                sample.max(floor)
            };
            points.push(CurvePoint { length: *l, value: mean, stderr, n_sequences: vals.len() });
        }
        if !points.is_empty() {
            curves.push(DecayCurve { estimator: est, points, d_c });
        }
    }
    curves
}

/// Groups dataset records into per-length, per-sequence observations.
pub fn dataset_observations(ds: &RBDataset) -> Result<Vec<(usize, Vec<Vec<Observation>>)>> {
    let n = ds.n_qubits()?;
    let reference = ds.reference()?;
    let r = usize::from_str_radix(&reference, 2).unwrap_or(0);
    // Q_k maps the reference output to reference ⊕ k.
    let label = |k: usize| -> String {
        let v = k ^ r;
        (0..n).map(|q| if (v >> (n - 1 - q)) & 1 == 1 { '1' } else { '0' }).collect()
    };
    let mut grouped: BTreeMap<usize, BTreeMap<usize, Vec<Observation>>> = BTreeMap::new();
    for rec in &ds.circuits {
        let accepted = rec
            .accepted_outcome
            .clone()
            .or_else(|| rec.permutation.map(label))
            .unwrap_or_else(|| reference.clone());
        grouped.entry(rec.length).or_default().entry(rec.sequence_id).or_default().push(Observation::from_record(rec, accepted));
    }
    Ok(grouped.into_iter().map(|(l, seqs)| (l, seqs.into_values().collect())).collect())
}

/// Every curve the dataset supports. Which of them matter is up to the
/// analysis plan; p_IC needs all permutation variants, p_retention and
/// p_post need gadget counts.
pub fn estimate_decays_with(ds: &RBDataset, opt: &EstimateOptions) -> Result<Vec<DecayCurve>> {
    let per_length = dataset_observations(ds)?;
    Ok(curves_from_observations(&Estimator::ALL, &per_length, ds.metadata.d_c, &ds.reference()?, opt, false))
}

pub fn estimate_decays(ds: &RBDataset) -> Result<Vec<DecayCurve>> {
    estimate_decays_with(ds, &EstimateOptions::default())
}

pub fn find_curve(curves: &[DecayCurve], est: Estimator) -> Result<&DecayCurve> {
    curves.iter().find(|c| c.estimator == est).ok_or_else(|| Error::MissingCurve(est.name().into()))
}

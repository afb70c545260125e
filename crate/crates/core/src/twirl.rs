//! Clifford twirl, (r, t) extraction, fidelities and the closed-form power of
//! the computational block.
//!
//! Cliffords are only defined up to a global phase, and with C_L = 𝟙 that
//! phase becomes a relative phase between χ_C and χ_L. The twirl therefore
//! also averages over that U(1) phase, which removes the superoperator
//! entries that change the number of C–L coherence indices. Nothing reachable
//! from computational inputs under block-diagonal gates lives there, and the
//! averaged set is a genuine group, so the result is idempotent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{conjugate_superop_sparse, sparse_columns, vec_index, QuantumChannel};
use crate::clifford::{pauli_strings, CliffordElement, CliffordGroup};
use crate::error::{Error, Result};
use crate::space::{c, max_abs_diff, subspace_projectors, CMat, SpaceLayout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParameters {
    pub r: f64,
    pub t: f64,
    pub lambda: f64,
    pub tau: f64,
    pub d_c: usize,
}

impl ChannelParameters {
    pub fn from_rt(r: f64, t: f64, d_c: usize) -> Self {
        ChannelParameters { r, t, lambda: t - r, tau: 1.0 - t, d_c }
    }

    pub fn from_lambda_tau(lambda: f64, tau: f64, d_c: usize) -> Self {
        Self::from_rt(1.0 - lambda - tau, 1.0 - tau, d_c)
    }
}

pub fn extract_parameters(ch: &QuantumChannel) -> ChannelParameters {
    let l = ch.layout;
    let dc = l.d_c as f64;
    let (ic, _) = subspace_projectors(&l);
    let t = (&ic.matrix * ch.apply_matrix(&ic.matrix.scale(1.0 / dc))).trace().re;
    let mut acc = 0.0;
    let paulis = pauli_strings(l.n_qubits);
    for p in paulis.iter().skip(1) {
        let pe = l.embed_comp(p);
        acc += (&pe * ch.apply_matrix(&pe)).trace().re / dc;
    }
    let r = acc / (dc * dc - 1.0);
    ChannelParameters::from_rt(r, t, l.d_c)
}

/// F = ((d_C−1)/d_C) r + t/d_C.
pub fn average_fidelity(p: &ChannelParameters) -> f64 {
    let d = p.d_c as f64;
    (d - 1.0) / d * p.r + p.t / d
}

/// f = ((d_C²−1)/d_C²) r + t/d_C².
pub fn process_fidelity(p: &ChannelParameters) -> f64 {
    let d2 = (p.d_c * p.d_c) as f64;
    (d2 - 1.0) / d2 * p.r + p.t / d2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityBounds {
    pub f_avg_low: f64,
    pub f_avg_high: f64,
    pub f_pro_low: f64,
    pub f_pro_high: f64,
}

/// Range of F and f compatible with r alone (t anywhere in [r, 1]).
pub fn fidelity_bounds(r: f64, d_c: usize) -> FidelityBounds {
    let d = d_c as f64;
    FidelityBounds {
        f_avg_low: r,
        f_avg_high: 1.0 - (d - 1.0) / d * (1.0 - r),
        f_pro_low: r,
        f_pro_high: 1.0 - (d * d - 1.0) / (d * d) * (1.0 - r),
    }
}

/// Infidelity halfway between the two bounds: (2d_C−1)/(2d_C)·(1−r).
pub fn midpoint_infidelity(r: f64, d_c: usize) -> f64 {
    let d = d_c as f64;
    (2.0 * d - 1.0) / (2.0 * d) * (1.0 - r)
}

/// Zero every superoperator entry that changes the C–L coherence charge.
pub fn phase_average(ch: &QuantumChannel) -> QuantumChannel {
    let l = ch.layout;
    let d = l.d;
    let comp: Vec<i32> = (0..d).map(|i| i32::from(l.is_computational(i))).collect();
    let mut s = ch.superop.clone();
    for a in 0..d {
        for b in 0..d {
            let q_out = comp[a] - comp[b];
            for cc in 0..d {
                for e in 0..d {
                    if comp[cc] - comp[e] != q_out {
                        s[(vec_index(d, a, b), vec_index(d, cc, e))] = c(0.0, 0.0);
                    }
                }
            }
        }
    }
    QuantumChannel { superop: s, ..ch.clone() }
}

const CHUNK: usize = 64;

/// Σ_U (U† · U) conjugations of `s`, summed in fixed chunks so the result does
/// not depend on thread scheduling.
fn conjugation_sum(s: &CMat, unitaries: &[CMat], d: usize) -> CMat {
    let n = d * d;
    let partials: Vec<CMat> = unitaries
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = CMat::zeros(n, n);
            for u in chunk {
                acc += conjugate_superop_sparse(s, &sparse_columns(u), d);
            }
            acc
        })
        .collect();
    let mut total = CMat::zeros(n, n);
    for p in partials {
        total += p;
    }
    total
}

/// Exact twirl over the full group with C_L = 𝟙, computed as a Pauli twirl
/// followed by an average over Pauli-coset representatives.
pub fn twirl(ch: &QuantumChannel, group: &CliffordGroup) -> Result<QuantumChannel> {
    if ch.layout != group.layout {
        return Err(Error::DimensionMismatch { expected: group.layout.d, got: ch.layout.d });
    }
    let d = ch.layout.d;
    let paulis: Vec<CMat> = group.pauli_ids.iter().map(|&i| group.elements[i].u_full.clone()).collect();
    let pt = conjugation_sum(&ch.superop, &paulis, d).unscale(paulis.len() as f64);
    let reps: Vec<CMat> = group.coset_reps.iter().map(|&i| group.elements[i].u_full.clone()).collect();
    let s = conjugation_sum(&pt, &reps, d).unscale(reps.len() as f64);
    Ok(phase_average(&QuantumChannel { superop: s, ..ch.clone() }))
}

/// Twirl over an explicit element list (any leak policy). Fails when the
/// result is not invariant under the listed elements, which is how a
/// non-closed list shows up.
pub fn twirl_over(ch: &QuantumChannel, elements: &[CliffordElement]) -> Result<QuantumChannel> {
    if elements.is_empty() {
        return Err(Error::InvalidArgument("empty element list".into()));
    }
    let d = ch.layout.d;
    if elements.iter().any(|e| e.u_full.nrows() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: elements[0].u_full.nrows() });
    }
    let us: Vec<CMat> = elements.iter().map(|e| e.u_full.clone()).collect();
    let s = conjugation_sum(&ch.superop, &us, d).unscale(us.len() as f64);
    let out = phase_average(&QuantumChannel { superop: s, ..ch.clone() });
    let stride = (us.len() / 64).max(1);
    let mut worst: f64 = 0.0;
    for u in us.iter().step_by(stride) {
        let again = conjugate_superop_sparse(&out.superop, &sparse_columns(u), d);
        worst = worst.max(max_abs_diff(&again, &out.superop));
    }
    if worst > 1e-9 {
        return Err(Error::NotClosed(worst));
    }
    Ok(out)
}

/// Linear map on d_C×d_C matrices (column-stacked, d_C²×d_C²).
#[derive(Debug, Clone, PartialEq)]
pub struct CompBlockMap {
    pub d_c: usize,
    pub superop: CMat,
}

impl CompBlockMap {
    pub fn identity(d_c: usize) -> Self {
        CompBlockMap { d_c, superop: CMat::identity(d_c * d_c, d_c * d_c) }
    }

    /// `self ∘ first`.
    pub fn compose(&self, first: &CompBlockMap) -> CompBlockMap {
        CompBlockMap { d_c: self.d_c, superop: &self.superop * &first.superop }
    }

    pub fn apply(&self, m: &CMat) -> CMat {
        let v = &self.superop * nalgebra::DVector::from_column_slice(m.as_slice());
        CMat::from_column_slice(self.d_c, self.d_c, v.as_slice())
    }

    pub fn max_abs_diff(&self, other: &CompBlockMap) -> f64 {
        max_abs_diff(&self.superop, &other.superop)
    }
}

/// Λ_CC: the χ_C → χ_C block of a full-space channel.
pub fn cc_block(ch: &QuantumChannel) -> CompBlockMap {
    let l = ch.layout;
    let (d, dc) = (l.d, l.d_c);
    let ci = l.comp_indices();
    let s = CMat::from_fn(dc * dc, dc * dc, |row, col| {
        let (a, b) = (row % dc, row / dc);
        let (cc, e) = (col % dc, col / dc);
        ch.superop[(vec_index(d, ci[a], ci[b]), vec_index(d, ci[cc], ci[e]))]
    });
    CompBlockMap { d_c: dc, superop: s }
}

/// r^ℓ ℐ_C + (t^ℓ − r^ℓ) Tr[·] 𝟙_C/d_C.
pub fn closed_form_cc_power(r: f64, t: f64, l: usize, layout: &SpaceLayout) -> CompBlockMap {
    let dc = layout.d_c;
    let rl = r.powi(l as i32);
    let tl = t.powi(l as i32);
    let n = dc * dc;
    let mut s = CMat::identity(n, n).scale(rl);
    let w = (tl - rl) / dc as f64;
    for a in 0..dc {
        for cc in 0..dc {
            s[(a + dc * a, cc + dc * cc)] += c(w, 0.0);
        }
    }
    CompBlockMap { d_c: dc, superop: s }
}

/// Haar average of ⟨ψ|Λ(ψψ†)|ψ⟩ over computational pure states, returned as
/// (mean, standard error).
pub fn haar_average_fidelity(ch: &QuantumChannel, n_samples: usize, seed: u64) -> (f64, f64) {
    let l = ch.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ci = l.comp_indices();
    let mut vals = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut psi = vec![c(0.0, 0.0); l.d];
        let mut norm = 0.0;
        for &i in &ci {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            psi[i] = c(re, im);
            norm += re * re + im * im;
        }
        let norm = norm.sqrt();
        let psi: Vec<_> = psi.into_iter().map(|z| z / norm).collect();
        let rho = CMat::from_fn(l.d, l.d, |i, j| psi[i] * psi[j].conj());
        let out = ch.apply_matrix(&rho);
        let mut f = c(0.0, 0.0);
        for i in 0..l.d {
            for j in 0..l.d {
                f += psi[i].conj() * out[(i, j)] * psi[j];
            }
        }
        vals.push(f.re);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

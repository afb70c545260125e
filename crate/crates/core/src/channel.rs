//! Superoperators in the column-stacking convention: vec(ρ)[i + d·j] = ρ[i,j].
//!
//! nalgebra stores matrices column-major, so `as_slice()` of a d×d matrix is
//! already its vectorization. A Kraus operator K contributes conj(K) ⊗ K.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::space::{c, hermitian_eigenvalues, is_unitary, max_abs_diff, unitarity_defect, CMat, DensityOperator, SpaceLayout};

pub const TP_TOL: f64 = 1e-10;
pub const CP_TOL: f64 = 1e-9;

#[inline]
pub fn vec_index(d: usize, i: usize, j: usize) -> usize {
    i + d * j
}

pub fn vectorize(m: &CMat) -> DVector<Complex64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvectorize(v: &DVector<Complex64>, d: usize) -> CMat {
    CMat::from_column_slice(d, d, v.as_slice())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumChannel {
    pub layout: SpaceLayout,
    pub superop: CMat,
    pub tp_flag: bool,
    pub cp_checked: bool,
}

impl QuantumChannel {
    pub fn identity(layout: SpaceLayout) -> Self {
        let n = layout.d * layout.d;
        QuantumChannel { layout, superop: CMat::identity(n, n), tp_flag: true, cp_checked: true }
    }

    /// Wraps a raw superoperator; flags are computed, not trusted.
    pub fn from_superop(layout: SpaceLayout, superop: CMat) -> Result<Self> {
        let n = layout.d * layout.d;
        if superop.nrows() != n || superop.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: superop.nrows() });
        }
        let mut ch = QuantumChannel { layout, superop, tp_flag: false, cp_checked: false };
        ch.tp_flag = ch.tp_defect() <= TP_TOL;
        Ok(ch)
    }

    pub fn from_kraus(layout: SpaceLayout, kraus: &[CMat]) -> Result<Self> {
        let d = layout.d;
        let mut s = CMat::zeros(d * d, d * d);
        for k in kraus {
            if k.nrows() != d || k.ncols() != d {
                return Err(Error::DimensionMismatch { expected: d, got: k.nrows() });
            }
            s += k.conjugate().kronecker(k);
        }
        let mut ch = QuantumChannel { layout, superop: s, tp_flag: false, cp_checked: true };
        ch.tp_flag = ch.tp_defect() <= TP_TOL;
        Ok(ch)
    }

    pub fn apply_matrix(&self, m: &CMat) -> CMat {
        let v = &self.superop * vectorize(m);
        unvectorize(&v, self.layout.d)
    }

    pub fn apply(&self, rho: &DensityOperator) -> Result<DensityOperator> {
        if rho.layout != self.layout {
            return Err(Error::DimensionMismatch { expected: self.layout.d, got: rho.layout.d });
        }
        Ok(DensityOperator { layout: self.layout, matrix: self.apply_matrix(&rho.matrix) })
    }

    /// Heisenberg-picture action: Tr[X Λ(ρ)] = Tr[Λ†(X) ρ].
    pub fn adjoint_apply(&self, x: &CMat) -> CMat {
        let v = self.superop.adjoint() * vectorize(x);
        unvectorize(&v, self.layout.d)
    }

    pub fn tp_defect(&self) -> f64 {
        let id = CMat::identity(self.layout.d, self.layout.d);
        max_abs_diff(&self.adjoint_apply(&id), &id)
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &QuantumChannel) -> Result<QuantumChannel> {
        if first.layout != self.layout {
            return Err(Error::DimensionMismatch { expected: self.layout.d, got: first.layout.d });
        }
        Ok(QuantumChannel {
            layout: self.layout,
            superop: &self.superop * &first.superop,
            tp_flag: self.tp_flag && first.tp_flag,
            cp_checked: self.cp_checked && first.cp_checked,
        })
    }

    pub fn power(&self, l: usize) -> QuantumChannel {
        let n = self.superop.nrows();
        let mut acc = CMat::identity(n, n);
        let mut base = self.superop.clone();
        let mut e = l;
        while e > 0 {
            if e & 1 == 1 {
                acc = &acc * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        QuantumChannel { layout: self.layout, superop: acc, ..*self }
    }

    pub fn choi(&self) -> CMat {
        let d = self.layout.d;
        let mut j = CMat::zeros(d * d, d * d);
        for i in 0..d {
            for jj in 0..d {
                let col = vec_index(d, i, jj);
                for a in 0..d {
                    for b in 0..d {
                        j[(i * d + a, jj * d + b)] = self.superop[(vec_index(d, a, b), col)];
                    }
                }
            }
        }
        j
    }

    pub fn min_choi_eigenvalue(&self) -> f64 {
        let j = self.choi();
        let h = (&j + j.adjoint()).scale(0.5);
        hermitian_eigenvalues(&h).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Runs the Choi test and marks the channel as checked.
    pub fn check_cp(mut self) -> Result<Self> {
        let ev = self.min_choi_eigenvalue();
        if ev < -CP_TOL {
            return Err(Error::NotCompletelyPositive(ev));
        }
        self.cp_checked = true;
        Ok(self)
    }

    pub fn check_tp(self) -> Result<Self> {
        let dev = self.tp_defect();
        if dev > TP_TOL {
            return Err(Error::NotTracePreserving(dev));
        }
        Ok(QuantumChannel { tp_flag: true, ..self })
    }

    /// Generator-additive combination ℐ + Σ (Λ_i − ℐ).
    pub fn generator_sum(parts: &[&QuantumChannel]) -> Result<QuantumChannel> {
        let layout = parts.first().ok_or_else(|| Error::InvalidArgument("no channels".into()))?.layout;
        let n = layout.d * layout.d;
        let id = CMat::identity(n, n);
        let mut s = id.clone();
        for p in parts {
            if p.layout != layout {
                return Err(Error::DimensionMismatch { expected: layout.d, got: p.layout.d });
            }
            s += &p.superop - &id;
        }
        QuantumChannel::from_superop(layout, s)
    }

    pub fn max_abs_diff(&self, other: &QuantumChannel) -> f64 {
        max_abs_diff(&self.superop, &other.superop)
    }
}

pub fn unitary_to_channel(layout: SpaceLayout, u: &CMat) -> Result<QuantumChannel> {
    if u.nrows() != layout.d || u.ncols() != layout.d {
        return Err(Error::DimensionMismatch { expected: layout.d, got: u.nrows() });
    }
    if !is_unitary(u, TP_TOL) {
        return Err(Error::NotUnitary(unitarity_defect(u)));
    }
    QuantumChannel::from_kraus(layout, std::slice::from_ref(u))
}

pub fn apply_channel(ch: &QuantumChannel, rho: &DensityOperator) -> Result<DensityOperator> {
    ch.apply(rho)
}

pub fn channel_power(ch: &QuantumChannel, l: usize) -> QuantumChannel {
    ch.power(l)
}

/// Nonzero entries of each column of a unitary, for structured conjugation.
pub(crate) fn sparse_columns(u: &CMat) -> Vec<Vec<(usize, Complex64)>> {
    (0..u.ncols())
        .map(|j| (0..u.nrows()).filter(|&i| u[(i, j)].norm() > 1e-14).map(|i| (i, u[(i, j)])).collect())
        .collect()
}

/// Superoperator of X ↦ U† Λ(U X U†) U, computed without forming conj(U) ⊗ U.
pub fn conjugate_superop(s: &CMat, u: &CMat) -> CMat {
    conjugate_superop_sparse(s, &sparse_columns(u), u.nrows())
}

pub(crate) fn conjugate_superop_sparse(s: &CMat, cols: &[Vec<(usize, Complex64)>], d: usize) -> CMat {
    let n = d * d;
    let zero = c(0.0, 0.0);
    let src = s.as_slice();
    // Right factor: T[r, c + d e] = Σ_{c',e'} S[r, c' + d e'] U[c',c] conj(U[e',e]).
    let mut t1 = vec![zero; n * n];
    for e in 0..d {
        for cc in 0..d {
            let out_col = cc + d * e;
            let dst = &mut t1[out_col * n..(out_col + 1) * n];
            for &(ep, uep) in &cols[e] {
                let ue = uep.conj();
                for &(cp, ucp) in &cols[cc] {
                    let w = ucp * ue;
                    let in_col = cp + d * ep;
                    let col = &src[in_col * n..(in_col + 1) * n];
                    for r in 0..n {
                        dst[r] += col[r] * w;
                    }
                }
            }
        }
    }
    // Left factor: R[a + d b, col] = Σ_{a',b'} conj(U[a',a]) U[b',b] T[a' + d b', col].
    let mut out = vec![zero; n * n];
    for col in 0..n {
        let tc = &t1[col * n..(col + 1) * n];
        let oc = &mut out[col * n..(col + 1) * n];
        for b in 0..d {
            for a in 0..d {
                let mut acc = zero;
                for &(bp, ubp) in &cols[b] {
                    for &(ap, uap) in &cols[a] {
                        acc += uap.conj() * ubp * tc[ap + d * bp];
                    }
                }
                oc[a + d * b] = acc;
            }
        }
    }
    CMat::from_vec(n, n, out)
}

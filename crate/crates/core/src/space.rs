//! Qubits embedded in qutrits: H = H_C ⊕ H_L with one leak level per qubit.
//!
//! Basis index is the ternary number formed by the per-qubit digits, qubit 0
//! most significant, with digit 2 standing for the leak level `l`. For two
//! qubits the computational block is therefore {0, 1, 3, 4} ("00", "01",
//! "10", "11"), not a contiguous prefix. Consumers should go through
//! [`SpaceLayout::index_of`] and [`SpaceLayout::comp_index`] rather than
//! assume an ordering.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

pub const HERMITIAN_TOL: f64 = 1e-12;

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceLayout {
    pub n_qubits: usize,
    pub levels_per_qubit: usize,
    pub d: usize,
    pub d_c: usize,
    pub d_l: usize,
}

impl SpaceLayout {
    pub fn new(n_qubits: usize) -> Result<Self> {
        if !(1..=2).contains(&n_qubits) {
            return Err(Error::UnsupportedQubits(n_qubits));
        }
        let d = 3usize.pow(n_qubits as u32);
        let d_c = 1usize << n_qubits;
        Ok(SpaceLayout { n_qubits, levels_per_qubit: 3, d, d_c, d_l: d - d_c })
    }

    /// Per-qubit digits (0, 1, 2=leak) of a basis index, qubit 0 first.
    pub fn digits(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_qubits];
        let mut x = idx;
        for q in (0..self.n_qubits).rev() {
            out[q] = x % 3;
            x /= 3;
        }
        out
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        let chars: Vec<char> = label.chars().collect();
        if chars.len() != self.n_qubits {
            return Err(Error::InvalidArgument(format!(
                "label {label:?} has {} symbols, expected {}",
                chars.len(),
                self.n_qubits
            )));
        }
        let mut idx = 0;
        for ch in chars {
            let digit = match ch {
                '0' => 0,
                '1' => 1,
                'l' | 'L' => 2,
                _ => return Err(Error::InvalidArgument(format!("bad level {ch:?} in {label:?}"))),
            };
            idx = idx * 3 + digit;
        }
        Ok(idx)
    }

    pub fn label_of(&self, idx: usize) -> String {
        self.digits(idx)
            .into_iter()
            .map(|d| match d {
                0 => '0',
                1 => '1',
                _ => 'l',
            })
            .collect()
    }

    pub fn is_computational(&self, idx: usize) -> bool {
        self.digits(idx).iter().all(|&d| d < 2)
    }

    /// Full-space index of computational basis state k (bit q of k, counted
    /// from the most significant end, is qubit q).
    pub fn comp_index(&self, k: usize) -> usize {
        let mut idx = 0;
        for q in 0..self.n_qubits {
            let bit = (k >> (self.n_qubits - 1 - q)) & 1;
            idx = idx * 3 + bit;
        }
        idx
    }

    pub fn comp_indices(&self) -> Vec<usize> {
        (0..self.d_c).map(|k| self.comp_index(k)).collect()
    }

    pub fn leak_indices(&self) -> Vec<usize> {
        (0..self.d).filter(|&i| !self.is_computational(i)).collect()
    }

    /// Bitstring label of computational state k, e.g. "01".
    pub fn comp_label(&self, k: usize) -> String {
        (0..self.n_qubits)
            .map(|q| if (k >> (self.n_qubits - 1 - q)) & 1 == 1 { '1' } else { '0' })
            .collect()
    }

    /// Which qubits sit in their leak level for basis index `idx`.
    pub fn leak_pattern(&self, idx: usize) -> Vec<bool> {
        self.digits(idx).into_iter().map(|d| d == 2).collect()
    }

    /// Embed a d_C×d_C operator into the full space, zero on the leak block.
    pub fn embed_comp(&self, m: &CMat) -> CMat {
        let ci = self.comp_indices();
        let mut out = CMat::zeros(self.d, self.d);
        for (a, &ia) in ci.iter().enumerate() {
            for (b, &ib) in ci.iter().enumerate() {
                out[(ia, ib)] = m[(a, b)];
            }
        }
        out
    }

    /// Computational block of a full-space operator as a d_C×d_C matrix.
    pub fn comp_block(&self, m: &CMat) -> CMat {
        let ci = self.comp_indices();
        CMat::from_fn(self.d_c, self.d_c, |a, b| m[(ci[a], ci[b])])
    }

    /// u_C ⊕ v_L: computational block from `u`, leak block from `leak`
    /// (identity on χ_L when `leak` is None).
    pub fn direct_sum(&self, u: &CMat, leak: Option<&CMat>) -> CMat {
        let mut out = self.embed_comp(u);
        let li = self.leak_indices();
        for (a, &ia) in li.iter().enumerate() {
            for (b, &ib) in li.iter().enumerate() {
                out[(ia, ib)] = match leak {
                    Some(v) => v[(a, b)],
                    None if a == b => c(1.0, 0.0),
                    None => c(0.0, 0.0),
                };
            }
        }
        out
    }

    fn diag_projector(&self, comp: bool) -> CMat {
        CMat::from_fn(self.d, self.d, |i, j| {
            if i == j && self.is_computational(i) == comp {
                c(1.0, 0.0)
            } else {
                c(0.0, 0.0)
            }
        })
    }
}

pub fn build_layout(n_qubits: usize) -> Result<SpaceLayout> {
    SpaceLayout::new(n_qubits)
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn hermiticity_defect(m: &CMat) -> f64 {
    max_abs_diff(m, &m.adjoint())
}

pub fn is_unitary(u: &CMat, tol: f64) -> bool {
    u.is_square() && unitarity_defect(u) <= tol
}

pub fn unitarity_defect(u: &CMat) -> f64 {
    let n = u.nrows();
    max_abs_diff(&(u.adjoint() * u), &CMat::identity(n, n))
}

fn min_hermitian_eigenvalue(m: &CMat) -> f64 {
    let h = (m + m.adjoint()).scale(0.5);
    hermitian_eigenvalues(&h).into_iter().fold(f64::INFINITY, f64::min)
}

/// Spectrum of a Hermitian matrix. nalgebra's QR iteration underflows to
/// NaN/−inf on the exactly structured Choi matrices built here, so each
/// connected block of the nonzero pattern goes through cyclic Jacobi on
/// its real embedding [[A, −B], [B, A]] (every eigenvalue appears twice).
pub fn hermitian_eigenvalues(h: &CMat) -> Vec<f64> {
    let n = h.nrows();
    let mut block = vec![usize::MAX; n];
    let mut out = vec![];
    for root in 0..n {
        if block[root] != usize::MAX {
            continue;
        }
        let mut members = vec![root];
        block[root] = root;
        let mut k = 0;
        while k < members.len() {
            let i = members[k];
            for j in 0..n {
                if block[j] == usize::MAX && (h[(i, j)].norm() > 0.0 || h[(j, i)].norm() > 0.0) {
                    block[j] = root;
                    members.push(j);
                }
            }
            k += 1;
        }
        let m = members.len();
        let real = DMatrix::<f64>::from_fn(2 * m, 2 * m, |a, b| {
            let z = h[(members[a % m], members[b % m])];
            match (a < m, b < m) {
                (true, true) | (false, false) => z.re,
                (true, false) => -z.im,
                (false, true) => z.im,
            }
        });
        let mut ev = jacobi_eigenvalues(real);
        ev.sort_by(|a, b| a.total_cmp(b));
        out.extend(ev.into_iter().step_by(2));
    }
    out
}

fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = cs * akp - sn * akq;
                    a[(k, q)] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = cs * apk - sn * aqk;
                    a[(q, k)] = sn * apk + cs * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    pub layout: SpaceLayout,
    pub matrix: CMat,
}

impl DensityOperator {
    /// Validated constructor: Hermitian, unit trace, PSD.
    pub fn new(layout: SpaceLayout, matrix: CMat) -> Result<Self> {
        check_dim(&layout, &matrix)?;
        let herm = hermiticity_defect(&matrix);
        if herm > HERMITIAN_TOL {
            return Err(Error::InvalidArgument(format!("density matrix not Hermitian ({herm:.2e})")));
        }
        let tr = matrix.trace().re;
        if (tr - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("density matrix trace {tr}")));
        }
        let ev = min_hermitian_eigenvalue(&matrix);
        if ev < -1e-10 {
            return Err(Error::InvalidArgument(format!("density matrix eigenvalue {ev:.2e}")));
        }
        Ok(DensityOperator { layout, matrix })
    }

    /// Unchecked constructor for intermediate (possibly unnormalized) operators.
    pub fn from_matrix(layout: SpaceLayout, matrix: CMat) -> Result<Self> {
        check_dim(&layout, &matrix)?;
        Ok(DensityOperator { layout, matrix })
    }

    pub fn basis_state(layout: SpaceLayout, label: &str) -> Result<Self> {
        let i = layout.index_of(label)?;
        let mut m = CMat::zeros(layout.d, layout.d);
        m[(i, i)] = c(1.0, 0.0);
        Ok(DensityOperator { layout, matrix: m })
    }

    pub fn maximally_mixed_comp(layout: SpaceLayout) -> Self {
        let (ic, _) = subspace_projectors(&layout);
        DensityOperator { layout, matrix: ic.matrix.scale(1.0 / layout.d_c as f64) }
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.layout.d).map(|i| self.matrix[(i, i)].re).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservableOperator {
    pub layout: SpaceLayout,
    pub matrix: CMat,
}

impl ObservableOperator {
    pub fn new(layout: SpaceLayout, matrix: CMat) -> Result<Self> {
        check_dim(&layout, &matrix)?;
        let herm = hermiticity_defect(&matrix);
        if herm > HERMITIAN_TOL {
            return Err(Error::InvalidArgument(format!("observable not Hermitian ({herm:.2e})")));
        }
        Ok(ObservableOperator { layout, matrix })
    }

    pub fn from_diagonal(layout: SpaceLayout, diag: &[f64]) -> Self {
        let m = CMat::from_fn(layout.d, layout.d, |i, j| if i == j { c(diag[i], 0.0) } else { c(0.0, 0.0) });
        ObservableOperator { layout, matrix: m }
    }

    /// True when every eigenvalue lies in [-1e-10, 1+1e-10].
    pub fn is_effect(&self) -> bool {
        let h = (&self.matrix + self.matrix.adjoint()).scale(0.5);
        hermitian_eigenvalues(&h).iter().all(|&e| e >= -1e-10 && e <= 1.0 + 1e-10)
    }

    pub fn expectation(&self, rho: &DensityOperator) -> f64 {
        (&self.matrix * &rho.matrix).trace().re
    }
}

fn check_dim(layout: &SpaceLayout, m: &CMat) -> Result<()> {
    if m.nrows() != layout.d || m.ncols() != layout.d {
        return Err(Error::DimensionMismatch { expected: layout.d, got: m.nrows() });
    }
    Ok(())
}

pub fn subspace_projectors(layout: &SpaceLayout) -> (ObservableOperator, ObservableOperator) {
    (
        ObservableOperator { layout: *layout, matrix: layout.diag_projector(true) },
        ObservableOperator { layout: *layout, matrix: layout.diag_projector(false) },
    )
}

/// 𝟙_C ρ 𝟙_C, zero on leak rows and columns.
pub fn project_computational(rho: &DensityOperator) -> DensityOperator {
    let l = rho.layout;
    let m = CMat::from_fn(l.d, l.d, |i, j| {
        if l.is_computational(i) && l.is_computational(j) {
            rho.matrix[(i, j)]
        } else {
            c(0.0, 0.0)
        }
    });
    DensityOperator { layout: l, matrix: m }
}

pub fn project_leak(rho: &DensityOperator) -> DensityOperator {
    let l = rho.layout;
    let m = CMat::from_fn(l.d, l.d, |i, j| {
        if !l.is_computational(i) && !l.is_computational(j) {
            rho.matrix[(i, j)]
        } else {
            c(0.0, 0.0)
        }
    });
    DensityOperator { layout: l, matrix: m }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_sizes() {
        let l1 = build_layout(1).unwrap();
        assert_eq!((l1.d, l1.d_c, l1.d_l), (3, 2, 1));
        let l2 = build_layout(2).unwrap();
        assert_eq!((l2.d, l2.d_c, l2.d_l), (9, 4, 5));
        assert!(build_layout(3).is_err());
        assert!(build_layout(0).is_err());
    }

    #[test]
    fn index_bijection() {
        let l = build_layout(2).unwrap();
        let mut seen = vec![false; l.d];
        for i in 0..l.d {
            let lab = l.label_of(i);
            assert_eq!(l.index_of(&lab).unwrap(), i);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_ne!(l.index_of("0l").unwrap(), l.index_of("l0").unwrap());
        assert_eq!(l.comp_indices(), vec![0, 1, 3, 4]);
        assert_eq!(l.comp_label(1), "01");
        assert_eq!(l.comp_index(2), l.index_of("10").unwrap());
    }

    #[test]
    fn projectors() {
        let l = build_layout(2).unwrap();
        let (ic, il) = subspace_projectors(&l);
        let sum = &ic.matrix + &il.matrix;
        assert_eq!(sum, CMat::identity(9, 9));
        assert!((&ic.matrix * &il.matrix).iter().all(|z| z.norm() == 0.0));
        assert_eq!(il.matrix.trace().re as usize, 5);
        let l1 = build_layout(1).unwrap();
        let (ic1, _) = subspace_projectors(&l1);
        assert_eq!(ic1.matrix.trace().re as usize, 2);
    }

    #[test]
    fn projection_truncates_coherence() {
        let l = build_layout(1).unwrap();
        let mut m = CMat::zeros(3, 3);
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            m[(i, j)] = c(0.5, 0.0);
        }
        let rho = DensityOperator::new(l, m).unwrap();
        let p = project_computational(&rho);
        let mut want = CMat::zeros(3, 3);
        want[(0, 0)] = c(0.5, 0.0);
        assert_eq!(p.matrix, want);
        let leak = DensityOperator::basis_state(l, "l").unwrap();
        assert!(project_computational(&leak).matrix.iter().all(|z| z.norm() == 0.0));
    }
}

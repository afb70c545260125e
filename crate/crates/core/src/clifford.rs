//! One- and two-qubit Clifford groups, leak extensions, Q_k permutations,
//! gateset compilation and the leaked-partner action histogram.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{c, is_unitary, unitarity_defect, CMat, SpaceLayout};

pub type Key = Vec<i64>;

pub fn pauli(which: char) -> CMat {
    let z = c(0.0, 0.0);
    let o = c(1.0, 0.0);
    let i = c(0.0, 1.0);
    match which {
        'X' => CMat::from_row_slice(2, 2, &[z, o, o, z]),
        'Y' => CMat::from_row_slice(2, 2, &[z, -i, i, z]),
        'Z' => CMat::from_row_slice(2, 2, &[o, z, z, -o]),
        _ => CMat::identity(2, 2),
    }
}

pub fn hadamard() -> CMat {
    let h = c(FRAC_1_SQRT_2, 0.0);
    CMat::from_row_slice(2, 2, &[h, h, h, -h])
}

pub fn phase_gate() -> CMat {
    CMat::from_row_slice(2, 2, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 1.0)])
}

pub fn cnot() -> CMat {
    let mut m = CMat::zeros(4, 4);
    for (i, j) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
        m[(i, j)] = c(1.0, 0.0);
    }
    m
}

/// exp(−iθ/2 · P) for a Hermitian involution P.
pub fn rotation(p: &CMat, theta: f64) -> CMat {
    let n = p.nrows();
    CMat::identity(n, n).scale((theta / 2.0).cos()) - p.map(|z| z * c(0.0, (theta / 2.0).sin()))
}

pub fn kron_all(ops: &[CMat]) -> CMat {
    let mut out = ops[0].clone();
    for op in &ops[1..] {
        out = out.kronecker(op);
    }
    out
}

/// `op` on qubit `q` of an n-qubit computational register.
pub fn embed_1q(op: &CMat, q: usize, n: usize) -> CMat {
    let ops: Vec<CMat> = (0..n).map(|k| if k == q { op.clone() } else { CMat::identity(2, 2) }).collect();
    kron_all(&ops)
}

/// Multiply by the conjugate phase of the first nonzero row-major entry.
pub fn canonicalize(u: &CMat) -> CMat {
    for i in 0..u.nrows() {
        for j in 0..u.ncols() {
            let z = u[(i, j)];
            if z.norm() > 1e-9 {
                let ph = z.conj() / z.norm();
                return u.map(|w| w * ph);
            }
        }
    }
    u.clone()
}

pub fn canonical_key(u: &CMat) -> Key {
    let cu = canonicalize(u);
    let mut key = Vec::with_capacity(2 * cu.len());
    for i in 0..cu.nrows() {
        for j in 0..cu.ncols() {
            let z = cu[(i, j)];
            key.push((z.re * 1e8).round() as i64);
            key.push((z.im * 1e8).round() as i64);
        }
    }
    key
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliffordElement {
    pub id: usize,
    pub u_comp: CMat,
    pub u_full: CMat,
    pub word: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LeakPolicy {
    #[default]
    IdentityOnLeak,
    GatesetInduced,
}

#[derive(Debug)]
pub struct CliffordGroup {
    pub n_qubits: usize,
    pub layout: SpaceLayout,
    pub elements: Vec<CliffordElement>,
    index: HashMap<Key, usize>,
    inverse: Vec<usize>,
    pub pauli_ids: Vec<usize>,
    pub coset_reps: Vec<usize>,
}

fn generators(n: usize) -> Vec<(String, CMat)> {
    if n == 1 {
        return vec![("H".into(), hadamard()), ("S".into(), phase_gate())];
    }
    vec![
        ("CNOT".into(), cnot()),
        ("H0".into(), embed_1q(&hadamard(), 0, 2)),
        ("H1".into(), embed_1q(&hadamard(), 1, 2)),
        ("S0".into(), embed_1q(&phase_gate(), 0, 2)),
        ("S1".into(), embed_1q(&phase_gate(), 1, 2)),
    ]
}

impl CliffordGroup {
    /// Breadth-first closure over {CNOT, H, S} words from the identity.
    pub fn enumerate(n_qubits: usize) -> Result<Self> {
        let layout = SpaceLayout::new(n_qubits)?;
        let dc = layout.d_c;
        let gens = generators(n_qubits);
        let mut mats: Vec<CMat> = vec![CMat::identity(dc, dc)];
        let mut words: Vec<Vec<String>> = vec![vec![]];
        let mut index: HashMap<Key, usize> = HashMap::new();
        index.insert(canonical_key(&mats[0]), 0);
        let mut head = 0;
        while head < mats.len() {
            for (label, g) in &gens {
                let prod = canonicalize(&(g * &mats[head]));
                let key = canonical_key(&prod);
                if !index.contains_key(&key) {
                    index.insert(key, mats.len());
                    let mut w = words[head].clone();
                    w.push(label.clone());
                    mats.push(prod);
                    words.push(w);
                }
            }
            head += 1;
        }
        let elements: Vec<CliffordElement> = mats
            .into_iter()
            .zip(words)
            .enumerate()
            .map(|(id, (u, w))| CliffordElement { id, u_full: layout.direct_sum(&u, None), u_comp: u, word: Some(w) })
            .collect();
        let mut group = CliffordGroup {
            n_qubits,
            layout,
            elements,
            index,
            inverse: vec![],
            pauli_ids: vec![],
            coset_reps: vec![],
        };
        group.inverse = (0..group.len())
            .map(|i| group.lookup(&group.elements[i].u_comp.adjoint()))
            .collect::<Result<_>>()?;
        group.pauli_ids = pauli_strings(n_qubits)
            .iter()
            .map(|p| group.lookup(p))
            .collect::<Result<_>>()?;
        group.coset_reps = group.compute_coset_reps()?;
        Ok(group)
    }

    fn compute_coset_reps(&self) -> Result<Vec<usize>> {
        let mut assigned = vec![false; self.len()];
        let mut reps = vec![];
        for id in 0..self.len() {
            if assigned[id] {
                continue;
            }
            reps.push(id);
            for &p in &self.pauli_ids {
                assigned[self.compose(id, p)?] = true;
            }
        }
        Ok(reps)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn identity_id(&self) -> usize {
        0
    }

    pub fn lookup(&self, u: &CMat) -> Result<usize> {
        self.index.get(&canonical_key(u)).copied().ok_or(Error::NotInGroup)
    }

    pub fn contains(&self, u: &CMat) -> bool {
        self.lookup(u).is_ok()
    }

    pub fn inverse_of(&self, id: usize) -> usize {
        self.inverse[id]
    }

    /// Element for "apply `first`, then `second`".
    pub fn compose(&self, first: usize, second: usize) -> Result<usize> {
        self.lookup(&(&self.elements[second].u_comp * &self.elements[first].u_comp))
    }

    /// Table element equal to the inverse of the ordered product of `seq`
    /// (first entry applied first).
    pub fn invert_sequence(&self, seq: &[usize]) -> Result<usize> {
        if seq.is_empty() {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        let mut acc = seq[0];
        for &s in &seq[1..] {
            acc = self.compose(acc, s)?;
        }
        Ok(self.inverse[acc])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.len())
    }

    pub fn element(&self, id: usize) -> &CliffordElement {
        &self.elements[id]
    }
}

pub fn pauli_strings(n: usize) -> Vec<CMat> {
    let letters = ['I', 'X', 'Y', 'Z'];
    let mut out = vec![];
    for k in 0..4usize.pow(n as u32) {
        let ops: Vec<CMat> = (0..n).map(|q| pauli(letters[(k / 4usize.pow((n - 1 - q) as u32)) % 4])).collect();
        out.push(kron_all(&ops));
    }
    out
}

static GROUP_1Q: OnceLock<CliffordGroup> = OnceLock::new();
static GROUP_2Q: OnceLock<CliffordGroup> = OnceLock::new();

/// Shared, lazily built group table for 1 or 2 qubits.
pub fn clifford_group(n_qubits: usize) -> Result<&'static CliffordGroup> {
    let cell = match n_qubits {
        1 => &GROUP_1Q,
        2 => &GROUP_2Q,
        n => return Err(Error::UnsupportedQubits(n)),
    };
    Ok(cell.get_or_init(|| CliffordGroup::enumerate(n_qubits).expect("Clifford enumeration")))
}

pub fn enumerate_1q_cliffords() -> Vec<CliffordElement> {
    clifford_group(1).expect("1q group").elements.clone()
}

pub fn enumerate_2q_cliffords() -> Vec<CliffordElement> {
    clifford_group(2).expect("2q group").elements.clone()
}

pub fn invert_sequence(group: &CliffordGroup, seq: &[CliffordElement]) -> Result<CliffordElement> {
    let ids: Vec<usize> = seq.iter().map(|e| group.lookup(&e.u_comp)).collect::<Result<_>>()?;
    Ok(group.elements[group.invert_sequence(&ids)?].clone())
}

/// Full-space unitary of a native word: 1Q gates act as g ⊕ 1 on their
/// qutrit, 2Q gates act on χ_C only and as identity on every leaked state.
pub fn word_full_unitary(word: &[usize], gs: &GateSet, layout: &SpaceLayout) -> Result<CMat> {
    let mut u = CMat::identity(layout.d, layout.d);
    for &g in word {
        let gate = gs.gates.get(g).ok_or_else(|| Error::InvalidArgument(format!("gate index {g}")))?;
        let op = if gate.qubits.len() == 1 {
            let q = gate.qubits[0];
            let mut q3 = CMat::identity(3, 3);
            q3.view_mut((0, 0), (2, 2)).copy_from(&gate.matrix);
            let ops: Vec<CMat> =
                (0..layout.n_qubits).map(|k| if k == q { q3.clone() } else { CMat::identity(3, 3) }).collect();
            kron_all(&ops)
        } else {
            layout.direct_sum(&gate.matrix, None)
        };
        u = op * u;
    }
    Ok(u)
}

/// Leak extension of a Clifford. The gateset-induced policy needs a compiled
/// word; its computational block is re-phased to match `u_comp` exactly.
pub fn extend_to_full_space(
    el: &CliffordElement,
    policy: LeakPolicy,
    layout: &SpaceLayout,
    compiled: Option<(&[usize], &GateSet)>,
) -> Result<CliffordElement> {
    let u_full = match policy {
        LeakPolicy::IdentityOnLeak => layout.direct_sum(&el.u_comp, None),
        LeakPolicy::GatesetInduced => {
            let (word, gs) = compiled.ok_or(Error::MissingWord)?;
            let u = word_full_unitary(word, gs, layout)?;
            let block = layout.comp_block(&u);
            let (mut best, mut ratio) = (0.0, c(1.0, 0.0));
            for (a, b) in el.u_comp.iter().zip(block.iter()) {
                if a.norm() > best {
                    best = a.norm();
                    ratio = a / b;
                }
            }
            u.map(|z| z * ratio)
        }
    };
    debug_assert!(block_diagonal_defect(&u_full, layout) == 0.0);
    Ok(CliffordElement { id: el.id, u_comp: el.u_comp.clone(), u_full, word: el.word.clone() })
}

/// Largest entry of the C↔L off-diagonal blocks.
pub fn block_diagonal_defect(u: &CMat, layout: &SpaceLayout) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..layout.d {
        for j in 0..layout.d {
            if layout.is_computational(i) != layout.is_computational(j) {
                worst = worst.max(u[(i, j)].norm());
            }
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationGate {
    pub k: usize,
    pub u: CMat,
}

/// Q_k ∈ {I,X}^⊗n (identity on each leak level) with Q_k|0…0⟩ = |k⟩.
pub fn permutation_gate(k: usize, layout: &SpaceLayout) -> Result<PermutationGate> {
    if k >= layout.d_c {
        return Err(Error::OutOfRange(format!("permutation index {k} ≥ {}", layout.d_c)));
    }
    let mut x3 = CMat::zeros(3, 3);
    x3[(0, 1)] = c(1.0, 0.0);
    x3[(1, 0)] = c(1.0, 0.0);
    x3[(2, 2)] = c(1.0, 0.0);
    let n = layout.n_qubits;
    let ops: Vec<CMat> = (0..n)
        .map(|q| if (k >> (n - 1 - q)) & 1 == 1 { x3.clone() } else { CMat::identity(3, 3) })
        .collect();
    Ok(PermutationGate { k, u: kron_all(&ops) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NativeGate {
    pub label: String,
    pub qubits: Vec<usize>,
    /// 2×2 for one-qubit gates, 4×4 for two-qubit gates.
    pub matrix: CMat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub name: String,
    pub gates: Vec<NativeGate>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GateJson {
    label: String,
    qubits: Vec<usize>,
    matrix: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GateSetJson {
    name: String,
    gates: Vec<GateJson>,
}

pub const BUILTIN_GATESETS: [&str; 3] = ["trapped-ion", "minimal-cnot", "standard-chp"];

impl GateSet {
    pub fn new(name: &str, gates: Vec<NativeGate>) -> Result<Self> {
        for g in &gates {
            let dim = 1usize << g.qubits.len();
            if g.qubits.is_empty() || g.qubits.len() > 2 || g.matrix.nrows() != dim || g.matrix.ncols() != dim {
                return Err(Error::InvalidArgument(format!("gate {} has inconsistent shape", g.label)));
            }
            if g.qubits.iter().any(|&q| q > 1) {
                return Err(Error::InvalidArgument(format!("gate {} acts on qubit > 1", g.label)));
            }
            if g.qubits.len() == 2 && g.qubits != [0, 1] {
                return Err(Error::InvalidArgument(format!("two-qubit gate {} must list qubits [0, 1]", g.label)));
            }
            if !is_unitary(&g.matrix, 1e-10) {
                return Err(Error::NotUnitary(unitarity_defect(&g.matrix)));
            }
        }
        Ok(GateSet { name: name.to_string(), gates })
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let one = |label: &str, q: usize, m: CMat| NativeGate { label: label.into(), qubits: vec![q], matrix: m };
        let mut gates = vec![];
        match name {
            "trapped-ion" => {
                let zz = pauli('Z').kronecker(&pauli('Z'));
                gates.push(NativeGate { label: "RZZ(pi/2)".into(), qubits: vec![0, 1], matrix: rotation(&zz, FRAC_PI_2) });
                for q in 0..2 {
                    for axis in ['X', 'Y', 'Z'] {
                        for (tag, th) in [("pi/2", FRAC_PI_2), ("-pi/2", -FRAC_PI_2), ("pi", PI)] {
                            gates.push(one(&format!("R{axis}({tag})"), q, rotation(&pauli(axis), th)));
                        }
                    }
                }
            }
            "minimal-cnot" => {
                gates.push(NativeGate { label: "CNOT".into(), qubits: vec![0, 1], matrix: cnot() });
                for q in 0..2 {
                    gates.push(one("RX(pi/2)", q, rotation(&pauli('X'), FRAC_PI_2)));
                    gates.push(one("RY(pi/2)", q, rotation(&pauli('Y'), FRAC_PI_2)));
                }
            }
            "standard-chp" => {
                gates.push(NativeGate { label: "CNOT".into(), qubits: vec![0, 1], matrix: cnot() });
                for q in 0..2 {
                    gates.push(one("H", q, hadamard()));
                    gates.push(one("P", q, phase_gate()));
                }
            }
            other => return Err(Error::InvalidArgument(format!("unknown gateset {other:?}"))),
        }
        GateSet::new(name, gates)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: GateSetJson = serde_json::from_str(text)?;
        let mut gates = vec![];
        for g in raw.gates {
            let dim = 1usize << g.qubits.len();
            if g.matrix.len() != dim * dim {
                return Err(Error::Schema {
                    path: format!("gates[{}].matrix", g.label),
                    message: format!("expected {} entries, got {}", dim * dim, g.matrix.len()),
                });
            }
            let m = CMat::from_row_iterator(dim, dim, g.matrix.iter().map(|p| c(p[0], p[1])));
            gates.push(NativeGate { label: g.label, qubits: g.qubits, matrix: m });
        }
        GateSet::new(&raw.name, gates)
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = GateSetJson {
            name: self.name.clone(),
            gates: self
                .gates
                .iter()
                .map(|g| GateJson {
                    label: g.label.clone(),
                    qubits: g.qubits.clone(),
                    matrix: g.matrix.transpose().iter().map(|z| [z.re, z.im]).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    /// Gate as a 4×4 operator on the two-qubit computational register.
    pub fn comp_operator(&self, g: usize) -> CMat {
        let gate = &self.gates[g];
        if gate.qubits.len() == 1 {
            embed_1q(&gate.matrix, gate.qubits[0], 2)
        } else {
            gate.matrix.clone()
        }
    }

    pub fn word_labels(&self, word: &[usize]) -> Vec<String> {
        word.iter()
            .map(|&g| {
                let gate = &self.gates[g];
                if gate.qubits.len() == 1 {
                    format!("{}@{}", gate.label, gate.qubits[0])
                } else {
                    gate.label.clone()
                }
            })
            .collect()
    }
}

/// Shortest native words for every two-qubit Clifford, ordered by
/// (two-qubit gate count, word length).
#[derive(Debug, Clone)]
pub struct Compilation {
    pub gateset: GateSet,
    pub max_depth: usize,
    pub words: Vec<Option<Vec<usize>>>,
}

impl Compilation {
    pub fn n_reachable(&self) -> usize {
        self.words.iter().filter(|w| w.is_some()).count()
    }

    pub fn word(&self, id: usize) -> Result<&[usize]> {
        self.words[id].as_deref().ok_or(Error::Unreachable(self.max_depth))
    }
}

pub fn compile_all(group: &CliffordGroup, gs: &GateSet, max_depth: usize) -> Result<Compilation> {
    if group.n_qubits != 2 {
        return Err(Error::UnsupportedQubits(group.n_qubits));
    }
    let ops: Vec<(CMat, usize)> =
        (0..gs.gates.len()).map(|g| (gs.comp_operator(g), usize::from(gs.gates[g].qubits.len() == 2))).collect();
    let n = group.len();
    let mut best: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    let start = group.identity_id();
    best[start] = Some((0, 0));
    heap.push(Reverse((0usize, 0usize, start)));
    while let Some(Reverse((n2, len, id))) = heap.pop() {
        if best[id] != Some((n2, len)) {
            continue;
        }
        for (g, (op, is2)) in ops.iter().enumerate() {
            let cost = (n2 + is2, len + 1);
            if cost.0 > max_depth {
                continue;
            }
            let next = group.lookup(&(op * &group.elements[id].u_comp))?;
            if best[next].map_or(true, |b| cost < b) {
                best[next] = Some(cost);
                parent[next] = Some((id, g));
                heap.push(Reverse((cost.0, cost.1, next)));
            }
        }
    }
    let words = (0..n)
        .map(|id| {
            best[id]?;
            let mut w = vec![];
            let mut cur = id;
            while let Some((p, g)) = parent[cur] {
                w.push(g);
                cur = p;
            }
            w.reverse();
            Some(w)
        })
        .collect();
    Ok(Compilation { gateset: gs.clone(), max_depth, words })
}

pub fn compile_to_gateset(el: &CliffordElement, gs: &GateSet, max_depth: usize) -> Result<Vec<String>> {
    let group = clifford_group(2)?;
    let id = group.lookup(&el.u_comp)?;
    let comp = compile_all(group, gs, max_depth)?;
    Ok(gs.word_labels(comp.word(id)?))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LeakedActionHistogram {
    pub gateset: String,
    pub leaked_qubit: usize,
    /// Probability per 1Q Clifford class, indexed like the 1Q group table.
    pub probabilities: Vec<f64>,
    pub tvd_from_uniform: f64,
    pub n_words: usize,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Drop two-qubit gates from every compiled word and classify the partner's
/// remaining one-qubit product among the 24 single-qubit Cliffords.
pub fn leaked_action_histogram(comp: &Compilation, leaked_qubit: usize) -> Result<LeakedActionHistogram> {
    if leaked_qubit > 1 {
        return Err(Error::OutOfRange(format!("leaked qubit {leaked_qubit}")));
    }
    let g1 = clifford_group(1)?;
    let partner = 1 - leaked_qubit;
    let mut counts = vec![0usize; g1.len()];
    let mut total = 0;
    for word in comp.words.iter().flatten() {
        let mut u = CMat::identity(2, 2);
        for &g in word {
            let gate = &comp.gateset.gates[g];
            if gate.qubits == [partner] {
                u = &gate.matrix * u;
            }
        }
        counts[g1.lookup(&u)?] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::InvalidArgument("gateset has no compiled words".into()));
    }
    let probabilities: Vec<f64> = counts.iter().map(|&k| k as f64 / total as f64).collect();
    let uniform = vec![1.0 / g1.len() as f64; g1.len()];
    Ok(LeakedActionHistogram {
        gateset: comp.gateset.name.clone(),
        leaked_qubit,
        tvd_from_uniform: total_variation(&probabilities, &uniform),
        probabilities,
        n_words: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_qubit_group() {
        let g = clifford_group(1).unwrap();
        assert_eq!(g.len(), 24);
        assert_eq!(g.pauli_ids.len(), 4);
        assert_eq!(g.coset_reps.len(), 6);
        for a in 0..24 {
            for b in 0..24 {
                g.compose(a, b).unwrap();
            }
        }
    }

    #[test]
    fn permutation_bits() {
        let l = SpaceLayout::new(2).unwrap();
        let q = permutation_gate(1, &l).unwrap();
        let want = kron_all(&[CMat::identity(3, 3), {
            let mut x = CMat::zeros(3, 3);
            x[(0, 1)] = c(1.0, 0.0);
            x[(1, 0)] = c(1.0, 0.0);
            x[(2, 2)] = c(1.0, 0.0);
            x
        }]);
        assert_eq!(q.u, want);
        assert_eq!(permutation_gate(0, &l).unwrap().u, CMat::identity(9, 9));
        assert!(permutation_gate(4, &l).is_err());
    }

    #[test]
    fn gateset_json_roundtrip() {
        let gs = GateSet::builtin("minimal-cnot").unwrap();
        let back = GateSet::from_json(&gs.to_json().unwrap()).unwrap();
        assert_eq!(back.gates.len(), gs.gates.len());
        for (a, b) in back.gates.iter().zip(&gs.gates) {
            assert!(crate::space::max_abs_diff(&a.matrix, &b.matrix) < 1e-15);
        }
    }
}

use leakrb::clifford::*;
use leakrb::space::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn is_pauli_up_to_phase(m: &CMat, n: usize) -> bool {
    pauli_strings(n).iter().any(|p| {
        let overlap = (p.adjoint() * m).trace();
        (overlap.norm() - (1usize << n) as f64).abs() < 1e-10
    })
}

#[test]
fn one_qubit_group() {
    let g = enumerate_1q_cliffords();
    assert_eq!(g.len(), 24);
    let group = clifford_group(1).unwrap();
    assert!(group.contains(&CMat::identity(2, 2)));
    for a in &g {
        for b in &g {
            assert!(group.contains(&(&a.u_comp * &b.u_comp)));
        }
    }
}

#[test]
fn two_qubit_group_axioms() {
    let group = clifford_group(2).unwrap();
    assert_eq!(group.len(), 11520);
    assert_eq!(enumerate_2q_cliffords().len(), 11520);
    let xi = embed_1q(&pauli('X'), 0, 2);
    for (id, el) in group.elements.iter().enumerate() {
        let inv = group.inverse_of(id);
        let prod = &group.elements[inv].u_comp * &el.u_comp;
        assert_eq!(group.lookup(&prod).unwrap(), group.identity_id());
        assert!(is_pauli_up_to_phase(&(&el.u_comp * &xi * el.u_comp.adjoint()), 2));
        assert_eq!(block_diagonal_defect(&el.u_full, &group.layout), 0.0);
    }
}

#[test]
fn random_pairs_close() {
    let group = clifford_group(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let (a, b) = (group.sample(&mut rng), group.sample(&mut rng));
        let ab = group.compose(a, b).unwrap();
        let direct = &group.elements[b].u_comp * &group.elements[a].u_comp;
        assert_eq!(group.lookup(&direct).unwrap(), ab);
    }
}

#[test]
fn sequence_inversion() {
    let group = clifford_group(2).unwrap();
    let id = group.element(group.identity_id()).clone();
    assert_eq!(invert_sequence(group, &[id.clone()]).unwrap().id, group.identity_id());
    let c = group.element(77).clone();
    let cinv = group.element(group.inverse_of(77)).clone();
    assert_eq!(invert_sequence(group, &[c, cinv]).unwrap().id, group.identity_id());
    assert!(group.invert_sequence(&[]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..1000 {
        let len = if trial == 0 { 20 } else { rng.gen_range(1..30) };
        let seq: Vec<usize> = (0..len).map(|_| group.sample(&mut rng)).collect();
        let inv = group.invert_sequence(&seq).unwrap();
        let mut prod = CMat::identity(4, 4);
        for &s in &seq {
            prod = &group.elements[s].u_comp * prod;
        }
        assert_eq!(inv, group.inverse_of(group.lookup(&prod).unwrap()));
        let total = &group.elements[inv].u_comp * &prod;
        let fidelity = (total.trace().norm() / 4.0).powi(2);
        assert!((fidelity - 1.0).abs() < 1e-10);
    }
}

#[test]
fn uniform_sampling() {
    let group = clifford_group(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 1_000_000usize;
    let mut counts = vec![0u32; group.len()];
    for _ in 0..n {
        counts[group.sample(&mut rng)] += 1;
    }
    let p = 1.0 / group.len() as f64;
    let (mean, sd) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    assert!(counts.iter().all(|&c| (c as f64 - mean).abs() < 5.0 * sd));
}

#[test]
fn leak_extensions() {
    let layout = build_layout(2).unwrap();
    let group = clifford_group(2).unwrap();
    let e = extend_to_full_space(group.element(0), LeakPolicy::IdentityOnLeak, &layout, None).unwrap();
    assert!(max_abs_diff(&e.u_full, &CMat::identity(9, 9)) < 1e-15);
    assert!(matches!(
        extend_to_full_space(group.element(5), LeakPolicy::GatesetInduced, &layout, None),
        Err(leakrb::Error::MissingWord)
    ));

    let gs = GateSet::builtin("trapped-ion").unwrap();
    let comp = compile_all(group, &gs, 12).unwrap();
    for id in (0..group.len()).step_by(97) {
        let w = comp.word(id).unwrap();
        let ext = extend_to_full_space(group.element(id), LeakPolicy::GatesetInduced, &layout, Some((w, &gs))).unwrap();
        assert_eq!(block_diagonal_defect(&ext.u_full, &layout), 0.0);
        assert!(max_abs_diff(&layout.comp_block(&ext.u_full), &group.element(id).u_comp) < 1e-10);
        assert!(is_unitary(&ext.u_full, 1e-10));
    }

    // A one-qubit X fixes the leak level.
    let l1 = build_layout(1).unwrap();
    let g1 = clifford_group(1).unwrap();
    let x = g1.element(g1.lookup(&pauli('X')).unwrap());
    let ext = extend_to_full_space(x, LeakPolicy::IdentityOnLeak, &l1, None).unwrap();
    let leak = l1.index_of("l").unwrap();
    assert_eq!(ext.u_full[(leak, leak)], c(1.0, 0.0));
}

#[test]
fn permutation_gates() {
    let l = build_layout(2).unwrap();
    assert!(max_abs_diff(&permutation_gate(0, &l).unwrap().u, &CMat::identity(9, 9)) < 1e-15);
    let q = permutation_gate(1, &l).unwrap();
    // X on the second qubit, acting on its full qutrit.
    let mut x3 = CMat::identity(3, 3);
    x3[(0, 0)] = c(0.0, 0.0);
    x3[(1, 1)] = c(0.0, 0.0);
    x3[(0, 1)] = c(1.0, 0.0);
    x3[(1, 0)] = c(1.0, 0.0);
    assert!(max_abs_diff(&q.u, &CMat::identity(3, 3).kronecker(&x3)) < 1e-15);
    assert!(is_unitary(&q.u, 1e-15));
    assert!(permutation_gate(4, &l).is_err());

    let mut sum = CMat::zeros(9, 9);
    for k in 0..4 {
        let q = permutation_gate(k, &l).unwrap();
        let i = l.comp_index(k);
        let mut proj = CMat::zeros(9, 9);
        proj[(i, i)] = c(1.0, 0.0);
        sum += q.u.adjoint() * proj * &q.u;
    }
    let mut want = CMat::zeros(9, 9);
    want[(0, 0)] = c(4.0, 0.0);
    assert!(max_abs_diff(&sum, &want) < 1e-15);
}

#[test]
fn compilation() {
    let group = clifford_group(2).unwrap();
    let chp = GateSet::builtin("standard-chp").unwrap();
    assert!(compile_to_gateset(group.element(0), &chp, 12).unwrap().is_empty());
    let cx = group.element(group.lookup(&cnot()).unwrap());
    let w = compile_to_gateset(cx, &chp, 12).unwrap();
    assert_eq!(w.len(), 1);
    assert!(w[0].contains("CNOT"));

    for name in BUILTIN_GATESETS {
        let gs = GateSet::builtin(name).unwrap();
        let comp = compile_all(group, &gs, 12).unwrap();
        assert_eq!(comp.n_reachable(), 11520, "{name}");
        for id in (0..group.len()).step_by(131) {
            let w = comp.word(id).unwrap();
            let mut u = CMat::identity(4, 4);
            for &g in w {
                u = gs.comp_operator(g) * u;
            }
            assert_eq!(group.lookup(&u).unwrap(), id);
        }
    }
    assert!(GateSet::builtin("nope").is_err());
}

#[test]
fn gateset_json_roundtrip() {
    let gs = GateSet::builtin("minimal-cnot").unwrap();
    let back = GateSet::from_json(&gs.to_json().unwrap()).unwrap();
    assert_eq!(back.name, gs.name);
    assert_eq!(back.gates.len(), gs.gates.len());
    for (a, b) in back.gates.iter().zip(&gs.gates) {
        assert!(max_abs_diff(&a.matrix, &b.matrix) < 1e-15);
    }
    let bad = r#"{"name":"x","gates":[{"label":"A","qubits":[0],"matrix":[[2,0],[0,0],[0,0],[1,0]]}]}"#;
    assert!(GateSet::from_json(bad).is_err());
}

#[test]
fn identity_only_gateset_histogram_is_a_point_mass() {
    // Only the identity is reachable, so every leaked action is trivial.
    let group = clifford_group(2).unwrap();
    let gs = GateSet::new(
        "id",
        vec![
            NativeGate { label: "I".into(), qubits: vec![0], matrix: CMat::identity(2, 2) },
            NativeGate { label: "I".into(), qubits: vec![1], matrix: CMat::identity(2, 2) },
        ],
    )
    .unwrap();
    let comp = compile_all(group, &gs, 12).unwrap();
    assert_eq!(comp.n_reachable(), 1);
    let h = leaked_action_histogram(&comp, 0).unwrap();
    assert_eq!(h.probabilities.len(), 24);
    assert_eq!(h.probabilities[clifford_group(1).unwrap().identity_id()], 1.0);
}

#[test]
fn trapped_ion_histograms_are_near_uniform() {
    let group = clifford_group(2).unwrap();
    let comp = compile_all(group, &GateSet::builtin("trapped-ion").unwrap(), 12).unwrap();
    let h0 = leaked_action_histogram(&comp, 0).unwrap();
    let h1 = leaked_action_histogram(&comp, 1).unwrap();
    assert!((h0.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(h0.tvd_from_uniform < 0.15 && h1.tvd_from_uniform < 0.15);
    assert!(total_variation(&h0.probabilities, &h1.probabilities) < 0.1);
    assert!(leaked_action_histogram(&comp, 2).is_err());
}

use leakrb::channel::*;
use leakrb::noise::{depolarizing_channel, leakage_channel};
use leakrb::space::*;
use leakrb::testutil::{random_density, random_unitary};
use proptest::prelude::*;

fn one() -> SpaceLayout {
    build_layout(1).unwrap()
}

fn two() -> SpaceLayout {
    build_layout(2).unwrap()
}

#[test]
fn layout_dimensions() {
    let l = one();
    assert_eq!((l.d, l.d_c, l.d_l), (3, 2, 1));
    let l = two();
    assert_eq!((l.d, l.d_c, l.d_l), (9, 4, 5));
    assert!(build_layout(3).is_err());
    assert!(build_layout(0).is_err());
}

#[test]
fn index_map_is_a_bijection() {
    let l = two();
    assert_ne!(l.index_of("0l").unwrap(), l.index_of("l0").unwrap());
    let mut seen = vec![false; l.d];
    for a in ['0', '1', 'l'] {
        for b in ['0', '1', 'l'] {
            let label: String = [a, b].iter().collect();
            let i = l.index_of(&label).unwrap();
            assert!(!seen[i]);
            seen[i] = true;
            assert_eq!(l.label_of(i), label);
            assert_eq!(l.is_computational(i), !label.contains('l'));
        }
    }
    assert!(seen.iter().all(|&s| s));
    assert_eq!(l.comp_indices(), vec![0, 1, 3, 4]);
    assert!(l.index_of("0").is_err() && l.index_of("0x").is_err());
}

#[test]
fn projectors() {
    for l in [one(), two()] {
        let (ic, il) = subspace_projectors(&l);
        assert_eq!(max_abs_diff(&(&ic.matrix + &il.matrix), &CMat::identity(l.d, l.d)), 0.0);
        assert_eq!((&ic.matrix * &il.matrix).norm(), 0.0);
        assert_eq!(ic.matrix.trace().re as usize, l.d_c);
        assert_eq!(il.matrix.trace().re as usize, l.d_l);
    }
    let (ic, _) = subspace_projectors(&one());
    assert_eq!(ic.matrix[(0, 0)].re, 1.0);
    assert_eq!(ic.matrix[(1, 1)].re, 1.0);
    assert_eq!(ic.matrix[(2, 2)].re, 0.0);
}

#[test]
fn unitary_channels() {
    let l = one();
    let id = unitary_to_channel(l, &CMat::identity(3, 3)).unwrap();
    assert!(id.max_abs_diff(&QuantumChannel::identity(l)) < 1e-15);

    let mut x = CMat::zeros(3, 3);
    x[(0, 1)] = c(1.0, 0.0);
    x[(1, 0)] = c(1.0, 0.0);
    x[(2, 2)] = c(1.0, 0.0);
    let ch = unitary_to_channel(l, &x).unwrap();
    assert!(ch.tp_flag);
    let zero = DensityOperator::basis_state(l, "0").unwrap();
    let one_ = DensityOperator::basis_state(l, "1").unwrap();
    let leak = DensityOperator::basis_state(l, "l").unwrap();
    assert!(max_abs_diff(&ch.apply(&zero).unwrap().matrix, &one_.matrix) < 1e-15);
    assert!(max_abs_diff(&ch.apply(&one_).unwrap().matrix, &zero.matrix) < 1e-15);
    assert!(max_abs_diff(&ch.apply(&leak).unwrap().matrix, &leak.matrix) < 1e-15);

    let mut bad = CMat::identity(3, 3);
    bad[(0, 0)] = c(2.0, 0.0);
    assert!(matches!(unitary_to_channel(l, &bad), Err(leakrb::Error::NotUnitary(_))));
}

#[test]
fn random_unitary_channel_is_cp() {
    let l = two();
    for seed in 0..5 {
        let ch = unitary_to_channel(l, &random_unitary(9, seed)).unwrap();
        assert!(ch.min_choi_eigenvalue() >= -1e-9);
        assert!(ch.tp_defect() < 1e-10);
    }
}

#[test]
fn apply_examples() {
    let l = one();
    let rho = random_density(l, 1);
    let out = QuantumChannel::identity(l).apply(&rho).unwrap();
    assert!(max_abs_diff(&out.matrix, &rho.matrix) < 1e-15);

    let full = depolarizing_channel(1.0, &l).unwrap();
    let out = full.apply(&DensityOperator::basis_state(l, "0").unwrap()).unwrap();
    assert!(max_abs_diff(&out.matrix, &DensityOperator::maximally_mixed_comp(l).matrix) < 1e-12);

    let l2 = two();
    let leak = leakage_channel(0.1, false, &l2).unwrap();
    let out = leak.apply(&DensityOperator::maximally_mixed_comp(l2)).unwrap();
    let (ic, _) = subspace_projectors(&l2);
    assert!(((&ic.matrix * &out.matrix).trace().re - 0.9).abs() < 1e-12);

    let other = two();
    assert!(full.apply(&DensityOperator::basis_state(other, "00").unwrap()).is_err());
}

#[test]
fn powers() {
    let l = two();
    let ch = depolarizing_channel(0.02, &l).unwrap().compose(&leakage_channel(0.01, true, &l).unwrap()).unwrap();
    assert!(channel_power(&ch, 0).max_abs_diff(&QuantumChannel::identity(l)) < 1e-15);
    assert!(channel_power(&ch, 1).max_abs_diff(&ch) < 1e-15);
    let mut seq = QuantumChannel::identity(l);
    for _ in 0..13 {
        seq = ch.compose(&seq).unwrap();
    }
    assert!(channel_power(&ch, 13).max_abs_diff(&seq) < 1e-10);
}

#[test]
fn computational_projection_examples() {
    let l = one();
    let z = DensityOperator::basis_state(l, "0").unwrap();
    assert_eq!(project_computational(&z).matrix, z.matrix);
    let leak = DensityOperator::basis_state(l, "l").unwrap();
    assert_eq!(project_computational(&leak).matrix.norm(), 0.0);
    let mut m = CMat::zeros(3, 3);
    for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        m[(i, j)] = c(0.5, 0.0);
    }
    let rho = DensityOperator::new(l, m).unwrap();
    let p = project_computational(&rho);
    let mut want = CMat::zeros(3, 3);
    want[(0, 0)] = c(0.5, 0.0);
    assert!(max_abs_diff(&p.matrix, &want) < 1e-15);
}

#[test]
fn density_validation() {
    let l = one();
    assert!(DensityOperator::new(l, CMat::identity(3, 3)).is_err());
    let mut m = CMat::zeros(3, 3);
    m[(0, 1)] = c(1.0, 0.0);
    m[(0, 0)] = c(1.0, 0.0);
    assert!(DensityOperator::new(l, m).is_err());
}

#[test]
fn hermitian_spectrum_matches_construction() {
    let u = random_unitary(9, 11);
    let d = nalgebra::DVector::from_fn(9, |i, _| c(i as f64 * 0.5 - 2.0, 0.0));
    let h = &u * CMat::from_diagonal(&d) * u.adjoint();
    let mut ev = hermitian_eigenvalues(&h);
    ev.sort_by(|a, b| a.total_cmp(b));
    for (i, e) in ev.iter().enumerate() {
        assert!((e - (i as f64 * 0.5 - 2.0)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vectorization_roundtrip(seed in any::<u64>()) {
        let rho = random_density(two(), seed);
        let back = unvectorize(&vectorize(&rho.matrix), 9);
        prop_assert_eq!(back, rho.matrix);
    }

    #[test]
    fn kraus_channels_are_tp(lam in 0.0f64..1.0, tau in 0.0f64..0.1, seepage in any::<bool>()) {
        let l = two();
        let dep = depolarizing_channel(lam, &l).unwrap();
        let leak = leakage_channel(tau, seepage, &l).unwrap();
        let id = CMat::identity(9, 9);
        prop_assert!(max_abs_diff(&dep.adjoint_apply(&id), &id) < 1e-10);
        prop_assert!(max_abs_diff(&leak.adjoint_apply(&id), &id) < 1e-10);
        prop_assert!(leak.min_choi_eigenvalue() >= -1e-9);
    }

    #[test]
    fn projection_is_idempotent_and_splits_trace(seed in any::<u64>()) {
        let rho = random_density(two(), seed);
        let p = project_computational(&rho);
        prop_assert!(max_abs_diff(&project_computational(&p).matrix, &p.matrix) < 1e-14);
        let q = project_leak(&rho);
        prop_assert!((rho.trace() - p.trace() - q.trace()).abs() < 1e-12);
    }

    #[test]
    fn power_is_a_homomorphism(a in 0usize..=64, b in 0usize..=64, lam in 0.0f64..0.05, tau in 0.0f64..0.02) {
        let l = two();
        let ch = depolarizing_channel(lam, &l).unwrap().compose(&leakage_channel(tau, true, &l).unwrap()).unwrap();
        let lhs = channel_power(&ch, a + b);
        let rhs = channel_power(&ch, a).compose(&channel_power(&ch, b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}

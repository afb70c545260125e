use leakrb::fit::*;
use leakrb::noise::NoiseModel;
use leakrb::simulate::*;
use proptest::prelude::*;

fn exact(est: Estimator, lengths: &[usize], f: impl Fn(f64) -> f64) -> DecayCurve {
    DecayCurve {
        estimator: est,
        points: lengths
            .iter()
            .map(|&l| CurvePoint { length: l, value: f(l as f64), stderr: 0.0, n_sequences: 1 })
            .collect(),
        d_c: 4,
    }
}

fn range(a: usize, b: usize) -> Vec<usize> {
    (a..=b).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn linear_examples() {
    let slope = 0.75 * 0.004 + 0.001;
    let fit = fit_linear(&exact(Estimator::PComp, &range(1, 40), |l| 1.0 - l * slope)).unwrap();
    assert!((fit.param("slope").unwrap() + 0.004).abs() < 1e-12);
    let rep = assemble_report(Protocol::CompSpam, Regime::Short, &[fit]).unwrap();
    assert!((rep.infidelity.as_ref().unwrap().value - 4e-3).abs() < 1e-12);
    assert!(rep.r.is_none() && rep.lambda.is_none() && rep.tau.is_none());

    let flat = fit_linear(&exact(Estimator::PComp, &range(1, 10), |_| 1.0)).unwrap();
    assert!(flat.param("slope").unwrap().abs() < 1e-14);

    let l = leakrb::space::build_layout(2).unwrap();
    let curves = exact_twirled_decay(&NoiseModel::new(0.0, 1e-3, false), Protocol::AvgMb, &[1, 2, 3, 4], &l, ExactMode::Ideal).unwrap();
    let tau = -fit_retention_linear(find_curve(&curves, Estimator::PIc).unwrap()).unwrap().param("slope").unwrap();
    assert!((tau - 1e-3).abs() < 5e-6, "tau {tau}");

    assert!(fit_linear(&exact(Estimator::PComp, &[5], |_| 1.0)).is_err());
    let long = fit_linear(&exact(Estimator::PComp, &[1, 200], |l| 1.0 - 1e-3 * l)).unwrap();
    assert!(long.has_flag("short-guard-violated"));
}

#[test]
fn exponential_examples() {
    let lens = [1, 2, 4, 8, 16, 32, 64, 128, 256];
    let fit = fit_exponential(&exact(Estimator::PAvg, &lens, |l| 0.75 * 0.99f64.powf(l) + 0.25), Floor::Fixed(0.25)).unwrap();
    assert!((fit.param("p").unwrap() - 0.99).abs() < 1e-8);
    assert!((fit.param("A").unwrap() - 0.75).abs() < 1e-8);

    let lens = [1, 10, 50, 100, 300, 600, 1000];
    let fit = fit_retention_exponential(&exact(Estimator::PRetention, &lens, |l| 0.999f64.powf(l))).unwrap();
    assert!((fit.param("p").unwrap() - 0.999).abs() < 1e-8);

    let free = fit_exponential(&exact(Estimator::PAvg, &[1, 5, 20, 60, 150], |l| 0.7 * 0.98f64.powf(l) + 0.27), Floor::Free).unwrap();
    assert!((free.param("B").unwrap() - 0.27).abs() < 1e-6);

    let flat = fit_exponential(&exact(Estimator::PAvg, &[1, 5, 20], |_| 1.0), Floor::Fixed(0.25)).unwrap();
    assert!(flat.has_flag("p-at-boundary"));
}

#[test]
fn double_exponential_examples() {
    let lens = [1, 3, 10, 30, 100, 300, 1000];
    let model = ModelKind::DoubleExponential;
    let fit = fit_double_exponential(&exact(Estimator::PComp, &lens, |l| model.predict(&[4e-3, 1e-3], l, 4))).unwrap();
    assert!((fit.param("lambda").unwrap() - 4e-3).abs() < 1e-6);
    assert!((fit.param("tau").unwrap() - 1e-3).abs() < 1e-6);

    let fit = fit_double_exponential(&exact(Estimator::PComp, &lens, |l| model.predict(&[4e-3, 0.0], l, 4))).unwrap();
    assert!(fit.param("tau").unwrap() <= 1e-6);
    assert!((fit.param("lambda").unwrap() - 4e-3).abs() < 1e-6);
    assert!(fit_double_exponential(&exact(Estimator::PComp, &[1, 2, 3], |_| 1.0)).is_err());
}

#[test]
fn comp_dominant_examples() {
    let lens = [1, 3, 6, 16, 40, 100];
    let model = ModelKind::CompDominantProduct;
    let fit = fit_comp_dominant(&exact(Estimator::PComp, &lens, |l| model.predict(&[1e-2, 1e-3], l, 4))).unwrap();
    assert!((fit.param("lambda").unwrap() - 1e-2).abs() < 1e-6);
    assert!((fit.param("tau").unwrap() - 1e-3).abs() < 1e-6);
    for l in [1.0, 7.0, 50.0] {
        let a = model.predict(&[2e-2, 0.0], l, 4);
        assert!((a - (0.75 * 0.98f64.powf(l) + 0.25)).abs() < 1e-14);
    }
}

#[test]
fn every_cell_recovers_its_generator() {
    let (lam, tau) = (4e-3, 1e-3);
    let (r, t) = (1.0 - lam - tau, 1.0 - tau);
    let short = range(1, 8);
    let long = [1usize, 3, 10, 30, 100, 300, 1000];
    let k = 0.75;
    for protocol in [Protocol::CompSpam, Protocol::AvgMb, Protocol::Lps] {
        for regime in Regime::ALL {
            let Ok(plan) = cell_fits(protocol, regime, false) else { continue };
            let lens: &[usize] = if regime == Regime::Short { &short } else { &long };
            let fits: Vec<FitResult> = plan
                .iter()
                .map(|&(est, model)| {
                    let f = |l: f64| -> f64 {
                        match (model, est) {
                            (ModelKind::Linear, Estimator::PComp) => 1.0 - l * (k * lam + tau),
                            (ModelKind::Linear, Estimator::PAvg) => 1.0 - l * k * (lam + tau),
                            (ModelKind::Linear, _) => 1.0 - l * k * lam,
                            (ModelKind::RetentionLinear, _) => 1.0 - l * tau,
                            (ModelKind::RetentionExponential, _) => t.powf(l),
                            (ModelKind::ExponentialPlusFloor, Estimator::PPost) => k * (r / t).powf(l) + 0.25,
                            (ModelKind::ExponentialPlusFloor, _) => k * r.powf(l) + 0.25,
                            (m, _) => m.predict(&[lam, tau], l, 4),
                        }
                    };
                    fit_model(&exact(est, lens, f), model).unwrap()
                })
                .collect();
            let rep = assemble_report(protocol, regime, &fits).unwrap();
            if let Some(q) = &rep.r {
                let want = if (regime, protocol) == (Regime::CompDominant, Protocol::Lps) { t - (1.0 - r / t) } else { r };
                assert!(rel(1.0 - q.value, 1.0 - want) < 1e-6, "{protocol} {regime} r = {}", q.value);
            }
            if let Some(q) = &rep.t {
                assert!(rel(1.0 - q.value, tau) < 1e-6, "{protocol} {regime} t = {}", q.value);
            }
            let r_ = rep.r.as_ref().map(|q| q.value);
            let t_ = rep.t.as_ref().map(|q| q.value);
            if let (Some(r_), Some(t_)) = (r_, t_) {
                assert!(0.0 <= r_ && r_ <= t_ && t_ <= 1.0);
                assert_eq!(rep.lambda.as_ref().unwrap().value, t_ - r_);
                assert_eq!(rep.tau.as_ref().unwrap().value, 1.0 - t_);
            }
        }
    }
}

#[test]
fn no_seepage_lps_ratio_reconstruction() {
    let (r, t) = (0.99f64, 0.995f64);
    let lens = [1, 3, 10, 30, 100, 300];
    let post = fit_model(&exact(Estimator::PPost, &lens, |l| 0.75 * (r / t).powf(l) + 0.25), ModelKind::ExponentialPlusFloor).unwrap();
    let ret = fit_model(&exact(Estimator::PRetention, &lens, |l| t.powf(l)), ModelKind::RetentionExponential).unwrap();
    let rep = assemble_report(Protocol::Lps, Regime::NoSeepage, &[post, ret]).unwrap();
    assert!((rep.r.unwrap().value - 0.99).abs() < 1e-6);
    assert!((rep.t.unwrap().value - 0.995).abs() < 1e-6);
}

#[test]
fn pop_transfer_reports_bounds() {
    let lens = [1, 3, 10, 30, 100, 300];
    let avg = fit_model(&exact(Estimator::PAvg, &lens, |l| 0.75 * 0.99f64.powf(l) + 0.25), ModelKind::ExponentialPlusFloor).unwrap();
    let rep = assemble_report(Protocol::AvgMb, Regime::PopTransfer, &[avg]).unwrap();
    let b = rep.bounds.unwrap();
    assert!((b.f_avg_low - 0.99).abs() < 1e-8 && (b.f_avg_high - 0.9925).abs() < 1e-8);
    assert!((rep.infidelity.unwrap().value - 8.75e-3).abs() < 1e-8);
    assert!(rep.t.is_none() && rep.tau.is_none());
    assert!(cell_fits(Protocol::CompSpam, Regime::PopTransfer, false).is_err());
    assert!(assemble_report(Protocol::AvgMb, Regime::NoSeepage, &[]).is_err());
}

#[test]
fn shot_sampled_double_exponential() {
    let lengths = leakrb::experiment::sequence_lengths(Regime::NoSeepage, Protocol::CompSpam, 1e-3, 1e-3).unwrap();
    let nm = leakrb::experiment::cell_noise(Regime::NoSeepage, Protocol::CompSpam, 1e-3, 1e-3);
    let truth = leakrb::experiment::channel_truth(&nm, &leakrb::space::build_layout(2).unwrap()).unwrap();
    let cfg = RBProtocolConfig::new(Protocol::CompSpam, lengths, nm, 21);
    let curves = estimate_decays(&run_protocol(&cfg).unwrap()).unwrap();
    let rep = estimate_cell(&curves, Protocol::CompSpam, Regime::NoSeepage, false).unwrap();
    assert!(rel(rep.infidelity.unwrap().value, truth.infidelity) < 0.2);
}

#[test]
fn bootstrap_behaviour() {
    let pipeline = |d: &leakrb::dataset::RBDataset| estimate_cell(&estimate_decays(d)?, Protocol::CompSpam, Regime::Short, false);
    let mut cfg = RBProtocolConfig::new(Protocol::CompSpam, vec![1, 5, 10], NoiseModel::noiseless(), 1);
    cfg.n_sequences = 10;
    cfg.n_shots = 100;
    let zero = bootstrap(&run_protocol(&cfg).unwrap(), pipeline, 100, 3).unwrap();
    assert!(zero.sd["infidelity"] < 1e-12);
    assert!(bootstrap(&run_protocol(&cfg).unwrap(), pipeline, 50, 3).is_err());

    // Avg. MB in the short regime: the CI of τ̂ shrinks like 1/√n_sequences.
    let pipeline = |d: &leakrb::dataset::RBDataset| estimate_cell(&estimate_decays(d)?, Protocol::AvgMb, Regime::Short, false);
    let nm = NoiseModel::new(1e-3, 2e-3, true);
    let sd_at = |n: usize| {
        let mut cfg = RBProtocolConfig::new(Protocol::AvgMb, vec![1, 4, 8, 12, 16], nm.clone(), 7);
        cfg.n_sequences = n;
        bootstrap(&run_protocol(&cfg).unwrap(), pipeline, 200, 11).unwrap().sd["tau"]
    };
    let ratio = sd_at(20) / sd_at(40);
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reports_respect_r_le_t(slope_avg in -0.02f64..0.0, slope_ic in -0.02f64..0.005) {
        let lens = range(1, 8);
        let a = fit_model(&exact(Estimator::PAvg, &lens, |l| 1.0 + slope_avg * l), ModelKind::Linear).unwrap();
        let b = fit_model(&exact(Estimator::PIc, &lens, |l| 1.0 + slope_ic * l), ModelKind::RetentionLinear).unwrap();
        let rep = assemble_report(Protocol::AvgMb, Regime::Short, &[a, b]).unwrap();
        let (r, t) = (rep.r.unwrap().value, rep.t.unwrap().value);
        prop_assert!(0.0 <= r && r <= t && t <= 1.0);
        prop_assert!((rep.lambda.unwrap().value - (t - r)).abs() <= 1e-12);
        prop_assert!((rep.tau.unwrap().value - (1.0 - t)).abs() <= 1e-12);
    }

    #[test]
    fn reparameterizations_agree(lam in 1e-4f64..2e-2, tau in 1e-4f64..5e-3) {
        let lens = [1usize, 3, 10, 30, 100, 300];
        let c = exact(Estimator::PComp, &lens, |l| ModelKind::DoubleExponential.predict(&[lam, tau], l, 4));
        let lt = fit_double_exponential(&c).unwrap();
        let rt = fit_double_exponential_rt(&c).unwrap();
        for &l in &lens {
            let l = l as f64;
            let direct = 0.75 * rt[0].powf(l) + 0.25 * rt[1].powf(l);
            prop_assert!((lt.predict(l) - direct).abs() < 1e-8);
        }
    }
}

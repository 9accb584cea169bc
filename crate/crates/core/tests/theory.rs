use mfl_core::theory::*;
use mfl_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normalised(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

#[test]
fn uniform_masses_in_closed_form() {
    for c in [4usize, 9, 25] {
        for m in 1..c {
            let r = mixing_bound_check(&MixingInstance { p: vec![1.0 / c as f64; c], m }).unwrap();
            assert!((r.neff - c as f64).abs() < 1e-9);
            assert!((r.worst_actual - (1.0 - m as f64 / c as f64)).abs() < 1e-12);
            assert!(r.holds);
        }
    }
}

#[test]
fn top_m_agrees_with_brute_force_on_larger_supports() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..40 {
        let c = rng.gen_range(8..=14);
        let w: Vec<f64> = (0..c).map(|_| rng.gen::<f64>().powi(3)).collect();
        let p = normalised(&w);
        for m in [1, 2, 4] {
            let r = mixing_bound_check(&MixingInstance { p: p.clone(), m }).unwrap();
            assert!((r.worst_actual - exhaustive_worst(&p, m)).abs() < 1e-12);
        }
    }
}

#[test]
fn dirichlet_sweep_has_no_violations() {
    let s = mixing_bound_sweep(2000, &[1, 2, 4], 3).unwrap();
    assert_eq!(s.instances, 6000);
    assert_eq!(s.violations, 0);
    assert!(s.min_margin >= -1e-12);
}

#[test]
fn invalid_distributions_are_contract_errors() {
    assert!(matches!(mixing_bound_check(&MixingInstance { p: vec![0.5, 0.6], m: 1 }), Err(Error::Contract(_))));
    assert!(matches!(mixing_bound_check(&MixingInstance { p: vec![1.5, -0.5], m: 1 }), Err(Error::Contract(_))));
    assert!(matches!(mixing_bound_check(&MixingInstance { p: vec![], m: 1 }), Err(Error::Contract(_))));
}

#[test]
fn designed_family_satisfies_the_bound() {
    for seed in 0..10 {
        check_family(seed);
    }
}

fn check_family(seed: u64) {
    let fam = susceptibility_family(&[4, 8, 16, 32], 20_000, 5000, seed).unwrap();
    assert!(fam.all_hold, "{:?}", fam.checks);
    assert!(fam.rhs_nondecreasing);
    assert!(fam.tail.kappa > 0.0 && fam.tail.rho > 0.0);
    assert!(fam.tail.protected_min_mean >= 0.0);
    // Larger effective support gives a strictly larger guaranteed increase.
    assert!(fam.checks.last().unwrap().rhs > fam.checks[0].rhs);
    for c in &fam.checks {
        assert!(c.ci_low <= c.lhs && c.lhs <= c.ci_high);
    }
}

#[test]
fn bound_is_vacuous_at_or_below_the_budget() {
    let fam = DesignedFamily::new(16, 2, 0).unwrap();
    let tail = measure_tail(&fam.full().unwrap(), 2000, 0.9, 1).unwrap();
    assert_eq!(susceptibility_rhs(2.0, 2, &tail, fam.eta, 1.0), 0.0);
    assert!(susceptibility_rhs(16.0, 2, &tail, fam.eta, 1.0) > 0.0);
}

#[test]
fn instance_assumptions_are_checked() {
    let fam = DesignedFamily::new(8, 2, 0).unwrap();
    let good = fam.instance(6).unwrap();
    good.verify().unwrap();
    assert!((good.neff() - 6.0).abs() < 1e-9);

    let mut big_s = good.clone();
    big_s.protected = vec![0, 1, 2];
    assert!(matches!(big_s.verify(), Err(Error::Rejected(_))));

    let mut far = good.clone();
    far.optima[3] = vec![5.0; 8];
    assert!(matches!(far.verify(), Err(Error::Rejected(_))));

    let mut no_step = good.clone();
    no_step.eta = 0.0;
    assert!(matches!(no_step.verify(), Err(Error::Rejected(_))));

    assert!(fam.instance(2).is_err());
    assert!(fam.instance(9).is_err());
}

#[test]
fn simulation_is_deterministic_and_hashed() {
    let fam = DesignedFamily::new(8, 2, 5).unwrap();
    let inst = fam.instance(8).unwrap();
    let tail = measure_tail(&inst, 2000, 0.9, 0).unwrap();
    assert_eq!(tail, measure_tail(&inst, 2000, 0.9, 0).unwrap());
    let a = susceptibility_simulate(&inst, &tail, 500, 9, 0.0).unwrap();
    let b = susceptibility_simulate(&inst, &tail, 500, 9, 0.0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.instance, inst.hash());
    assert_ne!(inst.hash(), fam.instance(7).unwrap().hash());
}

#[test]
fn full_report_holds() {
    let r = verify_all(20_000, 0).unwrap();
    assert!(r.all_hold(), "{:?}", r.lines.iter().filter(|l| !l.holds).collect::<Vec<_>>());
    assert!(r.lines.len() >= 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mixing_bound_holds_for_arbitrary_masses(w in prop::collection::vec(1e-6f64..1.0, 1..40), m in 1usize..6) {
        let r = mixing_bound_check(&MixingInstance { p: normalised(&w), m }).unwrap();
        prop_assert!(r.holds, "{:?}", r);
        prop_assert!(r.neff >= 1.0 - 1e-9 && r.neff <= w.len() as f64 + 1e-9);
    }

    #[test]
    fn one_step_change_respects_the_uniform_bound(seed in 0u64..10_000, eta in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let optimum: Vec<f64> = theta.iter().map(|t| t + rng.gen_range(-0.5..0.5)).collect();
        let mut u: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= n);
        let r = one_step_uniform_lower_bound(&theta, &optimum, eta, &u, 1.5).unwrap();
        prop_assert!(r.actual >= r.bound - 1e-12);
    }
}

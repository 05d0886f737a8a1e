use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use condtest::conditioning::Arm;
use condtest::engine::{focal_arms, pattern_statistic};
use condtest::rng::stream;
use condtest::*;

const CAP: u128 = 1_000_000;

/// Household sizes, a treated-household count and a seed.
fn instance(max_k: usize, max_n: usize) -> impl Strategy<Value = (Vec<usize>, usize, u64)> {
    (2..=max_k)
        .prop_flat_map(move |k| (prop::collection::vec(2..=max_n, k), 1..k, any::<u64>()))
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut r = stream(seed, 7);
    (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn two_stage_mass_sums_to_one((sizes, k1, _) in instance(5, 3)) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let design = DesignSpec::TwoStage { k1 };
        let total: f64 = design.enumerate(&pop, CAP).unwrap().map(|z| design.log_mass(&pop, &z).exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        prop_assert_eq!(design.enumerate(&pop, CAP).unwrap().count() as u128, design.support_size(&pop));
    }

    #[test]
    fn complete_and_bernoulli_mass_sum_to_one(n in 1usize..9, n1 in 0usize..9, prob in 0.05f64..0.95) {
        let pop = Population::from_sizes(&vec![1; n]).unwrap();
        let n1 = n1.min(n);
        for design in [DesignSpec::Complete { n1 }, DesignSpec::Bernoulli { prob }] {
            let total: f64 = design.enumerate(&pop, CAP).unwrap().map(|z| design.log_mass(&pop, &z).exp()).sum();
            assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampled_assignments_lie_in_support((sizes, k1, seed) in instance(8, 5)) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let design = DesignSpec::TwoStage { k1 };
        let z = design.sample(&pop, &mut stream(seed, 0)).unwrap();
        prop_assert!(design.log_mass(&pop, &z).is_finite());
        prop_assert_eq!(z.n_treated_households(), k1);
        prop_assert_eq!(z.n_treated(), k1);
    }

    #[test]
    fn two_stage_never_labels_treated_unit_in_control_household((sizes, k1, seed) in instance(8, 5)) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let z = DesignSpec::TwoStage { k1 }.sample(&pop, &mut stream(seed, 0)).unwrap();
        for (i, label) in ExposureMapSpec::TwoStage.exposures(&pop, &z).unwrap().into_iter().enumerate() {
            prop_assert_ne!(label, ExposureLabel::Household { own: true, household: false });
            let expected = match (z.is_treated(i), z.household_treated(pop.household_of(i))) {
                (true, _) => ExposureLabel::TREATED,
                (false, true) => ExposureLabel::SPILLOVER,
                (false, false) => ExposureLabel::CONTROL,
            };
            prop_assert_eq!(label, expected);
        }
    }

    #[test]
    fn focal_draws_take_one_unit_per_household((sizes, k1, seed) in instance(8, 5)) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let z = DesignSpec::TwoStage { k1 }.sample(&pop, &mut stream(seed, 0)).unwrap();
        for mech in [
            MechanismSpec::SpilloverConditional,
            MechanismSpec::PrimaryConditional,
            MechanismSpec::PerHouseholdUnconditional,
            MechanismSpec::AronowRestriction,
        ] {
            let u = mech.draw_focals(&pop, &z, &mut stream(seed, 1)).unwrap();
            let mut households: Vec<usize> = u.iter().map(|&i| pop.household_of(i)).collect();
            households.dedup();
            prop_assert_eq!(households.len(), pop.n_households());
        }
        let us = MechanismSpec::SpilloverConditional.draw_focals(&pop, &z, &mut stream(seed, 1)).unwrap();
        prop_assert!(us.iter().all(|&i| !z.is_treated(i)));
        let up = MechanismSpec::PrimaryConditional.draw_focals(&pop, &z, &mut stream(seed, 1)).unwrap();
        prop_assert!(up.iter().all(|&i| z.is_treated(i) == z.household_treated(pop.household_of(i))));
    }

    #[test]
    fn compatible_set_contains_observed((sizes, k1, seed) in instance(4, 3)) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let design = DesignSpec::TwoStage { k1 };
        let z = design.sample(&pop, &mut stream(seed, 0)).unwrap();
        for (hyp, mech) in [
            (ContrastHypothesis::spillover(), MechanismSpec::SpilloverConditional),
            (ContrastHypothesis::primary(), MechanismSpec::PrimaryConditional),
        ] {
            let u = mech.draw_focals(&pop, &z, &mut stream(seed, 1)).unwrap();
            let set = compatible_set(&hyp, &pop, &design, &u, &z, CAP).unwrap();
            prop_assert!(set.contains(&z));
            let aronow = aronow_set(&pop, &design, &u, &z, CAP).unwrap();
            prop_assert!(aronow.iter().all(|a| set.contains(a)));
        }
    }

    #[test]
    fn permutation_matches_exact_for_both_contrasts((sizes, k1, seed) in instance(5, 3)) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let design = DesignSpec::TwoStage { k1 };
        let z = design.sample(&pop, &mut stream(seed, 0)).unwrap();
        let y = normals(pop.n_units(), seed);
        for (hyp, mech) in [
            (ContrastHypothesis::spillover(), MechanismSpec::SpilloverConditional),
            (ContrastHypothesis::primary(), MechanismSpec::PrimaryConditional),
        ] {
            let u = mech.draw_focals(&pop, &z, &mut stream(seed, 1)).unwrap();
            let event = ConditioningEvent::explicit(&mech, &hyp, &pop, &design, u.clone(), &z, CAP).unwrap();
            let exact = pvalue_exact(&hyp, &pop, &design, &mech, &event, &z, &y, Alternative::TwoSided).unwrap();
            let config = EngineConfig { method: Method::Auto, alternative: Alternative::TwoSided, ..EngineConfig::default() };
            let test = ConditionalTest::new(&pop, &design, &hyp, &mech, config).unwrap();
            let auto = test.run_with_focals(&y, &z, u.clone(), seed).unwrap();
            prop_assert_eq!(auto.method, Method::Permutation);
            prop_assert!((auto.pvalue - exact.pvalue).abs() <= 1e-12);
        }
    }

    #[test]
    fn statistic_ignores_outcomes_off_the_focal_set((sizes, k1, seed) in instance(8, 4), noise in any::<u64>()) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let z = DesignSpec::TwoStage { k1 }.sample(&pop, &mut stream(seed, 0)).unwrap();
        let hyp = ContrastHypothesis::spillover();
        let u = MechanismSpec::PerHouseholdUnconditional.draw_focals(&pop, &z, &mut stream(seed, 1)).unwrap();
        let y = normals(pop.n_units(), seed);
        let mut y2 = y.clone();
        let other = normals(pop.n_units(), noise);
        for i in (0..pop.n_units()).filter(|i| !u.contains(i)) {
            y2[i] = other[i] * 1e3;
        }
        prop_assert_eq!(diff_in_means(&hyp, &pop, &u, &z, &y), diff_in_means(&hyp, &pop, &u, &z, &y2));
    }

    #[test]
    fn pvalues_are_valid_probabilities((sizes, k1, seed) in instance(10, 4), r in 1usize..200) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let design = DesignSpec::TwoStage { k1 };
        let z = design.sample(&pop, &mut stream(seed, 0)).unwrap();
        let y = normals(pop.n_units(), seed);
        for alt in [Alternative::Greater, Alternative::Less, Alternative::TwoSided] {
            let rep = pvalue_monte_carlo(
                &ContrastHypothesis::spillover(), &pop, &design, &MechanismSpec::PerHouseholdUnconditional,
                &z, &y, seed, r, alt,
            );
            // unequal household sizes can leave no sampler; exact mode covers those
            let Ok(rep) = rep else { continue };
            prop_assert!(rep.pvalue > 0.0 && rep.pvalue <= 1.0);
            if !rep.degenerate {
                prop_assert!(rep.pvalue >= 1.0 / (r as f64 + 1.0) - 1e-15);
            }
        }
    }

    #[test]
    fn null_shift_round_trips(tau in -3.0f64..3.0, (sizes, k1, seed) in instance(8, 4)) {
        let pop = Population::from_sizes(&sizes).unwrap();
        let z = DesignSpec::TwoStage { k1 }.sample(&pop, &mut stream(seed, 0)).unwrap();
        let exposures = ExposureMapSpec::TwoStage.exposures(&pop, &z).unwrap();
        let y = normals(pop.n_units(), seed);
        for target in [EffectTarget::Spillover, EffectTarget::Primary] {
            let shifted = shift_under_null(&y, &exposures, target, tau);
            let back = shift_under_null(&shifted, &exposures, target, -tau);
            for (a, b) in y.iter().zip(&back) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn effective_law_is_a_distribution(k in 1usize..40, k1f in 0.0f64..1.0, n in 1usize..12) {
        let k1 = ((k as f64) * k1f) as usize;
        for target in [EffectTarget::Spillover, EffectTarget::Primary] {
            let law = match effective_focal_distribution_for(target, k, k1, n) {
                Ok(law) => law,
                Err(_) => {
                    prop_assert!(target == EffectTarget::Spillover && n == 1);
                    continue;
                }
            };
            assert_relative_eq!(law.iter().map(|(_, p)| p).sum::<f64>(), 1.0, epsilon = 1e-12);
            prop_assert!(law.iter().all(|&(c, p)| c >= k - k1 && c <= k && p >= 0.0));
        }
    }
}

/// Monte Carlo p-values agree with the exact conditional p-value within
/// three binomial standard errors.
#[test]
fn exact_permutation_and_monte_carlo_agree() {
    let mut rng = stream(11, 0);
    let r = 4000;
    for _ in 0..12 {
        let k = rng.random_range(3..=6);
        let n = rng.random_range(2..=3);
        let k1 = rng.random_range(1..k);
        let pop = Population::from_sizes(&vec![n; k]).unwrap();
        let design = DesignSpec::TwoStage { k1 };
        let z = design.sample(&pop, &mut rng).unwrap();
        let y: Vec<f64> = (0..pop.n_units()).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (hyp, mech) in [
            (ContrastHypothesis::spillover(), MechanismSpec::PerHouseholdUnconditional),
            (ContrastHypothesis::spillover(), MechanismSpec::SpilloverConditional),
            (ContrastHypothesis::primary(), MechanismSpec::PerHouseholdUnconditional),
            (ContrastHypothesis::spillover(), MechanismSpec::AronowRestriction),
        ] {
            let u = mech.draw_focals(&pop, &z, &mut rng).unwrap();
            let event = ConditioningEvent::explicit(&mech, &hyp, &pop, &design, u.clone(), &z, CAP).unwrap();
            let exact = pvalue_exact(&hyp, &pop, &design, &mech, &event, &z, &y, Alternative::Greater).unwrap();
            let config = EngineConfig { method: Method::MonteCarlo, replicates: r, ..EngineConfig::default() };
            let test = ConditionalTest::new(&pop, &design, &hyp, &mech, config).unwrap();
            let mc = test.run_with_focals(&y, &z, u.clone(), 5).unwrap();
            let se = (exact.pvalue * (1.0 - exact.pvalue) / r as f64).sqrt().max(1.0 / r as f64);
            assert!(
                (mc.pvalue - exact.pvalue).abs() <= 3.0 * se + 1.0 / r as f64,
                "{}: exact {} vs mc {}",
                mech.name(),
                exact.pvalue,
                mc.pvalue
            );
            if hyp == ContrastHypothesis::spillover() && mech == MechanismSpec::SpilloverConditional {
                let perm = pvalue_permutation_spillover(&pop, &z, &y, &u, 5, r, 0, Alternative::Greater).unwrap();
                let se = (exact.pvalue * (1.0 - exact.pvalue) / r as f64).sqrt().max(1.0 / r as f64);
                assert!((perm.pvalue - exact.pvalue).abs() <= 3.0 * se + 1.0 / r as f64);
            }
        }
    }
}

/// Brute-force oracle: weight every support point by its design mass and by
/// the chance of drawing the observed focal set there, keep the points that
/// reproduce it, and count statistics at least as large as observed.
#[test]
fn exact_pvalue_matches_brute_force_oracle() {
    let mut rng = stream(12, 0);
    for _ in 0..20 {
        let k = rng.random_range(2..=4);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(2..=3)).collect();
        let k1 = rng.random_range(1..k);
        let pop = Population::from_sizes(&sizes).unwrap();
        let design = DesignSpec::TwoStage { k1 };
        let z = design.sample(&pop, &mut rng).unwrap();
        let y: Vec<f64> = (0..pop.n_units()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let hyp = ContrastHypothesis::spillover();
        let mech = MechanismSpec::PerHouseholdUnconditional;
        let u = mech.draw_focals(&pop, &z, &mut rng).unwrap();
        let yu: Vec<f64> = u.iter().map(|&i| y[i]).collect();
        let stat = |zz: &Assignment| pattern_statistic(&yu, &focal_arms(&hyp, &pop, &u, zz));
        let t_obs = stat(&z);
        let (mut num, mut den) = (0.0, 0.0);
        for zz in design.enumerate(&pop, CAP).unwrap() {
            let arms = focal_arms(&hyp, &pop, &u, &zz);
            if arms.iter().zip(focal_arms(&hyp, &pop, &u, &z)).any(|(a, b)| (*a == Arm::Other) != (b == Arm::Other)) {
                continue;
            }
            // per-household uniform focal choice does not depend on Z
            let w = design.log_mass(&pop, &zz).exp();
            den += w;
            let extreme = match (stat(&zz), t_obs) {
                (Some(t), Some(o)) => t >= o - 1e-12,
                _ => true,
            };
            if extreme {
                num += w;
            }
        }
        let event = ConditioningEvent::explicit(&mech, &hyp, &pop, &design, u.clone(), &z, CAP).unwrap();
        let exact = pvalue_exact(&hyp, &pop, &design, &mech, &event, &z, &y, Alternative::Greater).unwrap();
        let oracle = if t_obs.is_none() { 1.0 } else { num / den };
        assert_relative_eq!(exact.pvalue, oracle, epsilon = 1e-12);
    }
}

#[test]
fn hodges_lehmann_is_shift_equivariant() {
    let pop = Population::from_sizes(&[2; 120]).unwrap();
    let design = DesignSpec::TwoStage { k1: 60 };
    let hyp = ContrastHypothesis::spillover();
    let mech = MechanismSpec::SpilloverConditional;
    let test = ConditionalTest::new(&pop, &design, &hyp, &mech, EngineConfig { replicates: 499, ..EngineConfig::default() })
        .unwrap();
    let z = design.sample(&pop, &mut stream(3, 0)).unwrap();
    let exposures = ExposureMapSpec::TwoStage.exposures(&pop, &z).unwrap();
    let y = normals(pop.n_units(), 3);
    let config = InversionConfig::default();
    let (_, base) = invert_test(&test, &y, &z, 9, &config).unwrap();
    for c in [-1.5, 0.4, 2.0] {
        let shifted: Vec<f64> =
            y.iter().zip(&exposures).map(|(v, &e)| if e == ExposureLabel::SPILLOVER { v + c } else { *v }).collect();
        let (_, moved) = invert_test(&test, &shifted, &z, 9, &config).unwrap();
        let step = (base.ci_high - base.ci_low) / 50.0;
        assert!((moved.tau_hat - base.tau_hat - c).abs() <= step, "shift {c}: {} vs {}", moved.tau_hat, base.tau_hat);
        assert!((moved.width() - base.width()).abs() <= 2.0 * step);
    }
}

#[test]
fn single_precision_matches_double() {
    let pop = Population::from_sizes(&[3; 40]).unwrap();
    let design = DesignSpec::TwoStage { k1: 20 };
    let z = design.sample(&pop, &mut stream(4, 0)).unwrap();
    let y = normals(pop.n_units(), 4);
    let y32: Vec<f32> = y.iter().map(|&v| v as f32).collect();
    let hyp = ContrastHypothesis::spillover();
    let test = ConditionalTest::new(&pop, &design, &hyp, &MechanismSpec::SpilloverConditional, EngineConfig::default())
        .unwrap();
    let a: Report = test.run(&y, &z, 8).unwrap();
    let b: Report32 = test.run(&y32, &z, 8).unwrap();
    assert_eq!(a.focals, b.focals);
    assert_relative_eq!(a.t_obs.unwrap(), b.t_obs.unwrap() as f64, epsilon = 1e-5);
    assert!((a.pvalue - b.pvalue).abs() <= 2e-3);
}

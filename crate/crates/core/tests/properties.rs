mod common;

use pifs_sched::attractor;
use pifs_sched::sim;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedules_keep_sign_and_threshold_invariants(seed in any::<u64>(), steps in 1usize..300) {
        let s = common::random_schedule(&mut rng(seed), steps);
        common::schedule_invariants(&s).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn suppression_never_raises_exponents(seed in any::<u64>(), steps in 2usize..60, patches in 1usize..6) {
        let mut r = rng(seed);
        let s = common::random_schedule(&mut r, steps);
        let spec = common::random_spectrum(&mut r, patches);
        let table = common::random_table(&mut r, &s, &spec);
        common::suppression_inequalities(&s, &spec, &table).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn growth_obeys_cauchy_schwarz(seed in any::<u64>(), steps in 2usize..200, patches in 1usize..8) {
        let mut r = rng(seed);
        let s = common::random_schedule(&mut r, steps);
        let spec = common::random_spectrum(&mut r, patches);
        common::cs_bound(&s, &spec).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn bridge_bounds_affine_chains(seed in any::<u64>()) {
        common::bridge_checks(&mut rng(seed)).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn multipliers_match_factor(seed in any::<u64>()) {
        common::multiplier_triple(&mut rng(seed)).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn moran_product_increasing(seed in any::<u64>(), steps in 1usize..100, lo in 1e-3f64..50.0, gap in 1e-6f64..50.0) {
        let s = common::random_schedule(&mut rng(seed), steps);
        let a = attractor::log_moran_product(&s, lo).unwrap();
        let b = attractor::log_moran_product(&s, lo + gap).unwrap();
        prop_assert!(a < b, "G({lo}) = {a} >= G({}) = {b}", lo + gap);
    }

    #[test]
    fn fm_factors_inside_unit_interval(steps in 1usize..500, mu in 1e-4f64..0.999) {
        let c = sim::fm_chain(steps, mu, 0.0).unwrap();
        prop_assert!(c.factors.iter().all(|f| *f > 0.0 && *f < 1.0));
        prop_assert!(c.product > 0.0 && c.product < 1.0);
    }
}

#[test]
fn kaplan_yorke_hand_cases() {
    common::ky_hand_cases().unwrap();
}

#[test]
fn fm_products_match_kappa() {
    common::fm_products(&mut rng(17)).unwrap();
}

#[test]
fn statistics_match_brute_force() {
    common::statistics_vs_brute_force(&mut rng(3)).unwrap();
}

use proptest::prelude::*;

use spark_branch::adjoint_transversality::{random_domain_state, solve_adjoint_w, transversality_f};
use spark_branch::electron_system::{
    auxiliary_u, solve_electron, sparking_voltage, sparking_voltage_with, Normalization, SparkScan, DEFAULT_LAMBDA_MAX,
};
use spark_branch::model::in_gamma_region;
use spark_branch::steady_state::{admissibility, jacobian, residual, State};
use spark_branch::validation::fd_jacobian;
use spark_branch::{Parameters, RadialGrid};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameters strictly inside the region `γ > 1/a`, `b > 4a/e`.
fn gamma_region() -> impl Strategy<Value = Parameters> {
    (0.8f64..5.0, 1.05f64..3.0, 1.05f64..4.0).prop_map(|(a, bk, gk)| {
        let p = Parameters::with_unit_mobilities(a, 4.0 * a / std::f64::consts::E * bk, gk / a).unwrap();
        assert!(in_gamma_region(&p));
        p
    })
}

fn grid() -> RadialGrid {
    RadialGrid::new(65).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trivial_state_is_exact(p in gamma_region(), lambda in 1e-3f64..50.0) {
        let g = grid();
        prop_assert_eq!(residual(&State::trivial(lambda, &g), &p, &g).max_abs(), 0.0);
    }

    #[test]
    fn electron_profile_is_positive_and_dominates_u(p in gamma_region(), lambda in 5.0f64..60.0) {
        let g = grid();
        let u = solve_electron(lambda, &p, &g).unwrap().u;
        prop_assert!(u[1..].iter().all(|&v| v > 0.0));
        // both vanish at the anode, where U's closed form leaves rounding residue
        let big = auxiliary_u(lambda, &g);
        for (a, b) in u[1..].iter().zip(big[1..].iter()) {
            prop_assert!(a >= b, "u = {a}, U = {b}");
        }
    }

    #[test]
    fn sparking_root_ignores_normalization(p in gamma_region()) {
        let g = grid();
        let tol = 1e-10;
        let slope = sparking_voltage(&p, DEFAULT_LAMBDA_MAX, &g, tol).unwrap();
        let value = sparking_voltage_with(&p, &SparkScan::default(), &g, tol, Normalization::CathodeValue).unwrap();
        prop_assert!(slope.lambda_dagger > 0.0);
        prop_assert!((slope.lambda_dagger - value.lambda_dagger).abs() <= 1e-8 * slope.lambda_dagger);
    }

    #[test]
    fn transversality_is_linear_in_the_profile(p in gamma_region(), c in -10.0f64..10.0) {
        let g = grid();
        let spark = sparking_voltage(&p, DEFAULT_LAMBDA_MAX, &g, 1e-10).unwrap();
        let l = spark.lambda_dagger;
        let w = solve_adjoint_w(l, &p, &g).unwrap();
        let f = transversality_f(l, &spark.u_dagger, &w, &p, &g);
        let scaled = spark.u_dagger.scaled(c);
        let fc = transversality_f(l, &scaled, &w, &p, &g);
        prop_assert!((fc - c * f).abs() <= 1e-12 * (1.0 + f.abs() * c.abs()));
    }

    #[test]
    fn jacobian_matches_differences(p in gamma_region(), seed in 0u64..1000, lambda in 1.0f64..10.0) {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = random_domain_state(lambda, &g, &mut rng);
        for f in [&mut s.rho_i, &mut s.r_e, &mut s.v] {
            *f = f.scaled(0.05);
        }
        prop_assume!(admissibility(&s, &g).ok);
        let analytic = jacobian(&s, &p, &g).to_dense();
        let fd = fd_jacobian(&s, &p, &g, 1e-7);
        let n = analytic.ncols();
        let gap = (analytic.clone() - fd.columns(0, n)).amax() / analytic.amax();
        prop_assert!(gap <= 1e-6, "relative gap {gap:e}");
    }
}

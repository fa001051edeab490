mod common;

use nalgebra::DMatrix;
use ncs_core::linalg::{self, rel_diff};
use ncs_core::model::{stack, validate};
use ncs_core::oracle::exact_cost;
use ncs_core::riccati::{check_definiteness, coefficients_at, solve_cre};
use ncs_core::synthesis::{gains, optimal_cost};
use ncs_core::{Coupling, Mode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn definite_instances_keep_definiteness(seed in any::<u64>(), l in 1usize..=3, n in 0usize..=10) {
        let v = validate(common::random_instance(seed, l, 3, n), Mode::Definite).unwrap();
        let s = stack(&v);
        for coupling in [Coupling::Literal, Coupling::Consistent] {
            let sol = solve_cre(&v, &s, coupling).unwrap();
            let rep = check_definiteness(&v, &s, &sol);
            prop_assert!(rep.passes(), "{coupling:?}: {:?}", rep.violations);
        }
    }

    #[test]
    fn closed_form_matches_oracle(seed in any::<u64>(), l in 1usize..=3, n in 0usize..=6) {
        let v = validate(common::random_instance(seed, l, 3, n), Mode::Definite).unwrap();
        let s = stack(&v);
        let sol = solve_cre(&v, &s, Coupling::Consistent).unwrap();
        let g = gains(&sol).unwrap();
        let exact = exact_cost(&v, &s, &g).unwrap();
        let closed = optimal_cost(&sol, &v).unwrap();
        prop_assert!((exact - closed).abs() <= 1e-8 * exact.abs().max(1.0), "{exact} vs {closed}");
        prop_assert!(exact >= 0.0);
    }

    #[test]
    fn gains_solve_the_stationarity_system(seed in any::<u64>(), l in 1usize..=3, n in 0usize..=6) {
        let v = validate(common::random_instance(seed, l, 3, n), Mode::Definite).unwrap();
        let s = stack(&v);
        let sol = solve_cre(&v, &s, Coupling::Consistent).unwrap();
        let g = gains(&sol).unwrap();
        for k in 0..=n {
            let c = coefficients_at(&v, &s, &sol, k);
            let resid = &c.lambda * &g.steps[k].khat + &c.psi;
            let scale = linalg::frobenius(&c.lambda) * linalg::frobenius(&g.steps[k].khat) + linalg::frobenius(&c.psi);
            prop_assert!(linalg::frobenius(&resid) <= 1e-12 * scale.max(1.0));
            for (i, sc) in c.subsystems.iter().enumerate() {
                let r = &sc.pi_tilde * &g.steps[k].ktilde[i] + &sc.omega_tilde;
                let scale = linalg::frobenius(&sc.pi_tilde) * linalg::frobenius(&g.steps[k].ktilde[i])
                    + linalg::frobenius(&sc.omega_tilde);
                prop_assert!(linalg::frobenius(&r) <= 1e-12 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn optimum_is_not_beaten(seed in any::<u64>(), l in 1usize..=2, n in 0usize..=4) {
        let v = validate(common::random_instance(seed, l, 2, n), Mode::Definite).unwrap();
        let s = stack(&v);
        let g = gains(&solve_cre(&v, &s, Coupling::Consistent).unwrap()).unwrap();
        let best = exact_cost(&v, &s, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..10 {
            let mut h = g.clone();
            for idx in 0..h.entry_count() {
                h.set_entry(idx, h.entry(idx) + 0.1 * (2.0 * rng.random::<f64>() - 1.0));
            }
            let c = exact_cost(&v, &s, &h).unwrap();
            prop_assert!(c >= best - 1e-9 * best.abs().max(1.0), "{c} < {best}");
        }
    }

    #[test]
    fn stacking_places_blocks(seed in any::<u64>(), l in 1usize..=3) {
        let v = validate(common::random_instance(seed, l, 3, 1), Mode::Definite).unwrap();
        let s = stack(&v);
        let d = v.dims();
        let m = v.model();
        prop_assert_eq!(s.a.nrows(), d.nl);
        prop_assert_eq!(s.b.ncols(), d.ml);
        for (i, sub) in m.subsystems.iter().enumerate() {
            let r = d.state_offsets[i];
            let (ni, mi) = (d.state_dims[i], d.input_dims[i + 1]);
            prop_assert_eq!(linalg::block(&s.a, r, r, ni, ni), sub.a.clone());
            prop_assert_eq!(linalg::block(&s.b, r, 0, ni, m.m0), sub.b0.clone());
            prop_assert_eq!(linalg::block(&s.b, r, d.input_offsets[i + 1], ni, mi), sub.b.clone());
            prop_assert_eq!(linalg::block(&s.a_bold[i], r, r, ni, ni), sub.a_bar.clone());
            prop_assert_eq!(linalg::block(&s.b_bold[i], r, d.input_offsets[i + 1], ni, mi), sub.b_bar.clone());
            // everything outside subsystem i's row block is zero
            let mut ab = s.a_bold[i].clone();
            let mut bb = s.b_bold[i].clone();
            linalg::set_block(&mut ab, r, r, &DMatrix::zeros(ni, ni));
            linalg::set_block(&mut bb, r, 0, &DMatrix::zeros(ni, d.ml));
            prop_assert!(ab.iter().chain(bb.iter()).all(|&x| x == 0.0));
            for j in d.state_range(i) {
                prop_assert_eq!(s.p_diag[(j, j)], sub.p);
            }
        }
        // blocks of A outside the diagonal are zero
        let mut a = s.a.clone();
        for i in 0..l {
            let r = d.state_offsets[i];
            linalg::set_block(&mut a, r, r, &DMatrix::zeros(d.state_dims[i], d.state_dims[i]));
        }
        prop_assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weight_scaling_scales_cost(seed in any::<u64>(), c in 0.1f64..10.0) {
        let base = common::random_instance(seed, 2, 2, 3);
        let run = |m| {
            let v = validate(m, Mode::Definite).unwrap();
            let sol = solve_cre(&v, &stack(&v), Coupling::Consistent).unwrap();
            (gains(&sol).unwrap(), optimal_cost(&sol, &v).unwrap())
        };
        let (g1, j1) = run(base.clone());
        let (g2, j2) = run(base.scaled_weights(c));
        for (a, b) in g1.steps.iter().zip(&g2.steps) {
            prop_assert!(rel_diff(&a.khat, &b.khat) <= 1e-10);
        }
        prop_assert!((j2 - c * j1).abs() <= 1e-10 * j2.abs().max(1.0));
    }
}

use gridkam::grid::{build_grid, discrete_dx, Parity, ScalarField};
use gridkam::hj::{propagate, step_backward_scheme};
use gridkam::models::builtin_model;
use gridkam::walk::{propagate_distribution, transition_probs, ControlPolicy, Direction};
use proptest::prelude::*;

fn mech() -> gridkam::HamiltonianModel {
    builtin_model("mechanical-1d").unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_sum_to_one(xi in -2.0f64..2.0, eta in -2.0f64..2.0, forward in any::<bool>()) {
        let g = build_grid(2, 2, 4).unwrap(); // cap 1
        let dir = if forward { Direction::Forward } else { Direction::Backward };
        let z = [xi * 0.5, eta * 0.5];
        let rho = transition_probs(&z, dir, &g).unwrap();
        prop_assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        prop_assert!(rho.iter().all(|&r| r >= 0.0));
    }

    #[test]
    fn scheme_commutes_with_constants(seed in 0u64..1000, a in -5.0f64..5.0, c in -0.5f64..0.5) {
        let g = build_grid(1, 8, 32).unwrap();
        let v = ScalarField::random_lipschitz(&g, Parity::Odd, 1.0, seed);
        let mut w = v.clone();
        w.shift(a);
        let sv = step_backward_scheme(&v, 0, &[c], &mech()).unwrap();
        let sw = step_backward_scheme(&w, 0, &[c], &mech()).unwrap();
        for (i, x) in sv.iter() {
            prop_assert!((sw.at(i) - x - a).abs() < 1e-12);
        }
    }

    #[test]
    fn scheme_preserves_order(seed in 0u64..1000, bump in 0.0f64..0.01, node in 0usize..8) {
        let g = build_grid(1, 8, 32).unwrap();
        let v = ScalarField::random_lipschitz(&g, Parity::Odd, 1.0, seed);
        let mut w = v.clone();
        let lin = g.nodes(Parity::Odd)[node];
        w.set(lin, w.at(lin) + bump);
        let (pv, _) = propagate(&v, 0, 6, &[0.2], &mech(), Direction::Backward).unwrap();
        let (pw, _) = propagate(&w, 0, 6, &[0.2], &mech(), Direction::Backward).unwrap();
        for (i, x) in pv.iter() {
            prop_assert!(pw.at(i) >= x - 1e-15);
        }
    }

    #[test]
    fn period_map_is_nonexpansive(s1 in 0u64..500, s2 in 500u64..1000) {
        let g = build_grid(1, 4, 16).unwrap();
        let a = ScalarField::random_lipschitz(&g, Parity::Odd, 1.0, s1);
        let b = ScalarField::random_lipschitz(&g, Parity::Odd, 1.0, s2);
        let (pa, _) = propagate(&a, 0, g.period(), &[0.1], &mech(), Direction::Backward).unwrap();
        let (pb, _) = propagate(&b, 0, g.period(), &[0.1], &mech(), Direction::Backward).unwrap();
        prop_assert!(pa.sup_dist(&pb) <= a.sup_dist(&b) + 1e-12);
    }

    #[test]
    fn dx_is_antisymmetric_under_negation(seed in 0u64..1000) {
        let g = build_grid(2, 3, 4).unwrap();
        let v = ScalarField::random_lipschitz(&g, Parity::Even, 2.0, seed);
        let mut w = v.clone();
        w.scale(-1.0);
        let (dv, dw) = (discrete_dx(&v), discrete_dx(&w));
        for (i, a) in dv.iter() {
            for (x, y) in a.iter().zip(dw.at(i)) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }

    #[test]
    fn distributions_conserve_mass(amp in 0.0f64..1.0, steps in 1usize..30, forward in any::<bool>()) {
        let g = build_grid(2, 4, 8).unwrap(); // cap 1
        let pol = ControlPolicy::stationary(&g, |x, o| {
            o[0] = amp * (std::f64::consts::TAU * x[1]).sin();
            o[1] = amp * (std::f64::consts::TAU * x[0]).cos();
        }).unwrap();
        let dir = if forward { Direction::Forward } else { Direction::Backward };
        for dist in propagate_distribution(&[1, 0], 0, &pol, steps, dir).unwrap() {
            prop_assert!((dist.total_mass() - 1.0).abs() < 1e-12);
            prop_assert!(dist.min_mass() >= 0.0);
            prop_assert!(dist.support_radius() <= steps as i64);
        }
    }
}

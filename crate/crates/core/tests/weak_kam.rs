use gridkam::grid::{build_grid, Parity, ScalarField};
use gridkam::mather::{aubry_set, check_containment, mather_measure, MatherOptions, MeasureMode};
use gridkam::models::builtin_model;
use gridkam::walk::Direction;
use gridkam::weakkam::*;

#[test]
fn hbar_does_not_depend_on_initial_field() {
    let g = build_grid(1, 8, 32).unwrap();
    let m = builtin_model("mechanical-1d").unwrap();
    let base = estimate_effective_hamiltonian(&g, &m, &[0.6], None, &HbarOptions::default()).unwrap();
    for seed in 0..4 {
        let v0 = ScalarField::random_lipschitz(&g, Parity::Odd, 1.0, seed);
        let e = estimate_effective_hamiltonian(&g, &m, &[0.6], Some(&v0), &HbarOptions::default()).unwrap();
        assert!((e.hbar - base.hbar).abs() <= 2.0 * base.width().max(e.width()) + 1e-15);
    }
}

#[test]
fn forward_and_backward_values_are_close() {
    let m = builtin_model("mechanical-1d").unwrap();
    for n in [8usize, 16] {
        let g = build_grid(1, n, 4 * n).unwrap();
        let back = estimate_effective_hamiltonian(&g, &m, &[1.5], None, &HbarOptions::default()).unwrap();
        let fo = HbarOptions { direction: Direction::Forward, ..Default::default() };
        let fwd = estimate_effective_hamiltonian(&g, &m, &[1.5], None, &fo).unwrap();
        assert!((back.hbar - fwd.hbar).abs() < 2.0 * g.h().sqrt(), "{} {}", back.hbar, fwd.hbar);
    }
}

#[test]
fn nonautonomous_two_dimensional_solution() {
    let g = build_grid(2, 4, 16).unwrap();
    let m = builtin_model("mechanical-2d").unwrap();
    let sol = find_periodic_solution(&g, &m, &[0.25, -0.5], None, &FixedPointOptions::default()).unwrap();
    assert!(sol.residual <= 1e-10);
    assert!(sol.identity_residual(&m) < 1e-8);
    assert!(sol.cell_residual(&m) < 1e-9);
}

#[test]
fn shifted_pendulum_measure_and_aubry() {
    let g = build_grid(1, 4, 16).unwrap();
    let m = builtin_model("shifted-pendulum-nonautonomous").unwrap();
    let sol = find_periodic_solution(&g, &m, &[0.2], None, &FixedPointOptions::default()).unwrap();
    assert!(sol.stationarity.is_none());
    let ma = mather_measure(&m, &sol, &MatherOptions { tol: 1e-5, ..Default::default() }).unwrap();
    assert!(ma.converged);
    assert!(ma.horizons.iter().all(|r| r.bound_ok));
    let set = aubry_set(&m, &[sol], MeasureMode::Spacetime, 1e-6).unwrap();
    assert!(check_containment(&ma, &set, 1e-6).unwrap().pass);
}

#[test]
fn autonomous_measure_matches_spacetime_action() {
    let g = build_grid(1, 4, 16).unwrap();
    let m = builtin_model("mechanical-1d").unwrap();
    let sol = find_periodic_solution(&g, &m, &[0.9], None, &FixedPointOptions::default()).unwrap();
    let st = mather_measure(&m, &sol, &MatherOptions { tol: 1e-5, ..Default::default() }).unwrap();
    let au = mather_measure(&m, &sol, &MatherOptions { tol: 1e-5, mode: MeasureMode::Autonomous, ..Default::default() }).unwrap();
    assert!((st.action - au.action).abs() < 2e-5);
    assert_eq!(au.measure.classes(), 1);
}

#[test]
fn convexity_of_mechanical_surface() {
    let g = build_grid(1, 8, 32).unwrap();
    let m = builtin_model("mechanical-1d").unwrap();
    let grid = CGrid { lo: vec![-2.0], hi: vec![2.0], points: 17 };
    let s = effective_surface(&g, &m, &grid, &SurfaceOptions::default()).unwrap();
    assert_eq!(s.holes(), 0);
    assert!(s.convexity.pass, "{:?}", s.convexity);
    // symmetric potential: H̄(c) = H̄(−c)
    for i in 0..8 {
        let (a, b) = (s.points[i].hbar.unwrap(), s.points[16 - i].hbar.unwrap());
        assert!((a - b).abs() < 1e-9);
    }
}

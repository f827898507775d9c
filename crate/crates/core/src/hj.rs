//! Explicit Lax-Friedrichs type scheme on the staggered grid.
//!
//! Backward step: `v^{k+1}_m = mean_ω v^k_{m+ω} − τ·H(x_m, t_k, c + (D_x v)^k_m)`.
//! Forward step: `v^{k−1}_m = mean_ω v^k_{m+ω} + τ·H(x_m, t_k, c + (D_x v)^k_m)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{discrete_dx, GridSpec, Parity, ScalarField, VectorField};
use crate::models::{HamiltonianModel, SchemeBounds, StepSizeReport};
use crate::walk::Direction;

/// Per-step extremes gathered while stepping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// `max |D_x v|∞` of the input level.
    pub max_slope: f64,
    /// `max |H_p(x, t, c + D_x v)|∞` of the input level.
    pub max_speed: f64,
}

impl StepStats {
    fn merge(&mut self, other: StepStats) {
        self.max_slope = self.max_slope.max(other.max_slope);
        self.max_speed = self.max_speed.max(other.max_speed);
    }
}

fn check_inputs(v: &ScalarField, k: i64, c: &[f64], model: &HamiltonianModel) -> Result<()> {
    let d = v.grid().dim();
    if v.parity() != Parity::of_level(k) {
        return Err(Error::InvalidArgument(format!(
            "field on the {} class cannot be level {k}",
            v.parity()
        )));
    }
    if c.len() != d || model.dim() != d {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: grid {d}, c {}, model {}",
            c.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// One scheme step from level `k` into `out`. `sign = −1` backward, `+1` forward.
fn step_into(
    v: &ScalarField,
    out: &mut ScalarField,
    k: i64,
    c: &[f64],
    model: &HamiltonianModel,
    sign: f64,
) -> Result<StepStats> {
    let grid = v.grid();
    let d = grid.dim();
    let tau = grid.tau();
    let t = grid.t(k);
    let inv = 1.0 / (2.0 * grid.h());
    let inv_deg = 1.0 / (2 * d) as f64;
    let mut p = [0.0f64; 8];
    let mut p_dyn = vec![0.0; if d > 8 { d } else { 0 }];
    let mut stats = StepStats::default();
    let target = v.parity().flip();
    debug_assert_eq!(out.parity(), target);
    for &i in grid.nodes(target) {
        let nb = grid.neighbors(i);
        let p = if d <= 8 { &mut p[..d] } else { &mut p_dyn[..] };
        let mut sum = 0.0;
        for j in 0..d {
            let up = v.at(nb[2 * j]);
            let down = v.at(nb[2 * j + 1]);
            sum += up + down;
            let slope = (up - down) * inv;
            stats.max_slope = stats.max_slope.max(slope.abs());
            p[j] = c[j] + slope;
        }
        // H_p(x,t,p) = p for the mechanical family
        for &pj in p.iter() {
            stats.max_speed = stats.max_speed.max(pj.abs());
        }
        let value = sum * inv_deg + sign * tau * model.h(grid.x(i), t, p);
        if !value.is_finite() {
            return Err(Error::NumericFailure {
                level: k,
                node: grid.index(i),
                what: format!("non-finite value {value}"),
            });
        }
        out.set(i, value);
    }
    Ok(stats)
}

fn step(v: &ScalarField, k: i64, c: &[f64], model: &HamiltonianModel, sign: f64) -> Result<(ScalarField, StepStats)> {
    check_inputs(v, k, c, model)?;
    let mut out = ScalarField::zeros(v.grid(), v.parity().flip());
    let stats = step_into(v, &mut out, k, c, model, sign)?;
    Ok((out, stats))
}

/// Level `k+1` from level `k` of the backward scheme.
pub fn step_backward_scheme(v: &ScalarField, k: i64, c: &[f64], model: &HamiltonianModel) -> Result<ScalarField> {
    step(v, k, c, model, -1.0).map(|(f, _)| f)
}

/// Level `k−1` from level `k` of the forward scheme.
pub fn step_forward_scheme(v: &ScalarField, k: i64, c: &[f64], model: &HamiltonianModel) -> Result<ScalarField> {
    step(v, k, c, model, 1.0).map(|(f, _)| f)
}

fn cfl_check(grid: &GridSpec, stats: StepStats, level: i64, v: &ScalarField, c: &[f64]) -> Result<()> {
    let cap = grid.control_cap();
    if stats.max_speed > cap * (1.0 + 1e-12) {
        let dv = discrete_dx(v);
        let node = dv
            .iter()
            .max_by(|a, b| {
                let sa = a.1.iter().zip(c).map(|(x, c)| (x + c).abs()).fold(0.0, f64::max);
                let sb = b.1.iter().zip(c).map(|(x, c)| (x + c).abs()).fold(0.0, f64::max);
                sa.total_cmp(&sb)
            })
            .map(|(i, _)| grid.index(i))
            .unwrap_or_default();
        return Err(Error::CflViolation { level, node, speed: stats.max_speed, cap });
    }
    Ok(())
}

/// Apply `steps` scheme steps starting at level `start`, checking the CFL
/// condition at every level but not the step-size inequalities.
pub fn propagate(
    v: &ScalarField,
    start: i64,
    steps: usize,
    c: &[f64],
    model: &HamiltonianModel,
    direction: Direction,
) -> Result<(ScalarField, StepStats)> {
    check_inputs(v, start, c, model)?;
    let grid = v.grid().clone();
    let sign = match direction {
        Direction::Backward => -1.0,
        Direction::Forward => 1.0,
    };
    let mut cur = v.clone();
    let mut next = ScalarField::zeros(&grid, v.parity().flip());
    let mut stats = StepStats::default();
    let mut k = start;
    for _ in 0..steps {
        let s = step_into(&cur, &mut next, k, c, model, sign)?;
        cfl_check(&grid, s, k, &cur, c)?;
        stats.merge(s);
        std::mem::swap(&mut cur, &mut next);
        k += match direction {
            Direction::Backward => 1,
            Direction::Forward => -1,
        };
    }
    Ok((cur, stats))
}

/// One period of the scheme from level 0: backward gives `φ_δ(v)` at level
/// `2K`, forward gives the forward map at level `−2K`.
pub fn period_map(v: &ScalarField, c: &[f64], model: &HamiltonianModel, direction: Direction) -> Result<(ScalarField, StepStats)> {
    propagate(v, 0, v.grid().period(), c, model, direction)
}

/// `sup_{m,j} (v_{m+2e_j} + v_{m−2e_j} − 2v_m) / (4h²)`.
pub fn second_difference_sup(v: &ScalarField) -> f64 {
    let grid = v.grid();
    let d = grid.dim();
    let scale = 1.0 / (4.0 * grid.h() * grid.h());
    let mut best = f64::NEG_INFINITY;
    for (i, vi) in v.iter() {
        for j in 0..d {
            let up = grid.neighbor(grid.neighbor(i, 2 * j), 2 * j);
            let down = grid.neighbor(grid.neighbor(i, 2 * j + 1), 2 * j + 1);
            best = best.max((v.at(up) + v.at(down) - 2.0 * vi) * scale);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMonitor {
    pub level: i64,
    /// `max |D_x v^k|∞`
    pub max_slope: f64,
    /// `M^k_δ`
    pub semiconcavity: f64,
    /// `(dλ)⁻¹ − max |H_p(x, t_k, c + D_x v^k)|∞`; `NaN` on the last level.
    pub cfl_margin: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReboundCheck {
    pub level: i64,
    pub slope: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IvpOptions {
    /// Run even if the step-size inequalities or the initial slope bound fail.
    pub force: bool,
}

#[derive(Clone, Debug)]
pub struct IvpSolution {
    pub grid: GridSpec,
    pub model: HamiltonianModel,
    pub c: Vec<f64>,
    pub levels: Vec<ScalarField>,
    pub monitors: Vec<LevelMonitor>,
    pub rebound: Vec<ReboundCheck>,
    pub step_sizes: StepSizeReport,
}

impl IvpSolution {
    pub fn last(&self) -> &ScalarField {
        self.levels.last().expect("at least the initial level")
    }

    /// `max_k max_m |(D_t v)^{k+1}_m + H(x_m, t_k, c + (D_x v)^k_m)|`.
    pub fn scheme_residual(&self) -> f64 {
        let grid = &self.grid;
        let mut worst: f64 = 0.0;
        let mut p = vec![0.0; grid.dim()];
        for (k, w) in self.levels.windows(2).enumerate() {
            let dt = crate::grid::discrete_dt(&w[1], &w[0]).expect("alternating levels");
            let dx = discrete_dx(&w[0]);
            for (i, val) in dt.iter() {
                for (pj, (c, s)) in p.iter_mut().zip(self.c.iter().zip(dx.at(i))) {
                    *pj = c + s;
                }
                let r = val + self.model.h(grid.x(i), grid.t(k as i64), &p);
                worst = worst.max(r.abs());
            }
        }
        worst
    }
}

/// Solve the initial value problem for `steps` levels, recording monitors.
pub fn solve_ivp(
    v0: &ScalarField,
    steps: usize,
    c: &[f64],
    model: &HamiltonianModel,
    bounds: &SchemeBounds,
    opts: IvpOptions,
) -> Result<IvpSolution> {
    check_inputs(v0, 0, c, model)?;
    let grid = v0.grid().clone();
    let report = bounds.validate_step_sizes(&grid);
    if !report.pass && !opts.force {
        return Err(Error::InadmissibleStepSizes(report.violated().join("; ")));
    }
    let slope0 = discrete_dx(v0).max_abs();
    if slope0 > bounds.r * (1.0 + 1e-12) && !opts.force {
        return Err(Error::SlopeBoundExceeded { level: 0, observed: slope0, bound: bounds.r });
    }
    let period = grid.period() as i64;
    let cap = grid.control_cap();
    let mut levels = Vec::with_capacity(steps + 1);
    let mut monitors = Vec::with_capacity(steps + 1);
    let mut rebound = Vec::new();
    levels.push(v0.clone());
    for k in 0..steps as i64 {
        let cur = levels.last().expect("nonempty");
        if k > 0 && k % period == 0 {
            let slope = discrete_dx(cur).max_abs();
            let bound = bounds.beta_tilde + 1.0;
            rebound.push(ReboundCheck { level: k, slope, bound, ok: slope <= bound });
            // continuing past a period needs the slope back under r
            if slope > bounds.r && !opts.force {
                return Err(Error::SlopeBoundExceeded { level: k, observed: slope, bound: bounds.r });
            }
        }
        let (next, stats) = step(cur, k, c, model, -1.0)?;
        cfl_check(&grid, stats, k, cur, c)?;
        monitors.push(LevelMonitor {
            level: k,
            max_slope: stats.max_slope,
            semiconcavity: second_difference_sup(cur),
            cfl_margin: cap - stats.max_speed,
        });
        levels.push(next);
    }
    let last = levels.last().expect("nonempty");
    monitors.push(LevelMonitor {
        level: steps as i64,
        max_slope: discrete_dx(last).max_abs(),
        semiconcavity: second_difference_sup(last),
        cfl_margin: f64::NAN,
    });
    if steps > 0 && steps as i64 % period == 0 {
        let slope = discrete_dx(last).max_abs();
        let bound = bounds.beta_tilde + 1.0;
        rebound.push(ReboundCheck { level: steps as i64, slope, bound, ok: slope <= bound });
    }
    Ok(IvpSolution { grid, model: model.clone(), c: c.to_vec(), levels, monitors, rebound, step_sizes: report })
}

/// `φ_δ(v0; c)`: level `2K` of the initial value problem.
pub fn time_one_map(v0: &ScalarField, c: &[f64], model: &HamiltonianModel, bounds: &SchemeBounds) -> Result<ScalarField> {
    let grid = v0.grid();
    let report = bounds.validate_step_sizes(grid);
    if !report.pass {
        return Err(Error::InadmissibleStepSizes(report.violated().join("; ")));
    }
    let slope0 = discrete_dx(v0).max_abs();
    if slope0 > bounds.r * (1.0 + 1e-12) {
        return Err(Error::SlopeBoundExceeded { level: 0, observed: slope0, bound: bounds.r });
    }
    period_map(v0, c, model, Direction::Backward).map(|(v, _)| v)
}

/// `ξ*^{k+1}_m = H_p(x_m, t_k, c + (D_x v)^k_m)` for `k = 0 … steps−1`;
/// entry `j` is the control at level `j + 1`.
pub fn minimizing_control_field(ivp: &IvpSolution) -> Vec<VectorField> {
    let n = ivp.levels.len().saturating_sub(1);
    ivp.levels[..n]
        .iter()
        .enumerate()
        .map(|(k, v)| control_from_level(v, k as i64, &ivp.c, &ivp.model))
        .collect()
}

/// Minimizing control attached to level `k + 1`, computed from level `k`.
pub fn control_from_level(v: &ScalarField, k: i64, c: &[f64], model: &HamiltonianModel) -> VectorField {
    let grid = v.grid();
    let d = grid.dim();
    let t = grid.t(k);
    let dv = discrete_dx(v);
    let mut out = VectorField::zeros(grid, dv.parity());
    let mut p = vec![0.0; d];
    for &i in grid.nodes(dv.parity()) {
        for (pj, (c, s)) in p.iter_mut().zip(c.iter().zip(dv.at(i))) {
            *pj = c + s;
        }
        model.h_p(grid.x(i), t, &p, out.at_mut(i));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiconcavityLevel {
    pub level: i64,
    pub t: f64,
    pub m: f64,
    pub bound: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiconcavityReport {
    pub levels: Vec<SemiconcavityLevel>,
    /// Every level `k ≥ 1` satisfies `M^k_δ ≤ M(t_k)`.
    pub all_ok: bool,
    /// `M⁰_δ ≤ M*₊`.
    pub initial_below_m_plus: bool,
    /// Every level satisfies `M^k_δ ≤ M*₊` (expected when the initial one does).
    pub all_below_m_plus: bool,
}

/// Compare `M^k_δ` with `M(t_k)` on every recorded level.
pub fn semiconcavity_monitor(ivp: &IvpSolution, bounds: &SchemeBounds) -> SemiconcavityReport {
    let grid = &ivp.grid;
    let tol = |b: f64| 1e-9 * (1.0 + b.abs());
    let levels: Vec<SemiconcavityLevel> = ivp
        .monitors
        .iter()
        .map(|m| {
            let t = grid.t(m.level);
            let bound = bounds.m_of_t(t);
            SemiconcavityLevel { level: m.level, t, m: m.semiconcavity, bound, ok: m.semiconcavity <= bound + tol(bound) }
        })
        .collect();
    let all_ok = levels.iter().filter(|l| l.level >= 1).all(|l| l.ok);
    let initial_below_m_plus = levels.first().is_some_and(|l| l.m <= bounds.m_plus);
    let all_below_m_plus = levels.iter().all(|l| l.m <= bounds.m_plus + tol(bounds.m_plus));
    SemiconcavityReport { levels, all_ok, initial_below_m_plus, all_below_m_plus }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, discrete_dt};
    use crate::models::{builtin_model, compute_bounds, BoundOptions, ParamBox};

    fn free() -> HamiltonianModel {
        builtin_model("free").unwrap()
    }

    #[test]
    fn free_constant_steps() {
        let g = build_grid(1, 4, 8).unwrap();
        let v = ScalarField::zeros(&g, Parity::Odd);
        let a = step_backward_scheme(&v, 0, &[0.0], &free()).unwrap();
        assert!(a.iter().all(|(_, x)| x == 0.0));
        let b = step_backward_scheme(&v, 0, &[1.0], &free()).unwrap();
        assert!(b.iter().all(|(_, x)| (x + g.tau() / 2.0).abs() < 1e-15));
        assert_eq!(b.parity(), Parity::Even);
        let f = step_forward_scheme(&v, 0, &[1.0], &free()).unwrap();
        assert!(f.iter().all(|(_, x)| (x - g.tau() / 2.0).abs() < 1e-15));
        let z = step_forward_scheme(&v, 0, &[0.0], &free()).unwrap();
        assert!(z.iter().all(|(_, x)| x == 0.0));
    }

    #[test]
    fn single_node_grid_by_hand() {
        // N = 1: the lone odd node is its own neighbor on both sides, so D_x = 0
        let g = build_grid(1, 1, 2).unwrap();
        let m = builtin_model("mechanical-1d").unwrap();
        let a = 0.8;
        let v = ScalarField::from_values(&g, Parity::Odd, &[a]).unwrap();
        assert_eq!(discrete_dx(&v).max_abs(), 0.0);
        let out = step_backward_scheme(&v, 0, &[0.3], &m).unwrap();
        for (i, val) in out.iter() {
            let expect = a - g.tau() * m.h(g.x(i), 0.0, &[0.3]);
            assert!((val - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_then_backward_restores_constant() {
        let g = build_grid(2, 3, 6).unwrap();
        let m = builtin_model("free").unwrap().with_dim(2).unwrap();
        let v = ScalarField::constant(&g, Parity::Odd, 1.25);
        let back = step_forward_scheme(&v, 0, &[0.4, -0.2], &m).unwrap();
        let again = step_backward_scheme(&back, -1, &[0.4, -0.2], &m).unwrap();
        assert!(again.sup_dist(&v) < 1e-15);
    }

    #[test]
    fn wrong_level_parity_is_rejected() {
        let g = build_grid(1, 2, 2).unwrap();
        let v = ScalarField::zeros(&g, Parity::Even);
        assert!(step_backward_scheme(&v, 0, &[0.0], &free()).is_err());
    }

    #[test]
    fn residual_vanishes_for_scheme_output() {
        let g = build_grid(1, 6, 24).unwrap();
        let m = builtin_model("shifted-pendulum-nonautonomous").unwrap();
        let v = ScalarField::random_lipschitz(&g, Parity::Odd, 0.8, 3);
        let next = step_backward_scheme(&v, 0, &[0.2], &m).unwrap();
        let dt = discrete_dt(&next, &v).unwrap();
        let dx = discrete_dx(&v);
        for (i, val) in dt.iter() {
            let h = m.h(g.x(i), 0.0, &[0.2 + dx.at(i)[0]]);
            assert!((val + h).abs() < 1e-10);
        }
    }

    fn bounds_for(model: &HamiltonianModel, r: f64, c: f64) -> SchemeBounds {
        compute_bounds(model, r, &ParamBox::point(&vec![c; model.dim()]), BoundOptions::default()).unwrap()
    }

    #[test]
    fn ivp_free_period_drop() {
        let g = build_grid(1, 4, 4).unwrap();
        let b = bounds_for(&free(), 0.05, 1.0);
        let v0 = ScalarField::zeros(&g, Parity::Odd);
        let ivp = solve_ivp(&v0, 2 * g.k(), &[1.0], &free(), &b, IvpOptions { force: true }).unwrap();
        assert!(ivp.last().iter().all(|(_, x)| (x + 0.5).abs() < 1e-14));
        let same = solve_ivp(&v0, 0, &[1.0], &free(), &b, IvpOptions { force: true }).unwrap();
        assert_eq!(same.levels.len(), 1);
        assert_eq!(same.levels[0], v0);
        assert!(ivp.scheme_residual() < 1e-12);
    }

    #[test]
    fn inadmissible_steps_are_refused_unless_forced() {
        let g = build_grid(1, 4, 8).unwrap(); // λ = 0.5 > λ₁
        let m = builtin_model("mechanical-1d").unwrap();
        let b = bounds_for(&m, 1.0, 0.0);
        let v0 = ScalarField::zeros(&g, Parity::Odd);
        assert!(matches!(
            solve_ivp(&v0, 4, &[0.0], &m, &b, IvpOptions::default()),
            Err(Error::InadmissibleStepSizes(_))
        ));
        assert!(solve_ivp(&v0, 4, &[0.0], &m, &b, IvpOptions { force: true }).is_ok());
    }

    #[test]
    fn cfl_violation_reports_level() {
        let g = build_grid(1, 4, 4).unwrap(); // cap (dλ)⁻¹ = 1
        let b = bounds_for(&free(), 1.0, 2.0);
        let v0 = ScalarField::zeros(&g, Parity::Odd);
        match solve_ivp(&v0, 3, &[2.0], &free(), &b, IvpOptions { force: true }) {
            Err(Error::CflViolation { level, .. }) => assert_eq!(level, 0),
            other => panic!("expected CFL violation, got {other:?}"),
        }
    }

    #[test]
    fn time_one_map_free() {
        let g = build_grid(1, 2, 4).unwrap();
        let b = bounds_for(&free(), 0.05, 0.3);
        let v = ScalarField::constant(&g, Parity::Odd, 2.0);
        let out = time_one_map(&v, &[0.3], &free(), &b).unwrap();
        assert!(out.iter().all(|(_, x)| (x - (2.0 - 0.045)).abs() < 1e-14));
        let zero = time_one_map(&v, &[0.0], &free(), &bounds_for(&free(), 0.05, 0.0)).unwrap();
        assert_eq!(zero, v);
    }

    #[test]
    fn controls_of_constant_field() {
        let g = build_grid(1, 2, 8).unwrap();
        let b = bounds_for(&free(), 0.05, 0.5);
        let v0 = ScalarField::constant(&g, Parity::Odd, 1.0);
        let ivp = solve_ivp(&v0, 3, &[0.5], &free(), &b, IvpOptions::default()).unwrap();
        let xi = minimizing_control_field(&ivp);
        assert_eq!(xi.len(), 3);
        assert!(xi.iter().all(|f| f.iter().all(|(_, z)| z[0] == 0.5)));
        assert_eq!(xi[0].parity(), Parity::Even);
    }

    #[test]
    fn control_equals_slope_for_free_model() {
        let g = build_grid(1, 8, 32).unwrap();
        let v0 = ScalarField::random_lipschitz(&g, Parity::Odd, 0.4, 9);
        let xi = control_from_level(&v0, 0, &[0.0], &free());
        let dv = discrete_dx(&v0);
        for (i, z) in xi.iter() {
            assert_eq!(z[0], dv.at(i)[0]);
        }
    }

    #[test]
    fn second_difference_of_linear_compatible_data() {
        let g = build_grid(1, 5, 5).unwrap();
        let v = ScalarField::constant(&g, Parity::Odd, 3.0);
        assert_eq!(second_difference_sup(&v), 0.0);
        let q = ScalarField::from_fn(&g, Parity::Odd, |x| (std::f64::consts::TAU * x[0]).cos());
        // maximum of the discrete second difference of cos is near −(2π)²·min cos
        let s = second_difference_sup(&q);
        assert!(s > 0.0 && s < 4.0 * std::f64::consts::PI.powi(2));
    }

    #[test]
    fn semiconcavity_below_bound() {
        let g = build_grid(1, 4, 40).unwrap();
        let m = builtin_model("mechanical-1d").unwrap();
        let b = bounds_for(&m, 1.0, 0.0);
        let v0 = ScalarField::random_lipschitz(&g, Parity::Odd, 1.0, 5);
        let ivp = solve_ivp(&v0, g.period(), &[0.0], &m, &b, IvpOptions::default()).unwrap();
        let rep = semiconcavity_monitor(&ivp, &b);
        assert!(rep.all_ok, "{:?}", rep.levels.iter().find(|l| !l.ok && l.level > 0));
        let flat = solve_ivp(&ScalarField::zeros(&g, Parity::Odd), g.period(), &[0.0], &m, &b, IvpOptions::default()).unwrap();
        let rep = semiconcavity_monitor(&flat, &b);
        assert!(rep.initial_below_m_plus && rep.all_below_m_plus);
    }
}

//! Effective Hamiltonian and time-periodic solutions on the grid.
//!
//! `φ(v)` is the backward period map (level 0 to level `2K`). It commutes with
//! constants and preserves order, so for any `v` the per-period shift
//! `φ(v) − v` satisfies `min(φ(v) − v) ≤ −H̄ ≤ max(φ(v) − v)`. Every iterate
//! therefore brackets `H̄`, and the brackets of successive iterates can be
//! intersected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{discrete_dx, lipschitz_interpolate, GridSpec, Parity, ScalarField};
use crate::hj::{control_from_level, period_map, propagate};
use crate::models::HamiltonianModel;
use crate::oracle::{cell_problem_for_model, CellSolution};
use crate::walk::{ControlPolicy, Direction};

/// Default residual tolerance of the fixed-point search.
pub const FIXED_POINT_TOL: f64 = 1e-10;
/// Default tolerance of the summation identity.
pub const IDENTITY_TOL: f64 = 1e-8;

fn check_c(grid: &GridSpec, model: &HamiltonianModel, c: &[f64]) -> Result<()> {
    if c.len() != grid.dim() || model.dim() != grid.dim() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: grid {}, c {}, model {}",
            grid.dim(),
            c.len(),
            model.dim()
        )));
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite c {c:?}")));
    }
    Ok(())
}

fn initial_field(grid: &GridSpec, v0: Option<&ScalarField>) -> Result<ScalarField> {
    let v = match v0 {
        Some(v) => {
            if v.grid() != grid || v.parity() != Parity::Odd {
                return Err(Error::InvalidArgument("initial field must live on level 0 of the grid".into()));
            }
            v.clone()
        }
        None => ScalarField::zeros(grid, Parity::Odd),
    };
    Ok(anchored(v))
}

fn anchored(mut v: ScalarField) -> ScalarField {
    let a = v.at(v.grid().anchor(v.parity()));
    v.shift(-a);
    v
}

/// `(min, max)` of `w − v`.
fn shift_range(w: &ScalarField, v: &ScalarField) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, a) in w.iter() {
        let s = a - v.at(i);
        lo = lo.min(s);
        hi = hi.max(s);
    }
    (lo, hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HbarOptions {
    /// Stop once the bracket is narrower than this.
    pub tol: f64,
    pub max_periods: usize,
    /// `Backward` estimates `H̄_δ`; `Forward` estimates the forward-scheme value.
    pub direction: Direction,
}

impl Default for HbarOptions {
    fn default() -> Self {
        HbarOptions { tol: FIXED_POINT_TOL, max_periods: 20_000, direction: Direction::Backward }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HbarEstimate {
    pub c: Vec<f64>,
    /// Midpoint of the final bracket.
    pub hbar: f64,
    pub lower: f64,
    pub upper: f64,
    pub periods: usize,
    pub direction: Direction,
}

impl HbarEstimate {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Bracket `H̄_δ(c)` (or the forward value) by iterating the period map.
pub fn estimate_effective_hamiltonian(
    grid: &GridSpec,
    model: &HamiltonianModel,
    c: &[f64],
    v0: Option<&ScalarField>,
    opts: &HbarOptions,
) -> Result<HbarEstimate> {
    check_c(grid, model, c)?;
    let mut v = initial_field(grid, v0)?;
    let sign = opts.direction.sign();
    let (mut lower, mut upper) = (f64::NEG_INFINITY, f64::INFINITY);
    for period in 1..=opts.max_periods {
        let (w, _) = period_map(&v, c, model, opts.direction)?;
        let (lo, hi) = shift_range(&w, &v);
        let (a, b) = if sign < 0.0 { (-hi, -lo) } else { (lo, hi) };
        lower = lower.max(a);
        upper = upper.min(b);
        if upper - lower <= opts.tol {
            return Ok(HbarEstimate {
                c: c.to_vec(),
                hbar: 0.5 * (lower + upper),
                lower,
                upper,
                periods: period,
                direction: opts.direction,
            });
        }
        v = anchored(w);
    }
    Err(Error::NoConvergence { periods: opts.max_periods, lower, upper })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    /// Residual `max|φ(v) + H̄ − v|` at which to stop.
    pub tol: f64,
    pub max_iters: usize,
    /// Mann averaging weight `α` in `v ← (1 − α)v + α(φ(v) + H̄)`; `None` is plain Picard.
    pub averaging: Option<f64>,
    /// Return an unconverged iterate instead of failing.
    pub allow_unconverged: bool,
    /// Tolerance for the two-step stationarity of autonomous models.
    pub stationarity_tol: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            tol: FIXED_POINT_TOL,
            max_iters: 50_000,
            averaging: None,
            allow_unconverged: false,
            stationarity_tol: 1e-8,
        }
    }
}

/// A solution of `φ(v̄⁰) + H̄ = v̄⁰` together with its whole period.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicSolution {
    pub c: Vec<f64>,
    pub hbar: f64,
    /// `v̄^k = φ^k(v̄⁰) + t_k H̄` for `k = 0 … 2K − 1`.
    pub levels: Vec<ScalarField>,
    /// `max|φ(v̄⁰) + H̄ − v̄⁰|`.
    pub residual: f64,
    pub iterations: usize,
    /// Node where `v̄⁰` is pinned to zero.
    pub anchor: usize,
    /// Intersection of the shift brackets seen during the search.
    pub lower: f64,
    pub upper: f64,
    pub converged: bool,
    /// `max|φ²(v̄⁰) + 2τH̄ − v̄⁰|`, for autonomous models.
    pub stationarity: Option<f64>,
}

impl PeriodicSolution {
    pub fn grid(&self) -> &GridSpec {
        self.levels[0].grid()
    }

    pub fn v0(&self) -> &ScalarField {
        &self.levels[0]
    }

    /// `v̄^k` for any integer `k`, using time periodicity.
    pub fn level(&self, k: i64) -> &ScalarField {
        &self.levels[k.rem_euclid(self.levels.len() as i64) as usize]
    }

    /// Minimizing controls `ξ*^{k+1} = H_p(x, t_k, c + D_x v̄^k)`, periodic in the level.
    pub fn controls(&self, model: &HamiltonianModel) -> Result<ControlPolicy> {
        let fields = self
            .levels
            .iter()
            .enumerate()
            .map(|(k, v)| control_from_level(v, k as i64, &self.c, model))
            .collect();
        ControlPolicy::periodic(1, fields)
    }

    /// Time-independent controls from `v̄⁰` and `v̄¹`, for autonomous models.
    pub fn stationary_controls(&self, model: &HamiltonianModel) -> Result<ControlPolicy> {
        if !model.is_autonomous() {
            return Err(Error::NotAutonomous(model.name.clone()));
        }
        let fields = vec![
            control_from_level(&self.levels[0], 0, &self.c, model),
            control_from_level(&self.levels[1 % self.levels.len()], 1, &self.c, model),
        ];
        ControlPolicy::periodic(1, fields)
    }

    /// `Σ_{k,m} H(x_m, t_k, c + D_x v̄^k_m)·2h^dτ` over one period.
    ///
    /// Each level has `(2N)^d / 2` nodes and there are `2K` levels, so the
    /// weights `2h^dτ` sum to one in every dimension.
    pub fn identity_sum(&self, model: &HamiltonianModel) -> f64 {
        let grid = self.grid();
        let w = 2.0 * grid.h().powi(grid.dim() as i32) * grid.tau();
        let mut p = vec![0.0; grid.dim()];
        let mut total = 0.0;
        for (k, v) in self.levels.iter().enumerate() {
            let dv = discrete_dx(v);
            let t = grid.t(k as i64);
            let mut level_sum = 0.0;
            for (i, s) in dv.iter() {
                for (pj, (c, s)) in p.iter_mut().zip(self.c.iter().zip(s)) {
                    *pj = c + s;
                }
                level_sum += model.h(grid.x(i), t, &p);
            }
            total += level_sum;
        }
        total * w
    }

    pub fn identity_residual(&self, model: &HamiltonianModel) -> f64 {
        (self.hbar - self.identity_sum(model)).abs()
    }

    /// `max_k max_m |v̄^{k+1} − (mean v̄^k − τH + τH̄)|` over the period, with `v̄^{2K} = v̄⁰`.
    pub fn cell_residual(&self, model: &HamiltonianModel) -> f64 {
        let grid = self.grid();
        let tau = grid.tau();
        let n = self.levels.len();
        let mut worst: f64 = 0.0;
        let mut p = vec![0.0; grid.dim()];
        for k in 0..n {
            let v = &self.levels[k];
            let next = &self.levels[(k + 1) % n];
            let dv = discrete_dx(v);
            for (i, s) in dv.iter() {
                for (pj, (c, s)) in p.iter_mut().zip(self.c.iter().zip(s)) {
                    *pj = c + s;
                }
                let rhs = v.neighbor_mean(i) - tau * model.h(grid.x(i), grid.t(k as i64), &p) + tau * self.hbar;
                worst = worst.max((next.at(i) - rhs).abs());
            }
        }
        worst
    }

    /// `max_k |D_x v̄^k|∞`.
    pub fn max_slope(&self) -> f64 {
        self.levels.iter().map(|v| discrete_dx(v).max_abs()).fold(0.0, f64::max)
    }
}

/// All levels of one period starting from `v0`, drift-corrected by `hbar`.
pub fn period_levels(v0: &ScalarField, c: &[f64], model: &HamiltonianModel, hbar: f64) -> Result<Vec<ScalarField>> {
    let grid = v0.grid();
    let tau = grid.tau();
    let mut out = Vec::with_capacity(grid.period());
    out.push(v0.clone());
    let mut cur = v0.clone();
    for k in 0..grid.period() as i64 - 1 {
        let (mut next, _) = propagate(&cur, k, 1, c, model, Direction::Backward)?;
        next.shift(tau * hbar);
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}

/// Anchored Picard iteration of the period map.
pub fn find_periodic_solution(
    grid: &GridSpec,
    model: &HamiltonianModel,
    c: &[f64],
    v0: Option<&ScalarField>,
    opts: &FixedPointOptions,
) -> Result<PeriodicSolution> {
    check_c(grid, model, c)?;
    if let Some(a) = opts.averaging {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::InvalidArgument(format!("averaging weight {a} outside (0, 1]")));
        }
    }
    let anchor = grid.anchor(Parity::Odd);
    let mut v = initial_field(grid, v0)?;
    let (mut lower, mut upper) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut hbar = f64::NAN;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut best: Option<(f64, ScalarField, f64)> = None;
    while iterations < opts.max_iters {
        iterations += 1;
        let (w, _) = period_map(&v, c, model, Direction::Backward)?;
        let (lo, hi) = shift_range(&w, &v);
        lower = lower.max(-hi);
        upper = upper.min(-lo);
        hbar = -w.at(anchor);
        let next = anchored(w);
        residual = next.sup_dist(&v);
        if best.as_ref().is_none_or(|b| residual < b.0) {
            best = Some((residual, v.clone(), hbar));
        }
        if residual <= opts.tol {
            break;
        }
        v = match opts.averaging {
            None => next,
            Some(alpha) => {
                let mut mixed = v.clone();
                for (i, a) in next.iter() {
                    mixed.set(i, (1.0 - alpha) * v.at(i) + alpha * a);
                }
                mixed
            }
        };
    }
    let converged = residual <= opts.tol;
    if !converged {
        if !opts.allow_unconverged {
            return Err(Error::FixedPointNotReached { iterations, residual: best.map_or(residual, |b| b.0) });
        }
        if let Some((r, bv, bh)) = best {
            residual = r;
            v = bv;
            hbar = bh;
        }
    }
    let levels = period_levels(&v, c, model, hbar)?;
    let stationarity = if model.is_autonomous() {
        let (two, _) = propagate(&v, 0, 2, c, model, Direction::Backward)?;
        let s = two.iter().map(|(i, a)| (a + 2.0 * grid.tau() * hbar - v.at(i)).abs()).fold(0.0, f64::max);
        if converged && s > opts.stationarity_tol {
            return Err(Error::PropertyFailure(format!(
                "two-step stationarity residual {s:e} exceeds {:e}",
                opts.stationarity_tol
            )));
        }
        Some(s)
    } else {
        None
    };
    Ok(PeriodicSolution {
        c: c.to_vec(),
        hbar,
        levels,
        residual,
        iterations,
        anchor,
        lower,
        upper,
        converged,
        stationarity,
    })
}

/// Uniform lattice of `c` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
}

impl CGrid {
    /// 17 points per axis over `[−2, 2]^d`.
    pub fn default_for(d: usize) -> CGrid {
        CGrid { lo: vec![-2.0; d], hi: vec![2.0; d], points: 17 }
    }

    pub fn axes(&self) -> Result<Vec<Vec<f64>>> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(Error::InvalidArgument("c grid bounds have mismatched dimensions".into()));
        }
        if self.points == 0 || self.lo.iter().zip(&self.hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument("empty c grid".into()));
        }
        Ok(self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| {
                if self.points == 1 {
                    vec![a]
                } else {
                    (0..self.points).map(|i| a + (b - a) * i as f64 / (self.points - 1) as f64).collect()
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub c: Vec<f64>,
    pub hbar: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub periods: usize,
    pub forward: Option<f64>,
    pub error: Option<String>,
}

impl SurfacePoint {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityViolation {
    pub index: Vec<usize>,
    pub axis: usize,
    /// `2H̄(mid) − H̄(left) − H̄(right)`, positive when convexity fails.
    pub excess: f64,
    pub tol: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub triples: usize,
    /// Largest `excess − tol` seen (negative when every triple passes).
    pub worst_margin: f64,
    pub violations: Vec<ConvexityViolation>,
    pub pass: bool,
}

/// `H̄_δ` sampled on a `c` lattice (row-major, axis 0 most significant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSurface {
    pub axes: Vec<Vec<f64>>,
    pub points: Vec<SurfacePoint>,
    pub convexity: ConvexityReport,
}

impl EffectiveSurface {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.axes).fold(0, |acc, (&i, ax)| acc * ax.len() + i)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.axes.len()];
        for j in (0..self.axes.len()).rev() {
            out[j] = flat % self.axes[j].len();
            flat /= self.axes[j].len();
        }
        out
    }

    /// Lattice index of `c`, matched per axis within `1e-12`.
    pub fn locate(&self, c: &[f64]) -> Option<Vec<usize>> {
        if c.len() != self.axes.len() {
            return None;
        }
        c.iter()
            .zip(&self.axes)
            .map(|(x, ax)| ax.iter().position(|a| (a - x).abs() <= 1e-12 * (1.0 + x.abs())))
            .collect()
    }

    pub fn value_at(&self, idx: &[usize]) -> Option<f64> {
        self.points.get(self.flat_index(idx)).and_then(|p| p.hbar)
    }

    pub fn point_at(&self, idx: &[usize]) -> &SurfacePoint {
        &self.points[self.flat_index(idx)]
    }

    pub fn holes(&self) -> usize {
        self.points.iter().filter(|p| p.hbar.is_none()).count()
    }

    pub fn max_width(&self) -> f64 {
        self.points.iter().filter(|p| p.hbar.is_some()).map(|p| p.width()).fold(0.0, f64::max)
    }
}

/// Midpoint convexity along every axis-aligned triple of neighbouring lattice
/// points, with tolerance `base_tol + 2·(largest bracket width of the triple)`.
pub fn check_convexity(surface: &EffectiveSurface, base_tol: f64) -> ConvexityReport {
    let mut report = ConvexityReport { worst_margin: f64::NEG_INFINITY, ..Default::default() };
    for flat in 0..surface.points.len() {
        let idx = surface.multi_index(flat);
        for axis in 0..surface.dim() {
            if idx[axis] == 0 || idx[axis] + 1 >= surface.axes[axis].len() {
                continue;
            }
            let mut left = idx.clone();
            let mut right = idx.clone();
            left[axis] -= 1;
            right[axis] += 1;
            let pts = [surface.point_at(&left), surface.point_at(&idx), surface.point_at(&right)];
            let (Some(a), Some(m), Some(b)) = (pts[0].hbar, pts[1].hbar, pts[2].hbar) else {
                continue;
            };
            let width = pts.iter().map(|p| p.width()).fold(0.0, f64::max);
            let tol = base_tol + 2.0 * width;
            let excess = 2.0 * m - a - b;
            report.triples += 1;
            report.worst_margin = report.worst_margin.max(excess - tol);
            if excess > tol {
                report.violations.push(ConvexityViolation { index: idx.clone(), axis, excess, tol });
            }
        }
    }
    report.pass = report.violations.is_empty();
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceOptions {
    pub hbar: HbarOptions,
    /// Also compute the forward-scheme value at every point.
    pub forward: bool,
    pub convexity_tol: f64,
}

impl Default for SurfaceOptions {
    fn default() -> Self {
        SurfaceOptions { hbar: HbarOptions::default(), forward: false, convexity_tol: 1e-8 }
    }
}

/// `H̄_δ` on every point of `c_grid`; failures leave holes.
pub fn effective_surface(grid: &GridSpec, model: &HamiltonianModel, c_grid: &CGrid, opts: &SurfaceOptions) -> Result<EffectiveSurface> {
    let axes = c_grid.axes()?;
    if axes.len() != grid.dim() {
        return Err(Error::InvalidArgument("c grid dimension differs from the grid".into()));
    }
    let total: usize = axes.iter().map(|a| a.len()).product();
    let mut surface = EffectiveSurface { axes, points: Vec::with_capacity(total), convexity: ConvexityReport::default() };
    for flat in 0..total {
        let idx = surface.multi_index(flat);
        let c: Vec<f64> = idx.iter().zip(&surface.axes).map(|(&i, ax)| ax[i]).collect();
        let point = match estimate_effective_hamiltonian(grid, model, &c, None, &opts.hbar) {
            Ok(est) => {
                let forward = if opts.forward {
                    let fo = HbarOptions { direction: Direction::Forward, ..opts.hbar.clone() };
                    estimate_effective_hamiltonian(grid, model, &c, None, &fo).ok().map(|e| e.hbar)
                } else {
                    None
                };
                SurfacePoint { c, hbar: Some(est.hbar), lower: est.lower, upper: est.upper, periods: est.periods, forward, error: None }
            }
            Err(e) => {
                let (lower, upper, periods) = match &e {
                    Error::NoConvergence { periods, lower, upper } => (*lower, *upper, *periods),
                    _ => (f64::NEG_INFINITY, f64::INFINITY, 0),
                };
                SurfacePoint { c, hbar: None, lower, upper, periods, forward: None, error: Some(e.to_string()) }
            }
        };
        surface.points.push(point);
    }
    surface.convexity = check_convexity(&surface, opts.convexity_tol);
    Ok(surface)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTimeOptions {
    /// Stop tracking once a period changes the drift-corrected field by less than this.
    pub tol: f64,
    pub max_periods: usize,
    /// Extra periods run past termination to fix the limit.
    pub limit_periods: usize,
}

impl Default for LongTimeOptions {
    fn default() -> Self {
        LongTimeOptions { tol: 1e-10, max_periods: 10_000, limit_periods: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTimeReport {
    pub c: Vec<f64>,
    /// `S^k = max_m(v^{k+2} − v^k)` for every tracked step.
    pub s: Vec<f64>,
    pub monotone: bool,
    pub hbar: f64,
    /// Tracked periods.
    pub periods: usize,
    /// `max|v^{2Kp} + t H̄ − v̄⁰|` for each tracked period `p`.
    pub even_distances: Vec<f64>,
    /// `max|v^{2Kp+1} + t H̄ − v̄¹|` for each tracked period `p`.
    pub odd_distances: Vec<f64>,
    pub final_even_distance: f64,
    pub final_odd_distance: f64,
}

/// Run the scheme for an autonomous model and watch `S^k` and the approach
/// to the stationary limit.
pub fn long_time_convergence(
    v0: &ScalarField,
    c: &[f64],
    model: &HamiltonianModel,
    opts: &LongTimeOptions,
) -> Result<LongTimeReport> {
    let grid = v0.grid().clone();
    check_c(&grid, model, c)?;
    if !model.is_autonomous() {
        return Err(Error::NotAutonomous(model.name.clone()));
    }
    if v0.parity() != Parity::Odd {
        return Err(Error::InvalidArgument("initial field must live on level 0".into()));
    }
    let period = grid.period();
    let tau = grid.tau();
    let mut s = Vec::new();
    // window[j] = v^{k+j}
    let mut window = vec![v0.clone()];
    let mut level: i64 = 0;
    for _ in 0..2 {
        let (n, _) = propagate(window.last().unwrap(), level, 1, c, model, Direction::Backward)?;
        window.push(n);
        level += 1;
    }
    let mut snapshots: Vec<(i64, ScalarField, ScalarField)> = vec![(0, window[0].clone(), window[1].clone())];
    let mut monotone = true;
    let mut first_violation: Option<(usize, f64, f64)> = None;
    let mut hbar = f64::NAN;
    let mut tracked = 0usize;
    let mut extra = 0usize;
    let mut stopped = false;
    let max_total = opts.max_periods + opts.limit_periods;
    for p in 0..max_total {
        for _ in 0..period {
            let (lo, hi) = shift_range(&window[2], &window[0]);
            if let Some(&prev) = s.last() {
                if hi > prev + 1e-12 * (1.0 + f64::abs(prev)) && first_violation.is_none() {
                    monotone = false;
                    first_violation = Some((s.len(), prev, hi));
                }
            }
            s.push(hi);
            hbar = -(lo + hi) / (4.0 * tau);
            let (n, _) = propagate(&window[2], level, 1, c, model, Direction::Backward)?;
            window.remove(0);
            window.push(n);
            level += 1;
        }
        if !stopped {
            tracked = p + 1;
            let prev = &snapshots.last().unwrap().1;
            let change = window[0].iter().map(|(i, a)| (a - prev.at(i) + period as f64 * tau * hbar).abs()).fold(0.0, f64::max);
            snapshots.push((level - 2, window[0].clone(), window[1].clone()));
            if change <= opts.tol || p + 1 >= opts.max_periods {
                stopped = true;
            }
        } else {
            extra += 1;
            if extra >= opts.limit_periods {
                break;
            }
        }
    }
    if let Some((k, prev, cur)) = first_violation {
        return Err(Error::PropertyFailure(format!("S^{k} = {cur:e} exceeds S^{} = {prev:e}", k - 1)));
    }
    let base = level - 2;
    let t_base = grid.t(base);
    let limit0 = {
        let mut f = window[0].clone();
        f.shift(t_base * hbar);
        f
    };
    let limit1 = {
        let mut f = window[1].clone();
        f.shift(t_base * hbar);
        f
    };
    let dist = |k: i64, f: &ScalarField, lim: &ScalarField| {
        let t = grid.t(k);
        f.iter().map(|(i, a)| (a + t * hbar - lim.at(i)).abs()).fold(0.0, f64::max)
    };
    let even_distances: Vec<f64> = snapshots.iter().map(|(k, e, _)| dist(*k, e, &limit0)).collect();
    let odd_distances: Vec<f64> = snapshots.iter().map(|(k, _, o)| dist(*k, o, &limit1)).collect();
    Ok(LongTimeReport {
        c: c.to_vec(),
        s,
        monotone,
        hbar,
        periods: tracked,
        final_even_distance: *even_distances.last().unwrap(),
        final_odd_distance: *odd_distances.last().unwrap(),
        even_distances,
        odd_distances,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    /// Exact value from the 1-D cell problem.
    Oracle { value: f64 },
    /// Differences between consecutive grids.
    SelfConvergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub k: usize,
    pub h: f64,
    pub hbar: f64,
    pub width: f64,
    pub periods: usize,
    pub error: Option<f64>,
    /// Sup distance between the interpolated level-0 solutions of this grid and the next one.
    pub solution_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub c: Vec<f64>,
    pub reference: Reference,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log error` against `log h`.
    pub slope: Option<f64>,
    /// Errors never increase along the sequence.
    pub monotone: bool,
}

/// Least-squares slope of `log y` against `log x` over the positive pairs.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingOptions {
    pub fixed_point: FixedPointOptions,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        ScalingOptions { fixed_point: FixedPointOptions { allow_unconverged: true, ..Default::default() } }
    }
}

/// `H̄_δ(c)` on a sequence of grids, compared with the cell-problem oracle
/// when the model has one and with the next grid otherwise.
pub fn scaling_study(model: &HamiltonianModel, c: &[f64], grids: &[GridSpec], opts: &ScalingOptions) -> Result<ConvergenceReport> {
    if grids.is_empty() {
        return Err(Error::InvalidArgument("empty grid sequence".into()));
    }
    let reference = match (c.len(), cell_problem_for_model(model, c.first().copied().unwrap_or(0.0))) {
        (1, Ok(sol)) => Reference::Oracle { value: sol.hbar },
        _ => Reference::SelfConvergence,
    };
    let mut sols = Vec::with_capacity(grids.len());
    for g in grids {
        sols.push(find_periodic_solution(g, model, c, None, &opts.fixed_point)?);
    }
    let mut rows: Vec<ConvergenceRow> = sols
        .iter()
        .zip(grids)
        .map(|(s, g)| ConvergenceRow {
            n: g.n(),
            k: g.k(),
            h: g.h(),
            hbar: s.hbar,
            width: (s.upper - s.lower).max(0.0),
            periods: s.iterations,
            error: match &reference {
                Reference::Oracle { value } => Some((s.hbar - value).abs()),
                Reference::SelfConvergence => None,
            },
            solution_gap: None,
        })
        .collect();
    for i in 0..rows.len().saturating_sub(1) {
        if reference == Reference::SelfConvergence {
            rows[i].error = Some((rows[i].hbar - rows[i + 1].hbar).abs());
        }
        rows[i].solution_gap = solution_gap(sols[i].v0(), sols[i + 1].v0());
    }
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.error.map(|e| (r.h, e))).collect();
    let slope = log_log_slope(&pts);
    let errs: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let monotone = errs.windows(2).all(|w| w[1] <= w[0]);
    Ok(ConvergenceReport { c: c.to_vec(), reference, rows, slope, monotone })
}

/// Sup distance, over the level-0 nodes of the finer grid, between the
/// interpolants of two level-0 fields after removing their means there.
pub fn solution_gap(a: &ScalarField, b: &ScalarField) -> Option<f64> {
    if a.grid().dim() != b.grid().dim() {
        return None;
    }
    let fine = if a.grid().n() >= b.grid().n() { a.grid() } else { b.grid() };
    let (ia, ib) = (lipschitz_interpolate(a), lipschitz_interpolate(b));
    let nodes = fine.nodes(Parity::Odd);
    let diffs: Vec<f64> = nodes.iter().map(|&i| ia.eval(fine.x(i)) - ib.eval(fine.x(i))).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Some(diffs.iter().map(|d| (d - mean).abs()).fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRow {
    pub n: usize,
    pub h: f64,
    /// Largest `|D_x v̄⁰ − v̄'|` at nodes farther than the margin from any kink.
    pub max_error: f64,
    pub nodes_compared: usize,
    /// Positions where `c + D_x v̄⁰` changes from positive to negative.
    pub sign_changes: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub c: f64,
    pub shock: Option<f64>,
    pub x_max: f64,
    pub rows: Vec<DerivativeRow>,
    pub decreasing: bool,
}

/// Compare `D_x v̄⁰` with the slope of the exact 1-D cell solution.
pub fn derivative_convergence_probe(solutions: &[PeriodicSolution], model: &HamiltonianModel, margin: f64) -> Result<DerivativeReport> {
    let first = solutions.first().ok_or_else(|| Error::InvalidArgument("no solutions".into()))?;
    if first.c.len() != 1 {
        return Err(Error::InvalidArgument("derivative probe is one-dimensional".into()));
    }
    let c = first.c[0];
    let pot = model
        .potential_1d()
        .ok_or_else(|| Error::InvalidArgument(format!("model {} has no 1-D autonomous potential", model.name)))?;
    let oracle: CellSolution = cell_problem_for_model(model, c)?;
    let mut rows = Vec::new();
    for sol in solutions {
        if sol.c != first.c {
            return Err(Error::InvalidArgument("solutions for different c".into()));
        }
        let grid = sol.grid();
        let dv = discrete_dx(sol.v0());
        let mut max_error: f64 = 0.0;
        let mut compared = 0;
        let mut sign_changes = Vec::new();
        let nodes = grid.nodes(dv.parity());
        for (j, &i) in nodes.iter().enumerate() {
            let x = grid.x(i)[0];
            if oracle.distance_to_kink(x) > margin {
                if let Some(exact) = oracle.slope(&pot, x) {
                    max_error = max_error.max((dv.at(i)[0] - exact).abs());
                    compared += 1;
                }
            }
            let next = nodes[(j + 1) % nodes.len()];
            if c + dv.at(i)[0] > 0.0 && c + dv.at(next)[0] <= 0.0 {
                sign_changes.push(x + grid.h());
            }
        }
        rows.push(DerivativeRow { n: grid.n(), h: grid.h(), max_error, nodes_compared: compared, sign_changes });
    }
    let decreasing = rows.windows(2).all(|w| w[1].max_error <= w[0].max_error);
    Ok(DerivativeReport { c, shock: oracle.shock, x_max: oracle.x_max, rows, decreasing })
}

//! Independent reference computations used to check the solver.
//!
//! Nothing here calls the scheme: the step value is a brute-force
//! minimization over sampled controls, path expectations are explicit sums
//! over every path, and the 1-D effective Hamiltonian comes from quadrature.

use crate::error::{Error, Result};
use crate::grid::{discrete_dx, GridSpec, Parity, ScalarField};
use crate::models::HamiltonianModel;
use crate::walk::{transition_probs, ControlPolicy, Direction};
use crate::weakkam::EffectiveSurface;

/// Default control samples per axis in one dimension.
pub const SAMPLES_1D: usize = 2001;
/// Default control samples per axis in two dimensions.
pub const SAMPLES_2D: usize = 201;

pub fn default_samples(d: usize) -> usize {
    if d == 1 {
        SAMPLES_1D
    } else {
        SAMPLES_2D
    }
}

fn sampled_min(
    lo: &[f64],
    hi: &[f64],
    samples: usize,
    f: &mut impl FnMut(&[f64]) -> f64,
) -> (f64, Vec<f64>) {
    let d = lo.len();
    let mut idx = vec![0usize; d];
    let mut z = vec![0.0; d];
    let mut best = (f64::INFINITY, lo.to_vec());
    let denom = (samples - 1).max(1) as f64;
    loop {
        for j in 0..d {
            z[j] = lo[j] + (hi[j] - lo[j]) * idx[j] as f64 / denom;
        }
        let val = f(&z);
        if val < best.0 {
            best = (val, z.clone());
        }
        let mut j = d;
        loop {
            if j == 0 {
                return best;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < samples {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// `min_ξ [τ·L^{(c)}(x, t_k, ξ) + Σ_ω ρ(ω; ξ) v(node + ωh)]` over a sampled
/// control box, refined once around the best sample.
///
/// `v` is level `k`; `node` is a node of level `k + 1`.
pub fn brute_force_step_value(
    v: &ScalarField,
    node: usize,
    k: i64,
    c: &[f64],
    model: &HamiltonianModel,
    samples: usize,
) -> Result<f64> {
    let grid = v.grid();
    let d = grid.dim();
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least two control samples per axis".into()));
    }
    if (samples as f64).powi(d as i32) > 5e7 {
        return Err(Error::TooLarge(format!("{samples}^{d} control samples")));
    }
    if v.parity() != Parity::of_level(k) || grid.parity_of(node) != v.parity().flip() {
        return Err(Error::InvalidArgument("node is not on the level after v".into()));
    }
    let tau = grid.tau();
    let x = grid.x(node).to_vec();
    let t = grid.t(k);
    let nb: Vec<f64> = grid.neighbors(node).iter().map(|&j| v.at(j)).collect();
    let mut f = |z: &[f64]| -> f64 {
        let rho = transition_probs(z, Direction::Backward, grid).expect("sample inside the box");
        tau * model.l_c(&x, t, z, c) + rho.iter().zip(&nb).map(|(r, w)| r * w).sum::<f64>()
    };
    let cap = grid.control_cap();
    let lo = vec![-cap; d];
    let hi = vec![cap; d];
    let (_, best) = sampled_min(&lo, &hi, samples, &mut f);
    let spacing = 2.0 * cap / (samples - 1) as f64;
    let lo2: Vec<f64> = best.iter().map(|b| (b - spacing).max(-cap)).collect();
    let hi2: Vec<f64> = best.iter().map(|b| (b + spacing).min(cap)).collect();
    let (val, _) = sampled_min(&lo2, &hi2, samples, &mut f);
    Ok(val)
}

/// Largest `l` accepted by [`enumerate_paths_value`].
pub const MAX_ENUMERATION_LEVELS: usize = 12;

/// Expected action over the explicit family of all `(2d)^{l+1}` paths of the
/// backward walk from `start` on level `l + 1` down to level 0.
pub fn enumerate_paths_value(
    v0: &ScalarField,
    policy: &ControlPolicy,
    start: &[i64],
    l: usize,
    c: &[f64],
    model: &HamiltonianModel,
) -> Result<f64> {
    let grid = v0.grid();
    let d = grid.dim();
    if l > MAX_ENUMERATION_LEVELS {
        return Err(Error::TooLarge(format!("path enumeration with l = {l} > {MAX_ENUMERATION_LEVELS}")));
    }
    if ((2 * d) as f64).powi(l as i32 + 1) > 1e8 {
        return Err(Error::TooLarge(format!("{}^{} paths", 2 * d, l + 1)));
    }
    if v0.parity() != Parity::Odd || Parity::of_index(start) != Parity::of_level(l as i64 + 1) {
        return Err(Error::InvalidArgument("start or terminal data on the wrong level".into()));
    }
    let mut path = vec![start.to_vec()];
    let mut total = 0.0;
    enumerate(grid, v0, policy, c, model, l as i64 + 1, 1.0, 0.0, &mut path, &mut total)?;
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    grid: &GridSpec,
    v0: &ScalarField,
    policy: &ControlPolicy,
    c: &[f64],
    model: &HamiltonianModel,
    level: i64,
    weight: f64,
    cost: f64,
    path: &mut Vec<Vec<i64>>,
    total: &mut f64,
) -> Result<()> {
    let here = path.last().expect("nonempty path").clone();
    let lin = grid.wrap(&here);
    if level == 0 {
        *total += weight * (cost + v0.at(lin));
        return Ok(());
    }
    let xi = policy.at(level, lin)?;
    let rho = transition_probs(xi, Direction::Backward, grid)?;
    let step_cost = grid.tau() * model.l_c(grid.x(lin), grid.t(level - 1), xi, c);
    for (dir, r) in rho.iter().enumerate() {
        let mut next = here.clone();
        next[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
        path.push(next);
        enumerate(grid, v0, policy, c, model, level - 1, weight * r, cost + step_cost, path, total)?;
        path.pop();
    }
    Ok(())
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn rec(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> std::result::Result<f64, ()> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth > 60 {
            return Err(());
        }
        if depth >= 4 && delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        Ok(rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)? + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)?)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 0).map_err(|_| Error::Quadrature(format!("on [{a}, {b}]")))
}

/// Quadrature target used by [`cell_problem_1d`].
pub const QUADRATURE_TOL: f64 = 1e-12;

/// Exact effective Hamiltonian and slope of the 1-D cell problem
/// `½(c + v')² + V(x) = H̄(c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSolution {
    pub c: f64,
    pub hbar: f64,
    /// `∫₀¹ √(2(max V − V))`: half-width of the flat piece of `H̄`.
    pub c0: f64,
    pub max_v: f64,
    /// Location of the maximum of `V`.
    pub x_max: f64,
    /// Downward jump of `c + v'` inside the flat piece.
    pub shock: Option<f64>,
    samples: Vec<(f64, f64)>,
}

impl CellSolution {
    /// `v̄'(x) = −c ± √(2(H̄ − V(x)))`; `None` at the points where `v̄` has a kink.
    pub fn slope(&self, v: &impl Fn(f64) -> f64, x: f64) -> Option<f64> {
        let y = (x - self.x_max).rem_euclid(1.0);
        let root = (2.0 * (self.hbar - v(x))).max(0.0).sqrt();
        match self.shock {
            None => Some(-self.c + self.c.signum() * root),
            Some(s) => {
                let ys = (s - self.x_max).rem_euclid(1.0);
                if y == 0.0 || y == ys {
                    None
                } else if y < ys {
                    Some(-self.c + root)
                } else {
                    Some(-self.c - root)
                }
            }
        }
    }

    /// Distance on the circle from `x` to the nearest kink of `v̄`.
    pub fn distance_to_kink(&self, x: f64) -> f64 {
        let circ = |a: f64, b: f64| {
            let d = (a - b).rem_euclid(1.0);
            d.min(1.0 - d)
        };
        match self.shock {
            None => f64::INFINITY,
            Some(s) => circ(x, s).min(circ(x, self.x_max)),
        }
    }

    /// Pairs `(H, ∫√(2(H − V)))` evaluated during the root search.
    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }
}

fn locate_max(v: &impl Fn(f64) -> f64) -> (f64, f64) {
    let n = 4096;
    let (mut best_x, mut best) = (0.0, f64::NEG_INFINITY);
    for i in 0..n {
        let x = i as f64 / n as f64;
        let y = v(x);
        if y > best {
            best = y;
            best_x = x;
        }
    }
    // golden-section refinement on the bracketing cell
    let (mut a, mut b) = (best_x - 1.0 / n as f64, best_x + 1.0 / n as f64);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let x1 = b - g * (b - a);
        let x2 = a + g * (b - a);
        if v(x1) > v(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let x = (0.5 * (a + b)).rem_euclid(1.0);
    let (vx, vb) = (v(x), v(best_x));
    if vx >= vb {
        (x, vx)
    } else {
        (best_x, vb)
    }
}

/// Solve the 1-D cell problem for a continuous 1-periodic potential `v`
/// with a unique maximum.
pub fn cell_problem_1d(v: impl Fn(f64) -> f64, c: f64) -> Result<CellSolution> {
    let (x_max, max_v) = locate_max(&v);
    let action = |hh: f64, a: f64, b: f64| {
        adaptive_simpson(&|x: f64| (2.0 * (hh - v(x + x_max))).max(0.0).sqrt(), a, b, QUADRATURE_TOL)
    };
    let c0 = action(max_v, 0.0, 1.0)?;
    let mut samples = Vec::new();
    if c.abs() <= c0 {
        // c + v' = +√ on (x_max, s), −√ on (s, x_max + 1), ∫(c + v') = c
        let target = 0.5 * (c + c0);
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if action(max_v, 0.0, mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let shock = (x_max + 0.5 * (lo + hi)).rem_euclid(1.0);
        return Ok(CellSolution { c, hbar: max_v, c0, max_v, x_max, shock: Some(shock), samples });
    }
    let target = c.abs();
    let mut lo = max_v;
    let mut step = 1.0;
    let mut hi = max_v + step;
    loop {
        let a = action(hi, 0.0, 1.0)?;
        samples.push((hi, a));
        if a >= target {
            break;
        }
        lo = hi;
        step *= 2.0;
        hi = max_v + step;
        if step > 1e12 {
            return Err(Error::Quadrature(format!("no bracket for |c| = {target}")));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let a = action(mid, 0.0, 1.0)?;
        samples.push((mid, a));
        if a < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(1.0) {
            break;
        }
    }
    Ok(CellSolution { c, hbar: 0.5 * (lo + hi), c0, max_v, x_max, shock: None, samples })
}

/// Effective Hamiltonian of a 1-D autonomous model from [`cell_problem_1d`].
pub fn cell_problem_for_model(model: &HamiltonianModel, c: f64) -> Result<CellSolution> {
    let v = model
        .potential_1d()
        .ok_or_else(|| Error::InvalidArgument(format!("model {} has no 1-D autonomous potential", model.name)))?;
    cell_problem_1d(v, c)
}

/// Finite-difference gradient of a sampled surface.
#[derive(Clone, Debug, PartialEq)]
pub struct FdGradient {
    pub gradient: Vec<f64>,
    /// Axes on which a one-sided difference was used.
    pub one_sided: Vec<bool>,
    /// Spacing used per axis.
    pub spacing: Vec<f64>,
}

/// Centered differences of `H̄` at the surface point `c`, one-sided on the
/// boundary of the `c` lattice.
pub fn fd_gradient(surface: &EffectiveSurface, c: &[f64]) -> Result<FdGradient> {
    let idx = surface
        .locate(c)
        .ok_or_else(|| Error::InvalidArgument(format!("{c:?} is not a point of the surface")))?;
    let d = idx.len();
    let mut gradient = vec![0.0; d];
    let mut one_sided = vec![false; d];
    let mut spacing = vec![0.0; d];
    let value = |ix: &[usize]| {
        surface
            .value_at(ix)
            .ok_or_else(|| Error::InvalidArgument(format!("surface has a hole at {ix:?}")))
    };
    for j in 0..d {
        let n = surface.axes[j].len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!("axis {j} has a single point")));
        }
        let (a, b) = if idx[j] == 0 {
            (0, 1)
        } else if idx[j] + 1 == n {
            (n - 2, n - 1)
        } else {
            (idx[j] - 1, idx[j] + 1)
        };
        one_sided[j] = b - a == 1;
        let mut ia = idx.clone();
        let mut ib = idx.clone();
        ia[j] = a;
        ib[j] = b;
        let dc = surface.axes[j][b] - surface.axes[j][a];
        spacing[j] = dc / (b - a) as f64;
        gradient[j] = (value(&ib)? - value(&ia)?) / dc;
    }
    Ok(FdGradient { gradient, one_sided, spacing })
}

/// Scheme step via the closed form, for comparison with
/// [`brute_force_step_value`]: `mean − τH(x, t_k, c + D_x v)` at `node`.
pub fn closed_form_step_value(v: &ScalarField, node: usize, k: i64, c: &[f64], model: &HamiltonianModel) -> f64 {
    let grid = v.grid();
    let dv = discrete_dx(v);
    let p: Vec<f64> = c.iter().zip(dv.at(node)).map(|(a, b)| a + b).collect();
    v.neighbor_mean(node) - grid.tau() * model.h(grid.x(node), grid.t(k), &p)
}

//! Tonelli Hamiltonians of mechanical type, `H(x,t,p) = |p|²/2 + V(x,t)`,
//! with their Lagrangians `L(x,t,ζ) = |ζ|²/2 − V(x,t)`, and the scheme
//! constants needed for step-size selection and semiconcavity monitoring.
//!
//! Potentials are trigonometric polynomials in `x`, optionally translated by a
//! periodic shift `s(t) = a·sin(2πt)·e` to make the model time dependent.

use std::f64::consts::{LN_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cosine mode `coeff·cos(2π(q·x + ω·t) + phase)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub coeff: f64,
    pub freq: Vec<i32>,
    #[serde(default)]
    pub time_freq: i32,
    #[serde(default)]
    pub phase: f64,
}

/// Periodic translation of the whole potential, `x ↦ x − a·sin(2πt)·direction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub amplitude: f64,
    pub direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianModel {
    pub name: String,
    pub dim: usize,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
    #[serde(default)]
    pub shift: Option<Shift>,
    /// Optional declared cap on control speeds; replaces the computed λ₁.
    #[serde(default)]
    pub lambda1: Option<f64>,
}

pub const BUILTIN_MODELS: [&str; 4] = ["free", "mechanical-1d", "mechanical-2d", "shifted-pendulum-nonautonomous"];

pub fn builtin_model(name: &str) -> Result<HamiltonianModel> {
    let cos1 = |q: Vec<i32>, a: f64| TrigTerm { coeff: a, freq: q, time_freq: 0, phase: 0.0 };
    let (dim, terms, shift) = match name {
        "free" => (1, vec![], None),
        "mechanical-1d" => (1, vec![cos1(vec![1], 1.0)], None),
        // cos(2πx)·cos(2πy) written as a sum of two plane waves
        "mechanical-2d" => (2, vec![cos1(vec![1, 1], 0.5), cos1(vec![1, -1], 0.5)], None),
        "shifted-pendulum-nonautonomous" => (
            1,
            vec![cos1(vec![1], 1.0)],
            Some(Shift { amplitude: 0.1, direction: vec![1.0] }),
        ),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown model '{other}' (known: {})",
                BUILTIN_MODELS.join(", ")
            )))
        }
    };
    Ok(HamiltonianModel { name: name.to_string(), dim, terms, shift, lambda1: None })
}

impl HamiltonianModel {
    /// Free particle in `d` dimensions, `H = |p|²/2`.
    pub fn free(dim: usize) -> HamiltonianModel {
        HamiltonianModel { name: "free".into(), dim, terms: vec![], shift: None, lambda1: None }
    }

    pub fn custom(name: &str, dim: usize, terms: Vec<TrigTerm>, shift: Option<Shift>) -> Result<HamiltonianModel> {
        let m = HamiltonianModel { name: name.into(), dim, terms, shift, lambda1: None };
        m.check()?;
        Ok(m)
    }

    /// Same model with its dimension changed (only meaningful for `free`).
    pub fn with_dim(mut self, dim: usize) -> Result<HamiltonianModel> {
        self.dim = dim;
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("model dimension must be >= 1".into()));
        }
        for t in &self.terms {
            if t.freq.len() != self.dim {
                return Err(Error::InvalidArgument(format!(
                    "term frequency {:?} does not match dimension {}",
                    t.freq, self.dim
                )));
            }
            if !t.coeff.is_finite() || !t.phase.is_finite() {
                return Err(Error::InvalidArgument("non-finite potential coefficient".into()));
            }
        }
        if let Some(s) = &self.shift {
            if s.direction.len() != self.dim || !s.amplitude.is_finite() {
                return Err(Error::InvalidArgument("shift direction does not match dimension".into()));
            }
        }
        if let Some(l) = self.lambda1 {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument("lambda1 must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_autonomous(&self) -> bool {
        self.terms.iter().all(|t| t.time_freq == 0)
            && self.shift.as_ref().is_none_or(|s| s.amplitude == 0.0)
    }

    fn phase_of(&self, term: &TrigTerm, x: &[f64], t: f64) -> f64 {
        let s = self.shift_at(t);
        let mut arg = term.time_freq as f64 * t;
        for i in 0..self.dim {
            arg += term.freq[i] as f64 * (x[i] - s * self.shift_dir(i));
        }
        TAU * arg + term.phase
    }

    fn shift_at(&self, t: f64) -> f64 {
        self.shift.as_ref().map_or(0.0, |s| s.amplitude * (TAU * t).sin())
    }

    fn shift_dir(&self, i: usize) -> f64 {
        self.shift.as_ref().map_or(0.0, |s| s.direction[i])
    }

    pub fn potential(&self, x: &[f64], t: f64) -> f64 {
        self.terms.iter().map(|term| term.coeff * self.phase_of(term, x, t).cos()).sum()
    }

    pub fn potential_grad(&self, x: &[f64], t: f64, out: &mut [f64]) {
        out.fill(0.0);
        for term in &self.terms {
            let s = -term.coeff * TAU * self.phase_of(term, x, t).sin();
            for (o, q) in out.iter_mut().zip(&term.freq) {
                *o += s * *q as f64;
            }
        }
    }

    /// Hessian of `V` in `x`, row-major `d×d`.
    pub fn potential_hessian(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim;
        out.fill(0.0);
        for term in &self.terms {
            let s = -term.coeff * TAU * TAU * self.phase_of(term, x, t).cos();
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] += s * (term.freq[i] * term.freq[j]) as f64;
                }
            }
        }
    }

    pub fn potential_dt(&self, x: &[f64], t: f64) -> f64 {
        let ds = self.shift.as_ref().map_or(0.0, |s| s.amplitude * TAU * (TAU * t).cos());
        self.terms
            .iter()
            .map(|term| {
                let q_dir: f64 = (0..self.dim).map(|i| term.freq[i] as f64 * self.shift_dir(i)).sum();
                let dphase = TAU * (term.time_freq as f64 - q_dir * ds);
                -term.coeff * self.phase_of(term, x, t).sin() * dphase
            })
            .sum()
    }

    #[inline]
    pub fn h(&self, x: &[f64], t: f64, p: &[f64]) -> f64 {
        0.5 * p.iter().map(|p| p * p).sum::<f64>() + self.potential(x, t)
    }

    #[inline]
    pub fn h_p(&self, _x: &[f64], _t: f64, p: &[f64], out: &mut [f64]) {
        out.copy_from_slice(p);
    }

    #[inline]
    pub fn l(&self, x: &[f64], t: f64, z: &[f64]) -> f64 {
        0.5 * z.iter().map(|z| z * z).sum::<f64>() - self.potential(x, t)
    }

    /// `L^{(c)}(x,t,ζ) = L(x,t,ζ) − c·ζ`.
    #[inline]
    pub fn l_c(&self, x: &[f64], t: f64, z: &[f64], c: &[f64]) -> f64 {
        self.l(x, t, z) - c.iter().zip(z).map(|(c, z)| c * z).sum::<f64>()
    }

    #[inline]
    pub fn l_zeta(&self, _x: &[f64], _t: f64, z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(z);
    }

    /// `H_pp` is the identity matrix for this family.
    pub fn h_pp_min_eigenvalue(&self) -> f64 {
        1.0
    }

    /// The potential as a function on the circle, if the model is 1-D and autonomous.
    pub fn potential_1d(&self) -> Option<impl Fn(f64) -> f64 + '_> {
        (self.dim == 1 && self.is_autonomous()).then_some(move |x: f64| self.potential(&[x], 0.0))
    }
}

/// Axis-aligned box of `c` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParamBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<ParamBox> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument(format!("bad parameter box {lo:?}..{hi:?}")));
        }
        Ok(ParamBox { lo, hi })
    }

    pub fn cube(d: usize, half_width: f64) -> ParamBox {
        ParamBox { lo: vec![-half_width; d], hi: vec![half_width; d] }
    }

    pub fn point(c: &[f64]) -> ParamBox {
        ParamBox { lo: c.to_vec(), hi: c.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// `max_{c∈P} |c|∞`.
    pub fn max_abs(&self) -> f64 {
        self.lo.iter().chain(&self.hi).map(|x| x.abs()).fold(0.0, f64::max)
    }

    /// `max_{c∈P} |c|₂`.
    pub fn max_norm2(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| a.abs().max(b.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, c: &[f64]) -> bool {
        c.len() == self.dim() && c.iter().zip(self.lo.iter().zip(&self.hi)).all(|(c, (a, b))| *a <= *c && *c <= *b)
    }
}

/// Sampling density used for the extremal constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub points_per_axis: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { points_per_axis: 64 }
    }
}

/// Extremal values of the potential and its derivatives over the torus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialStats {
    pub min: f64,
    pub max: f64,
    /// `max |V_x|∞`
    pub grad: f64,
    /// `max_{i,j} |V_{x_i x_j}|`
    pub hess: f64,
    /// `max |V_t|`
    pub dt: f64,
}

pub fn potential_stats(model: &HamiltonianModel, sampling: Sampling) -> PotentialStats {
    let d = model.dim;
    let n = sampling.points_per_axis.max(2);
    let nt = if model.is_autonomous() { 1 } else { n };
    let mut stats = PotentialStats { min: f64::INFINITY, max: f64::NEG_INFINITY, grad: 0.0, hess: 0.0, dt: 0.0 };
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut hs = vec![0.0; d * d];
    let total = n.pow(d as u32);
    for it in 0..nt {
        let t = it as f64 / nt as f64;
        for idx in 0..total {
            let mut rest = idx;
            for xi in x.iter_mut() {
                *xi = (rest % n) as f64 / n as f64;
                rest /= n;
            }
            let v = model.potential(&x, t);
            stats.min = stats.min.min(v);
            stats.max = stats.max.max(v);
            model.potential_grad(&x, t, &mut g);
            stats.grad = g.iter().fold(stats.grad, |a, b| a.max(b.abs()));
            model.potential_hessian(&x, t, &mut hs);
            stats.hess = hs.iter().fold(stats.hess, |a, b| a.max(b.abs()));
            stats.dt = stats.dt.max(model.potential_dt(&x, t).abs());
        }
    }
    stats
}

/// Constants controlling admissible step sizes and the semiconcavity bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeBounds {
    pub d: usize,
    pub r: f64,
    pub p: ParamBox,
    pub potential: PotentialStats,
    pub lambda1: f64,
    pub lambda1_overridden: bool,
    /// Control cap `(dλ₁)⁻¹`.
    pub cfl_cap: f64,
    pub u_star: f64,
    pub hp_star: f64,
    pub hxx_star: f64,
    pub hxp_star: f64,
    pub hpp_star: f64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub eta_star: f64,
    /// Speed cap of minimizing curves over unit time.
    pub beta_one: f64,
    /// Slope cap of the exact solution after unit time.
    pub beta_tilde: f64,
    /// `λ` limit evaluated at `τ → 0`.
    pub lambda_max: f64,
    /// `τ` limit evaluated at `λ = min(λ_max, λ₁)`.
    pub tau_max: f64,
}

/// Optional overrides for [`compute_bounds`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    pub sampling: Option<Sampling>,
    pub lambda1: Option<f64>,
    pub beta_one: Option<f64>,
}

/// Compute the scheme constants for initial slopes `|D_x v⁰|∞ ≤ r` and `c ∈ P`.
///
/// `λ₁` bounds the control speed: every momentum reachable from the initial
/// slope box lies below the energy level `E₀ = max H(x,t,c+u)` (plus the work
/// done by a time-dependent potential over one period), so
/// `|p|∞ ≤ p̂ = √(2(E₀ − min V))` and `λ₁ = 1/(d·p̂)`.
pub fn compute_bounds(model: &HamiltonianModel, r: f64, p: &ParamBox, opts: BoundOptions) -> Result<SchemeBounds> {
    model.check()?;
    let d = model.dim;
    if p.dim() != d {
        return Err(Error::InvalidArgument(format!("parameter box has dimension {}, model {d}", p.dim())));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidArgument("slope bound r must be positive".into()));
    }
    let stats = potential_stats(model, opts.sampling.unwrap_or_default());
    let hpp = model.h_pp_min_eigenvalue();
    if !(hpp > 0.0) {
        return Err(Error::ModelNotTonelli(format!("H_pp lower bound {hpp} is not positive")));
    }
    let df = d as f64;
    let cmax = p.max_abs();
    let c2 = p.max_norm2();

    let (lambda1, overridden) = match opts.lambda1.or(model.lambda1) {
        Some(l) => (l, true),
        None => {
            let reach = c2 + r * df.sqrt();
            let e0 = 0.5 * reach * reach + stats.max + stats.dt;
            let p_hat = (2.0 * (e0 - stats.min)).sqrt().max(f64::MIN_POSITIVE);
            (1.0 / (df * p_hat), false)
        }
    };
    let cfl_cap = 1.0 / (df * lambda1);
    // L^{(c)}_ζ = ζ − c, H_p(c+u) = c + u
    let u_star = cfl_cap + cmax;
    let hp_star = cmax + u_star;
    let hxx = stats.hess;
    let hxp = 0.0;
    let disc = ((1.0 + df) * hxp * hxp + hpp * hxx).sqrt();
    let m_plus = (hxp + disc) / hpp;
    let m_minus = (hxp - disc) / hpp;
    let eta = m_plus - m_minus;

    let beta_one = match opts.beta_one {
        Some(b) => b,
        None => {
            // straight competitor with |ζ|∞ ≤ 1 bounds the mean of L^{(c)}
            let beta1 = 0.5 * df + cmax * df - stats.min;
            // L^{(c)} ≥ |ζ|²/2 − |c||ζ| − max V
            let beta2 = c2 + (c2 * c2 + 2.0 * (beta1 + stats.max)).sqrt();
            // energy |ζ|²/2 + V changes by at most max|V_t| over unit time
            (beta2 * beta2 + 2.0 * (stats.max - stats.min) + 2.0 * stats.dt).sqrt()
        }
    };
    let beta_tilde = stats.grad + beta_one + cmax;

    let mut b = SchemeBounds {
        d,
        r,
        p: p.clone(),
        potential: stats,
        lambda1,
        lambda1_overridden: overridden,
        cfl_cap,
        u_star,
        hp_star,
        hxx_star: hxx,
        hxp_star: hxp,
        hpp_star: hpp,
        m_plus,
        m_minus,
        eta_star: eta,
        beta_one,
        beta_tilde,
        lambda_max: 0.0,
        tau_max: 0.0,
    };
    b.lambda_max = b.lambda_constraints(0.0).iter().map(|c| c.limit).fold(f64::INFINITY, f64::min);
    b.tau_max = b
        .tau_constraints(b.lambda_max.min(b.lambda1))
        .iter()
        .map(|c| c.limit)
        .fold(f64::INFINITY, f64::min);
    Ok(b)
}

/// One inequality `value ≤ limit` (or `<` when `strict`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub strict: bool,
    pub ok: bool,
}

impl Constraint {
    fn new(name: &str, value: f64, limit: f64, strict: bool) -> Constraint {
        let ok = if strict { value < limit } else { value <= limit };
        Constraint { name: name.into(), value, limit, strict, ok }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSizeReport {
    pub lambda: f64,
    pub tau: f64,
    pub constraints: Vec<Constraint>,
    pub pass: bool,
}

impl StepSizeReport {
    pub fn violated(&self) -> Vec<&str> {
        self.constraints.iter().filter(|c| !c.ok).map(|c| c.name.as_str()).collect()
    }
}

// x / y with a vanishing denominator read as "no constraint"
fn ratio(x: f64, y: f64) -> f64 {
    if y == 0.0 {
        if x > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        x / y
    }
}

impl SchemeBounds {
    /// Upper bound `M(t)` for the second differences at time `t > 0`.
    pub fn m_of_t(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return f64::INFINITY;
        }
        let a = self.eta_star * self.hpp_star * t;
        if a == 0.0 {
            self.m_plus + 1.0 / (self.hpp_star * t)
        } else {
            self.m_plus + self.eta_star / a.exp_m1()
        }
    }

    fn lambda_constraints(&self, tau: f64) -> Vec<Constraint> {
        let df = self.d as f64;
        vec![
            Constraint::new(
                "lambda <= (1 - 2d Hxp tau) / (2d r Hpp + d Hp)",
                0.0,
                ratio(1.0 - 2.0 * df * self.hxp_star * tau, 2.0 * df * self.r * self.hpp_star + df * self.hp_star),
                false,
            ),
            Constraint::new("lambda <= 1 / (10 r Hpp)", 0.0, ratio(1.0, 10.0 * self.r * self.hpp_star), false),
        ]
    }

    fn tau_constraints(&self, lambda: f64) -> Vec<Constraint> {
        let df = self.d as f64;
        let root = ((1.0 + df) * self.hxp_star.powi(2) + self.hpp_star * self.hxx_star).sqrt();
        vec![
            Constraint::new("tau < 1 / (2d Hxp)", 0.0, ratio(1.0, 2.0 * df * self.hxp_star), true),
            Constraint::new(
                "tau < (1 - d lambda Hp) / (2d (Hpp M+ + Hxp))",
                0.0,
                ratio(1.0 - df * lambda * self.hp_star, 2.0 * df * (self.hpp_star * self.m_plus + self.hxp_star)),
                true,
            ),
            Constraint::new("tau < 1 / (Hpp (M+ - M-))", 0.0, ratio(1.0, self.hpp_star * (self.m_plus - self.m_minus)), true),
            Constraint::new("tau < log 2 / (eta Hpp)", 0.0, ratio(LN_2, self.eta_star * self.hpp_star), true),
            Constraint::new("tau < 1 / (4 sqrt((1+d) Hxp^2 + Hpp Hxx))", 0.0, ratio(1.0, 4.0 * root), true),
        ]
    }

    /// Check every step-size inequality at the grid's `(λ, τ)`.
    pub fn validate_step_sizes(&self, grid: &crate::grid::GridSpec) -> StepSizeReport {
        let (lambda, tau) = (grid.lambda(), grid.tau());
        let mut constraints = vec![Constraint::new("lambda < lambda1", lambda, self.lambda1, true)];
        for mut c in self.lambda_constraints(tau) {
            c.value = lambda;
            c.ok = lambda <= c.limit;
            constraints.push(c);
        }
        for mut c in self.tau_constraints(lambda) {
            c.value = tau;
            c.ok = tau < c.limit;
            constraints.push(c);
        }
        if grid.dim() != self.d {
            constraints.push(Constraint::new("grid dimension matches model", grid.dim() as f64, self.d as f64, false));
            if let Some(c) = constraints.last_mut() {
                c.ok = false;
            }
        }
        let pass = constraints.iter().all(|c| c.ok);
        StepSizeReport { lambda, tau, constraints, pass }
    }
}

/// Free-standing form of [`SchemeBounds::validate_step_sizes`].
pub fn validate_step_sizes(bounds: &SchemeBounds, grid: &crate::grid::GridSpec) -> StepSizeReport {
    bounds.validate_step_sizes(grid)
}

//! Controlled random walks on the lattice.
//!
//! A backward walk sitting at node `y` on level `k` jumps to `y + ωh` on level
//! `k − 1` with probability `ρ(ω) = 1/(2d) − (λ/2)·ω·ξ^k(y)`; a forward walk
//! jumps to level `k + 1` with `ρ(ω) = 1/(2d) + (λ/2)·ω·ξ^k(y)`. Both share
//! the code below through [`Direction::sign`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Parity, ScalarField, VectorField};
use crate::models::HamiltonianModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Towards decreasing time levels.
    Backward,
    /// Towards increasing time levels.
    Forward,
}

impl Direction {
    /// Sign in front of `(λ/2)·ω·ξ`.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Backward => -1.0,
            Direction::Forward => 1.0,
        }
    }

    /// Level increment of one jump.
    pub fn level_step(self) -> i64 {
        match self {
            Direction::Backward => -1,
            Direction::Forward => 1,
        }
    }
}

/// Probabilities of the `2d` jumps, ordered `+e₁, −e₁, +e₂, …`.
pub fn transition_probs(xi: &[f64], direction: Direction, grid: &GridSpec) -> Result<Vec<f64>> {
    let mut out = vec![0.0; 2 * grid.dim()];
    fill_probs(xi, direction, grid, &mut out).map_err(|value| Error::InvalidControl {
        level: 0,
        node: vec![],
        value,
        cap: grid.control_cap(),
    })?;
    Ok(out)
}

// Err carries the offending component.
#[inline]
fn fill_probs(xi: &[f64], direction: Direction, grid: &GridSpec, out: &mut [f64]) -> std::result::Result<(), f64> {
    let d = grid.dim();
    let cap = grid.control_cap();
    let base = 1.0 / (2 * d) as f64;
    let half = 0.5 * grid.lambda() * direction.sign();
    for j in 0..d {
        let z = xi[j];
        if !(z.abs() <= cap * (1.0 + 1e-12)) {
            return Err(z);
        }
        out[2 * j] = (base + half * z).max(0.0);
        out[2 * j + 1] = (base - half * z).max(0.0);
    }
    Ok(())
}

/// Controls on a range of time levels, or a periodic family of them.
///
/// Level `k` uses `fields[k − first_level]`; a periodic policy reduces that
/// offset modulo `fields.len()`.
#[derive(Clone, Debug)]
pub struct ControlPolicy {
    grid: GridSpec,
    first_level: i64,
    fields: Vec<VectorField>,
    periodic: bool,
}

impl ControlPolicy {
    pub fn window(first_level: i64, fields: Vec<VectorField>) -> Result<ControlPolicy> {
        ControlPolicy::build(first_level, fields, false)
    }

    /// Periodic in the level index with period `fields.len()` (which must be even).
    pub fn periodic(first_level: i64, fields: Vec<VectorField>) -> Result<ControlPolicy> {
        if fields.len() % 2 == 1 {
            return Err(Error::InvalidArgument("a periodic policy needs an even number of levels".into()));
        }
        ControlPolicy::build(first_level, fields, true)
    }

    fn build(first_level: i64, fields: Vec<VectorField>, periodic: bool) -> Result<ControlPolicy> {
        let grid = fields
            .first()
            .map(|f| f.grid().clone())
            .ok_or_else(|| Error::InvalidArgument("empty control policy".into()))?;
        let cap = grid.control_cap();
        for (j, f) in fields.iter().enumerate() {
            let level = first_level + j as i64;
            if f.grid() != &grid || f.parity() != Parity::of_level(level) {
                return Err(Error::InvalidArgument(format!("control field {j} does not fit level {level}")));
            }
            for (i, z) in f.iter() {
                if let Some(&value) = z.iter().find(|z| !(z.abs() <= cap * (1.0 + 1e-12))) {
                    return Err(Error::InvalidControl { level, node: grid.index(i), value, cap });
                }
            }
        }
        Ok(ControlPolicy { grid, first_level, fields, periodic })
    }

    /// The same vector `xi` at every node and level.
    pub fn constant(grid: &GridSpec, xi: &[f64]) -> Result<ControlPolicy> {
        ControlPolicy::stationary(grid, |_, out| out.copy_from_slice(xi))
    }

    /// A time-independent feedback `ξ(x)` defined on every lattice node.
    pub fn stationary(grid: &GridSpec, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<ControlPolicy> {
        let odd = VectorField::from_fn(grid, Parity::Odd, &mut f);
        let even = VectorField::from_fn(grid, Parity::Even, &mut f);
        ControlPolicy::periodic(0, vec![odd, even])
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn is_periodic(&self) -> bool {
        self.periodic
    }
    pub fn first_level(&self) -> i64 {
        self.first_level
    }
    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    /// Is the policy the same on every level of a given parity class?
    pub fn is_stationary(&self) -> bool {
        self.periodic && self.fields.len() == 2
    }

    pub fn field(&self, level: i64) -> Result<&VectorField> {
        let off = level - self.first_level;
        let n = self.fields.len() as i64;
        let idx = if self.periodic {
            off.rem_euclid(n)
        } else if (0..n).contains(&off) {
            off
        } else {
            return Err(Error::InvalidArgument(format!(
                "no control on level {level} (window {}..{})",
                self.first_level,
                self.first_level + n - 1
            )));
        };
        Ok(&self.fields[idx as usize])
    }

    #[inline]
    pub fn at(&self, level: i64, lin: usize) -> Result<&[f64]> {
        Ok(self.field(level)?.at(lin))
    }
}

fn probs_at(policy: &ControlPolicy, level: i64, lin: usize, direction: Direction, out: &mut [f64]) -> Result<()> {
    let grid = policy.grid();
    let xi = policy.at(level, lin)?;
    fill_probs(xi, direction, grid, out).map_err(|value| Error::InvalidControl {
        level,
        node: grid.index(lin),
        value,
        cap: grid.control_cap(),
    })
}

fn check_start(grid: &GridSpec, start: &[i64], level: i64) -> Result<()> {
    if start.len() != grid.dim() {
        return Err(Error::InvalidArgument(format!("start {start:?} has wrong dimension")));
    }
    if Parity::of_index(start) != Parity::of_level(level) {
        return Err(Error::InvalidArgument(format!("start {start:?} is not a node of level {level}")));
    }
    Ok(())
}

/// Exact law of the walk on the universal cover at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDistribution {
    grid: GridSpec,
    level: i64,
    origin: Vec<i64>,
    radius: usize,
    masses: Vec<f64>,
}

impl NodeDistribution {
    pub fn level(&self) -> i64 {
        self.level
    }

    fn width(&self) -> usize {
        2 * self.radius + 1
    }

    fn offset_of(&self, cell: usize) -> Vec<i64> {
        let w = self.width();
        let mut rest = cell;
        let mut out = vec![0i64; self.origin.len()];
        for j in (0..out.len()).rev() {
            out[j] = self.origin[j] + (rest % w) as i64 - self.radius as i64;
            rest /= w;
        }
        out
    }

    /// `(unwrapped index, mass)` for every node with nonzero mass.
    pub fn iter(&self) -> impl Iterator<Item = (Vec<i64>, f64)> + '_ {
        self.masses
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != 0.0)
            .map(move |(c, &p)| (self.offset_of(c), p))
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// `Σ p·x` on the universal cover.
    pub fn mean_position(&self) -> Vec<f64> {
        let h = self.grid.h();
        let mut out = vec![0.0; self.origin.len()];
        for (m, p) in self.iter() {
            for (o, mi) in out.iter_mut().zip(&m) {
                *o += p * *mi as f64 * h;
            }
        }
        out
    }

    /// Largest `|m − start|∞` over the support.
    pub fn support_radius(&self) -> i64 {
        self.iter()
            .map(|(m, _)| m.iter().zip(&self.origin).map(|(a, b)| (a - b).abs()).max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    pub fn min_mass(&self) -> f64 {
        self.masses.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Mass at an unwrapped index (0 outside the box).
    pub fn mass(&self, m: &[i64]) -> f64 {
        let w = self.width() as i64;
        let mut cell = 0i64;
        for (mi, oi) in m.iter().zip(&self.origin) {
            let off = mi - oi + self.radius as i64;
            if off < 0 || off >= w {
                return 0.0;
            }
            cell = cell * w + off;
        }
        self.masses[cell as usize]
    }
}

/// Exact distributions of the walk started at `start` on level `start_level`,
/// one per level for `steps` jumps, tracked without wrapping.
pub fn propagate_distribution(
    start: &[i64],
    start_level: i64,
    policy: &ControlPolicy,
    steps: usize,
    direction: Direction,
) -> Result<Vec<NodeDistribution>> {
    let grid = policy.grid().clone();
    check_start(&grid, start, start_level)?;
    let d = grid.dim();
    let radius = steps;
    let w = 2 * radius + 1;
    let cells = w.checked_pow(d as u32).filter(|&c| c <= 1 << 26).ok_or_else(|| {
        Error::TooLarge(format!("distribution box of side {w} in dimension {d}"))
    })?;
    let mut strides = vec![1usize; d];
    for j in (0..d.saturating_sub(1)).rev() {
        strides[j] = strides[j + 1] * w;
    }
    let center: usize = strides.iter().map(|s| s * radius).sum();
    let mut cur = vec![0.0; cells];
    cur[center] = 1.0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(NodeDistribution { grid: grid.clone(), level: start_level, origin: start.to_vec(), radius, masses: cur.clone() });
    let mut rho = vec![0.0; 2 * d];
    let mut m = vec![0i64; d];
    let mut level = start_level;
    for s in 0..steps {
        let mut next = vec![0.0; cells];
        for (cell, &p) in cur.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut rest = cell;
            for j in (0..d).rev() {
                m[j] = start[j] + (rest % w) as i64 - radius as i64;
                rest /= w;
            }
            probs_at(policy, level, grid.wrap(&m), direction, &mut rho)?;
            for j in 0..d {
                // jumps stay within the box: after s+1 steps |offset| ≤ s+1 ≤ radius
                debug_assert!(s < radius);
                next[cell + strides[j]] += p * rho[2 * j];
                next[cell - strides[j]] += p * rho[2 * j + 1];
            }
        }
        cur = next;
        level += direction.level_step();
        out.push(NodeDistribution { grid: grid.clone(), level, origin: start.to_vec(), radius, masses: cur.clone() });
    }
    Ok(out)
}

/// One jump of a mass field on the torus. `masses` lives on level `level`.
pub fn torus_step(masses: &ScalarField, level: i64, policy: &ControlPolicy, direction: Direction) -> Result<ScalarField> {
    let grid = masses.grid();
    let d = grid.dim();
    let mut out = ScalarField::zeros(grid, masses.parity().flip());
    let mut rho = vec![0.0; 2 * d];
    for (i, p) in masses.iter() {
        if p == 0.0 {
            continue;
        }
        probs_at(policy, level, i, direction, &mut rho)?;
        for (dir, &nb) in grid.neighbors(i).iter().enumerate() {
            out.set(nb, out.at(nb) + p * rho[dir]);
        }
    }
    Ok(out)
}

/// Transition probabilities of a periodic policy, precomputed per level class.
#[derive(Clone, Debug)]
pub struct TransitionTable {
    grid: GridSpec,
    first_level: i64,
    direction: Direction,
    // probs[j][lin·2d + dir] for level first_level + j
    probs: Vec<Vec<f64>>,
}

impl TransitionTable {
    pub fn new(policy: &ControlPolicy, direction: Direction) -> Result<TransitionTable> {
        if !policy.is_periodic() {
            return Err(Error::InvalidArgument("transition tables need a periodic policy".into()));
        }
        let grid = policy.grid().clone();
        let dd = 2 * grid.dim();
        let mut probs = Vec::with_capacity(policy.fields().len());
        for (j, f) in policy.fields().iter().enumerate() {
            let level = policy.first_level() + j as i64;
            let mut row = vec![0.0; grid.len() * dd];
            for &i in grid.nodes(f.parity()) {
                probs_at(policy, level, i, direction, &mut row[i * dd..(i + 1) * dd])?;
            }
            probs.push(row);
        }
        Ok(TransitionTable { grid, first_level: policy.first_level(), direction, probs })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Probabilities at node `lin` on `level`.
    #[inline]
    pub fn probs(&self, level: i64, lin: usize) -> &[f64] {
        let j = (level - self.first_level).rem_euclid(self.probs.len() as i64) as usize;
        let dd = 2 * self.grid.dim();
        &self.probs[j][lin * dd..(lin + 1) * dd]
    }

    /// One jump of full-cube masses sitting on `level`; `out` is overwritten.
    pub fn step(&self, masses: &[f64], level: i64, out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for &i in self.grid.nodes(Parity::of_level(level)) {
            let p = masses[i];
            if p == 0.0 {
                continue;
            }
            for (&nb, r) in self.grid.neighbors(i).iter().zip(self.probs(level, i)) {
                out[nb] += p * r;
            }
        }
    }
}

/// Point mass at `start` on level `level`.
pub fn point_mass(grid: &GridSpec, start: &[i64], level: i64) -> Result<ScalarField> {
    check_start(grid, start, level)?;
    let mut p = ScalarField::zeros(grid, Parity::of_level(level));
    p.set(grid.wrap(start), 1.0);
    Ok(p)
}

/// `E[ξ^k(γ^k)]` for a mass field on level `k`.
pub fn mean_control(masses: &ScalarField, level: i64, policy: &ControlPolicy) -> Result<Vec<f64>> {
    let field = policy.field(level)?;
    let mut out = vec![0.0; masses.grid().dim()];
    for (i, p) in masses.iter() {
        if p != 0.0 {
            for (o, z) in out.iter_mut().zip(field.at(i)) {
                *o += p * z;
            }
        }
    }
    Ok(out)
}

/// Averaged path `γ̄`: `γ̄^{k−1} = γ̄^k − ξ̄^k τ` (backward) or
/// `γ̄^{k+1} = γ̄^k + ξ̄^k τ` (forward), with `ξ̄^k = E[ξ^k(γ^k)]` taken from
/// the exact law on the torus. Entry `j` is the position after `j` jumps, on
/// the universal cover.
pub fn averaged_path(
    start: &[i64],
    start_level: i64,
    policy: &ControlPolicy,
    steps: usize,
    direction: Direction,
) -> Result<Vec<Vec<f64>>> {
    let grid = policy.grid();
    let tau = grid.tau();
    let mut p = point_mass(grid, start, start_level)?;
    let mut pos: Vec<f64> = start.iter().map(|&m| m as f64 * grid.h()).collect();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(pos.clone());
    let mut level = start_level;
    for _ in 0..steps {
        let xi_bar = mean_control(&p, level, policy)?;
        for (x, z) in pos.iter_mut().zip(&xi_bar) {
            *x += direction.sign() * z * tau;
        }
        p = torus_step(&p, level, policy, direction)?;
        level += direction.level_step();
        out.push(pos.clone());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub start: Vec<i64>,
    pub start_level: i64,
    pub steps: usize,
    /// Unwrapped lattice indices `γ` after `0, 1, …, steps` jumps.
    pub nodes: Vec<Vec<i64>>,
    /// Drift path `η` with `η = x_start` at the first entry.
    pub drift: Vec<Vec<f64>>,
    pub stream: u64,
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n_paths` independent paths; path `i` draws from RNG stream `i` of `seed`.
pub fn sample_paths(
    start: &[i64],
    start_level: i64,
    policy: &ControlPolicy,
    steps: usize,
    n_paths: usize,
    seed: u64,
    direction: Direction,
) -> Result<Vec<PathSample>> {
    let grid = policy.grid();
    check_start(grid, start, start_level)?;
    (0..n_paths as u64)
        .map(|stream| {
            let mut rng = path_rng(seed, stream);
            sample_one(grid, start, start_level, policy, steps, direction, &mut rng, stream)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn sample_one(
    grid: &GridSpec,
    start: &[i64],
    start_level: i64,
    policy: &ControlPolicy,
    steps: usize,
    direction: Direction,
    rng: &mut ChaCha8Rng,
    stream: u64,
) -> Result<PathSample> {
    let d = grid.dim();
    let tau = grid.tau();
    let mut rho = vec![0.0; 2 * d];
    let mut m = start.to_vec();
    let mut eta: Vec<f64> = start.iter().map(|&x| x as f64 * grid.h()).collect();
    let mut nodes = vec![m.clone()];
    let mut drift = vec![eta.clone()];
    let mut level = start_level;
    for _ in 0..steps {
        let lin = grid.wrap(&m);
        probs_at(policy, level, lin, direction, &mut rho)?;
        let xi = policy.at(level, lin)?;
        for (e, z) in eta.iter_mut().zip(xi) {
            *e += direction.sign() * z * tau;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut dir = 2 * d - 1;
        for (k, r) in rho.iter().enumerate() {
            acc += r;
            if u < acc {
                dir = k;
                break;
            }
        }
        // a trailing zero-probability direction must never be chosen
        while rho[dir] == 0.0 && dir > 0 {
            dir -= 1;
        }
        m[dir / 2] += if dir.is_multiple_of(2) { 1 } else { -1 };
        level += direction.level_step();
        nodes.push(m.clone());
        drift.push(eta.clone());
    }
    Ok(PathSample { start: start.to_vec(), start_level, steps, nodes, drift, stream })
}

fn check_action_inputs(v0: &ScalarField, start: &[i64], l: usize, c: &[f64], model: &HamiltonianModel) -> Result<()> {
    let grid = v0.grid();
    if v0.parity() != Parity::Odd {
        return Err(Error::InvalidArgument("terminal data must live on level 0".into()));
    }
    if c.len() != grid.dim() || model.dim() != grid.dim() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    check_start(grid, start, l as i64 + 1)
}

/// `E[Σ_{0<k≤l+1} L^{(c)}(γ^k, t_{k−1}, ξ^k(γ^k))τ + v⁰(γ⁰)]` for the backward
/// walk started at `start` on level `l + 1`, computed by exact propagation.
pub fn action_functional(
    v0: &ScalarField,
    policy: &ControlPolicy,
    start: &[i64],
    l: usize,
    c: &[f64],
    model: &HamiltonianModel,
) -> Result<f64> {
    check_action_inputs(v0, start, l, c, model)?;
    let grid = v0.grid();
    let tau = grid.tau();
    let mut p = point_mass(grid, start, l as i64 + 1)?;
    let mut total = 0.0;
    for k in (1..=l as i64 + 1).rev() {
        let field = policy.field(k)?;
        let t = grid.t(k - 1);
        for (i, m) in p.iter() {
            if m != 0.0 {
                total += m * tau * model.l_c(grid.x(i), t, field.at(i), c);
            }
        }
        p = torus_step(&p, k, policy, Direction::Backward)?;
    }
    total += p.iter().map(|(i, m)| m * v0.at(i)).sum::<f64>();
    Ok(total)
}

/// Monte-Carlo estimate of [`action_functional`]: `(mean, standard error)`.
pub fn action_functional_mc(
    v0: &ScalarField,
    policy: &ControlPolicy,
    start: &[i64],
    l: usize,
    c: &[f64],
    model: &HamiltonianModel,
    n_paths: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    check_action_inputs(v0, start, l, c, model)?;
    if n_paths < 2 {
        return Err(Error::InvalidArgument("need at least two paths".into()));
    }
    let grid = v0.grid();
    let tau = grid.tau();
    let paths = sample_paths(start, l as i64 + 1, policy, l + 1, n_paths, seed, Direction::Backward)?;
    let values: Vec<f64> = paths
        .iter()
        .map(|path| -> Result<f64> {
            let mut s = 0.0;
            for (j, m) in path.nodes[..=l].iter().enumerate() {
                let k = l as i64 + 1 - j as i64;
                let lin = grid.wrap(m);
                s += tau * model.l_c(grid.x(lin), grid.t(k - 1), policy.at(k, lin)?, c);
            }
            Ok(s + v0.at(grid.wrap(&path.nodes[l + 1])))
        })
        .collect::<Result<_>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceLevel {
    pub level: i64,
    /// `E[((η − γ)ⁱ)²]` per axis.
    pub sigma_tilde: Vec<f64>,
    /// `E[|(η − γ)ⁱ|]` per axis.
    pub sigma_hat: Vec<f64>,
    /// `(t_start − t_k)·h/λ`
    pub bound: f64,
    /// `σ̂² ≤ σ̃ ≤ bound` on every axis.
    pub ok: bool,
}

/// Default cap on the number of distinct `(node, accumulated drift)` states.
pub const VARIANCE_STATE_CAP: usize = 4_000_000;

/// Exact first and second absolute moments of `η − γ` for the backward walk.
///
/// `σ̃` comes from propagating per-node mass, first and second moments;
/// `σ̂` from the joint law of (displacement, accumulated drift), which is
/// exact but exponential in the worst case, so it is capped.
pub fn variance_diagnostic(start: &[i64], start_level: i64, policy: &ControlPolicy, steps: usize) -> Result<Vec<VarianceLevel>> {
    let grid = policy.grid();
    check_start(grid, start, start_level)?;
    let d = grid.dim();
    let (h, tau) = (grid.h(), grid.tau());
    let bound_per_step = tau * h / grid.lambda();

    // moments: per node (mass, Σ p·D, Σ p·D²), D = η − γ
    let mut m0 = point_mass(grid, start, start_level)?;
    let mut m1 = vec![vec![0.0; grid.len()]; d];
    let mut m2 = vec![vec![0.0; grid.len()]; d];

    // joint law keyed by (displacement, accumulated drift bits)
    type Key = (Vec<i64>, Vec<u64>);
    let mut joint: BTreeMap<Key, (f64, Vec<f64>)> = BTreeMap::new();
    joint.insert((vec![0; d], vec![0f64.to_bits(); d]), (1.0, vec![0.0; d]));

    let mut rho = vec![0.0; 2 * d];
    let mut out = Vec::with_capacity(steps + 1);
    let mut level = start_level;
    let summarize = |level: i64, m0: &ScalarField, m2: &[Vec<f64>], joint: &BTreeMap<Key, (f64, Vec<f64>)>, s: usize| {
        let sigma_tilde: Vec<f64> = (0..d).map(|j| m0.iter().map(|(i, _)| m2[j][i]).sum()).collect();
        let mut sigma_hat = vec![0.0; d];
        for ((disp, _), (p, acc)) in joint.iter() {
            for j in 0..d {
                sigma_hat[j] += p * (-acc[j] - disp[j] as f64 * h).abs();
            }
        }
        let bound = s as f64 * bound_per_step;
        let slack = 1e-12 * (1.0 + bound);
        let ok = (0..d).all(|j| sigma_hat[j] * sigma_hat[j] <= sigma_tilde[j] + slack && sigma_tilde[j] <= bound + slack);
        VarianceLevel { level, sigma_tilde, sigma_hat, bound, ok }
    };
    out.push(summarize(level, &m0, &m2, &joint, 0));
    for s in 0..steps {
        let field = policy.field(level)?;
        let mut n0 = ScalarField::zeros(grid, m0.parity().flip());
        let mut n1 = vec![vec![0.0; grid.len()]; d];
        let mut n2 = vec![vec![0.0; grid.len()]; d];
        for (i, p) in m0.iter() {
            if p == 0.0 {
                continue;
            }
            probs_at(policy, level, i, Direction::Backward, &mut rho)?;
            let xi = field.at(i);
            for (dir, &nb) in grid.neighbors(i).iter().enumerate() {
                let r = rho[dir];
                if r == 0.0 {
                    continue;
                }
                n0.set(nb, n0.at(nb) + r * p);
                for j in 0..d {
                    let jump = if dir / 2 == j { if dir % 2 == 0 { h } else { -h } } else { 0.0 };
                    let inc = xi[j] * tau + jump;
                    n1[j][nb] += r * (m1[j][i] - inc * p);
                    n2[j][nb] += r * (m2[j][i] - 2.0 * inc * m1[j][i] + inc * inc * p);
                }
            }
        }
        m0 = n0;
        m1 = n1;
        m2 = n2;

        let mut next: BTreeMap<Key, (f64, Vec<f64>)> = BTreeMap::new();
        for ((disp, _), (p, acc)) in joint.iter() {
            let m: Vec<i64> = start.iter().zip(disp).map(|(a, b)| a + b).collect();
            let lin = grid.wrap(&m);
            probs_at(policy, level, lin, Direction::Backward, &mut rho)?;
            let xi = field.at(lin);
            let new_acc: Vec<f64> = acc.iter().zip(xi).map(|(a, z)| a + z * tau).collect();
            let bits: Vec<u64> = new_acc.iter().map(|a| a.to_bits()).collect();
            for (dir, &r) in rho.iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                let mut nd = disp.clone();
                nd[dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
                let e = next.entry((nd, bits.clone())).or_insert((0.0, new_acc.clone()));
                e.0 += p * r;
            }
        }
        if next.len() > VARIANCE_STATE_CAP {
            return Err(Error::TooLarge(format!("{} joint states after {} steps", next.len(), s + 1)));
        }
        joint = next;
        level -= 1;
        out.push(summarize(level, &m0, &m2, &joint, s + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::models::builtin_model;

    #[test]
    fn probabilities_examples() {
        let g2 = build_grid(2, 2, 2).unwrap();
        assert_eq!(transition_probs(&[0.0, 0.0], Direction::Backward, &g2).unwrap(), vec![0.25; 4]);
        let g = build_grid(1, 2, 4).unwrap(); // λ = 0.5
        assert_eq!(transition_probs(&[2.0], Direction::Backward, &g).unwrap(), vec![0.0, 1.0]);
        assert_eq!(transition_probs(&[1.0], Direction::Backward, &g).unwrap(), vec![0.25, 0.75]);
        assert_eq!(transition_probs(&[1.0], Direction::Forward, &g).unwrap(), vec![0.75, 0.25]);
        assert!(matches!(transition_probs(&[2.5], Direction::Backward, &g), Err(Error::InvalidControl { .. })));
    }

    #[test]
    fn symmetric_walk_binomial() {
        let g = build_grid(1, 8, 8).unwrap();
        let pol = ControlPolicy::constant(&g, &[0.0]).unwrap();
        let ds = propagate_distribution(&[1], 0, &pol, 2, Direction::Backward).unwrap();
        let one: Vec<_> = ds[1].iter().collect();
        assert_eq!(one, vec![(vec![0], 0.5), (vec![2], 0.5)]);
        let two: Vec<_> = ds[2].iter().collect();
        assert_eq!(two, vec![(vec![-1], 0.25), (vec![1], 0.5), (vec![3], 0.25)]);
        assert_eq!(ds[2].level(), -2);
    }

    #[test]
    fn constant_drift_mean_matches_averaged_path() {
        let g = build_grid(1, 8, 16).unwrap();
        let v0 = 0.7;
        let pol = ControlPolicy::constant(&g, &[v0]).unwrap();
        let ds = propagate_distribution(&[3], 0, &pol, 3, Direction::Backward).unwrap();
        let x0 = 3.0 * g.h();
        assert!((ds[3].mean_position()[0] - (x0 - 3.0 * g.tau() * v0)).abs() < 1e-14);
        let path = averaged_path(&[3], 0, &pol, 3, Direction::Backward).unwrap();
        for (j, p) in path.iter().enumerate() {
            assert!((p[0] - (x0 - j as f64 * g.tau() * v0)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_control_keeps_average_at_start() {
        let g = build_grid(2, 4, 8).unwrap();
        let pol = ControlPolicy::constant(&g, &[0.0, 0.0]).unwrap();
        let path = averaged_path(&[1, 0], 0, &pol, 10, Direction::Backward).unwrap();
        assert!(path.iter().all(|p| p == &vec![g.h(), 0.0]));
    }

    #[test]
    fn edge_control_is_deterministic() {
        let g = build_grid(1, 4, 8).unwrap(); // λ = 0.5, cap 2
        let pol = ControlPolicy::constant(&g, &[2.0]).unwrap();
        let paths = sample_paths(&[1], 0, &pol, 6, 20, 4, Direction::Backward).unwrap();
        for p in &paths {
            for (j, m) in p.nodes.iter().enumerate() {
                assert_eq!(m[0], 1 - j as i64);
            }
        }
        assert_eq!(paths, sample_paths(&[1], 0, &pol, 6, 20, 4, Direction::Backward).unwrap());
        assert!(sample_paths(&[1], 0, &pol, 6, 0, 4, Direction::Backward).unwrap().is_empty());
    }

    #[test]
    fn drift_path_recursion() {
        let g = build_grid(1, 4, 8).unwrap();
        let pol = ControlPolicy::stationary(&g, |x, out| out[0] = (std::f64::consts::TAU * x[0]).sin()).unwrap();
        let paths = sample_paths(&[1], 0, &pol, 5, 3, 8, Direction::Backward).unwrap();
        for p in &paths {
            for j in 0..5 {
                let lin = g.wrap(&p.nodes[j]);
                let xi = pol.at(-(j as i64), lin).unwrap()[0];
                assert!((p.drift[j + 1][0] - (p.drift[j][0] - xi * g.tau())).abs() < 1e-15);
                assert_eq!((p.nodes[j + 1][0] - p.nodes[j][0]).abs(), 1);
            }
        }
    }

    #[test]
    fn action_single_step_by_hand() {
        let g = build_grid(1, 4, 8).unwrap();
        let m = builtin_model("mechanical-1d").unwrap();
        let v0 = ScalarField::from_fn(&g, Parity::Odd, |x| x[0] * (1.0 - x[0]));
        let pol = ControlPolicy::constant(&g, &[0.6]).unwrap();
        let c = [0.25];
        let start = [2i64]; // level 1 is even
        let e = action_functional(&v0, &pol, &start, 0, &c, &m).unwrap();
        let rho = transition_probs(&[0.6], Direction::Backward, &g).unwrap();
        let expect = rho[0] * v0.get(&[3]).unwrap()
            + rho[1] * v0.get(&[1]).unwrap()
            + g.tau() * m.l_c(&[2.0 * g.h()], 0.0, &[0.6], &c);
        assert!((e - expect).abs() < 1e-15);
    }

    #[test]
    fn free_zero_action_vanishes() {
        let g = build_grid(1, 4, 8).unwrap();
        let m = builtin_model("free").unwrap();
        let pol = ControlPolicy::constant(&g, &[0.0]).unwrap();
        let v0 = ScalarField::zeros(&g, Parity::Odd);
        assert_eq!(action_functional(&v0, &pol, &[1], 5, &[0.0], &m).unwrap(), 0.0);
    }

    #[test]
    fn monte_carlo_agrees_with_exact() {
        let g = build_grid(1, 4, 8).unwrap();
        let m = builtin_model("mechanical-1d").unwrap();
        let pol = ControlPolicy::stationary(&g, |x, out| out[0] = 0.8 * (std::f64::consts::TAU * x[0]).cos()).unwrap();
        let v0 = ScalarField::from_fn(&g, Parity::Odd, |x| (std::f64::consts::TAU * x[0]).sin());
        let exact = action_functional(&v0, &pol, &[2], 6, &[0.3], &m).unwrap();
        let (est, se) = action_functional_mc(&v0, &pol, &[2], 6, &[0.3], &m, 20_000, 1).unwrap();
        assert!(((est - exact) / se).abs() < 4.0, "{est} {exact} {se}");
    }

    #[test]
    fn variance_symmetric_walk() {
        let g = build_grid(1, 8, 16).unwrap();
        let pol = ControlPolicy::constant(&g, &[0.0]).unwrap();
        let levels = variance_diagnostic(&[1], 0, &pol, 6).unwrap();
        for (s, lv) in levels.iter().enumerate() {
            // binomial: E[(γ − start)²] = s·h² in one dimension
            assert!((lv.sigma_tilde[0] - s as f64 * g.h() * g.h()).abs() < 1e-14);
            assert!(lv.ok);
        }
    }

    #[test]
    fn variance_edge_control_is_zero() {
        let g = build_grid(1, 4, 8).unwrap();
        let pol = ControlPolicy::constant(&g, &[2.0]).unwrap();
        let levels = variance_diagnostic(&[1], 0, &pol, 5).unwrap();
        for lv in &levels {
            assert!(lv.sigma_tilde[0] < 1e-28 && lv.ok);
        }
    }

    #[test]
    fn table_step_matches_torus_step() {
        let g = build_grid(2, 4, 8).unwrap();
        let pol = ControlPolicy::stationary(&g, |x, out| {
            out[0] = 0.5 * (std::f64::consts::TAU * x[1]).sin();
            out[1] = -0.3;
        })
        .unwrap();
        let table = TransitionTable::new(&pol, Direction::Backward).unwrap();
        let mut p = point_mass(&g, &[1, 0], 0).unwrap();
        let mut raw = p.to_vec_full();
        let mut out = vec![0.0; g.len()];
        for level in (-5..=0).rev() {
            p = torus_step(&p, level, &pol, Direction::Backward).unwrap();
            table.step(&raw, level, &mut out);
            std::mem::swap(&mut raw, &mut out);
            for (i, m) in p.iter() {
                assert!((raw[i] - m).abs() < 1e-16);
            }
        }
    }

    #[test]
    fn window_policy_rejects_missing_levels() {
        let g = build_grid(1, 2, 2).unwrap();
        let f = VectorField::zeros(&g, Parity::Even);
        let pol = ControlPolicy::window(1, vec![f]).unwrap();
        assert!(pol.field(1).is_ok());
        assert!(pol.field(2).is_err());
        assert!(ControlPolicy::window(0, vec![VectorField::zeros(&g, Parity::Even)]).is_err());
        let big = VectorField::constant(&g, Parity::Even, &[5.0]);
        assert!(matches!(ControlPolicy::window(1, vec![big]), Err(Error::InvalidControl { .. })));
    }
}

//! Occupation measures of controlled walks, minimizing (Mather) measures,
//! rotation vectors and Aubry sets.
//!
//! A backward walk starts on level 0 and runs down to level `−l`. Its
//! occupation measure puts mass `τ/t_l = 1/l` on the law of the walk at each
//! level `k ∈ (−l, 0]`, projected to the torus in space and to one period in
//! time. In autonomous mode the time coordinate is dropped as well.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{discrete_dx, GridSpec, Parity, ScalarField};
use crate::models::HamiltonianModel;
use crate::walk::{ControlPolicy, Direction, TransitionTable};
use crate::weakkam::PeriodicSolution;

/// Mass above which a cell counts as support.
pub const SUPPORT_THRESHOLD: f64 = 1e-9;
/// Default action-defect target.
pub const MEASURE_DEFECT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureMode {
    /// Cells are (level mod 2K, node).
    Spacetime,
    /// Cells are nodes; the policy must be time independent.
    Autonomous,
}

/// A cell of an occupation measure: time class and node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub class: usize,
    pub node: usize,
}

#[derive(Clone, Debug)]
pub struct OccupationMeasure {
    grid: GridSpec,
    mode: MeasureMode,
    horizon: usize,
    starts: Vec<Vec<i64>>,
    policy: ControlPolicy,
    masses: Vec<Vec<f64>>,
}

impl OccupationMeasure {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn mode(&self) -> MeasureMode {
        self.mode
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn starts(&self) -> &[Vec<i64>] {
        &self.starts
    }
    pub fn policy(&self) -> &ControlPolicy {
        &self.policy
    }
    pub fn classes(&self) -> usize {
        self.masses.len()
    }

    /// A level whose residue class is `class` and whose parity matches `node`.
    pub fn level_of(&self, cell: Cell) -> i64 {
        match self.mode {
            MeasureMode::Spacetime => cell.class as i64,
            MeasureMode::Autonomous => match self.grid.parity_of(cell.node) {
                Parity::Odd => 0,
                Parity::Even => 1,
            },
        }
    }

    pub fn mass(&self, cell: Cell) -> f64 {
        self.masses[cell.class][cell.node]
    }

    /// Control attached to `cell`.
    pub fn control(&self, cell: Cell) -> &[f64] {
        self.policy.at(self.level_of(cell), cell.node).expect("periodic policy covers every level")
    }

    /// `(cell, mass)` over cells with positive mass.
    pub fn iter(&self) -> impl Iterator<Item = (Cell, f64)> + '_ {
        self.masses.iter().enumerate().flat_map(|(class, row)| {
            row.iter().enumerate().filter(|(_, &m)| m > 0.0).map(move |(node, &m)| (Cell { class, node }, m))
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().flatten().sum()
    }

    /// Smallest entry; negative values would signal a broken policy.
    pub fn min_mass(&self) -> f64 {
        self.masses.iter().flatten().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Largest control component over the support.
    pub fn max_control(&self) -> f64 {
        self.iter().map(|(c, _)| self.control(c).iter().fold(0.0f64, |a, z| a.max(z.abs()))).fold(0.0, f64::max)
    }

    /// `∫ f(x, t, ζ, cell) dμ` where `t = t_k` of the cell's level.
    pub fn integrate(&self, mut f: impl FnMut(&[f64], f64, &[f64], Cell) -> f64) -> f64 {
        self.iter()
            .map(|(cell, m)| {
                let k = self.level_of(cell);
                m * f(self.grid.x(cell.node), self.grid.t(k), self.control(cell), cell)
            })
            .sum()
    }

    /// `∫ L^{(c)}(x, t − τ, ζ) dμ`.
    pub fn action(&self, model: &HamiltonianModel, c: &[f64]) -> f64 {
        let tau = self.grid.tau();
        self.integrate(|x, t, z, _| model.l_c(x, t - tau, z, c))
    }

    pub fn support(&self, threshold: f64) -> Vec<Cell> {
        self.iter().filter(|(_, m)| *m > threshold).map(|(c, _)| c).collect()
    }

    /// Number of cells the measure can charge.
    pub fn cell_count(&self) -> usize {
        match self.mode {
            MeasureMode::Spacetime => self.masses.len() * self.grid.len() / 2,
            MeasureMode::Autonomous => self.grid.len(),
        }
    }

    /// Total-variation distance `½Σ|μ − ν|`.
    pub fn tv_distance(&self, other: &OccupationMeasure) -> Result<f64> {
        if self.masses.len() != other.masses.len() || self.grid != other.grid {
            return Err(Error::InvalidArgument("measures live on different cells".into()));
        }
        Ok(0.5
            * self
                .masses
                .iter()
                .flatten()
                .zip(other.masses.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    /// Total-variation distance to the uniform measure on all chargeable cells.
    pub fn tv_to_uniform(&self) -> f64 {
        let u = 1.0 / self.cell_count() as f64;
        let mut s = 0.0;
        for (class, row) in self.masses.iter().enumerate() {
            for (node, &m) in row.iter().enumerate() {
                let allowed = match self.mode {
                    MeasureMode::Spacetime => self.grid.parity_of(node) == Parity::of_level(class as i64),
                    MeasureMode::Autonomous => true,
                };
                if allowed {
                    s += (m - u).abs();
                }
            }
        }
        0.5 * s
    }
}

fn check_policy(grid: &GridSpec, policy: &ControlPolicy, mode: MeasureMode) -> Result<usize> {
    if !policy.is_periodic() {
        return Err(Error::InvalidArgument("occupation measures need a periodic policy".into()));
    }
    let len = policy.fields().len();
    match mode {
        MeasureMode::Spacetime => {
            if !grid.period().is_multiple_of(len) {
                return Err(Error::InvalidArgument(format!("policy period {len} does not divide 2K = {}", grid.period())));
            }
            Ok(grid.period())
        }
        MeasureMode::Autonomous => {
            if len != 2 {
                return Err(Error::InvalidArgument("autonomous measures need a time-independent policy".into()));
            }
            Ok(1)
        }
    }
}

/// Incrementally extendable occupation measure.
#[derive(Clone, Debug)]
pub struct OccupationBuilder {
    table: TransitionTable,
    policy: ControlPolicy,
    mode: MeasureMode,
    starts: Vec<Vec<i64>>,
    current: Vec<f64>,
    scratch: Vec<f64>,
    // level of `current`
    level: i64,
    sums: Vec<Vec<f64>>,
    horizon: usize,
}

impl OccupationBuilder {
    pub fn new(policy: &ControlPolicy, starts: &[Vec<i64>], mode: MeasureMode) -> Result<OccupationBuilder> {
        let grid = policy.grid().clone();
        let classes = check_policy(&grid, policy, mode)?;
        if starts.is_empty() {
            return Err(Error::InvalidArgument("no start nodes".into()));
        }
        let mut current = vec![0.0; grid.len()];
        let w = 1.0 / starts.len() as f64;
        for s in starts {
            if s.len() != grid.dim() || Parity::of_index(s) != Parity::Odd {
                return Err(Error::InvalidArgument(format!("start {s:?} is not a node of level 0")));
            }
            current[grid.wrap(s)] += w;
        }
        let table = TransitionTable::new(policy, Direction::Backward)?;
        Ok(OccupationBuilder {
            table,
            policy: policy.clone(),
            mode,
            starts: starts.to_vec(),
            scratch: vec![0.0; grid.len()],
            current,
            level: 0,
            sums: vec![vec![0.0; grid.len()]; classes],
            horizon: 0,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Law of the walk at the next level to be recorded (level `−horizon`).
    pub fn current(&self) -> &[f64] {
        &self.current
    }

    /// Record `levels` more levels.
    pub fn extend(&mut self, levels: usize) {
        let period = self.table.grid().period() as i64;
        for _ in 0..levels {
            let class = match self.mode {
                MeasureMode::Spacetime => self.level.rem_euclid(period) as usize,
                MeasureMode::Autonomous => 0,
            };
            for (s, m) in self.sums[class].iter_mut().zip(&self.current) {
                *s += m;
            }
            self.table.step(&self.current, self.level, &mut self.scratch);
            std::mem::swap(&mut self.current, &mut self.scratch);
            self.level -= 1;
            self.horizon += 1;
        }
    }

    pub fn measure(&self) -> OccupationMeasure {
        let w = 1.0 / self.horizon.max(1) as f64;
        OccupationMeasure {
            grid: self.table.grid().clone(),
            mode: self.mode,
            horizon: self.horizon,
            starts: self.starts.clone(),
            policy: self.policy.clone(),
            masses: self.sums.iter().map(|row| row.iter().map(|s| s * w).collect()).collect(),
        }
    }
}

/// Occupation measure of the backward walk from `starts` (averaged) on level
/// 0 over `horizon` levels.
pub fn occupation_measure(policy: &ControlPolicy, starts: &[Vec<i64>], horizon: usize, mode: MeasureMode) -> Result<OccupationMeasure> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let mut b = OccupationBuilder::new(policy, starts, mode)?;
    b.extend(horizon);
    Ok(b.measure())
}

/// Test function `g` for the holonomic constraint, periodic in the level.
#[derive(Clone, Debug, PartialEq)]
pub struct TestField {
    pub levels: Vec<ScalarField>,
}

impl TestField {
    /// `g^k = f(x, t_k)` for `k = 0 … period − 1`.
    pub fn from_fn(grid: &GridSpec, period: usize, mut f: impl FnMut(&[f64], f64) -> f64) -> Result<TestField> {
        if period == 0 || period % 2 == 1 {
            return Err(Error::InvalidArgument("test fields need an even period".into()));
        }
        Ok(TestField {
            levels: (0..period as i64).map(|k| ScalarField::from_fn(grid, Parity::of_level(k), |x| f(x, grid.t(k)))).collect(),
        })
    }

    /// A random trigonometric polynomial; time independent when `period == 2`.
    pub fn random(grid: &GridSpec, period: usize, seed: u64) -> Result<TestField> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = grid.dim();
        let modes: Vec<(f64, Vec<f64>, f64, f64)> = (0..5)
            .map(|_| {
                let a = rng.gen_range(-1.0..1.0);
                let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
                let r = if period == 2 { 0.0 } else { rng.gen_range(-2i32..=2) as f64 };
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (a, q, r, phase)
            })
            .collect();
        TestField::from_fn(grid, period, |x, t| {
            modes
                .iter()
                .map(|(a, q, r, ph)| {
                    let arg: f64 = q.iter().zip(x).map(|(q, x)| q * x).sum::<f64>() + r * t;
                    a * (std::f64::consts::TAU * arg + ph).cos()
                })
                .sum()
        })
    }

    pub fn level(&self, k: i64) -> &ScalarField {
        &self.levels[k.rem_euclid(self.levels.len() as i64) as usize]
    }

    pub fn max_abs(&self) -> f64 {
        self.levels.iter().map(|g| g.max().abs().max(g.min().abs())).fold(0.0, f64::max)
    }
}

/// `|∫ f dμ|` with `f(x_m, t_{k}, ζ) = (D_t g)^k_m + (D_x g)^{k−1}_m·ζ`.
pub fn holonomic_check(measure: &OccupationMeasure, g: &TestField) -> Result<f64> {
    let grid = measure.grid();
    match measure.mode() {
        MeasureMode::Spacetime => {
            if !grid.period().is_multiple_of(g.levels.len()) {
                return Err(Error::InvalidArgument("test field period does not divide 2K".into()));
            }
        }
        MeasureMode::Autonomous => {
            if g.levels.len() != 2 {
                return Err(Error::InvalidArgument("autonomous measures need a time-independent test field".into()));
            }
        }
    }
    let tau = grid.tau();
    let dx: Vec<_> = g.levels.iter().map(discrete_dx).collect();
    let n = g.levels.len() as i64;
    let value = measure.integrate(|_, _, z, cell| {
        let k = measure.level_of(cell);
        let prev = (k - 1).rem_euclid(n) as usize;
        let gk = g.level(k);
        let dt = (gk.at(cell.node) - g.levels[prev].neighbor_mean(cell.node)) / tau;
        let transport: f64 = dx[prev].at(cell.node).iter().zip(z).map(|(a, b)| a * b).sum();
        dt + transport
    });
    Ok(value.abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRecord {
    pub horizon: usize,
    pub t: f64,
    pub action: f64,
    /// `∫L^{(c)}dμ + H̄`.
    pub defect: f64,
    /// `(max v̄ − min v̄)/t_l`.
    pub bound: f64,
    pub bound_ok: bool,
    /// Total variation to the measure of the previous horizon.
    pub tv_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatherOptions {
    /// Stop once `|defect| ≤ tol` (and the minimum horizon is reached).
    pub tol: f64,
    /// First horizon; defaults to `2K`.
    pub initial_horizon: Option<usize>,
    /// Never stop before this horizon.
    pub min_horizon: usize,
    pub max_horizon: usize,
    /// Start nodes on level 0; defaults to the first node.
    pub starts: Option<Vec<Vec<i64>>>,
    pub mode: MeasureMode,
}

impl Default for MatherOptions {
    fn default() -> Self {
        MatherOptions {
            tol: MEASURE_DEFECT_TOL,
            initial_horizon: None,
            min_horizon: 0,
            max_horizon: 1 << 26,
            starts: None,
            mode: MeasureMode::Spacetime,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatherApproximation {
    pub c: Vec<f64>,
    pub hbar: f64,
    pub measure: OccupationMeasure,
    pub action: f64,
    pub defect: f64,
    pub bound: f64,
    pub horizons: Vec<HorizonRecord>,
    pub support: Vec<Cell>,
    /// Share of chargeable cells carrying mass above the support threshold.
    pub support_fraction: f64,
    pub converged: bool,
}

fn level_extremes(sol: &PeriodicSolution) -> (f64, f64) {
    sol.levels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.min()), hi.max(v.max())))
}

fn policy_for(sol: &PeriodicSolution, model: &HamiltonianModel, mode: MeasureMode) -> Result<ControlPolicy> {
    match mode {
        MeasureMode::Spacetime => sol.controls(model),
        MeasureMode::Autonomous => sol.stationary_controls(model),
    }
}

fn default_starts(grid: &GridSpec) -> Vec<Vec<i64>> {
    vec![grid.index(grid.anchor(Parity::Odd))]
}

/// Occupation measures of the minimizing controls of `sol` over doubling
/// horizons, until the action defect drops below `tol`.
pub fn mather_measure(model: &HamiltonianModel, sol: &PeriodicSolution, opts: &MatherOptions) -> Result<MatherApproximation> {
    let grid = sol.grid().clone();
    if opts.mode == MeasureMode::Autonomous && sol.stationarity.is_none_or(|s| !(s <= 1e-6)) {
        return Err(Error::InvalidArgument("autonomous mode needs a two-step stationary solution".into()));
    }
    let policy = policy_for(sol, model, opts.mode)?;
    let starts = opts.starts.clone().unwrap_or_else(|| default_starts(&grid));
    let mut builder = OccupationBuilder::new(&policy, &starts, opts.mode)?;
    let (lo, hi) = level_extremes(sol);
    let osc = hi - lo;
    let mut horizon = opts.initial_horizon.unwrap_or(grid.period()).max(1);
    let mut records: Vec<HorizonRecord> = Vec::new();
    let mut previous: Option<OccupationMeasure> = None;
    loop {
        builder.extend(horizon - builder.horizon());
        let measure = builder.measure();
        let action = measure.action(model, &sol.c);
        let defect = action + sol.hbar;
        let t = horizon as f64 * grid.tau();
        let bound = osc / t;
        let tv_change = previous.as_ref().map(|p| measure.tv_distance(p)).transpose()?;
        records.push(HorizonRecord {
            horizon,
            t,
            action,
            defect,
            bound,
            bound_ok: defect.abs() <= bound + 1e-12 * (1.0 + action.abs()),
            tv_change,
        });
        let done = defect.abs() <= opts.tol && horizon >= opts.min_horizon;
        if done || horizon * 2 > opts.max_horizon {
            let support = measure.support(SUPPORT_THRESHOLD);
            let support_fraction = support.len() as f64 / measure.cell_count() as f64;
            return Ok(MatherApproximation {
                c: sol.c.clone(),
                hbar: sol.hbar,
                action,
                defect,
                bound,
                horizons: records,
                support,
                support_fraction,
                converged: done,
                measure,
            });
        }
        previous = Some(measure);
        horizon *= 2;
    }
}

/// `(γ̄⁰ − γ̄^{−l})/t_l` for the averaged path of the minimizing walk from
/// `start` on level 0.
pub fn rotation_vector(model: &HamiltonianModel, sol: &PeriodicSolution, start: &[i64], horizon: usize) -> Result<Vec<f64>> {
    let grid = sol.grid();
    let policy = sol.controls(model)?;
    let mut b = OccupationBuilder::new(&policy, &[start.to_vec()], MeasureMode::Spacetime)?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    b.extend(horizon);
    let measure = b.measure();
    // mean control over the occupation measure = (1/l)Σ_k E[ξ^k(γ^k)]
    let mut out = vec![0.0; grid.dim()];
    for (cell, m) in measure.iter() {
        for (o, z) in out.iter_mut().zip(measure.control(cell)) {
            *o += m * z;
        }
    }
    Ok(out)
}

/// Nodes and controls shared by the control graphs of several solutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AubrySet {
    pub mode: MeasureMode,
    pub solutions: usize,
    pub tol: f64,
    pub cells: BTreeMap<Cell, Vec<f64>>,
}

impl AubrySet {
    pub fn len(&self) -> usize {
        self.cells.len()
    }
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Intersection of `{(x_m, t_{k+1}, H_p(x_m, t_k, c + D_x v̄^k_m))}` over the
/// given solutions, matching controls within `tol`.
pub fn aubry_set(model: &HamiltonianModel, solutions: &[PeriodicSolution], mode: MeasureMode, tol: f64) -> Result<AubrySet> {
    let first = solutions.first().ok_or_else(|| Error::InvalidArgument("no periodic solutions".into()))?;
    let grid = first.grid().clone();
    let policies: Vec<ControlPolicy> = solutions.iter().map(|s| policy_for(s, model, mode)).collect::<Result<_>>()?;
    let mut cells = BTreeMap::new();
    let classes = match mode {
        MeasureMode::Spacetime => grid.period(),
        MeasureMode::Autonomous => 1,
    };
    for class in 0..classes {
        for node in 0..grid.len() {
            let level = match mode {
                MeasureMode::Spacetime => {
                    if grid.parity_of(node) != Parity::of_level(class as i64) {
                        continue;
                    }
                    class as i64
                }
                MeasureMode::Autonomous => match grid.parity_of(node) {
                    Parity::Odd => 0,
                    Parity::Even => 1,
                },
            };
            let z0 = policies[0].at(level, node)?;
            let mut keep = true;
            for p in &policies[1..] {
                let z = p.at(level, node)?;
                if z.iter().zip(z0).any(|(a, b)| (a - b).abs() > tol) {
                    keep = false;
                    break;
                }
            }
            if keep {
                cells.insert(Cell { class, node }, z0.to_vec());
            }
        }
    }
    Ok(AubrySet { mode, solutions: solutions.len(), tol, cells })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainmentReport {
    pub support: usize,
    /// Support cells outside the Aubry set.
    pub missing: usize,
    /// Largest control mismatch on support cells inside the set.
    pub max_mismatch: f64,
    pub pass: bool,
}

/// Is every support cell of `mather` in `aubry`, with matching control?
pub fn check_containment(mather: &MatherApproximation, aubry: &AubrySet, tol: f64) -> Result<ContainmentReport> {
    if mather.measure.mode() != aubry.mode {
        return Err(Error::InvalidArgument("measure and Aubry set use different modes".into()));
    }
    let mut missing = 0;
    let mut max_mismatch: f64 = 0.0;
    for &cell in &mather.support {
        match aubry.cells.get(&cell) {
            None => missing += 1,
            Some(z) => {
                let m = z.iter().zip(mather.measure.control(cell)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                max_mismatch = max_mismatch.max(m);
            }
        }
    }
    Ok(ContainmentReport { support: mather.support.len(), missing, max_mismatch, pass: missing == 0 && max_mismatch <= tol })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    /// Constant `a` minimizing the support gap of `v̄ − v̂ − a` (midrange).
    pub offset: f64,
    pub gap_on_support: f64,
    pub gap_everywhere: f64,
    pub agree_on_support: bool,
    /// Agreement on the support implies agreement everywhere within `factor·tol`.
    pub pass: bool,
}

/// Compare two periodic solutions on the projected Mather support and everywhere.
pub fn uniqueness_on_mather_set(
    a: &PeriodicSolution,
    b: &PeriodicSolution,
    support: &[Cell],
    mode: MeasureMode,
    tol: f64,
    factor: f64,
) -> Result<UniquenessReport> {
    if a.grid() != b.grid() || a.c != b.c {
        return Err(Error::InvalidArgument("solutions are for different grids or c".into()));
    }
    if support.is_empty() {
        return Err(Error::InvalidArgument("empty support".into()));
    }
    let grid = a.grid();
    let level_of = |cell: &Cell| -> i64 {
        match mode {
            MeasureMode::Spacetime => cell.class as i64,
            MeasureMode::Autonomous => match grid.parity_of(cell.node) {
                Parity::Odd => 0,
                Parity::Even => 1,
            },
        }
    };
    let diff = |k: i64, node: usize| a.level(k).at(node) - b.level(k).at(node);
    let on: Vec<f64> = support.iter().map(|c| diff(level_of(c), c.node)).collect();
    let lo = on.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = on.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let offset = 0.5 * (lo + hi);
    let gap_on_support = 0.5 * (hi - lo);
    let mut gap_everywhere: f64 = 0.0;
    for (k, v) in a.levels.iter().enumerate() {
        for (i, _) in v.iter() {
            gap_everywhere = gap_everywhere.max((diff(k as i64, i) - offset).abs());
        }
    }
    let agree_on_support = gap_on_support <= tol;
    let pass = !agree_on_support || gap_everywhere <= factor * tol;
    Ok(UniquenessReport { offset, gap_on_support, gap_everywhere, agree_on_support, pass })
}

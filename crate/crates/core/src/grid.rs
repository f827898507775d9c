//! Staggered periodic lattice, parity bookkeeping, discrete derivatives and
//! Lipschitz interpolation of sublattice data.
//!
//! Space is the unit torus sampled at `x_m = h·m`, `m ∈ [0, 2N)^d`, time is
//! sampled at `t_k = τ·k`. A node `(x_m, t_k)` is *odd* when `m₁+…+m_d+k` is
//! odd. Solutions live on odd nodes, so the level-`k` field occupies spatial
//! nodes whose index sum has the parity of `k + 1`, and its spatial difference
//! quotient lives on the other class.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parity class of a spatial index `m` (sum of the components mod 2).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn flip(self) -> Parity {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }

    /// Spatial parity carried by a solution at time level `k`.
    pub fn of_level(k: i64) -> Parity {
        if k.rem_euclid(2) == 0 {
            Parity::Odd
        } else {
            Parity::Even
        }
    }

    pub fn of_index(m: &[i64]) -> Parity {
        if m.iter().sum::<i64>().rem_euclid(2) == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    fn slot(self) -> usize {
        match self {
            Parity::Even => 0,
            Parity::Odd => 1,
        }
    }
}

impl fmt::Display for Parity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Parity::Even => write!(f, "even"),
            Parity::Odd => write!(f, "odd"),
        }
    }
}

struct Layout {
    d: usize,
    n: usize,
    k: usize,
    side: usize,
    len: usize,
    strides: Vec<usize>,
    // neighbors[lin * 2d + 2j] = m + e_j, neighbors[lin * 2d + 2j + 1] = m - e_j
    neighbors: Vec<usize>,
    coords: Vec<f64>,
    nodes: [Vec<usize>; 2],
}

/// Geometry of the staggered lattice. Cheap to clone; all fields built on the
/// same grid share one neighbor table.
#[derive(Clone)]
pub struct GridSpec {
    inner: Arc<Layout>,
}

impl fmt::Debug for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridSpec")
            .field("d", &self.dim())
            .field("n", &self.n())
            .field("k", &self.k())
            .finish()
    }
}

impl PartialEq for GridSpec {
    fn eq(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.n() == other.n() && self.k() == other.k()
    }
}

/// Plain description of a grid, used for serialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub d: usize,
    pub n: usize,
    pub k: usize,
}

/// Build the lattice with `h = 1/(2N)` and `τ = 1/(2K)`.
pub fn build_grid(d: usize, n: usize, k: usize) -> Result<GridSpec> {
    GridSpec::new(d, n, k)
}

impl GridSpec {
    pub fn new(d: usize, n: usize, k: usize) -> Result<GridSpec> {
        if d == 0 || n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid needs d, N, K >= 1 (got d={d}, N={n}, K={k})"
            )));
        }
        let side = 2 * n;
        let len = side
            .checked_pow(d as u32)
            .filter(|&l| l <= 1 << 28)
            .ok_or_else(|| Error::InvalidArgument(format!("grid (2N)^d too large for d={d}, N={n}")))?;
        let mut strides = vec![1usize; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * side;
        }
        let mut neighbors = vec![0usize; len * 2 * d];
        let mut coords = vec![0.0; len * d];
        let h = 1.0 / side as f64;
        let mut nodes = [Vec::with_capacity(len / 2), Vec::with_capacity(len / 2)];
        let mut m = vec![0usize; d];
        for lin in 0..len {
            let mut s = 0;
            for j in 0..d {
                let c = m[j];
                s += c;
                let up = if c + 1 == side { lin - c * strides[j] } else { lin + strides[j] };
                let down = if c == 0 { lin + (side - 1) * strides[j] } else { lin - strides[j] };
                neighbors[lin * 2 * d + 2 * j] = up;
                neighbors[lin * 2 * d + 2 * j + 1] = down;
                coords[lin * d + j] = c as f64 * h;
            }
            nodes[s % 2].push(lin);
            for j in (0..d).rev() {
                m[j] += 1;
                if m[j] < side {
                    break;
                }
                m[j] = 0;
            }
        }
        Ok(GridSpec {
            inner: Arc::new(Layout { d, n, k, side, len, strides, neighbors, coords, nodes }),
        })
    }

    pub fn from_shape(shape: GridShape) -> Result<GridSpec> {
        GridSpec::new(shape.d, shape.n, shape.k)
    }

    pub fn shape(&self) -> GridShape {
        GridShape { d: self.dim(), n: self.n(), k: self.k() }
    }

    pub fn dim(&self) -> usize {
        self.inner.d
    }
    pub fn n(&self) -> usize {
        self.inner.n
    }
    pub fn k(&self) -> usize {
        self.inner.k
    }
    pub fn h(&self) -> f64 {
        1.0 / (2 * self.inner.n) as f64
    }
    pub fn tau(&self) -> f64 {
        1.0 / (2 * self.inner.k) as f64
    }
    pub fn lambda(&self) -> f64 {
        self.inner.n as f64 / self.inner.k as f64
    }
    /// Number of time levels in one period, `2K`.
    pub fn period(&self) -> usize {
        2 * self.inner.k
    }
    /// Nodes per axis in the periodic cell, `2N`.
    pub fn side(&self) -> usize {
        self.inner.side
    }
    /// Size of the full storage cube, `(2N)^d`.
    pub fn len(&self) -> usize {
        self.inner.len
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Control box radius `(dλ)⁻¹` under which walk probabilities are valid.
    pub fn control_cap(&self) -> f64 {
        1.0 / (self.dim() as f64 * self.lambda())
    }
    pub fn t(&self, k: i64) -> f64 {
        k as f64 * self.tau()
    }

    /// Linear indices of every node of one parity class, in storage order.
    pub fn nodes(&self, parity: Parity) -> &[usize] {
        &self.inner.nodes[parity.slot()]
    }

    /// Neighbor of `lin` in direction `dir`, where directions are ordered
    /// `+e₁, −e₁, +e₂, −e₂, …`.
    #[inline]
    pub fn neighbor(&self, lin: usize, dir: usize) -> usize {
        self.inner.neighbors[lin * 2 * self.inner.d + dir]
    }

    #[inline]
    pub fn neighbors(&self, lin: usize) -> &[usize] {
        let w = 2 * self.inner.d;
        &self.inner.neighbors[lin * w..lin * w + w]
    }

    /// Linear index of an arbitrary (possibly negative or overflowing) index.
    pub fn wrap(&self, m: &[i64]) -> usize {
        debug_assert_eq!(m.len(), self.dim());
        let side = self.inner.side as i64;
        m.iter()
            .zip(&self.inner.strides)
            .map(|(&c, &s)| c.rem_euclid(side) as usize * s)
            .sum()
    }

    pub fn index(&self, lin: usize) -> Vec<i64> {
        let mut out = vec![0i64; self.dim()];
        self.index_into(lin, &mut out);
        out
    }

    pub fn index_into(&self, lin: usize, out: &mut [i64]) {
        for (j, s) in self.inner.strides.iter().enumerate() {
            out[j] = ((lin / s) % self.inner.side) as i64;
        }
    }

    /// Physical position `x_m = h·m` of a node in the periodic cell.
    #[inline]
    pub fn x(&self, lin: usize) -> &[f64] {
        let d = self.inner.d;
        &self.inner.coords[lin * d..lin * d + d]
    }

    pub fn coord(&self, lin: usize) -> Vec<f64> {
        self.x(lin).to_vec()
    }

    pub fn parity_of(&self, lin: usize) -> Parity {
        let s: usize = self.inner.strides.iter().map(|s| (lin / s) % self.inner.side).sum();
        if s.is_multiple_of(2) {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    /// First node of a parity class; used as the normalization anchor.
    pub fn anchor(&self, parity: Parity) -> usize {
        self.nodes(parity)[0]
    }
}

/// One real value per node of a parity class.
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: GridSpec,
    parity: Parity,
    values: Vec<f64>,
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.parity == other.parity
            && self.grid.nodes(self.parity).iter().all(|&i| self.values[i] == other.values[i])
    }
}

impl ScalarField {
    pub fn zeros(grid: &GridSpec, parity: Parity) -> ScalarField {
        ScalarField::constant(grid, parity, 0.0)
    }

    pub fn constant(grid: &GridSpec, parity: Parity, value: f64) -> ScalarField {
        let mut values = vec![0.0; grid.len()];
        for &i in grid.nodes(parity) {
            values[i] = value;
        }
        ScalarField { grid: grid.clone(), parity, values }
    }

    /// Sample `f(x)` at every node of the class.
    pub fn from_fn(grid: &GridSpec, parity: Parity, mut f: impl FnMut(&[f64]) -> f64) -> ScalarField {
        let mut values = vec![0.0; grid.len()];
        for &i in grid.nodes(parity) {
            values[i] = f(grid.x(i));
        }
        ScalarField { grid: grid.clone(), parity, values }
    }

    /// Build from values listed in node order of the class.
    pub fn from_values(grid: &GridSpec, parity: Parity, list: &[f64]) -> Result<ScalarField> {
        let nodes = grid.nodes(parity);
        if list.len() != nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values for the {parity} class, got {}",
                nodes.len(),
                list.len()
            )));
        }
        let mut values = vec![0.0; grid.len()];
        for (&i, &v) in nodes.iter().zip(list) {
            values[i] = v;
        }
        Ok(ScalarField { grid: grid.clone(), parity, values })
    }

    /// Random smooth periodic field with `max|D_x v| = slope`, built from a
    /// few low Fourier modes. Deterministic in `seed`.
    pub fn random_lipschitz(grid: &GridSpec, parity: Parity, slope: f64, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = grid.dim();
        let modes: Vec<(Vec<f64>, f64, f64)> = (0..6)
            .map(|_| {
                let freq: Vec<f64> = (0..d).map(|_| rng.gen_range(-3i32..=3) as f64).collect();
                (freq, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let mut v = ScalarField::from_fn(grid, parity, |x| {
            modes
                .iter()
                .map(|(q, a, phase)| {
                    let arg: f64 = q.iter().zip(x).map(|(q, x)| q * x).sum::<f64>();
                    a * (std::f64::consts::TAU * arg + phase).cos()
                })
                .sum()
        });
        let s = discrete_dx(&v).max_abs();
        if s > 0.0 {
            v.scale(slope / s);
        }
        v
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn parity(&self) -> Parity {
        self.parity
    }

    #[inline]
    pub fn at(&self, lin: usize) -> f64 {
        self.values[lin]
    }

    #[inline]
    pub fn set(&mut self, lin: usize, value: f64) {
        self.values[lin] = value;
    }

    /// Read at an arbitrary integer index (wrapped). The index must belong to
    /// the field's parity class.
    pub fn get(&self, m: &[i64]) -> Result<f64> {
        if Parity::of_index(m) != self.parity {
            return Err(Error::InvalidArgument(format!(
                "index {m:?} is not on the {} class",
                self.parity
            )));
        }
        Ok(self.values[self.grid.wrap(m)])
    }

    /// `(linear index, value)` over the nodes of the class.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.grid.nodes(self.parity).iter().map(move |&i| (i, self.values[i]))
    }

    /// Values in node order of the class.
    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().map(|(_, v)| v).collect()
    }

    /// Values on the whole cube, zero off the class.
    pub fn to_vec_full(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    /// Build from whole-cube values; entries off the class are ignored.
    pub fn from_full(grid: &GridSpec, parity: Parity, full: &[f64]) -> Result<ScalarField> {
        if full.len() != grid.len() {
            return Err(Error::InvalidArgument(format!("expected {} values, got {}", grid.len(), full.len())));
        }
        let mut out = ScalarField::zeros(grid, parity);
        for &i in grid.nodes(parity) {
            out.values[i] = full[i];
        }
        Ok(out)
    }

    pub fn max(&self) -> f64 {
        self.iter().map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max)
    }
    pub fn min(&self) -> f64 {
        self.iter().map(|(_, v)| v).fold(f64::INFINITY, f64::min)
    }
    pub fn oscillation(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn shift(&mut self, a: f64) {
        for &i in self.grid.nodes(self.parity) {
            self.values[i] += a;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for &i in self.grid.nodes(self.parity) {
            self.values[i] *= a;
        }
    }

    /// `max |self − other|` over the class. Panics on mismatched classes.
    pub fn sup_dist(&self, other: &ScalarField) -> f64 {
        assert_eq!(self.parity, other.parity, "sup_dist across parity classes");
        self.iter()
            .map(|(i, v)| (v - other.values[i]).abs())
            .fold(0.0, f64::max)
    }

    /// Pointwise `self − other`.
    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        assert_eq!(self.parity, other.parity, "difference across parity classes");
        let mut out = self.clone();
        for &i in self.grid.nodes(self.parity) {
            out.values[i] -= other.values[i];
        }
        out
    }

    /// Average of the `2d` neighbors of `lin` (which must be on the other class).
    #[inline]
    pub fn neighbor_mean(&self, lin: usize) -> f64 {
        let nb = self.grid.neighbors(lin);
        nb.iter().map(|&j| self.values[j]).sum::<f64>() / nb.len() as f64
    }

    pub fn has_non_finite(&self) -> Option<usize> {
        self.iter().find(|(_, v)| !v.is_finite()).map(|(i, _)| i)
    }
}

/// One `d`-vector per node of a parity class.
#[derive(Clone, Debug)]
pub struct VectorField {
    grid: GridSpec,
    parity: Parity,
    values: Vec<f64>,
}

impl VectorField {
    pub fn zeros(grid: &GridSpec, parity: Parity) -> VectorField {
        VectorField { grid: grid.clone(), parity, values: vec![0.0; grid.len() * grid.dim()] }
    }

    pub fn constant(grid: &GridSpec, parity: Parity, value: &[f64]) -> VectorField {
        VectorField::from_fn(grid, parity, |_, out| out.copy_from_slice(value))
    }

    pub fn from_fn(grid: &GridSpec, parity: Parity, mut f: impl FnMut(&[f64], &mut [f64])) -> VectorField {
        let d = grid.dim();
        let mut out = VectorField::zeros(grid, parity);
        for &i in grid.nodes(parity) {
            f(grid.x(i), &mut out.values[i * d..i * d + d]);
        }
        out
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }
    pub fn parity(&self) -> Parity {
        self.parity
    }

    #[inline]
    pub fn at(&self, lin: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.values[lin * d..lin * d + d]
    }

    #[inline]
    pub fn at_mut(&mut self, lin: usize) -> &mut [f64] {
        let d = self.grid.dim();
        &mut self.values[lin * d..lin * d + d]
    }

    pub fn get(&self, m: &[i64]) -> Result<&[f64]> {
        if Parity::of_index(m) != self.parity {
            return Err(Error::InvalidArgument(format!(
                "index {m:?} is not on the {} class",
                self.parity
            )));
        }
        Ok(self.at(self.grid.wrap(m)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.grid.nodes(self.parity).iter().map(move |&i| (i, self.at(i)))
    }

    /// `max_m |v_m|∞`.
    pub fn max_abs(&self) -> f64 {
        self.iter()
            .flat_map(|(_, v)| v.iter().map(|x| x.abs()))
            .fold(0.0, f64::max)
    }
}

/// Centered difference quotient `(v_{m+e_j} − v_{m−e_j})/(2h)`, evaluated on
/// the class opposite to `v`.
pub fn discrete_dx(v: &ScalarField) -> VectorField {
    let grid = v.grid();
    let d = grid.dim();
    let inv = 1.0 / (2.0 * grid.h());
    let mut out = VectorField::zeros(grid, v.parity().flip());
    for &i in grid.nodes(v.parity().flip()) {
        let nb = grid.neighbors(i);
        let slot = out.at_mut(i);
        for j in 0..d {
            slot[j] = (v.at(nb[2 * j]) - v.at(nb[2 * j + 1])) * inv;
        }
    }
    out
}

/// Staggered time quotient `(v^{k+1}_m − mean_ω v^k_{m+ω})/τ`.
pub fn discrete_dt(v_next: &ScalarField, v: &ScalarField) -> Result<ScalarField> {
    if v_next.parity() == v.parity() {
        return Err(Error::InvalidArgument("consecutive levels must alternate parity".into()));
    }
    if v_next.grid() != v.grid() {
        return Err(Error::InvalidArgument("fields live on different grids".into()));
    }
    let grid = v.grid();
    let tau = grid.tau();
    let mut out = ScalarField::zeros(grid, v_next.parity());
    for (i, vn) in v_next.iter() {
        out.set(i, (vn - v.neighbor_mean(i)) / tau);
    }
    Ok(out)
}

/// Continuous periodic extension of sublattice data.
///
/// Cubes of side `2h` are anchored on the coset `a + 2h·Z^d`, where `a` is
/// the first node of the class; inside a cube the corner values are blended
/// linearly along `e₁`, then `e₂`, and so on. On the anchor coset the values
/// are reproduced exactly, which in one dimension is the whole class.
#[derive(Clone, Debug)]
pub struct LipschitzInterpolant {
    field: ScalarField,
    anchor: Vec<i64>,
}

pub fn lipschitz_interpolate(v: &ScalarField) -> LipschitzInterpolant {
    let grid = v.grid();
    let anchor = grid.index(grid.anchor(v.parity()));
    LipschitzInterpolant { field: v.clone(), anchor }
}

impl LipschitzInterpolant {
    pub fn field(&self) -> &ScalarField {
        &self.field
    }

    /// Anchor of the cube lattice; nodes `anchor + 2·Z^d` are reproduced exactly.
    pub fn anchor(&self) -> &[i64] {
        &self.anchor
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let grid = self.field.grid();
        let d = grid.dim();
        let h = grid.h();
        let mut base = vec![0i64; d];
        let mut frac = vec![0.0; d];
        for j in 0..d {
            let s = (x[j] / h - self.anchor[j] as f64) / 2.0;
            let b = s.floor();
            base[j] = self.anchor[j] + 2 * b as i64;
            frac[j] = s - b;
        }
        // Corner values indexed by bitmask; collapse one axis at a time,
        // starting from e₁ (the lowest bit).
        let mut vals: Vec<f64> = (0..1usize << d)
            .map(|mask| {
                let mut lin = 0usize;
                let side = grid.side() as i64;
                for j in 0..d {
                    let c = base[j] + if mask >> j & 1 == 1 { 2 } else { 0 };
                    lin = lin * grid.side() + c.rem_euclid(side) as usize;
                }
                self.field.at(lin)
            })
            .collect();
        for j in 0..d {
            let half = vals.len() / 2;
            let next: Vec<f64> = (0..half)
                .map(|r| {
                    let lo = vals[2 * r];
                    let hi = vals[2 * r + 1];
                    lo + (hi - lo) * frac[j]
                })
                .collect();
            vals = next;
        }
        vals[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_from_resolution() {
        let g = build_grid(1, 2, 4).unwrap();
        assert_eq!(g.h(), 0.25);
        assert_eq!(g.tau(), 0.125);
        assert_eq!(g.lambda(), 0.5);
    }

    #[test]
    fn two_dimensional_smallest_grid() {
        let g = build_grid(2, 1, 1).unwrap();
        assert_eq!((g.h(), g.tau(), g.lambda()), (0.5, 0.5, 1.0));
        assert_eq!(g.nodes(Parity::Odd).len(), 2);
        assert_eq!(g.nodes(Parity::Even).len(), 2);
    }

    #[test]
    fn rejects_zero_resolution() {
        assert!(matches!(build_grid(1, 0, 1), Err(Error::InvalidArgument(_))));
        assert!(build_grid(0, 1, 1).is_err());
        assert!(build_grid(1, 1, 0).is_err());
    }

    #[test]
    fn level_parity_alternates_from_odd() {
        assert_eq!(Parity::of_level(0), Parity::Odd);
        assert_eq!(Parity::of_level(1), Parity::Even);
        assert_eq!(Parity::of_level(-1), Parity::Even);
        assert_eq!(Parity::of_level(-2), Parity::Odd);
    }

    #[test]
    fn neighbor_table_wraps() {
        let g = build_grid(2, 2, 1).unwrap();
        for lin in 0..g.len() {
            let m = g.index(lin);
            for j in 0..2 {
                let mut up = m.clone();
                up[j] += 1;
                let mut down = m.clone();
                down[j] -= 1;
                assert_eq!(g.neighbor(lin, 2 * j), g.wrap(&up));
                assert_eq!(g.neighbor(lin, 2 * j + 1), g.wrap(&down));
            }
            assert_ne!(g.parity_of(g.neighbor(lin, 0)), g.parity_of(lin));
        }
    }

    #[test]
    fn wrap_consistency_exhaustive() {
        for (d, n) in [(1, 3), (2, 2), (3, 1)] {
            let g = build_grid(d, n, 1).unwrap();
            let v = ScalarField::from_fn(&g, Parity::Odd, |x| x.iter().enumerate().map(|(j, x)| (j + 1) as f64 * x).sum());
            for &lin in g.nodes(Parity::Odd) {
                let m = g.index(lin);
                for j in 0..d {
                    for shift in [-2i64, 2] {
                        let mut w = m.clone();
                        w[j] += shift * n as i64;
                        assert_eq!(v.get(&w).unwrap(), v.get(&m).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn dx_of_constant_vanishes() {
        let g = build_grid(2, 3, 2).unwrap();
        let v = ScalarField::constant(&g, Parity::Odd, 4.5);
        assert_eq!(discrete_dx(&v).max_abs(), 0.0);
    }

    #[test]
    fn dx_two_point_example() {
        let g = build_grid(1, 2, 1).unwrap();
        // odd nodes: m=1 (x=0.25) and m=3 (x=0.75); use the even class to match
        // values at x=0 and x=0.5.
        let v = ScalarField::from_values(&g, Parity::Even, &[0.0, 1.0]).unwrap();
        let dv = discrete_dx(&v);
        assert_eq!(dv.get(&[1]).unwrap()[0], 2.0);
        assert_eq!(dv.get(&[3]).unwrap()[0], -2.0);
    }

    #[test]
    fn dx_of_antisymmetric_data_is_antisymmetric() {
        let g = build_grid(1, 5, 1).unwrap();
        let v = ScalarField::from_fn(&g, Parity::Odd, |x| (std::f64::consts::TAU * x[0]).sin() + (3.0 * std::f64::consts::TAU * x[0]).sin());
        let dv = discrete_dx(&v);
        for &i in g.nodes(Parity::Even) {
            let m = g.index(i)[0];
            let mirrored = dv.get(&[-m]).unwrap()[0];
            assert!((dv.at(i)[0] - mirrored).abs() < 1e-12);
        }
        // D_x of an odd function is even; D_x of its negative flips sign.
        let mut w = v.clone();
        w.scale(-1.0);
        let dw = discrete_dx(&w);
        for &i in g.nodes(Parity::Even) {
            assert_eq!(dw.at(i)[0], -dv.at(i)[0]);
        }
    }

    #[test]
    fn dt_examples() {
        let g = build_grid(1, 3, 4).unwrap();
        let v = ScalarField::from_fn(&g, Parity::Odd, |x| x[0] * x[0]);
        let mut avg = ScalarField::zeros(&g, Parity::Even);
        for &i in g.nodes(Parity::Even) {
            avg.set(i, v.neighbor_mean(i));
        }
        assert!(discrete_dt(&avg, &v).unwrap().iter().all(|(_, x)| x.abs() < 1e-14));
        let z = ScalarField::zeros(&g, Parity::Odd);
        let a = ScalarField::constant(&g, Parity::Even, 0.3);
        let dt = discrete_dt(&a, &z).unwrap();
        assert!(dt.iter().all(|(_, x)| (x - 0.3 / g.tau()).abs() < 1e-12));
        assert!(discrete_dt(&z, &z).is_err());
    }

    #[test]
    fn interpolant_one_dimensional_is_piecewise_linear() {
        let g = build_grid(1, 4, 1).unwrap();
        let v = ScalarField::from_fn(&g, Parity::Odd, |x| (std::f64::consts::TAU * x[0]).cos());
        let w = lipschitz_interpolate(&v);
        for (i, val) in v.iter() {
            assert!((w.eval(&g.coord(i)) - val).abs() < 1e-14);
        }
        let a = g.coord(g.nodes(Parity::Odd)[0])[0];
        let b = a + 2.0 * g.h();
        let mid = w.eval(&[0.25 * a + 0.75 * b]);
        let expect = 0.25 * v.get(&[1]).unwrap() + 0.75 * v.get(&[3]).unwrap();
        assert!((mid - expect).abs() < 1e-14);
        // wraps around the torus
        assert!((w.eval(&[a + 1.0]) - w.eval(&[a])).abs() < 1e-14);
    }

    #[test]
    fn interpolant_two_dimensional_cube_center() {
        let g = build_grid(2, 2, 1).unwrap();
        let v = ScalarField::from_fn(&g, Parity::Odd, |x| if x[0] < 0.5 { 0.0 } else { 1.0 });
        let w = lipschitz_interpolate(&v);
        let anchor = w.anchor().to_vec();
        assert_eq!(anchor, vec![0, 1]);
        let corners = [[0i64, 1], [2, 1], [0, 3], [2, 3]];
        let vals: Vec<f64> = corners.iter().map(|m| v.get(m).unwrap()).collect();
        let h = g.h();
        let center = w.eval(&[h, 2.0 * h]);
        assert!((center - vals.iter().sum::<f64>() / 4.0).abs() < 1e-14);
        for m in corners {
            let x = [m[0] as f64 * h, m[1] as f64 * h];
            assert_eq!(w.eval(&x), v.get(&m).unwrap());
        }
    }

    #[test]
    fn interpolant_of_constant_is_constant() {
        let g = build_grid(2, 3, 1).unwrap();
        let w = lipschitz_interpolate(&ScalarField::constant(&g, Parity::Odd, -2.5));
        for x in [[0.0, 0.0], [0.13, 0.77], [0.99, 0.5]] {
            assert!((w.eval(&x) + 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn random_field_hits_requested_slope() {
        let g = build_grid(2, 4, 1).unwrap();
        let v = ScalarField::random_lipschitz(&g, Parity::Odd, 0.7, 11);
        assert!((discrete_dx(&v).max_abs() - 0.7).abs() < 1e-12);
        assert_eq!(v, ScalarField::random_lipschitz(&g, Parity::Odd, 0.7, 11));
    }
}

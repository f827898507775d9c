//! Experiment description read from a TOML file.
//!
//! Only `model` and `[grid]` are required. Every tolerance has a default
//! that is written back into the JSON sidecars, so an output directory always
//! records the values it was produced with.

use std::path::{Path, PathBuf};

use gridkam::mather::{MeasureMode, MEASURE_DEFECT_TOL};
use gridkam::models::{Shift, TrigTerm};
use gridkam::weakkam::{FIXED_POINT_TOL, IDENTITY_TOL};
use gridkam::{builtin_model, GridSpec, HamiltonianModel};
use serde::{Deserialize, Serialize};

use crate::CliError;

const REQUIRED: [&str; 5] = ["model", "grid", "grid.d", "grid.n", "grid.k"];

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSpec,
    pub grid: GridConfig,
    #[serde(default)]
    pub c: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub v0: V0Spec,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub effective: EffectiveConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub mather: MatherConfig,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
}

/// A builtin name, or a table naming a builtin with overrides, or a custom
/// trigonometric potential.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Name(String),
    Table(ModelTable),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelTable {
    pub name: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub terms: Option<Vec<TrigTerm>>,
    #[serde(default)]
    pub shift: Option<Shift>,
    #[serde(default)]
    pub lambda1: Option<f64>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum V0Spec {
    #[default]
    Zero,
    Random {
        slope: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    /// Slope bound on admissible initial data; defaults to the slope of
    /// `v0`, but at least 0.1.
    pub r: Option<f64>,
    pub p_lo: Option<Vec<f64>>,
    pub p_hi: Option<Vec<f64>>,
    pub lambda1: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub fixed_point: f64,
    pub identity: f64,
    pub measure_defect: f64,
    pub max_periods: usize,
    pub max_iters: usize,
    /// Mann averaging weight for the fixed-point sweep; plain Picard if absent.
    pub averaging: Option<f64>,
    pub aubry: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            fixed_point: FIXED_POINT_TOL,
            identity: IDENTITY_TOL,
            measure_defect: MEASURE_DEFECT_TOL,
            max_periods: 20_000,
            max_iters: 50_000,
            averaging: None,
            aubry: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectiveConfig {
    pub c_lo: Option<Vec<f64>>,
    pub c_hi: Option<Vec<f64>>,
    pub points: usize,
    pub forward: bool,
    pub convexity_tol: f64,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        EffectiveConfig { c_lo: None, c_hi: None, points: 17, forward: false, convexity_tol: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Explicit c values; the `[effective]` grid otherwise.
    pub c: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatherConfig {
    pub c: Option<Vec<Vec<f64>>>,
    pub mode: MeasureMode,
    pub initial_horizon: Option<usize>,
    pub min_horizon: usize,
    pub max_horizon: usize,
    pub starts: Option<Vec<Vec<i64>>>,
    /// Horizon of the rotation-vector walk, in periods.
    pub rotation_periods: usize,
    /// Half-width of the central difference for the gradient of `H̄`.
    pub fd_step: f64,
}

impl Default for MatherConfig {
    fn default() -> Self {
        MatherConfig {
            c: None,
            mode: MeasureMode::Spacetime,
            initial_horizon: None,
            min_horizon: 0,
            max_horizon: 1 << 26,
            starts: None,
            rotation_periods: 64,
            fd_step: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Grid sizes combined with `lambda` as `K = N/λ`.
    pub n: Option<Vec<usize>>,
    pub lambda: Option<f64>,
    /// Explicit `[N, K]` pairs.
    pub grids: Option<Vec<[usize; 2]>>,
    pub c: Option<Vec<f64>>,
}

fn lookup<'a>(table: &'a toml::Table, path: &str) -> Option<&'a toml::Value> {
    let mut parts = path.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::config("", e.message()))?;
        for path in REQUIRED {
            if lookup(&table, path).is_none() {
                return Err(CliError::config(path, "missing required field"));
            }
        }
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::config("", e.to_string().trim()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Config, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("", format!("cannot read {}: {e}", path.display())))?;
        Ok((Config::parse(&text)?, text))
    }

    fn validate(&self) -> Result<(), CliError> {
        let d = self.grid.d;
        let check_len = |path: &str, v: &Option<Vec<f64>>| match v {
            Some(v) if v.len() != d => Err(CliError::config(path, format!("expected {d} entries, got {}", v.len()))),
            _ => Ok(()),
        };
        check_len("c", &self.c)?;
        check_len("bounds.p_lo", &self.bounds.p_lo)?;
        check_len("bounds.p_hi", &self.bounds.p_hi)?;
        check_len("effective.c_lo", &self.effective.c_lo)?;
        check_len("effective.c_hi", &self.effective.c_hi)?;
        check_len("convergence.c", &self.convergence.c)?;
        for (path, list) in [("verify.c", &self.verify.c), ("mather.c", &self.mather.c)] {
            if let Some(list) = list {
                if list.is_empty() {
                    return Err(CliError::config(path, "empty list"));
                }
                if list.iter().any(|c| c.len() != d) {
                    return Err(CliError::config(path, format!("every entry needs {d} components")));
                }
            }
        }
        if let V0Spec::Random { slope, .. } = self.v0 {
            if !(slope >= 0.0 && slope.is_finite()) {
                return Err(CliError::config("v0.slope", "must be a finite non-negative number"));
            }
        }
        if self.effective.points < 2 {
            return Err(CliError::config("effective.points", "need at least 2 points per axis"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec, CliError> {
        GridSpec::new(self.grid.d, self.grid.n, self.grid.k).map_err(|e| CliError::config("grid", e.to_string()))
    }

    pub fn model(&self) -> Result<HamiltonianModel, CliError> {
        let d = self.grid.d;
        let err = |e: gridkam::Error| CliError::config("model", e.to_string());
        let mut model = match &self.model {
            ModelSpec::Name(name) => builtin_model(name).map_err(err)?,
            ModelSpec::Table(t) => {
                let mut m = match &t.terms {
                    Some(terms) => HamiltonianModel::custom(&t.name, t.dim.unwrap_or(d), terms.clone(), t.shift.clone())
                        .map_err(err)?,
                    None => {
                        let mut m = builtin_model(&t.name).map_err(err)?;
                        if let Some(dim) = t.dim {
                            m = m.with_dim(dim).map_err(err)?;
                        }
                        if t.shift.is_some() {
                            m.shift = t.shift.clone();
                        }
                        m
                    }
                };
                m.lambda1 = t.lambda1.or(m.lambda1);
                m
            }
        };
        // the free particle lives in any dimension
        if model.name == "free" && model.terms.is_empty() && model.dim != d {
            model = model.with_dim(d).map_err(err)?;
        }
        model.check().map_err(err)?;
        if model.dim != d {
            return Err(CliError::config("model", format!("model has dimension {}, grid.d is {d}", model.dim)));
        }
        Ok(model)
    }

    pub fn c(&self) -> Vec<f64> {
        self.c.clone().unwrap_or_else(|| vec![0.0; self.grid.d])
    }

    pub fn effective_c_grid(&self) -> gridkam::weakkam::CGrid {
        let d = self.grid.d;
        let base = gridkam::weakkam::CGrid::default_for(d);
        gridkam::weakkam::CGrid {
            lo: self.effective.c_lo.clone().unwrap_or(base.lo),
            hi: self.effective.c_hi.clone().unwrap_or(base.hi),
            points: self.effective.points,
        }
    }

    pub fn convergence_grids(&self) -> Result<Vec<GridSpec>, CliError> {
        let conv = &self.convergence;
        let pairs: Vec<[usize; 2]> = match (&conv.grids, &conv.n) {
            (Some(_), Some(_)) => return Err(CliError::config("convergence", "give either grids or n, not both")),
            (Some(g), None) => g.clone(),
            (None, Some(ns)) => {
                let lambda = conv.lambda.ok_or_else(|| CliError::config("convergence.lambda", "required with convergence.n"))?;
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return Err(CliError::config("convergence.lambda", "must be positive"));
                }
                ns.iter()
                    .map(|&n| {
                        let k = n as f64 / lambda;
                        if (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
                            Err(CliError::config("convergence.n", format!("N = {n} gives non-integer K = N/lambda = {k}")))
                        } else {
                            Ok([n, k.round() as usize])
                        }
                    })
                    .collect::<Result<_, _>>()?
            }
            (None, None) => return Err(CliError::config("convergence.grids", "missing required field")),
        };
        if pairs.is_empty() {
            return Err(CliError::config("convergence.grids", "empty grid list"));
        }
        pairs
            .iter()
            .map(|&[n, k]| GridSpec::new(self.grid.d, n, k).map_err(|e| CliError::config("convergence.grids", e.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "model = \"mechanical-1d\"\n[grid]\nd = 1\nn = 4\nk = 16\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = Config::parse(BASE).unwrap();
        assert_eq!(cfg.tolerances.fixed_point, 1e-10);
        assert_eq!(cfg.tolerances.identity, 1e-8);
        assert_eq!(cfg.tolerances.measure_defect, 1e-6);
        assert_eq!(cfg.c(), vec![0.0]);
        assert!(matches!(cfg.v0, V0Spec::Zero));
    }

    #[test]
    fn missing_field_reports_path() {
        let err = Config::parse("model = \"free\"\n[grid]\nd = 1\nk = 4\n").unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "grid.n"),
            other => panic!("{other:?}"),
        }
        assert_eq!(err_code("[grid]\nd=1\nn=2\nk=2\n"), 2);
    }

    fn err_code(text: &str) -> i32 {
        Config::parse(text).unwrap_err().exit_code()
    }

    #[test]
    fn free_model_takes_grid_dimension() {
        let cfg = Config::parse("model = \"free\"\n[grid]\nd = 2\nn = 2\nk = 4\n").unwrap();
        assert_eq!(cfg.model().unwrap().dim, 2);
    }

    #[test]
    fn custom_model_from_terms() {
        let text = format!(
            "{}[model]\nname = \"two-mode\"\nterms = [{{ coeff = 1.0, freq = [1] }}, {{ coeff = 0.2, freq = [2], phase = 0.5 }}]\n",
            BASE.replace("model = \"mechanical-1d\"\n", "")
        );
        let cfg = Config::parse(&text).unwrap();
        let m = cfg.model().unwrap();
        assert_eq!(m.terms.len(), 2);
        assert_eq!(m.name, "two-mode");
    }

    #[test]
    fn convergence_grids_from_lambda() {
        let text = format!("{BASE}[convergence]\nn = [4, 8]\nlambda = 0.25\n");
        let g = Config::parse(&text).unwrap().convergence_grids().unwrap();
        assert_eq!(g.iter().map(|g| (g.n(), g.k())).collect::<Vec<_>>(), vec![(4, 16), (8, 32)]);
        let empty = format!("{BASE}[convergence]\ngrids = []\n");
        assert!(Config::parse(&empty).unwrap().convergence_grids().is_err());
    }

    #[test]
    fn wrong_lengths_are_rejected() {
        let text = format!("c = [0.1, 0.2]\n{BASE}");
        assert_eq!(err_code(&text), 2);
        let unknown = format!("{BASE}bogus = 1\n");
        assert_eq!(err_code(&unknown), 2);
    }
}

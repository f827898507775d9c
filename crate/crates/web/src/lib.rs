//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each exported function takes plain numbers and a model name and returns a
//! JSON string. The `*_json` functions hold the logic and run natively too.

use gridkam::grid::{build_grid, GridSpec};
use gridkam::mather::{mather_measure, rotation_vector, MatherOptions};
use gridkam::oracle::cell_problem_for_model;
use gridkam::weakkam::{estimate_effective_hamiltonian, find_periodic_solution, FixedPointOptions, HbarOptions};
use gridkam::{builtin_model, HamiltonianModel, Parity};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Largest `N` the page may ask for; keeps a click under a second.
const MAX_N: usize = 64;

fn setup(model: &str, n: usize, k: usize) -> Result<(HamiltonianModel, GridSpec), String> {
    let m = builtin_model(model).map_err(|e| e.to_string())?;
    if m.dim != 1 {
        return Err(format!("the demo draws one-dimensional models only; '{model}' has d = {}", m.dim));
    }
    if n > MAX_N {
        return Err(format!("N = {n} exceeds the demo limit {MAX_N}"));
    }
    let g = build_grid(1, n, k).map_err(|e| e.to_string())?;
    Ok((m, g))
}

/// `{c, hbar, lower, upper, oracle}` over `points` values of `c`; failed
/// points (CFL) carry `null`.
pub fn hbar_curve_json(model: &str, n: usize, k: usize, c_lo: f64, c_hi: f64, points: usize) -> Result<String, String> {
    let (m, g) = setup(model, n, k)?;
    if !(2..=401).contains(&points) || c_hi.partial_cmp(&c_lo) != Some(std::cmp::Ordering::Greater) {
        return Err("need 2 to 401 points and c_hi > c_lo".into());
    }
    let mut cs = Vec::with_capacity(points);
    let mut hbar = Vec::with_capacity(points);
    let mut lower = Vec::with_capacity(points);
    let mut upper = Vec::with_capacity(points);
    let mut oracle = Vec::with_capacity(points);
    for i in 0..points {
        let c = c_lo + (c_hi - c_lo) * i as f64 / (points - 1) as f64;
        cs.push(c);
        match estimate_effective_hamiltonian(&g, &m, &[c], None, &HbarOptions::default()) {
            Ok(est) => {
                hbar.push(Some(est.hbar));
                lower.push(Some(est.lower));
                upper.push(Some(est.upper));
            }
            Err(_) => {
                hbar.push(None);
                lower.push(None);
                upper.push(None);
            }
        }
        oracle.push(if m.is_autonomous() { cell_problem_for_model(&m, c).ok().map(|s| s.hbar) } else { None });
    }
    Ok(json!({ "c": cs, "hbar": hbar, "lower": lower, "upper": upper, "oracle": oracle }).to_string())
}

/// Level 0 of the periodic solution: `{x, v, slope_x, slope, hbar, iterations, identity_residual}`.
pub fn periodic_solution_json(model: &str, n: usize, k: usize, c: f64) -> Result<String, String> {
    let (m, g) = setup(model, n, k)?;
    let sol = find_periodic_solution(&g, &m, &[c], None, &FixedPointOptions::default()).map_err(|e| e.to_string())?;
    let v0 = sol.v0();
    let (x, v): (Vec<f64>, Vec<f64>) = v0.iter().map(|(i, val)| (g.x(i)[0], val)).unzip();
    let dx = gridkam::grid::discrete_dx(v0);
    let (slope_x, slope): (Vec<f64>, Vec<f64>) = dx.iter().map(|(i, z)| (g.x(i)[0], c + z[0])).unzip();
    Ok(json!({
        "x": x,
        "v": v,
        "slope_x": slope_x,
        "slope": slope,
        "hbar": sol.hbar,
        "iterations": sol.iterations,
        "identity_residual": sol.identity_residual(&m),
    })
    .to_string())
}

/// Spatial marginal of the Mather measure on level 0 nodes plus the rotation
/// number: `{x, mass, defect, rotation, hbar}`.
pub fn occupation_measure_json(model: &str, n: usize, k: usize, c: f64) -> Result<String, String> {
    let (m, g) = setup(model, n, k)?;
    let sol = find_periodic_solution(&g, &m, &[c], None, &FixedPointOptions::default()).map_err(|e| e.to_string())?;
    let opts = MatherOptions { max_horizon: 1 << 22, ..Default::default() };
    let approx = mather_measure(&m, &sol, &opts).map_err(|e| e.to_string())?;
    let mut mass = vec![0.0; g.side()];
    for (cell, w) in approx.measure.iter() {
        mass[g.index(cell.node)[0] as usize] += w;
    }
    let x: Vec<f64> = (0..g.side()).map(|i| i as f64 * g.h()).collect();
    let start = g.index(g.anchor(Parity::Odd));
    let rotation = rotation_vector(&m, &sol, &start, 32 * g.period()).map_err(|e| e.to_string())?[0];
    Ok(json!({
        "x": x,
        "mass": mass,
        "defect": approx.defect,
        "rotation": rotation,
        "hbar": sol.hbar,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn hbar_curve(model: &str, n: usize, k: usize, c_lo: f64, c_hi: f64, points: usize) -> Result<String, JsValue> {
    hbar_curve_json(model, n, k, c_lo, c_hi, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn periodic_solution(model: &str, n: usize, k: usize, c: f64) -> Result<String, JsValue> {
    periodic_solution_json(model, n, k, c).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn occupation_measure(model: &str, n: usize, k: usize, c: f64) -> Result<String, JsValue> {
    occupation_measure_json(model, n, k, c).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn free_curve_is_a_parabola() {
        let v = parse(&hbar_curve_json("free", 4, 16, -1.0, 1.0, 5).unwrap());
        for (c, h) in v["c"].as_array().unwrap().iter().zip(v["hbar"].as_array().unwrap()) {
            let c = c.as_f64().unwrap();
            assert!((h.as_f64().unwrap() - c * c / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn curve_marks_cfl_failures_as_null() {
        let v = parse(&hbar_curve_json("mechanical-1d", 4, 16, -6.0, 6.0, 3).unwrap());
        assert!(v["hbar"][0].is_null() && v["hbar"][2].is_null());
        assert!(v["hbar"][1].as_f64().is_some());
        assert!(v["oracle"][1].as_f64().unwrap() > 0.99);
    }

    #[test]
    fn periodic_solution_has_one_value_per_node() {
        let v = parse(&periodic_solution_json("mechanical-1d", 8, 32, 0.5).unwrap());
        assert_eq!(v["x"].as_array().unwrap().len(), 8);
        assert_eq!(v["slope"].as_array().unwrap().len(), 8);
        assert!(v["identity_residual"].as_f64().unwrap() < 1e-8);
    }

    #[test]
    fn measure_is_normalized() {
        let v = parse(&occupation_measure_json("mechanical-1d", 4, 16, 1.8).unwrap());
        let total: f64 = v["mass"].as_array().unwrap().iter().map(|m| m.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(v["rotation"].as_f64().unwrap() > 1.0);
    }

    #[test]
    fn rejects_two_dimensional_models() {
        assert!(hbar_curve_json("mechanical-2d", 2, 4, -1.0, 1.0, 3).is_err());
        assert!(periodic_solution_json("mechanical-1d", 128, 512, 0.0).is_err());
    }
}

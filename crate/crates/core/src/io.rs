//! Plain-text CSV rendering of fields, surfaces and measures.
//!
//! Numbers are written with 17 significant digits so that parsing the output
//! gives back the same `f64`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Parity, ScalarField};
use crate::mather::{AubrySet, OccupationMeasure};
use crate::weakkam::{ConvergenceReport, EffectiveSurface};

/// Round-trip formatting of a float.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn axis_names(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|j| format!("{prefix}{j}")).collect()
}

fn push_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let row: Vec<String> = cells.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

/// `level, m0…, x0…, value` for every node of every given level.
pub fn levels_csv(levels: &[(i64, &ScalarField)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = levels.first() else {
        return out;
    };
    let d = first.grid().dim();
    let mut header = vec!["level".to_string()];
    header.extend(axis_names("m", d));
    header.extend(axis_names("x", d));
    header.push("value".into());
    push_row(&mut out, header);
    for (k, v) in levels {
        let grid = v.grid();
        for (i, val) in v.iter() {
            let mut row = vec![k.to_string()];
            row.extend(grid.index(i).iter().map(|m| m.to_string()));
            row.extend(grid.x(i).iter().map(|&x| fmt_f64(x)));
            row.push(fmt_f64(val));
            push_row(&mut out, row);
        }
    }
    out
}

/// Parse a level written by [`levels_csv`] (any level column) back into a field.
pub fn parse_field_csv(grid: &GridSpec, parity: Parity, text: &str) -> Result<ScalarField> {
    let d = grid.dim();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::InvalidArgument("empty field file".into()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let m_cols: Vec<usize> = (0..d)
        .map(|j| col(&format!("m{j}")).ok_or_else(|| Error::InvalidArgument(format!("field file lacks column m{j}"))))
        .collect::<Result<_>>()?;
    let v_col = col("value").ok_or_else(|| Error::InvalidArgument("field file lacks column value".into()))?;
    let mut out = ScalarField::zeros(grid, parity);
    let mut seen = vec![false; grid.len()];
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(|c| c.trim()).collect();
        let bad = |what: &str| Error::InvalidArgument(format!("field file row {}: {what}", n + 2));
        let m: Vec<i64> = m_cols
            .iter()
            .map(|&c| cells.get(c).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad index")))
            .collect::<Result<_>>()?;
        if Parity::of_index(&m) != parity {
            return Err(bad("node on the wrong sublattice"));
        }
        let value: f64 = cells.get(v_col).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad value"))?;
        let lin = grid.wrap(&m);
        out.set(lin, value);
        seen[lin] = true;
    }
    if let Some(&missing) = grid.nodes(parity).iter().find(|&&i| !seen[i]) {
        return Err(Error::InvalidArgument(format!("field file has no value for node {:?}", grid.index(missing))));
    }
    Ok(out)
}

/// `c0…, hbar, lower, upper, width, periods, forward, error`.
pub fn surface_csv(surface: &EffectiveSurface) -> String {
    let mut out = String::new();
    let mut header = axis_names("c", surface.dim());
    header.extend(["hbar", "lower", "upper", "width", "periods", "forward", "error"].map(String::from));
    push_row(&mut out, header);
    let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
    for p in &surface.points {
        let mut row: Vec<String> = p.c.iter().map(|&c| fmt_f64(c)).collect();
        row.push(opt(p.hbar));
        row.push(fmt_f64(p.lower));
        row.push(fmt_f64(p.upper));
        row.push(fmt_f64(p.width()));
        row.push(p.periods.to_string());
        row.push(opt(p.forward));
        row.push(p.error.clone().unwrap_or_default().replace(',', ";"));
        push_row(&mut out, row);
    }
    out
}

/// `class, m0…, x0…, mass, zeta0…` for every charged cell.
pub fn measure_csv(measure: &OccupationMeasure) -> String {
    let grid = measure.grid();
    let d = grid.dim();
    let mut out = String::new();
    let mut header = vec!["class".to_string()];
    header.extend(axis_names("m", d));
    header.extend(axis_names("x", d));
    header.push("mass".into());
    header.extend(axis_names("zeta", d));
    push_row(&mut out, header);
    for (cell, mass) in measure.iter() {
        let mut row = vec![cell.class.to_string()];
        row.extend(grid.index(cell.node).iter().map(|m| m.to_string()));
        row.extend(grid.x(cell.node).iter().map(|&x| fmt_f64(x)));
        row.push(fmt_f64(mass));
        row.extend(measure.control(cell).iter().map(|&z| fmt_f64(z)));
        push_row(&mut out, row);
    }
    out
}

/// `class, m0…, zeta0…` for every cell of the set.
pub fn aubry_csv(grid: &GridSpec, set: &AubrySet) -> String {
    let d = grid.dim();
    let mut out = String::new();
    let mut header = vec!["class".to_string()];
    header.extend(axis_names("m", d));
    header.extend(axis_names("zeta", d));
    push_row(&mut out, header);
    for (cell, z) in &set.cells {
        let mut row = vec![cell.class.to_string()];
        row.extend(grid.index(cell.node).iter().map(|m| m.to_string()));
        row.extend(z.iter().map(|&x| fmt_f64(x)));
        push_row(&mut out, row);
    }
    out
}

/// `n, k, h, hbar, width, periods, error, solution_gap`.
pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut out = String::new();
    let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
    push_row(&mut out, ["n", "k", "h", "hbar", "width", "periods", "error", "solution_gap"].map(String::from));
    for r in &report.rows {
        push_row(
            &mut out,
            [
                r.n.to_string(),
                r.k.to_string(),
                fmt_f64(r.h),
                fmt_f64(r.hbar),
                fmt_f64(r.width),
                r.periods.to_string(),
                opt(r.error),
                opt(r.solution_gap),
            ],
        );
    }
    out
}

/// Generic table with a header row.
pub fn table_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", header.join(","));
    for r in rows {
        push_row(&mut out, r.iter().map(|&x| fmt_f64(x)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn float_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn field_round_trip() {
        let g = build_grid(2, 3, 4).unwrap();
        let v = ScalarField::random_lipschitz(&g, Parity::Odd, 0.7, 1);
        let text = levels_csv(&[(0, &v)]);
        assert_eq!(text.lines().count(), 1 + g.nodes(Parity::Odd).len());
        assert!(text.starts_with("level,m0,m1,x0,x1,value\n"));
        let back = parse_field_csv(&g, Parity::Odd, &text).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn field_parse_rejects_missing_node() {
        let g = build_grid(1, 2, 2).unwrap();
        let text = "level,m0,x0,value\n0,1,0.25,1.0\n";
        assert!(parse_field_csv(&g, Parity::Odd, text).is_err());
        let wrong = "level,m0,x0,value\n0,0,0,1.0\n0,2,0.5,1.0\n";
        assert!(parse_field_csv(&g, Parity::Odd, wrong).is_err());
    }
}

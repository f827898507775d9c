use std::path::Path;

use gridkam::grid::discrete_dx;
use gridkam::hj::{semiconcavity_monitor, solve_ivp, IvpOptions};
use gridkam::io::{aubry_csv, convergence_csv, fmt_f64, levels_csv, measure_csv, parse_field_csv, surface_csv};
use gridkam::mather::{aubry_set, check_containment, mather_measure, rotation_vector, MatherOptions, MeasureMode};
use gridkam::models::BoundOptions;
use gridkam::weakkam::{
    effective_surface, estimate_effective_hamiltonian, find_periodic_solution, scaling_study, FixedPointOptions,
    HbarOptions, ScalingOptions, SurfaceOptions,
};
use gridkam::{compute_bounds, Direction, ParamBox, Parity, PeriodicSolution, ScalarField};
use serde::Serialize;
use serde_json::json;

use crate::config::V0Spec;
use crate::output::Artifacts;
use crate::{CliError, Command, Context, Summary};

fn initial_data(ctx: &Context) -> Result<Option<ScalarField>, CliError> {
    let grid = &ctx.grid;
    match &ctx.config.v0 {
        V0Spec::Zero => Ok(None),
        V0Spec::Random { slope, seed } => {
            let seed = seed.or(ctx.seed).ok_or_else(|| {
                CliError::config("v0.seed", "random initial data needs a seed (set v0.seed, seed, or pass --seed)")
            })?;
            Ok(Some(ScalarField::random_lipschitz(grid, Parity::Odd, *slope, seed)))
        }
        V0Spec::File { path } => {
            let full = ctx.config_dir.join(path);
            let text = std::fs::read_to_string(&full)
                .map_err(|e| CliError::config("v0.path", format!("cannot read {}: {e}", full.display())))?;
            parse_field_csv(grid, Parity::Odd, &text)
                .map(Some)
                .map_err(|e| CliError::config("v0.path", e.to_string()))
        }
    }
}

fn fixed_point_options(ctx: &Context) -> FixedPointOptions {
    let t = &ctx.config.tolerances;
    FixedPointOptions { tol: t.fixed_point, max_iters: t.max_iters, averaging: t.averaging, ..Default::default() }
}

fn hbar_options(ctx: &Context) -> HbarOptions {
    let t = &ctx.config.tolerances;
    HbarOptions { tol: t.fixed_point, max_periods: t.max_periods, direction: Direction::Backward }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(",")
}

fn c_columns(d: usize) -> String {
    (0..d).map(|j| format!("c{j}")).collect::<Vec<_>>().join(",")
}

fn csv_text(message: &str) -> String {
    message.replace([',', '\n'], ";")
}

fn finish(art: Artifacts, lines: Vec<String>) -> Summary {
    Summary { lines, files: art.written().to_vec() }
}

pub fn solve(ctx: &Context, out: &Path) -> Result<Summary, CliError> {
    let cfg = &ctx.config;
    let grid = &ctx.grid;
    let c = cfg.c();
    let v0 = initial_data(ctx)?.unwrap_or_else(|| ScalarField::zeros(grid, Parity::Odd));
    let steps = cfg.steps.unwrap_or(grid.period());
    let p = match (&cfg.bounds.p_lo, &cfg.bounds.p_hi) {
        (Some(lo), Some(hi)) => ParamBox::new(lo.clone(), hi.clone()).map_err(|e| CliError::config("bounds", e.to_string()))?,
        (None, None) => ParamBox::point(&c),
        (Some(_), None) => return Err(CliError::config("bounds.p_hi", "missing required field (bounds.p_lo is set)")),
        (None, Some(_)) => return Err(CliError::config("bounds.p_lo", "missing required field (bounds.p_hi is set)")),
    };
    if !p.contains(&c) {
        return Err(CliError::config("c", "c lies outside the parameter box"));
    }
    let opts = BoundOptions { lambda1: cfg.bounds.lambda1, ..Default::default() };
    let r = cfg.bounds.r.unwrap_or_else(|| discrete_dx(&v0).max_abs().max(0.1));
    let bounds = compute_bounds(&ctx.model, r, &p, opts).map_err(|e| match e {
        gridkam::Error::InvalidArgument(m) => CliError::config("bounds", m),
        other => CliError::Core(other),
    })?;
    let ivp = solve_ivp(&v0, steps, &c, &ctx.model, &bounds, IvpOptions { force: ctx.force })?;
    let semi = semiconcavity_monitor(&ivp, &bounds);

    let mut art = Artifacts::new(out, ctx.metadata(Command::Solve, json!({ "c": c, "steps": steps, "forced": ctx.force })))?;
    let all: Vec<(i64, &ScalarField)> = ivp.levels.iter().enumerate().map(|(k, v)| (k as i64, v)).collect();
    art.csv("levels.csv", &levels_csv(&all))?;
    art.csv("final.csv", &levels_csv(&[(steps as i64, ivp.last())]))?;
    let mut monitor = String::from("level,max_slope,semiconcavity,cfl_margin,semiconcavity_bound,semiconcavity_ok\n");
    for (m, s) in ivp.monitors.iter().zip(&semi.levels) {
        monitor.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.level,
            fmt_f64(m.max_slope),
            fmt_f64(m.semiconcavity),
            if m.cfl_margin.is_finite() { fmt_f64(m.cfl_margin) } else { String::new() },
            fmt_f64(s.bound),
            s.ok
        ));
    }
    art.csv("monitor.csv", &monitor)?;
    let residual = ivp.scheme_residual();
    art.json(
        "report.json",
        &json!({
            "bounds": bounds,
            "step_sizes": ivp.step_sizes,
            "rebound": ivp.rebound,
            "semiconcavity": semi,
            "scheme_residual": residual,
        }),
    )?;
    let lines = vec![
        format!("solved {steps} levels on N={} K={} (lambda={})", grid.n(), grid.k(), grid.lambda()),
        format!("step sizes admissible: {}", ivp.step_sizes.pass),
        format!("semiconcavity within M(t): {}", semi.all_ok),
        format!("scheme residual: {residual:e}"),
    ];
    Ok(finish(art, lines))
}

pub fn effective(ctx: &Context, out: &Path) -> Result<Summary, CliError> {
    let cfg = &ctx.config;
    let c_grid = ctx.config.effective_c_grid();
    let opts = SurfaceOptions { hbar: hbar_options(ctx), forward: cfg.effective.forward, convexity_tol: cfg.effective.convexity_tol };
    let surface = effective_surface(&ctx.grid, &ctx.model, &c_grid, &opts).map_err(|e| match e {
        gridkam::Error::InvalidArgument(m) => CliError::config("effective", m),
        other => CliError::Core(other),
    })?;
    let holes = surface.holes();
    let mut art = Artifacts::new(out, ctx.metadata(Command::Effective, json!({ "c_grid": c_grid })))?;
    art.csv("surface.csv", &surface_csv(&surface))?;
    art.json(
        "convexity.json",
        &json!({
            "convexity": surface.convexity,
            "holes": holes,
            "points": surface.points.len(),
            "max_width": surface.max_width(),
        }),
    )?;
    let lines = vec![
        format!("effective Hamiltonian at {} points, {holes} holes", surface.points.len()),
        format!(
            "convexity: {} ({} triples, worst margin {:e})",
            if surface.convexity.pass { "pass" } else { "FAIL" },
            surface.convexity.triples,
            surface.convexity.worst_margin
        ),
    ];
    if ctx.strict && (holes > 0 || !surface.convexity.pass) {
        return Err(CliError::Strict(format!("{holes} failed c values, convexity pass = {}", surface.convexity.pass)));
    }
    Ok(finish(art, lines))
}

fn verify_points(ctx: &Context) -> Result<Vec<Vec<f64>>, CliError> {
    if let Some(list) = &ctx.config.verify.c {
        return Ok(list.clone());
    }
    let axes = ctx.config.effective_c_grid().axes().map_err(|e| CliError::config("effective", e.to_string()))?;
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out.iter().flat_map(|p| axis.iter().map(move |&x| [p.clone(), vec![x]].concat())).collect();
    }
    Ok(out)
}

pub fn verify(ctx: &Context, out: &Path) -> Result<Summary, CliError> {
    let d = ctx.grid.dim();
    let tol = ctx.config.tolerances.identity;
    let v0 = initial_data(ctx)?;
    let opts = fixed_point_options(ctx);
    let points = verify_points(ctx)?;
    let mut table = format!(
        "{},hbar,lower,upper,residual,iterations,identity_residual,cell_residual,pass,error\n",
        c_columns(d)
    );
    let mut worst: f64 = 0.0;
    let mut failures = 0usize;
    for c in &points {
        match find_periodic_solution(&ctx.grid, &ctx.model, c, v0.as_ref(), &opts) {
            Ok(sol) => {
                let id = sol.identity_residual(&ctx.model);
                let cell = sol.cell_residual(&ctx.model);
                worst = worst.max(id);
                let pass = id <= tol;
                failures += usize::from(!pass);
                table.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},\n",
                    join(c),
                    fmt_f64(sol.hbar),
                    fmt_f64(sol.lower),
                    fmt_f64(sol.upper),
                    fmt_f64(sol.residual),
                    sol.iterations,
                    fmt_f64(id),
                    fmt_f64(cell),
                    pass
                ));
            }
            Err(e) => {
                failures += 1;
                table.push_str(&format!("{},,,,,,,,false,{}\n", join(c), csv_text(&e.to_string())));
            }
        }
    }
    let mut art = Artifacts::new(out, ctx.metadata(Command::Verify, json!({ "points": points.len() })))?;
    art.csv("verify.csv", &table)?;
    let lines = vec![
        format!("verified {} c values, {failures} failures", points.len()),
        format!("max identity residual: {worst:e}"),
    ];
    if ctx.strict && failures > 0 {
        return Err(CliError::Strict(format!("{failures} of {} c values failed (max identity residual {worst:e})", points.len())));
    }
    Ok(finish(art, lines))
}

#[derive(Serialize)]
struct MatherEntry {
    c: Vec<f64>,
    status: String,
    hbar: Option<f64>,
    action: Option<f64>,
    defect: Option<f64>,
    bound: Option<f64>,
    /// The defect target was not reached before the horizon cap.
    partial: bool,
    horizons: Vec<gridkam::mather::HorizonRecord>,
    support_cells: usize,
    support_fraction: Option<f64>,
    tv_to_uniform: Option<f64>,
    rotation: Option<Vec<f64>>,
    gradient: Option<Vec<f64>>,
    rotation_gap: Option<f64>,
    containment: Option<gridkam::mather::ContainmentReport>,
    measure_file: Option<String>,
    aubry_file: Option<String>,
}

impl MatherEntry {
    fn failed(c: &[f64], e: &gridkam::Error) -> MatherEntry {
        MatherEntry {
            c: c.to_vec(),
            status: e.to_string(),
            hbar: None,
            action: None,
            defect: None,
            bound: None,
            partial: true,
            horizons: Vec::new(),
            support_cells: 0,
            support_fraction: None,
            tv_to_uniform: None,
            rotation: None,
            gradient: None,
            rotation_gap: None,
            containment: None,
            measure_file: None,
            aubry_file: None,
        }
    }
}

/// Central difference of `H̄` around `c`; `None` if any estimate fails.
fn hbar_gradient(ctx: &Context, c: &[f64], step: f64) -> Option<Vec<f64>> {
    let opts = hbar_options(ctx);
    (0..c.len())
        .map(|j| {
            let mut up = c.to_vec();
            let mut down = c.to_vec();
            up[j] += step;
            down[j] -= step;
            let a = estimate_effective_hamiltonian(&ctx.grid, &ctx.model, &up, None, &opts).ok()?;
            let b = estimate_effective_hamiltonian(&ctx.grid, &ctx.model, &down, None, &opts).ok()?;
            Some((a.hbar - b.hbar) / (2.0 * step))
        })
        .collect()
}

fn mather_one(
    ctx: &Context,
    sol: &PeriodicSolution,
    index: usize,
    art: &mut Artifacts,
) -> Result<MatherEntry, gridkam::Error> {
    let m = &ctx.config.mather;
    let tols = &ctx.config.tolerances;
    let opts = MatherOptions {
        tol: tols.measure_defect,
        initial_horizon: m.initial_horizon,
        min_horizon: m.min_horizon,
        max_horizon: m.max_horizon,
        starts: m.starts.clone(),
        mode: m.mode,
    };
    let approx = mather_measure(&ctx.model, sol, &opts)?;
    let aubry = aubry_set(&ctx.model, std::slice::from_ref(sol), m.mode, tols.aubry)?;
    let containment = check_containment(&approx, &aubry, tols.aubry)?;
    let (rotation, gradient, gap) = if m.mode == MeasureMode::Spacetime {
        let start = m.starts.as_ref().and_then(|s| s.first().cloned()).unwrap_or_else(|| ctx.grid.index(ctx.grid.anchor(Parity::Odd)));
        let rot = rotation_vector(&ctx.model, sol, &start, m.rotation_periods.max(1) * ctx.grid.period())?;
        let grad = hbar_gradient(ctx, &sol.c, m.fd_step);
        let gap = grad.as_ref().map(|g| g.iter().zip(&rot).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        (Some(rot), grad, gap)
    } else {
        (None, None, None)
    };
    let measure_file = format!("measure_{index}.csv");
    let aubry_file = format!("aubry_{index}.csv");
    art.csv(&measure_file, &measure_csv(&approx.measure)).map_err(|e| gridkam::Error::InvalidArgument(e.to_string()))?;
    art.csv(&aubry_file, &aubry_csv(&ctx.grid, &aubry)).map_err(|e| gridkam::Error::InvalidArgument(e.to_string()))?;
    Ok(MatherEntry {
        c: sol.c.clone(),
        status: "ok".into(),
        hbar: Some(sol.hbar),
        action: Some(approx.action),
        defect: Some(approx.defect),
        bound: Some(approx.bound),
        partial: !approx.converged,
        horizons: approx.horizons.clone(),
        support_cells: approx.support.len(),
        support_fraction: Some(approx.support_fraction),
        tv_to_uniform: Some(approx.measure.tv_to_uniform()),
        rotation,
        gradient,
        rotation_gap: gap,
        containment: Some(containment),
        measure_file: Some(measure_file),
        aubry_file: Some(aubry_file),
    })
}

pub fn mather(ctx: &Context, out: &Path) -> Result<Summary, CliError> {
    let cfg = &ctx.config;
    let v0 = initial_data(ctx)?;
    let points = cfg.mather.c.clone().unwrap_or_else(|| vec![cfg.c()]);
    let mut art = Artifacts::new(out, ctx.metadata(Command::Mather, json!({ "mather": cfg.mather })))?;
    let mut fp = fixed_point_options(ctx);
    if cfg.mather.mode == MeasureMode::Autonomous {
        fp.stationarity_tol = fp.stationarity_tol.max(1e-8);
    }
    let mut entries = Vec::with_capacity(points.len());
    for (i, c) in points.iter().enumerate() {
        let entry = find_periodic_solution(&ctx.grid, &ctx.model, c, v0.as_ref(), &fp)
            .and_then(|sol| mather_one(ctx, &sol, i, &mut art))
            .unwrap_or_else(|e| MatherEntry::failed(c, &e));
        entries.push(entry);
    }
    let partial = entries.iter().filter(|e| e.partial).count();
    art.json("mather.json", &json!({ "entries": entries, "partial": partial }))?;
    let mut lines = vec![format!("Mather measures for {} c values, {partial} partial", entries.len())];
    for e in &entries {
        match e.defect {
            Some(defect) => lines.push(format!(
                "c = {:?}: defect {defect:e}, support {} cells, rotation {:?}",
                e.c, e.support_cells, e.rotation
            )),
            None => lines.push(format!("c = {:?}: {}", e.c, e.status)),
        }
    }
    if ctx.strict && partial > 0 {
        return Err(CliError::Strict(format!("{partial} partial Mather approximations")));
    }
    Ok(finish(art, lines))
}

pub fn convergence(ctx: &Context, out: &Path) -> Result<Summary, CliError> {
    let cfg = &ctx.config;
    let grids = cfg.convergence_grids()?;
    let c = cfg.convergence.c.clone().unwrap_or_else(|| cfg.c());
    let opts = ScalingOptions { fixed_point: FixedPointOptions { allow_unconverged: true, ..fixed_point_options(ctx) } };
    let report = scaling_study(&ctx.model, &c, &grids, &opts)?;
    let mut art = Artifacts::new(out, ctx.metadata(Command::Convergence, json!({ "c": c })))?;
    art.csv("convergence.csv", &convergence_csv(&report))?;
    art.json("scaling.json", &report)?;
    let lines = vec![
        format!("{} grids, errors monotone: {}", report.rows.len(), report.monotone),
        format!("fitted log-log slope: {}", report.slope.map_or("n/a".to_string(), |s| format!("{s:.4}"))),
    ];
    if ctx.strict && !report.monotone {
        return Err(CliError::Strict("errors are not monotone in h".into()));
    }
    Ok(finish(art, lines))
}

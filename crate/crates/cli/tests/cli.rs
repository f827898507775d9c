use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use gridkam_cli::{execute, run, Cli, EXIT_CFL, EXIT_CONFIG, EXIT_INADMISSIBLE, EXIT_OK, EXIT_STRICT};

use clap::Parser;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gridkam-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn args(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut v = vec![
        "gridkam".to_string(),
        cmd.to_string(),
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn csv_column(text: &str, name: &str) -> Vec<String> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().to_string()).collect()
}

const FREE: &str = "model = \"free\"\nc = [0.5]\n[grid]\nd = 1\nn = 4\nk = 16\n";

#[test]
fn free_solve_over_one_period_shifts_by_minus_half_c_squared() {
    let dir = scratch("free-solve");
    let cfg = write_config(&dir, &format!("steps = 32\n{FREE}"));
    let out = dir.join("out");
    assert_eq!(run(args("solve", &cfg, &out, &[])), EXIT_OK);
    let text = fs::read_to_string(out.join("final.csv")).unwrap();
    let values = csv_column(&text, "value");
    assert_eq!(values.len(), 4);
    for v in values {
        assert!((v.parse::<f64>().unwrap() + 0.125).abs() < 1e-15, "{v}");
    }
    for side in ["levels", "final", "monitor", "report"] {
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(format!("{side}.meta.json"))).unwrap()).unwrap();
        assert_eq!(meta["config_sha256"].as_str().unwrap().len(), 64);
        assert_eq!(meta["grid"]["n"], 4);
        assert_eq!(meta["model"]["name"], "free");
        assert_eq!(meta["tolerances"]["identity"], 1e-8);
    }
}

#[test]
fn missing_grid_size_is_a_config_error() {
    let dir = scratch("missing-n");
    let cfg = write_config(&dir, "model = \"free\"\n[grid]\nd = 1\nk = 4\n");
    assert_eq!(run(args("solve", &cfg, &dir.join("out"), &[])), EXIT_CONFIG);
    let bin = Process::new(env!("CARGO_BIN_EXE_gridkam"))
        .args(["solve", "--config", cfg.to_str().unwrap(), "--out", dir.join("out").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(bin.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&bin.stderr).contains("grid.n"));
}

#[test]
fn random_initial_data_needs_a_seed() {
    let dir = scratch("seedless");
    let cfg = write_config(&dir, &format!("{FREE}[v0]\nkind = \"random\"\nslope = 0.05\n"));
    let out = dir.join("out");
    assert_eq!(run(args("solve", &cfg, &out, &[])), EXIT_CONFIG);
    assert_eq!(run(args("solve", &cfg, &out, &["--seed", "9"])), EXIT_OK);
}

#[test]
fn initial_data_from_file() {
    let dir = scratch("v0-file");
    fs::write(dir.join("v0.csv"), "level,m0,x0,value\n0,1,0.125,0.5\n0,3,0.375,0.5\n0,5,0.625,0.5\n0,7,0.875,0.5\n").unwrap();
    let cfg = write_config(&dir, &format!("steps = 32\n{FREE}[v0]\nkind = \"file\"\npath = \"v0.csv\"\n"));
    let out = dir.join("out");
    assert_eq!(run(args("solve", &cfg, &out, &[])), EXIT_OK);
    let values = csv_column(&fs::read_to_string(out.join("final.csv")).unwrap(), "value");
    assert!(values.iter().all(|v| (v.parse::<f64>().unwrap() - 0.375).abs() < 1e-15));
}

#[test]
fn inadmissible_steps_and_cfl_have_their_own_codes() {
    let dir = scratch("codes");
    let cfg = write_config(&dir, "model = \"free\"\nc = [6.0]\n[grid]\nd = 1\nn = 4\nk = 16\n[bounds]\nr = 1.0\n");
    let out = dir.join("out");
    assert_eq!(run(args("solve", &cfg, &out, &[])), EXIT_INADMISSIBLE);
    assert_eq!(run(args("solve", &cfg, &out, &["--force"])), EXIT_CFL);
}

#[test]
fn free_surface_is_a_parabola() {
    let dir = scratch("free-effective");
    let cfg = write_config(&dir, &format!("{FREE}[effective]\nc_lo = [-1.0]\nc_hi = [1.0]\npoints = 9\n"));
    let out = dir.join("out");
    assert_eq!(run(args("effective", &cfg, &out, &["--strict"])), EXIT_OK);
    let text = fs::read_to_string(out.join("surface.csv")).unwrap();
    for (c, h) in csv_column(&text, "c0").iter().zip(csv_column(&text, "hbar")) {
        let c: f64 = c.parse().unwrap();
        assert!((h.parse::<f64>().unwrap() - c * c / 2.0).abs() < 1e-14);
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("convexity.json")).unwrap()).unwrap();
    assert_eq!(report["convexity"]["pass"], true);
    assert_eq!(report["holes"], 0);
}

#[test]
fn strict_turns_a_failed_c_into_a_nonzero_exit() {
    let dir = scratch("strict");
    // c = 6 breaks the CFL cap 1/(dλ) = 4 on this grid
    let cfg = write_config(&dir, &format!("{FREE}[effective]\nc_lo = [-6.0]\nc_hi = [6.0]\npoints = 5\n"));
    let out = dir.join("out");
    assert_eq!(run(args("effective", &cfg, &out, &[])), EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("convexity.json")).unwrap()).unwrap();
    assert_eq!(report["holes"], 2);
    assert_eq!(run(args("effective", &cfg, &out, &["--strict"])), EXIT_STRICT);
}

#[test]
fn verify_reports_small_identity_residual() {
    let dir = scratch("verify");
    let cfg = write_config(
        &dir,
        "model = \"mechanical-1d\"\n[grid]\nd = 1\nn = 4\nk = 16\n[verify]\nc = [[0.0], [0.7], [1.9]]\n",
    );
    let cli = Cli::parse_from(args("verify", &cfg, &dir.join("out"), &["--strict"]));
    let summary = execute(&cli).unwrap();
    let line = summary.lines.iter().find(|l| l.starts_with("max identity residual")).unwrap();
    let value: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value <= 1e-8, "{line}");
}

#[test]
fn free_mather_run_is_uniform() {
    let dir = scratch("free-mather");
    let cfg = write_config(&dir, &format!("{FREE}[mather]\nmin_horizon = 16384\n"));
    let out = dir.join("out");
    assert_eq!(run(args("mather", &cfg, &out, &["--strict"])), EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("mather.json")).unwrap()).unwrap();
    let e = &report["entries"][0];
    assert!(e["defect"].as_f64().unwrap().abs() <= 1e-10);
    assert!(e["tv_to_uniform"].as_f64().unwrap() < 1e-2);
    assert!((e["rotation"][0].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(e["partial"], false);
    assert!(out.join("measure_0.csv").exists() && out.join("aubry_0.meta.json").exists());
}

#[test]
fn convergence_table_and_empty_grid_list() {
    let dir = scratch("convergence");
    let cfg = write_config(
        &dir,
        "model = \"mechanical-1d\"\n[grid]\nd = 1\nn = 4\nk = 16\n[convergence]\nn = [4, 8, 16]\nlambda = 0.25\n",
    );
    let out = dir.join("out");
    assert_eq!(run(args("convergence", &cfg, &out, &["--strict"])), EXIT_OK);
    let text = fs::read_to_string(out.join("convergence.csv")).unwrap();
    let errors: Vec<f64> = csv_column(&text, "error").iter().map(|e| e.parse().unwrap()).collect();
    assert_eq!(errors.len(), 3);
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");

    let empty = write_config(&dir, "model = \"free\"\n[grid]\nd = 1\nn = 4\nk = 16\n[convergence]\ngrids = []\n");
    assert_eq!(run(args("convergence", &empty, &out, &[])), EXIT_CONFIG);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn every_command_is_byte_for_byte_repeatable() {
    let dir = scratch("determinism");
    let cfg = write_config(
        &dir,
        "model = \"mechanical-1d\"\nc = [0.0]\nsteps = 30\n[grid]\nd = 1\nn = 4\nk = 16\n\
         [v0]\nkind = \"random\"\nslope = 0.05\n[effective]\npoints = 5\n[convergence]\ngrids = [[4, 16], [8, 32]]\n",
    );
    for cmd in ["solve", "effective", "verify", "mather", "convergence"] {
        let a = dir.join(format!("{cmd}-a"));
        let b = dir.join(format!("{cmd}-b"));
        assert_eq!(run(args(cmd, &cfg, &a, &["--seed", "11"])), EXIT_OK, "{cmd}");
        assert_eq!(run(args(cmd, &cfg, &b, &["--seed", "11", "--threads", "4"])), EXIT_OK, "{cmd}");
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        assert!(!sa.is_empty());
        assert_eq!(sa, sb, "{cmd} outputs differ");
    }
}

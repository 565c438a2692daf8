use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use charstrip::config::{ConfigError, Overrides, RunConfig};
use charstrip::io::read_checkpoint;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn charstrip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_charstrip")).args(args).env_remove("CHARSTRIP_THREADS").output().expect("binary runs")
}

fn run_config(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"];
    args.extend_from_slice(extra);
    charstrip(&args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Parses a field CSV into its header and rows.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn missing_grid_block_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("linear.toml")).unwrap();
    let start = text.find("[grid]").unwrap();
    let end = start + text[start..].find("\n\n").unwrap();
    let path = dir.path().join("nogrid.toml");
    std::fs::write(&path, format!("{}{}", &text[..start], &text[end..])).unwrap();

    let cfg = RunConfig::load(&path, &Overrides::default()).unwrap();
    match cfg.grid() {
        Err(ConfigError::MissingBlock { block, .. }) => assert_eq!(block, "grid"),
        other => panic!("expected a missing-block error, got {other:?}"),
    }

    let o = run_config("solve-linear", &path, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("missing [grid] block"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn saint_venant_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let o = charstrip(&[
        "solve-quasilinear",
        "--config",
        configs().join("saint_venant.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let progress = stderr(&o);
    assert!(progress.lines().any(|l| l.starts_with("k =   1") && l.contains("C1 inc")), "{progress}");

    let rep = json(&dir.path().join("report.json"));
    assert_eq!(rep["schema_version"], 1);
    assert_eq!(rep["converged"], true);
    assert!(rep["pde_residual"].as_f64().unwrap() < 1e-2);
    assert!(rep["boundary_residual"].as_f64().unwrap() < 1e-7);
    assert!(rep["v_sup"].as_f64().unwrap() > 0.0);
    assert_eq!(rep["probes"].as_array().unwrap().len(), 2);

    let (header, rows) = read_csv(&dir.path().join("solution.csv"));
    assert_eq!(header, ["x", "t", "v_1", "v_2", "u_1", "u_2"]);
    assert_eq!(rows.len(), 33 * 64);
    assert!(dir.path().join("norms.json").exists());
}

#[test]
fn json_output_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = configs().join("saint_venant.toml");
    for d in [&a, &b] {
        assert_eq!(run_config("solve-quasilinear", &config, d.path(), &[]).status.code(), Some(0));
    }
    for name in ["report.json", "norms.json", "solution.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }
}

#[test]
fn linear_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("solve-linear", &configs().join("linear.toml"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let rep = json(&dir.path().join("report.json"));
    assert_eq!(rep["route"], "Picard");
    assert_eq!(rep["derivative"]["regularity_uncertified"], false);

    let (header, u) = read_csv(&dir.path().join("solution.csv"));
    assert_eq!(header, ["x", "t", "u_1", "u_2"]);
    let chk = read_checkpoint(&dir.path().join("solution.chk")).unwrap();
    assert_eq!((chk.n, chk.grid.nx, chk.grid.nt), (2, 32, 128));
    for (r, row) in u.iter().enumerate() {
        let (k, i) = (r / 33, r % 33);
        assert_eq!(chk.get(0, i, k), row[2]);
        assert_eq!(chk.get(1, i, k), row[3]);
    }

    // w must agree with central differences of u in time.
    let (_, w) = read_csv(&dir.path().join("derivative.csv"));
    let dt = 2.0 * std::f64::consts::PI / 128.0;
    let mut worst = 0.0f64;
    for k in 0..128 {
        for i in 0..33 {
            let fd = (u[((k + 1) % 128) * 33 + i][2] - u[((k + 127) % 128) * 33 + i][2]) / (2.0 * dt);
            worst = worst.max((fd - w[k * 33 + i][2]).abs());
        }
    }
    assert!(worst < 2e-2, "w differs from central differences by {worst}");
}

#[test]
fn window_run_verifies_periodicity() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("solve-linear", &configs().join("window.toml"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = json(&dir.path().join("report.json"));
    assert!(rep["periodicity_defect"].as_f64().unwrap() < 1e-6);
}

#[test]
fn check_prints_table_and_dumps_characteristic() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("check", &configs().join("linear.toml"), dir.path(), &["--dump-characteristic", "2,0.5,1.0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("B1 yes"), "{table}");
    let rep = json(&dir.path().join("report.json"));
    assert_eq!(rep["conditions"]["bc_solvable"], true);
    let (header, rows) = {
        let text = std::fs::read_to_string(dir.path().join("characteristic.csv")).unwrap();
        let mut l = text.lines();
        (l.next().unwrap().to_string(), l.count())
    };
    assert_eq!(header, "xi,omega,c0,c1,c2,d,dt_omega");
    assert!(rows > 2);
}

#[test]
fn unsatisfied_conditions_map_to_their_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("window.toml"))
        .unwrap()
        .replace(r#"[["0.5"]]"#, r#"[["1.5"]]"#)
        .replace(r#"[["4"]]"#, r#"[["0"]]"#);
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let o = run_config("solve-linear", &path, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(charstrip(&["solve-linear"]).status.code(), Some(2));
    assert_eq!(charstrip(&["frobnicate"]).status.code(), Some(2));
    let o = run_config("check", &configs().join("linear.toml"), Path::new("/nonexistent"), &["--dump-characteristic", "0,2,1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_charstrip"))
        .args(["check", "--config", configs().join("linear.toml").to_str().unwrap()])
        .env("CHARSTRIP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn subcritical_counterexample_derivative_converges() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_config("counterexample", &configs().join("counterexample.toml"), dir.path(), &["--nx", "128", "--nt", "2048"]);
    assert_eq!(o.status.code(), Some(0), "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let rep = json(&dir.path().join("report.json"));
    let d = &rep["report"]["derivative"];
    assert_eq!(d["converged"], true);
    assert!(d["error"].is_null());
    let (w, fd) = (d["w2_t0"].as_f64().unwrap(), d["fd_t0"].as_f64().unwrap());
    assert!((w - fd).abs() < 0.1 * fd.abs(), "w2 {w} vs divided difference {fd}");
    let verdicts = rep["verdicts"].as_array().unwrap();
    let t0 = verdicts.iter().find(|v| v["key"] == "t0").unwrap();
    assert_eq!(t0["requested"], false);
    let (header, rows) = read_csv(&dir.path().join("trace.csv"));
    assert_eq!(header, ["t", "u2_at_0"]);
    assert_eq!(rows.len(), 2048);
}

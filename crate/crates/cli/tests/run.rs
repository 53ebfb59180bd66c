use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mfc(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mfc"))
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out/summary.json")).unwrap()).unwrap()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("{e}: {stderr}"))
}

fn out_files(dir: &Path) -> Vec<PathBuf> {
    match fs::read_dir(dir.join("out")) {
        Ok(rd) => rd.map(|e| e.unwrap().path()).collect(),
        Err(_) => Vec::new(),
    }
}

const ZERO: &str = r#"
[model]
name = "zero"
[model.params]
d = 2
x0 = [0.5, -1.0]
[grid]
steps = 8
[solver]
particles = 64
"#;

const LQ_SMALL: &str = r#"
[model]
name = "lq_scalar"
[grid]
steps = 20
[solver]
particles = 400
"#;

#[test]
fn zero_model_solve_has_zero_cost_and_residuals() {
    let tmp = TempDir::new().unwrap();
    let out = mfc(tmp.path(), ZERO, &["--quiet"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty());
    let s = summary(tmp.path());
    assert_eq!(s["status"], "ok");
    assert_eq!(s["experiment"], "solve");
    assert_eq!(s["results"]["cost"]["j"].as_f64(), Some(0.0));
    assert_eq!(s["results"]["residual_max"].as_f64(), Some(0.0));
    let moments = fs::read_to_string(tmp.path().join("out/moments.csv")).unwrap();
    let mut lines = moments.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("# mfc solve model=zero seed=1"));
    assert!(lines.next().unwrap().starts_with("# config={"));
    assert_eq!(
        lines.next().unwrap(),
        "step,time,mean_x0,var_x0,mean_y0,mean_x1,var_x1,mean_y1,mean_alpha0"
    );
    let first: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|c| c.parse().unwrap())
        .collect();
    assert_eq!(first, vec![0.0, 0.0, 0.5, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
    assert_eq!(lines.count(), 8);
}

#[test]
fn every_artifact_is_listed_and_summary_printed() {
    let tmp = TempDir::new().unwrap();
    let out = mfc(tmp.path(), ZERO, &[]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("J = 0.0"), "{stdout}");
    let mut names: Vec<String> = out_files(tmp.path())
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["levels.csv", "moments.csv", "summary.json", "summary.txt"]
    );
    let txt = fs::read_to_string(tmp.path().join("out/summary.txt")).unwrap();
    assert!(stdout.starts_with(&txt));
}

#[test]
fn repeated_runs_are_bytewise_identical() {
    let tmp = TempDir::new().unwrap();
    let read = |name: &str| fs::read(tmp.path().join("out").join(name)).unwrap();
    assert!(mfc(tmp.path(), LQ_SMALL, &["--quiet", "--seed", "9"])
        .status
        .success());
    let (a, b) = (read("levels.csv"), read("moments.csv"));
    let j_first = summary(tmp.path())["results"]["cost"]["j"]
        .as_f64()
        .unwrap();
    assert!(mfc(tmp.path(), LQ_SMALL, &["--quiet", "--seed", "9"])
        .status
        .success());
    assert_eq!(a, read("levels.csv"));
    assert_eq!(b, read("moments.csv"));
    assert!(mfc(tmp.path(), LQ_SMALL, &["--quiet", "--seed", "10"])
        .status
        .success());
    let j_other = summary(tmp.path())["results"]["cost"]["j"]
        .as_f64()
        .unwrap();
    assert_ne!(j_first, j_other);
}

#[test]
fn command_line_overrides_the_file() {
    let tmp = TempDir::new().unwrap();
    let config = format!("seed = 3\nexperiment = \"chaos\"\n{LQ_SMALL}");
    let out = mfc(
        tmp.path(),
        &config,
        &["--quiet", "--seed", "42", "--experiment", "solve"],
    );
    assert!(out.status.success());
    let s = summary(tmp.path());
    assert_eq!(s["seed"], 42);
    assert_eq!(s["experiment"], "solve");
    assert_eq!(s["config"]["seed"], 42);
    let csv = fs::read_to_string(tmp.path().join("out/levels.csv")).unwrap();
    assert!(csv.starts_with("# mfc solve model=lq_scalar seed=42\n"));
}

#[test]
fn oracle_reports_the_closed_form_values() {
    let tmp = TempDir::new().unwrap();
    let out = mfc(tmp.path(), LQ_SMALL, &["--quiet", "--experiment", "oracle"]);
    assert!(out.status.success());
    let r = &summary(tmp.path())["results"];
    assert!((r["j_oracle"].as_f64().unwrap() - 0.8380254416607095).abs() <= 1e-9);
    assert!((r["y0_oracle"].as_f64().unwrap() - 1.5303297566215333).abs() <= 1e-9);
    let j = r["j"].as_f64().unwrap();
    let se = r["j_se"].as_f64().unwrap();
    assert!(
        (j - 0.8380254416607095).abs() <= 4.0 * se + 0.05,
        "{j} {se}"
    );
    let csv = fs::read_to_string(tmp.path().join("out/oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3 + 21);
}

#[test]
fn gradcheck_matches_finite_differences() {
    let tmp = TempDir::new().unwrap();
    let config = format!("experiment = \"gradcheck\"\n{LQ_SMALL}\n[gradcheck]\ndirections = 3\n");
    let out = mfc(tmp.path(), &config, &["--quiet"]);
    assert!(out.status.success());
    let worst = summary(tmp.path())["results"]["worst_rel_error"]
        .as_f64()
        .unwrap();
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn decouple_and_chaos_write_their_tables() {
    let tmp = TempDir::new().unwrap();
    let config = format!("experiment = \"decouple\"\n{LQ_SMALL}");
    assert!(mfc(tmp.path(), &config, &["--quiet"]).status.success());
    let r = summary(tmp.path())["results"].clone();
    assert_eq!(r["degenerate_steps"], serde_json::json!([0]));
    assert!(tmp.path().join("out/field.csv").exists());
    let lip = fs::read_to_string(tmp.path().join("out/lipschitz.csv")).unwrap();
    assert!(lip.lines().nth(3).unwrap().starts_with("0,0.0,1,,,"));

    let config = format!(
        "experiment = \"chaos\"\n{LQ_SMALL}\n[chaos]\nns = [2, 8]\nreps = 2\nw2_ns = [4, 16]\nw2_reps = 4\n"
    );
    assert!(mfc(tmp.path(), &config, &["--quiet"]).status.success());
    let summary_csv = fs::read_to_string(tmp.path().join("out/chaos_summary.csv")).unwrap();
    assert_eq!(summary_csv.lines().count(), 3 + 4);
    let records = fs::read_to_string(tmp.path().join("out/chaos_records.csv")).unwrap();
    assert_eq!(records.lines().count(), 3 + 8);
    assert!(tmp.path().join("out/w2_rate.csv").exists());
}

fn assert_rejected(config: &str, args: &[&str], kind: &str, code: i32) -> Value {
    let tmp = TempDir::new().unwrap();
    let out = mfc(tmp.path(), config, args);
    assert_eq!(out.status.code(), Some(code));
    assert!(out.stdout.is_empty());
    assert!(out_files(tmp.path()).is_empty(), "outputs were written");
    let rec = error_record(&out);
    assert_eq!(rec["status"], "error");
    assert_eq!(rec["kind"], kind, "{rec}");
    rec
}

#[test]
fn invalid_configs_write_nothing() {
    assert_rejected(
        "[model]\nname = \"lq_scalar\"\n[grid]\nsteps = 0\n",
        &[],
        "config",
        2,
    );
    assert_rejected(
        "[model]\nname = \"lq_scalar\"\n[solver]\nparticles = 1\n",
        &[],
        "config",
        2,
    );
    assert_rejected(
        "[model]\nname = \"lq_scalar\"\n[solver]\nomega = 1.5\n",
        &[],
        "config",
        2,
    );
    assert_rejected(
        "[model]\nname = \"lq_scalar\"\n[solver]\nparticle = 10\n",
        &[],
        "config",
        2,
    );
    assert_rejected(
        "[model]\nname = \"lq_scalar\"\n[model.params]\nqq = 1.0\n",
        &[],
        "config",
        2,
    );
    assert_rejected(
        "[model]\nname = \"lq_scalar\"\n[chaos]\nns = [4, 4]\n",
        &[],
        "config",
        2,
    );
    assert_rejected(
        "[model]\nname = \"zero\"\n[model.params]\nd = 2\n",
        &[],
        "config",
        2,
    );
    assert_rejected(
        "experiment = \"oracle\"\n[model]\nname = \"zero\"\n",
        &[],
        "config",
        2,
    );
    assert_rejected("this is not toml", &[], "config", 2);
    assert_rejected(LQ_SMALL, &["--experiment", "sample"], "config", 2);
}

#[test]
fn unknown_model_is_named_in_the_error() {
    let rec = assert_rejected("[model]\nname = \"heston\"\n", &[], "unknown_model", 2);
    let msg = rec["message"].as_str().unwrap();
    assert!(msg.contains("heston") && msg.contains("lq_scalar"), "{msg}");
}

#[test]
fn missing_config_file_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mfc"))
        .arg("--config")
        .arg(tmp.path().join("absent.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["kind"], "io");
}

#[test]
fn stalled_continuation_reports_non_convergence() {
    let config =
        format!("{LQ_SMALL}\ndelta0 = 1.0\nmin_delta = 1.0\nmax_picard = 1\npicard_tol = 1e-12\n");
    let rec = assert_rejected(&config, &[], "non_convergence", 1);
    assert!(rec["details"]["residual_trace"]
        .as_array()
        .is_some_and(|t| !t.is_empty()));
    assert!(rec["details"]["gamma"].as_f64().is_some());
}

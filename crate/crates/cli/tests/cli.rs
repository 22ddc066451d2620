use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gauss-extremes")).args(args).output().expect("run CLI")
}

fn json(args: &[&str]) -> Value {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("JSON on stdout")
}

fn usage_error(args: &[&str], flag: &str) {
    let o = run(args);
    assert_eq!(o.status.code(), Some(2), "{args:?}");
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(flag), "{args:?}: stderr {err:?} does not name {flag}");
    assert!(o.stdout.is_empty());
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gauss-extremes-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn close(v: &Value, x: f64, tol: f64) -> bool {
    (v.as_f64().unwrap() - x).abs() <= tol
}

#[test]
fn qpp_example() {
    let v = json(&["qpp", "--sigma", "[[1,-0.5],[-0.5,1]]", "--b", "1,1"]);
    assert_eq!(v["schema"], "gauss-extremes/v1");
    assert_eq!(v["command"], "qpp");
    assert!(v["version"].as_str().unwrap().starts_with('v'));
    let w = v["result"]["w"].as_array().unwrap();
    assert!(close(&w[0], 2.0, 1e-12) && close(&w[1], 2.0, 1e-12));
    assert!(close(&v["result"]["value"], 4.0, 1e-12));
}

#[test]
fn genvar_is_reciprocal() {
    let v = json(&["genvar", "--sigma", "[[1,0.2],[0.2,1]]", "--b", "1,1"]);
    assert!(close(&v["result"]["generalized_variance"], 0.6, 1e-12));
}

#[test]
fn pickands_example() {
    let v = json(&["constant", "pickands", "--two-h", "1", "--S", "32", "--step", "0.01", "--paths", "200000", "--seed", "7"]);
    let r = &v["result"];
    assert!(close(&r["value"], 1.0, 0.05), "{r}");
    assert!(r["std_err"].as_f64().unwrap() > 0.0);
    assert_eq!(v["seed"], 7);
    assert_eq!(v["config"]["paths"], 200000);
}

#[test]
fn fbm_asymptotic_example() {
    let v = json(&["dc", "fbm", "--H", "0.5", "--T", "1", "--a", "1", "--b", "1", "--u", "3", "--asymptotic"]);
    let text = v.to_string();
    let find = |key: &str| -> f64 {
        fn walk(v: &Value, key: &str) -> Option<f64> {
            match v {
                Value::Object(m) => m.get(key).and_then(Value::as_f64).or_else(|| m.values().find_map(|x| walk(x, key))),
                Value::Array(a) => a.iter().find_map(|x| walk(x, key)),
                _ => None,
            }
        }
        walk(&v, key).unwrap_or_else(|| panic!("{key} missing from {text}"))
    };
    assert!((find("t_star") - 1.0 / 3.0).abs() < 1e-10);
    assert!((find("kappa1") - 9.0).abs() < 1e-8);
    assert!((find("kappa2") - 81.0).abs() < 0.081);
}

#[test]
fn out_of_domain_flags_exit_2() {
    usage_error(&["constant", "pickands", "--two-h", "2.5", "--seed", "1"], "--two-h");
    usage_error(&["constant", "pickands", "--two-h", "1", "--S", "-1", "--seed", "1"], "--S");
    usage_error(&["constant", "pickands", "--two-h", "1", "--paths", "0", "--seed", "1"], "--paths");
    usage_error(&["constant", "piterbarg", "--lambda", "0.3", "--seed", "1"], "--lambda");
    usage_error(&["dc", "fbm", "--H", "1.2", "--u", "3"], "--H");
    usage_error(&["dc", "stationary", "--alpha", "2.5", "--u", "3"], "--alpha");
    usage_error(&["dc", "stationary", "--alpha", "1.5", "--u", "-1"], "--u");
    usage_error(&["simulate", "fbm", "--H", "0.5", "--steps", "0", "--seed", "1"], "--steps");
    usage_error(&["qpp", "--sigma", "[[1,0],[0,1]]", "--b", "-1,-1"], "--b");
    usage_error(&["qpp", "--sigma", "[[1,2],[2,1]]", "--b", "1,1"], "--sigma");
    usage_error(&["qpp", "--sigma", "not json", "--b", "1,1"], "--sigma");
    usage_error(&["--threads", "0", "qpp", "--sigma", "[[1]]", "--b", "1"], "--threads");
}

#[test]
fn stochastic_commands_need_seed() {
    usage_error(&["constant", "pickands", "--two-h", "1"], "--seed");
    usage_error(&["simulate", "stationary", "--alpha", "1"], "--seed");
    usage_error(&["dc", "stationary", "--alpha", "1.5", "--u", "2", "--mc"], "--seed");
}

#[test]
fn unknown_subcommand_exit_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["constant", "pickands", "--nope", "1"]).status.code(), Some(2));
}

#[test]
fn numerical_failure_exit_3() {
    let o = run(&["constant", "g-integral", "--beta", "1,1", "--xi", "[[1,3],[3,1]]"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(o.stdout.is_empty());
}

#[test]
fn config_file_fills_flags_and_flags_win() {
    let cfg = scratch("pickands.json");
    std::fs::write(&cfg, r#"{"two-h": 1, "S": 4, "paths": 500, "seed": 3, "estimator": "truncated"}"#).unwrap();
    let cfg = cfg.to_str().unwrap();
    let from_file = json(&["--config", cfg, "constant", "pickands"]);
    assert_eq!(from_file["seed"], 3);
    assert_eq!(from_file["config"]["paths"], 500);
    assert_eq!(from_file["config"]["estimator"], "truncated");
    let explicit = json(&["constant", "pickands", "--two-h", "1", "--S", "4", "--paths", "500", "--seed", "3", "--estimator", "truncated"]);
    assert_eq!(from_file["result"], explicit["result"]);

    let overridden = json(&["--config", cfg, "constant", "pickands", "--seed", "4"]);
    assert_eq!(overridden["seed"], 4);
    assert_ne!(overridden["result"]["value"], from_file["result"]["value"]);
}

#[test]
fn simulate_csv_with_sidecar() {
    let out = scratch("paths.csv");
    let o = run(&["simulate", "fbm", "--H", "0.3", "--steps", "8", "--paths", "3", "--seed", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut rd = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    assert_eq!(rd.headers().unwrap().len(), 9);
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r[0].parse::<f64>().unwrap(), 0.0);
        assert!(r.iter().all(|x| x.parse::<f64>().unwrap().is_finite()));
    }
    let mut side = out.into_os_string();
    side.push(".meta.json");
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(side).unwrap()).unwrap();
    assert_eq!(meta["schema"], "gauss-extremes/v1");
    assert_eq!(meta["seed"], 2);
}

#[test]
fn compare_report_csv() {
    let o = run(&["dc", "stationary", "--alpha", "1.5", "--u", "0.5,1", "--compare", "--paths", "2000", "--step", "0.01", "--seed", "1", "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("u,p_hat,ci_low,ci_high,approx,ratio"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let args = ["dc", "fbm", "--H", "0.7", "--u", "0.5", "--compare", "--paths", "3000", "--step", "0.01", "--seed", "11",
        "--estimate-constants", "--const-S", "2", "--const-step", "0.05", "--const-paths", "500"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let mut with_threads = vec!["--threads", "3"];
    with_threads.extend(args);
    assert_eq!(run(&with_threads).stdout, a.stdout);
}

#[test]
fn verify_expansion_passes() {
    let v = json(&["verify", "expansion", "--model", "stationary", "--alpha", "1.5"]);
    assert_eq!(v["result"]["pass"], true, "{v}");
    let v = json(&["verify", "expansion", "--model", "fbm", "--H", "0.7"]);
    assert_eq!(v["result"]["pass"], true, "{v}");
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hetscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetscore"))
        .args(args)
        .env_remove("HETSCORE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hetscore(args);
    assert!(
        out.status.success(),
        "hetscore {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate(dir: &Path, seed: &str, gamma_mult: &str) {
    ok(&[
        "--seed",
        seed,
        "simulate",
        "--scenario",
        "1",
        "--family",
        "normal",
        "--n",
        "200",
        "--s",
        "0.6",
        "--gamma0",
        "0.3",
        "--gamma1-star",
        "0.5",
        "--gamma-mult",
        gamma_mult,
        "--out",
        dir.to_str().unwrap(),
    ]);
}

#[test]
fn simulate_is_deterministic_in_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    simulate(&a, "11", "1");
    simulate(&b, "11", "1");
    simulate(&c, "12", "1");
    let read = |d: &Path| fs::read_to_string(d.join("data.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert_eq!(read(&a).lines().count(), 201);

    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["predictive"], serde_json::json!(["x11"]));
    let schema = fs::read_to_string(a.join("schema.toml")).unwrap();
    assert!(schema.contains("x3"));
}

#[test]
fn analyze_writes_scores_importance_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate(&data, "5", "2");
    let out = tmp.path().join("out");
    let stdout = ok(&[
        "--seed",
        "3",
        "analyze",
        "--data",
        data.join("data.csv").to_str().unwrap(),
        "--schema",
        data.join("schema.toml").to_str().unwrap(),
        "--adjust",
        "lasso",
        "--tests",
        "residual,lrt",
        "--B",
        "199",
        "--expectation",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ])
    .stdout;
    let table = String::from_utf8(stdout).unwrap();
    assert!(table.contains("ResidualPermMax") && table.contains("LRTAsymptotic"), "{table}");

    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 201);

    let imp = fs::read_to_string(out.join("importance.csv")).unwrap();
    assert!(imp.starts_with("method,variable,rank,importance"));
    assert_eq!(imp.lines().count(), 1 + 2 * 30);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let tests = summary["tests"].as_array().unwrap();
    assert_eq!(tests.len(), 3);
    for t in tests {
        let p = t["p_value"].as_f64().unwrap();
        assert!(p > 0.0 && p <= 1.0);
        assert!(["weak", "moderate", "strong", "very strong"].contains(&t["evidence"].as_str().unwrap()));
    }
    assert_eq!(summary["n"], 200);

    // same seed, same permutation p-values
    let again = tmp.path().join("again");
    ok(&[
        "--seed",
        "3",
        "analyze",
        "--data",
        data.join("data.csv").to_str().unwrap(),
        "--schema",
        data.join("schema.toml").to_str().unwrap(),
        "--adjust",
        "lasso",
        "--tests",
        "residual,lrt",
        "--B",
        "199",
        "--expectation",
        "0.5",
        "--out",
        again.to_str().unwrap(),
    ]);
    let s2: serde_json::Value = serde_json::from_str(&fs::read_to_string(again.join("summary.json")).unwrap()).unwrap();
    for (x, y) in tests.iter().zip(s2["tests"].as_array().unwrap()) {
        assert_eq!(x["p_value"], y["p_value"]);
    }
}

#[test]
fn exit_codes_follow_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let out = tmp.path().join("out");
    let code = |args: &[&str]| hetscore(args).status.code().unwrap();

    // I/O
    assert_eq!(
        code(&["analyze", "--data", missing.to_str().unwrap(), "--schema", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]),
        2
    );
    // usage and configuration
    assert_eq!(code(&["analyze", "--bogus"]), 3);
    assert_eq!(code(&["simulate", "--scenario", "7", "--family", "normal", "--s", "1", "--out", out.to_str().unwrap()]), 3);
    assert_eq!(code(&["simulate", "--scenario", "1", "--family", "normal", "--out", out.to_str().unwrap()]), 3);

    // malformed data
    let data = tmp.path().join("data");
    simulate(&data, "1", "0");
    let csv = data.join("data.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
    fields[0] = "abc".into();
    lines[3] = fields.join(",");
    fs::write(&csv, lines.join("\n")).unwrap();
    let o = hetscore(&[
        "analyze",
        "--data",
        csv.to_str().unwrap(),
        "--schema",
        data.join("schema.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
}

const STUDY: &str = r#"
replicates = 3
master_seed = 9

[[scenarios]]
scenario_id = 1
family = "normal"
n = 120
gamma_mult = 0.0
s = 0.6
gamma0 = 0.3
gamma1_star = 0.5

[[scenarios]]
scenario_id = 1
family = "normal"
n = 120
gamma_mult = 2.0
s = 0.6
gamma0 = 0.3
gamma1_star = 0.5

[[methods]]
method = "ResidualPermMax"
adjust = "risk"
b = 99

[[methods]]
method = "Oracle"
"#;

#[test]
fn benchmark_resumes_and_report_summarizes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("study.toml");
    fs::write(&cfg, STUDY).unwrap();
    let results = tmp.path().join("results.csv");
    let args = ["--workers", "1", "benchmark", "--config", cfg.to_str().unwrap(), "--out", results.to_str().unwrap()];
    ok(&args);
    let first = fs::read_to_string(&results).unwrap();
    // 2 scenarios x 3 replicates x 2 methods
    assert_eq!(first.lines().count(), 1 + 12);

    // resuming a complete file adds nothing
    ok(&args);
    let second = fs::read_to_string(&results).unwrap();
    assert_eq!(second.lines().count(), first.lines().count());

    let rep = tmp.path().join("report");
    let stdout = String::from_utf8(ok(&["report", "--results", results.to_str().unwrap(), "--out", rep.to_str().unwrap()]).stdout).unwrap();
    assert!(stdout.contains("ResidualPermMax[risk]"), "{stdout}");
    let summary = fs::read_to_string(rep.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    assert!(rep.join("ecdf.csv").exists() && rep.join("top1.csv").exists());
}

#[test]
fn calibrate_small() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cal.toml");
    ok(&[
        "--seed",
        "4",
        "calibrate",
        "--scenario",
        "1",
        "--family",
        "normal",
        "--n",
        "100",
        "--n-mc",
        "100",
        "--n-subjects",
        "5000",
        "--gamma-mults",
        "0,1",
        "--verify",
        "100",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let v: toml::Value = toml::from_str(&text).unwrap();
    let cal = &v["calibration"];
    assert!(cal["s"].as_float().unwrap() > 0.0);
    assert!(cal["gamma1_star"].as_float().unwrap() > 0.0);
    assert_eq!(cal["gamma0"].as_array().unwrap().len(), 2);
    assert_eq!(v["verification"]["replicates"].as_integer(), Some(100));

    // the file drives `simulate`
    let sim = tmp.path().join("sim");
    ok(&[
        "simulate",
        "--scenario",
        "1",
        "--family",
        "normal",
        "--calibration",
        out.to_str().unwrap(),
        "--gamma-mult",
        "1",
        "--n",
        "50",
        "--out",
        sim.to_str().unwrap(),
    ]);
    assert_eq!(fs::read_to_string(sim.join("data.csv")).unwrap().lines().count(), 51);
    // a calibration for another family is refused
    let o = hetscore(&[
        "simulate",
        "--scenario",
        "1",
        "--family",
        "binomial",
        "--calibration",
        out.to_str().unwrap(),
        "--out",
        sim.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

use restart_core::anomaly::{read_signals, T2Profile};
use restart_core::policy::{CellClass, RestartMap};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_restartctl"))
}

fn scenario(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect()
}

fn restartctl(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn restartctl")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Loads a shipped scenario as JSON, applies `edit` and writes it to `dir`.
fn variant(dir: &TempDir, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(scenario(name)).unwrap()).unwrap();
    edit(&mut v);
    let out = dir.path().join(format!("variant-{name}"));
    fs::write(&out, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    out
}

#[test]
fn warehouse_attack_simulation_exits_zero() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("trace.csv");
    let o = restartctl(&["simulate", p(&scenario("warehouse.json")), "--out", p(&trace), "--deterministic"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("t,phase,x1,x2,u1,u2,V,event\n"));
    assert!(text.contains("restart-set") && text.contains("reboot-start"));
    assert!(!text.contains("safety-violation"));
}

#[test]
fn broken_controller_exits_two() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("trace.csv");
    let o = restartctl(&["simulate", p(&scenario("broken.json")), "--out", p(&trace)]);
    assert_eq!(code(&o), 2);
    assert!(fs::read_to_string(&trace).unwrap().contains("safety-violation"));
}

#[test]
fn configuration_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");

    let malformed = dir.path().join("bad.json");
    fs::write(&malformed, "{ \"name\": \"oops\", ").unwrap();
    assert_eq!(code(&restartctl(&["simulate", p(&malformed), "--out", p(&out)])), 1);

    let unknown = variant(&dir, "warehouse.json", |v| v["surprise"] = json!(1));
    assert_eq!(code(&restartctl(&["simulate", p(&unknown), "--out", p(&out)])), 1);

    let missing = dir.path().join("nope.json");
    assert_eq!(code(&restartctl(&["map", p(&missing), "--out", p(&out)])), 1);

    // --out is mandatory for every subcommand.
    let o = restartctl(&["simulate", p(&scenario("broken.json"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out"));

    assert_eq!(code(&restartctl(&["frobnicate"])), 1);
    assert_eq!(code(&restartctl(&["--help"])), 0);
}

#[test]
fn deterministic_maps_refuse_wall_clock_budgets() {
    let dir = TempDir::new().unwrap();
    let s = variant(&dir, "warehouse.json", |v| v["policy"]["budget"] = json!({ "wall_clock": 1.0 }));
    let o = restartctl(&["map", p(&s), "--out", p(&dir.path().join("m.csv")), "--deterministic"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn map_reruns_are_byte_identical_and_feed_avail() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let s = scenario("warehouse.json");
    assert_eq!(code(&restartctl(&["map", p(&s), "--out", p(&a), "--deterministic", "--seed", "3"])), 0);
    assert_eq!(code(&restartctl(&["map", p(&s), "--out", p(&b), "--deterministic", "--seed", "3", "--threads", "1"])), 0);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert!(String::from_utf8_lossy(&bytes).starts_with("x_index,y_index,x_value,y_value,class,delta_safe\n"));

    let m = RestartMap::read_csv(BufReader::new(fs::File::open(&a).unwrap())).unwrap();
    let best = m.max_safe().unwrap().class.delta_safe().unwrap();
    assert!((1000.0..20_000.0).contains(&best), "max window {best}");

    let report = dir.path().join("avail.json");
    let o = restartctl(&["avail", p(&s), "--map", p(&a), "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["weighted_availability"].as_f64().unwrap() >= 0.99);
    assert!(!r["regions"].as_array().unwrap().is_empty());
}

#[test]
fn grid_outside_the_safe_band_is_all_inadmissible() {
    let dir = TempDir::new().unwrap();
    let s = variant(&dir, "warehouse.json", |v| {
        v["grid"]["y"]["min"] = json!(31.0);
        v["grid"]["y"]["max"] = json!(40.0);
        v["grid"]["y"]["cells"] = json!(3);
    });
    let out = dir.path().join("red.csv");
    assert_eq!(code(&restartctl(&["map", p(&s), "--out", p(&out)])), 0);
    let m = RestartMap::read_csv(BufReader::new(fs::File::open(&out).unwrap())).unwrap();
    assert!(m.cells.iter().all(|c| c.class == CellClass::Inadmissible));
    // Nothing safe to average over.
    let o = restartctl(&["avail", p(&s), "--map", p(&out), "--out", p(&dir.path().join("a.json"))]);
    assert_eq!(code(&o), 1);
}

fn summary(dir: &Path) -> Vec<Value> {
    serde_json::from_str::<Value>(&fs::read_to_string(dir.join("summary.json")).unwrap())
        .unwrap()
        .as_array()
        .unwrap()
        .clone()
}

#[test]
fn risk_sweep_writes_one_table_per_period() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("risk");
    let o = restartctl(&["risk", p(&scenario("warehouse.json")), "--out", p(&out), "--sweep", "20,35.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["risk_dr20.csv", "risk_dr35.5.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(text.starts_with("t,F,P,F_hat,P_hat\n"), "{name}");
    }
    let s = summary(&out);
    assert_eq!(s.len(), 2);
    let first = &s[0];
    assert_eq!(first["delta_r"].as_f64(), Some(20.0));
    assert!(first["expected_with_restarts"].as_f64() > first["expected_without_restarts"].as_f64());
}

#[test]
fn risk_for_a_late_attack_and_a_two_lobe_mixture() {
    let dir = TempDir::new().unwrap();
    let late = variant(&dir, "warehouse.json", |v| {
        v["risk"]["pdf"] = json!({ "family": "uniform", "lower": 50.0, "upper": 70.0 });
        v["risk"]["delta_r"] = json!([20.0]);
    });
    let out = dir.path().join("late");
    assert_eq!(code(&restartctl(&["risk", p(&late), "--out", p(&out)])), 0);
    let text = fs::read_to_string(out.join("risk_dr20.csv")).unwrap();
    let mut rows = csv_rows(&text);
    assert!(rows.all(|r| r[4] == 0.0));
    assert!(summary(&out)[0]["expected_with_restarts"].is_null());

    let out = dir.path().join("mix");
    assert_eq!(code(&restartctl(&["risk", p(&scenario("helicopter.json")), "--out", p(&out)])), 0);
    let text = fs::read_to_string(out.join("risk_dr20.csv")).unwrap();
    assert!(csv_rows(&text).all(|r| r[4] <= 1.0 && r[2] <= 1.0));

    let invalid = variant(&dir, "warehouse.json", |v| {
        v["risk"]["pdf"] = json!({ "family": "normal", "mean": 30.0, "std": -1.0 })
    });
    assert_eq!(code(&restartctl(&["risk", p(&invalid), "--out", p(&dir.path().join("bad"))])), 1);
}

fn csv_rows(text: &str) -> impl Iterator<Item = Vec<f64>> + '_ {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
}

#[test]
fn anomaly_round_trip_matches_library() {
    let dir = TempDir::new().unwrap();
    let mut train = String::from("a,b,c\n");
    let mut observe = String::from("a,b,c\n");
    // Deterministic pseudo-random training data with some correlation.
    let mut s: u64 = 42;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..200 {
        let (x, y, z) = (next(), next(), next());
        train.push_str(&format!("{},{},{}\n", x, 0.5 * x + y, 2.0 * z - y));
    }
    for i in 0..30 {
        let shift = if i % 5 == 0 { 3.0 } else { 0.0 };
        let (x, y, z) = (next(), next(), next());
        observe.push_str(&format!("{},{},{}\n", x + shift, 0.5 * x + y, 2.0 * z - y));
    }
    let train_path = dir.path().join("train.csv");
    let obs_path = dir.path().join("obs.csv");
    fs::write(&train_path, &train).unwrap();
    fs::write(&obs_path, &observe).unwrap();

    let profile_path = dir.path().join("profile.json");
    let o = restartctl(&["anomaly", "build", "--train", p(&train_path), "--lambda", "2.5", "--out", p(&profile_path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let verdicts = dir.path().join("verdicts.csv");
    let o = restartctl(&["anomaly", "detect", "--profile", p(&profile_path), "--observe", p(&obs_path), "--out", p(&verdicts)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let lib = T2Profile::build(&read_signals(train.as_bytes()).unwrap(), 2.5).unwrap();
    let from_cli: T2Profile = serde_json::from_str(&fs::read_to_string(&profile_path).unwrap()).unwrap();
    assert_eq!(from_cli, lib);
    let text = fs::read_to_string(&verdicts).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t2,anomalous,clamped"));
    let obs = read_signals(observe.as_bytes()).unwrap();
    for (i, (line, o)) in lines.zip(&obs).enumerate() {
        let d = lib.detect(o).unwrap();
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0].parse::<f64>().unwrap(), d.t2);
        assert_eq!(f[1].parse::<bool>().unwrap(), d.anomalous);
        assert_eq!(f[2].parse::<bool>().unwrap(), d.clamped);
        // Shifted rows leave the training range and are clamped on the way in.
        assert_eq!(d.clamped, i % 5 == 0, "row {i}");
    }

    // The scenario file can supply λ instead of the flag.
    let via_scenario = dir.path().join("p2.json");
    let o = restartctl(&[
        "anomaly", "build", "--train", p(&train_path), "--scenario", p(&scenario("warehouse.json")), "--out", p(&via_scenario),
    ]);
    assert_eq!(code(&o), 0);
    let p2: T2Profile = serde_json::from_str(&fs::read_to_string(&via_scenario).unwrap()).unwrap();
    assert_eq!(p2.lambda_conf, 3.0);

    let constant = dir.path().join("const.csv");
    fs::write(&constant, "a,b\n1,2\n1,3\n1,4\n1,5\n").unwrap();
    let o = restartctl(&["anomaly", "build", "--train", p(&constant), "--out", p(&dir.path().join("c.json"))]);
    assert_eq!(code(&o), 1);
}

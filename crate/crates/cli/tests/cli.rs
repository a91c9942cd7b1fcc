use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pipesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipesim")).args(args).env_remove("PIPESIM_PROFILE").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn profile(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../profiles").join(name)
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("bad json ({e}): {}", stdout(o)))
}

#[test]
fn schedule_writes_json_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let o = pipesim(&["schedule", "--scheme", "chimera", "-D", "4", "-N", "4", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let j = std::fs::read_to_string(dir.path().join("chimera_D4_N4.json")).unwrap();
    let golden =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/chimera.json"))
            .unwrap();
    assert_eq!(j, golden);
    let svg = std::fs::read_to_string(dir.path().join("chimera_D4_N4.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("P3"));
}

#[test]
fn schedule_ascii_gpipe() {
    let dir = tempfile::tempdir().unwrap();
    let o = pipesim(&[
        "schedule",
        "--scheme",
        "gpipe",
        "-D",
        "4",
        "-N",
        "4",
        "--ascii",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.lines().next().unwrap().starts_with("P0: F0 F1 F2 F3"));
    assert_eq!(out.lines().count(), 4);
}

#[test]
fn odd_depth_exits_2() {
    let o = pipesim(&["schedule", "--scheme", "chimera", "-D", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("even number of stages"));
}

#[test]
fn bad_flag_exits_2() {
    assert_eq!(pipesim(&["schedule", "--scheme", "nope"]).status.code(), Some(2));
}

#[test]
fn compare_bubble_column() {
    let o = pipesim(&["compare", "--profile", profile("unit.json").to_str().unwrap(), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = json(&o);
    let ratio = |scheme: &str| {
        let r = rows.as_array().unwrap().iter().find(|r| r["scheme"] == scheme).unwrap();
        (r["bubble_ratio"][0].as_i64().unwrap(), r["bubble_ratio"][1].as_i64().unwrap())
    };
    assert_eq!(ratio("gpipe"), (3, 7));
    assert_eq!(ratio("dapple"), (3, 7));
    assert_eq!(ratio("chimera"), (1, 4));
    assert_eq!(ratio("pipedream").0, 0);
    assert_eq!(ratio("pipedream-2bw").0, 0);
    // unlimited capacity never needs recomputation
    assert!(rows.as_array().unwrap().iter().all(|r| r["recompute"] == false && r["fits"] == true));
    // throughput orders like 1 / T for equal sample counts
    let sync: Vec<_> = rows
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| ["gpipe", "dapple", "gems", "chimera"].contains(&r["scheme"].as_str().unwrap()))
        .map(|r| (r["T_predicted"].as_f64().unwrap(), r["throughput"].as_f64().unwrap()))
        .collect();
    for a in &sync {
        for b in &sync {
            if a.0 < b.0 {
                assert!(a.1 > b.1);
            }
        }
    }
}

#[test]
fn compare_needs_profile() {
    let o = pipesim(&["compare"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_profile_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.json");
    let text = std::fs::read_to_string(profile("unit.json")).unwrap().replace("\"beta\"", "\"gamma\"");
    std::fs::write(&p, text).unwrap();
    let o = pipesim(&["compare", "--profile", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("malformed profile"));

    let text = std::fs::read_to_string(profile("unit.json")).unwrap().replace("\"F_t\": 1.0", "\"F_t\": -1.0");
    std::fs::write(&p, text).unwrap();
    let o = pipesim(&["compare", "--profile", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("F_t"));
}

#[test]
fn profile_from_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_pipesim"))
        .args(["compare", "--json"])
        .env("PIPESIM_PROFILE", profile("unit.json"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn plan_is_deterministic_and_ranked() {
    let p = profile("bert48.json");
    let args = ["plan", "-P", "32", "--bhat", "512", "--profile", p.to_str().unwrap(), "--json"];
    let a = pipesim(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, pipesim(&args).stdout);
    let entries = json(&a);
    let t: Vec<f64> = entries.as_array().unwrap().iter().map(|e| e["T_predicted"].as_f64().unwrap()).collect();
    assert!(!t.is_empty());
    assert!(t.windows(2).all(|w| w[0] <= w[1]));
    for e in entries.as_array().unwrap() {
        let c = &e["config"];
        assert_eq!(c["W"].as_u64().unwrap() * c["D"].as_u64().unwrap(), 32);
    }
}

#[test]
fn plan_prime_chimera_is_infeasible() {
    let o = pipesim(&["plan", "-P", "7", "--bhat", "64", "--profile", profile("unit.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_policy_ordering() {
    let p = profile("bert48.json");
    let run = |policy: &str| {
        let o = pipesim(&[
            "simulate",
            "-D",
            "4",
            "-W",
            "2",
            "--policy",
            policy,
            "--profile",
            p.to_str().unwrap(),
            "--json",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        json(&o)["makespan"].as_f64().unwrap()
    };
    let (opt, eager, end) = (run("eager-sync-opt"), run("eager-sync"), run("end-of-iteration"));
    assert!(opt <= eager && eager <= end, "{opt} {eager} {end}");
}

#[test]
fn simulate_writes_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let o = pipesim(&["simulate", "--scheme", "dapple", "-D", "4", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("dapple_D4_N4_end-of-iteration.json").exists());
    assert!(dir.path().join("dapple_D4_N4_end-of-iteration.svg").exists());
}

#[test]
fn verify_chimera_passes() {
    let o = pipesim(&["verify", "--scheme", "chimera", "-D", "4", "-W", "2", "-N", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("PASS"));
}

#[test]
fn verify_pipedream_reports_drift() {
    let o = pipesim(&["verify", "--scheme", "pipedream", "-D", "4", "-W", "2", "--json"]);
    assert!(o.status.success());
    let r = json(&o);
    assert_eq!(r["pass"], false);
    assert!(r["max_rel_dev"].as_f64().unwrap() > 1e-6);
}

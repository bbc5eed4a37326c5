use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fogloop::placement::Role;
use fogloop::scenario::{apply_variant, Scenario};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fogloop"));
    c.env_remove("FOGLOOP_OUT");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn split_variant(dir: &Path) -> PathBuf {
    let s = Scenario::load(&scenario("smart_building_1office.json")).unwrap();
    let s = apply_variant(&s, &"apaas_split".parse().unwrap()).unwrap();
    let path = dir.join("split.json");
    fs::write(&path, s.to_pretty_json()).unwrap();
    path
}

#[test]
fn validate_accepts_bundled_scenarios() {
    for name in [
        "smart_building_1office.json",
        "smart_building_3office_centralized.json",
        "smart_building_3office_decentralized.json",
    ] {
        let o = bin().arg("validate").arg(scenario(name)).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        assert!(stdout(&o).trim_end().ends_with(": ok"));
    }
}

#[test]
fn validate_reports_execute_on_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let path = split_variant(dir.path());
    let mut s = Scenario::load(&path).unwrap();
    s.loops[0].components.insert(Role::Execute, "cloud".into());
    fs::write(&path, s.to_pretty_json()).unwrap();
    let o = bin().arg("validate").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("execute must remain at fog"), "{}", stderr(&o));
}

#[test]
fn missing_or_malformed_input_exits_2() {
    let o = bin().args(["validate", "/nonexistent/scenario.json"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let o = bin().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .arg("run")
        .arg("--scenario")
        .arg(scenario("smart_building_1office.json"))
        .args(["--until-ms", "0"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

fn run(scenario: &Path, out: &Path, seed: u64, until: u64) -> Output {
    let o = bin()
        .arg("run")
        .arg("--scenario")
        .arg(scenario)
        .args(["--seed", &seed.to_string(), "--until-ms", &until.to_string()])
        .arg("--out")
        .arg(out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    o
}

fn csv(path: &Path) -> BTreeMap<(String, String), String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("metric,scope,value"));
    lines
        .map(|l| {
            let mut f = l.splitn(3, ',');
            ((f.next().unwrap().into(), f.next().unwrap().into()), f.next().unwrap().into())
        })
        .collect()
}

#[test]
fn run_writes_artifacts_that_agree_with_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = split_variant(dir.path());
    let out = dir.path().join("out");
    let o = run(&path, &out, 3, 30 * 60_000);
    for f in ["trace.jsonl", "metrics.csv", "summary.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(out.join("summary.txt")).unwrap(), stdout(&o));

    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let mut lines = trace.lines();
    let header: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["trace"], "fogloop-trace/1");
    assert_eq!(header["seed"], 3);
    let tiers = header["nodes"].as_object().unwrap();
    let (mut sends, mut fog_cloud, mut symptoms, mut plans) = (0u64, 0u64, 0u64, 0u64);
    let mut last_t = 0;
    for line in lines {
        let e: Value = serde_json::from_str(line).unwrap();
        let t = e["t"].as_u64().unwrap();
        assert!(t >= last_t, "trace goes back in time");
        last_t = t;
        match e["kind"].as_str().unwrap() {
            "send" => {
                sends += 1;
                let path = e["detail"]["path"].as_array().unwrap();
                fog_cloud += path
                    .windows(2)
                    .filter(|w| tiers[w[0].as_str().unwrap()] == "fog" && tiers[w[1].as_str().unwrap()] == "cloud")
                    .count() as u64;
            }
            "symptom" => symptoms += 1,
            "plan" => plans += 1,
            _ => {}
        }
    }
    let m = csv(&out.join("metrics.csv"));
    let get = |metric: &str, scope: &str| m[&(metric.to_string(), scope.to_string())].parse::<u64>().unwrap();
    assert_eq!(get("messages", "all"), sends);
    assert_eq!(get("hops", "fog->cloud"), fog_cloud);
    assert!(fog_cloud > 0);
    assert_eq!(get("symptoms", "all"), symptoms);
    assert_eq!(get("plans", "all"), plans);
    assert_eq!(m[&("decision_latency_ms_max".into(), "office1/lights-off-sunny".into())], "102");
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario("smart_building_3office_decentralized.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&s, &a, 11, 5 * 60_000);
    run(&s, &b, 11, 5 * 60_000);
    for f in ["trace.jsonl", "metrics.csv", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn out_directory_from_environment_and_format_selection() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .env("FOGLOOP_OUT", dir.path())
        .arg("run")
        .arg("--scenario")
        .arg(scenario("smart_building_1office.json"))
        .args(["--until-ms", "60000", "--format", "csv"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("metrics.csv").is_file());
    assert!(!dir.path().join("trace.jsonl").exists());
    assert!(!dir.path().join("summary.txt").exists());
}

#[test]
fn mode_flag_switches_coordination() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("run")
        .arg("--scenario")
        .arg(scenario("smart_building_3office_centralized.json"))
        .args(["--until-ms", "1800000", "--mode", "decentralized", "--format", "csv"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = csv(&dir.path().join("metrics.csv"));
    assert!(m[&("rounds_opened".into(), "all".into())].parse::<u64>().unwrap() > 0);
    assert_eq!(m[&("delegations".into(), "all".into())], "0");
}

#[test]
fn compare_prints_one_row_per_variant() {
    let o = bin()
        .arg("compare")
        .arg("--scenario")
        .arg(scenario("smart_building_3office_centralized.json"))
        .args(["--variants", "centralized,decentralized,centralized+apaas_split", "--until-ms", "600000"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 4, "{text}");
    assert_eq!(rows[0][0], "variant");
    let names: Vec<&str> = rows[1..].iter().map(|r| r[0]).collect();
    assert_eq!(names, ["centralized", "decentralized", "centralized+apaas_split"]);
    let fog_cloud: Vec<u64> = rows[1..].iter().map(|r| r[4].parse().unwrap()).collect();
    assert_eq!(fog_cloud[0], 0);
    assert!(fog_cloud[2] > 0);

    let o = bin()
        .arg("compare")
        .arg("--scenario")
        .arg(scenario("smart_building_1office.json"))
        .args(["--variants", "turbo", "--until-ms", "1000"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

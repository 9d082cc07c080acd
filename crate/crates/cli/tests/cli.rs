use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[sensor]
queue_cap = 3

[simulation]
n_sensors = 2
horizon_slots = 20
trace = true

[sweep]
axis = "lambda"
values = [0.3, 0.5]
schemes = ["proposed", "slot-based"]
"#;

fn aoisched(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aoisched")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().find(|l| !l.starts_with('#')).unwrap().to_string()
}

fn contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn simulate_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let o = aoisched(&["simulate", "--config", s(&config), "--out", s(&out), "--seed", "7", "--solve-first"]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            contents(&out)
        })
        .collect();
    assert_eq!(
        runs[0].keys().collect::<Vec<_>>(),
        ["policy.json", "sim_aggregate.csv", "sim_seed_7.json", "sim_sensors.csv", "trace_seed_7.csv"]
    );
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn golden_csv_headers() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("out");
    assert!(aoisched(&["simulate", "--config", s(&config), "--out", s(&out), "--seed", "1", "--solve-first"]).status.success());
    assert!(aoisched(&["sweep", "--config", s(&config), "--out", s(&out)]).status.success());
    assert_eq!(
        header(&out.join("sim_aggregate.csv")),
        "scheme,n_sensors,lambda,seeds,maoi_mean,maoi_se,maoi_time_mean,energy_mean,sum_f_mean,reports_per_epoch,max_mean_queue,stable"
    );
    assert_eq!(
        header(&out.join("sim_sensors.csv")),
        "seed,sensor,lambda,avg_aoi,avg_aoi_time,avg_energy,f,tau,mean_queue,max_queue,grants,packets_served"
    );
    assert_eq!(
        header(&out.join("trace_seed_1.csv")),
        "epoch,minislot,winner,k,served,reports,s0_a_buf,s0_a_des,s0_q,s0_h,s0_energy,s1_a_buf,s1_a_des,s1_q,s1_h,s1_energy"
    );
    assert_eq!(
        header(&out.join("sweep_lambda.csv")),
        "axis,value,scheme,n_sensors,lambda,feasible,avg_aoi,avg_cost,theta,sim_maoi,sim_maoi_se,sim_maoi_time,sim_energy,sim_sum_f,stable,note"
    );
    let text = fs::read_to_string(out.join("sweep_lambda.csv")).unwrap();
    assert!(text.starts_with("# schema: aoisched-sweep/1\n# [system]\n"));
    assert!(!text.contains("[output]"));
}

#[test]
fn fixed_lambda_skips_the_search() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("out");
    let o = aoisched(&["solve-single", "--config", s(&config), "--out", s(&out), "--lambda", "0.5"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("lambda* = 0.5 "));
    assert_eq!(contents(&out).keys().collect::<Vec<_>>(), ["policy.json", "summary.csv"]);
    assert_eq!(
        header(&out.join("summary.csv")),
        "lambda_star,avg_aoi,avg_cost,theta,differing_states,support_low,support_high,multipliers"
    );
}

#[test]
fn solve_then_simulate_uses_the_policy_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("out");
    assert!(aoisched(&["solve-single", "--config", s(&config), "--out", s(&out)]).status.success());
    let o = aoisched(&["simulate", "--config", s(&config), "--out", s(&out), "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("sim_seed_2.json").exists());

    let changed = write_config(tmp.path(), "changed.toml", &SMALL.replace("queue_cap = 3", "queue_cap = 3\nenergy_budget = 0.9"));
    let o = aoisched(&["simulate", "--config", s(&changed), "--out", s(&out), "--seed", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
}

#[test]
fn simulate_without_policy_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("out");
    let o = aoisched(&["simulate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    for (name, text) in [
        ("unknown.toml", "bogus = 1\n"),
        ("syntax.toml", "[sensor\nqueue_cap = 3\n"),
        ("value.toml", "[sensor]\nqueue_cap = 0\n"),
        ("rate.toml", "[sensor]\nlambda = 0.123\n"),
    ] {
        let config = write_config(tmp.path(), name, text);
        for cmd in ["solve-single", "sweep", "simulate"] {
            let o = aoisched(&[cmd, "--config", s(&config), "--out", s(&out)]);
            assert_eq!(o.status.code(), Some(2), "{cmd} {name}");
            assert!(!out.exists(), "{cmd} {name}");
        }
    }
    let o = aoisched(&["sweep", "--config", s(&tmp.path().join("missing.toml")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_axis_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "small.toml", SMALL);
    let o = aoisched(&["sweep", "--config", s(&config), "--axis", "nope", "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infeasible_budget_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "tight.toml", "[sensor]\nqueue_cap = 3\nenergy_budget = 0.05\n");
    let out = tmp.path().join("out");
    let o = aoisched(&["solve-single", "--config", s(&config), "--out", s(&out), "--lambda", "0.5"]);
    assert_eq!(o.status.code(), Some(3));
    let o = aoisched(&["solve-single", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

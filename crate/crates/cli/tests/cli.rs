use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn delaylb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delaylb"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&read(dir, name)).unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TOY: &str = "[instance]\nspeeds = [1, 1]\nloads = [2, 0]\nc = 0\n";

const SMALL_SCENARIO: &str = r#"
[scenario]
m = 6
topology = { kind = "geographic" }
speeds = { kind = "uniform", lo = 1, hi = 5 }
loads = { kind = "exponential", mean = 50 }
seed = 3
"#;

const SMALL_GRIDS: &str = r#"
[converge]
sizes = [6, 10]
topologies = [{ kind = "homogeneous", c = 20 }, { kind = "geographic" }]
load_means = [20, 200]
repetitions = 2

[cycles]
threshold = 0.02
every = 2
[cycles.grid]
sizes = [6]
load_means = [50]
exponential = false
repetitions = 3

[poa]
sizes = [6]
load_means = [20, 500]
exponential = false
repetitions = 2
"#;

#[test]
fn solve_toy_matches_hand_value() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "toy.toml", TOY);
    ok(&delaylb(dir.path(), &["--config", "toy.toml", "--out", "o", "solve"]));
    let solution = json(&dir.path().join("o"), "solution.json");
    assert!((solution["cost"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(solution["server_loads"][0].as_f64().unwrap(), 1.0);
}

#[test]
fn solve_honours_the_cap() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "c.toml",
        "[instance]\nspeeds = [1, 1, 1]\nloads = [9, 0, 0]\nc = 50\n",
    );
    ok(&delaylb(dir.path(), &["--config", "c.toml", "solve", "--cap", "3"]));
    let solution = json(dir.path(), "solution.json");
    for v in solution["rows"][0].as_array().unwrap() {
        assert!(v.as_f64().unwrap() <= 3.0 + 1e-6);
    }
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let out = delaylb(dir.path(), &["--config", "absent.toml", "solve"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn unknown_key_reports_its_line() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "bad.toml",
        "seed = 4\n\n[nash]\nchange_threshold = 0.01\nrounds = 3\n",
    );
    let out = delaylb(dir.path(), &["--config", "bad.toml", "nash"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 5") && stderr.contains("rounds"), "{stderr}");
}

#[test]
fn invalid_settings_are_config_errors() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", &format!("{TOY}[nash]\nchange_threshold = 2.0\n"));
    let out = delaylb(dir.path(), &["--config", "c.toml", "nash"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreached_threshold_is_a_convergence_failure() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "c.toml",
        &format!("{SMALL_SCENARIO}[mine]\nmax_iterations = 1\n"),
    );
    let out = delaylb(dir.path(), &["--config", "c.toml", "mine", "--threshold", "0"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn mine_writes_a_monotone_trajectory() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", SMALL_SCENARIO);
    ok(&delaylb(
        dir.path(),
        &["--config", "c.toml", "mine", "--threshold", "0.02"],
    ));
    let costs: Vec<f64> = read(dir.path(), "mine_trajectory.jsonl")
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["cost"]
                .as_f64()
                .unwrap()
        })
        .collect();
    assert!(!costs.is_empty());
    assert!(costs.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    let report = json(dir.path(), "mine.json");
    let reference = report["reference_cost"].as_f64().unwrap();
    assert!(report["cost"].as_f64().unwrap() <= reference * 1.02);
}

#[test]
fn grids_are_byte_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "g.toml", SMALL_GRIDS);
    for (out, threads) in [("a", "1"), ("b", "4")] {
        for cmd in ["converge", "cycles-ab", "poa"] {
            ok(&delaylb(
                dir.path(),
                &[
                    "--config",
                    "g.toml",
                    "--seed",
                    "9",
                    "--parallel",
                    threads,
                    "--out",
                    out,
                    cmd,
                ],
            ));
        }
    }
    for name in [
        "converge.csv",
        "converge_runs.csv",
        "converge_trajectories.jsonl",
        "cycles.csv",
        "poa.csv",
        "poa_runs.csv",
    ] {
        let a = read(&dir.path().join("a"), name);
        assert!(!a.is_empty(), "{name} is empty");
        assert_eq!(a, read(&dir.path().join("b"), name), "{name} differs");
    }
}

#[test]
fn converge_table_names_its_criterion() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "g.toml", SMALL_GRIDS);
    ok(&delaylb(
        dir.path(),
        &["--config", "g.toml", "--out", "rel", "converge"],
    ));
    ok(&delaylb(
        dir.path(),
        &[
            "--config",
            "g.toml",
            "--out",
            "avg",
            "--threshold-mode",
            "avg-load",
            "converge",
        ],
    ));
    let rel = read(&dir.path().join("rel"), "converge.csv");
    let avg = read(&dir.path().join("avg"), "converge.csv");
    assert!(rel.starts_with("# grid:"));
    let header = rel.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(
        header,
        "m,topology,load,criterion,threshold,runs,avg,max,stdev,unreached"
    );
    assert!(rel.contains(",relative,") && !rel.contains(",avg-load,"));
    assert!(avg.contains(",avg-load,"));
}

#[test]
fn cycles_ab_summarises_pairs() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "g.toml", SMALL_GRIDS);
    ok(&delaylb(dir.path(), &["--config", "g.toml", "cycles-ab"]));
    let csv = read(dir.path(), "cycles.csv");
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
    // Two topologies, uniform plus the default peak load, three repetitions.
    assert_eq!(rows, 2 * 2 * 3);
    assert!(csv.contains("# identical "));
}

#[test]
fn poa_rows_carry_bounds_only_for_homogeneous_instances() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "g.toml", SMALL_GRIDS);
    ok(&delaylb(dir.path(), &["--config", "g.toml", "poa"]));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(dir.path().join("poa.csv"))
        .unwrap();
    let headers = reader.headers().unwrap().clone();
    let speeds = headers.iter().position(|h| h == "speeds").unwrap();
    let topo = headers.iter().position(|h| h == "topology").unwrap();
    let lower = headers.iter().position(|h| h == "lower_bound").unwrap();
    let ratio = headers.iter().position(|h| h == "max").unwrap();
    let mut seen = 0;
    for record in reader.records() {
        let record = record.unwrap();
        let homogeneous = record[topo].starts_with("homogeneous") && record[speeds].starts_with("const");
        assert_eq!(homogeneous, !record[lower].is_empty(), "{record:?}");
        assert!(record[ratio].parse::<f64>().unwrap() >= 1.0 - 1e-6);
        seen += 1;
    }
    assert!(seen > 0);
}

#[test]
fn nash_reports_rounds_and_state() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", SMALL_SCENARIO);
    ok(&delaylb(dir.path(), &["--config", "c.toml", "nash"]));
    let report = json(dir.path(), "nash.json");
    assert!(report["rounds"].as_u64().unwrap() >= 1);
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn bound_trace_holds_and_annotates_cleaning() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", &SMALL_SCENARIO.replace("m = 6", "m = 4"));
    ok(&delaylb(
        dir.path(),
        &["--config", "c.toml", "--out", "on", "bound-trace", "--iterations", "6"],
    ));
    ok(&delaylb(
        dir.path(),
        &[
            "--config",
            "c.toml",
            "--out",
            "off",
            "bound-trace",
            "--iterations",
            "6",
            "--no-clean",
        ],
    ));
    let on = read(&dir.path().join("on"), "bound.csv");
    let rows: Vec<&str> = on.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.contains(",true,true,")), "{on}");
    let off = read(&dir.path().join("off"), "bound.csv");
    assert!(off.contains("cycle cleaning off"));
}

#[test]
fn gen_round_trips_through_instance() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", SMALL_SCENARIO);
    ok(&delaylb(dir.path(), &["--config", "c.toml", "--out", "g", "gen"]));
    ok(&delaylb(dir.path(), &["--config", "c.toml", "--out", "s1", "solve"]));
    ok(&delaylb(
        dir.path(),
        &["--config", "g/instance.toml", "--out", "s2", "solve"],
    ));
    assert_eq!(
        json(&dir.path().join("s1"), "solution.json"),
        json(&dir.path().join("s2"), "solution.json")
    );
}

#[test]
fn seed_flag_overrides_the_scenario() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "c.toml", SMALL_SCENARIO);
    ok(&delaylb(dir.path(), &["--config", "c.toml", "--out", "a", "gen"]));
    ok(&delaylb(
        dir.path(),
        &["--config", "c.toml", "--out", "b", "--seed", "3", "gen"],
    ));
    ok(&delaylb(
        dir.path(),
        &["--config", "c.toml", "--out", "c", "--seed", "4", "gen"],
    ));
    let a = read(&dir.path().join("a"), "instance.toml");
    assert_eq!(a, read(&dir.path().join("b"), "instance.toml"));
    assert_ne!(a, read(&dir.path().join("c"), "instance.toml"));
}

#[test]
fn round_assigns_every_task_once() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "tasks.txt",
        "# org size\n0 5\n0 3\n0 3\n0 2\n0 2\n0 1\n\n2 4\n2 4\n",
    );
    write(
        dir.path(),
        "c.toml",
        "[instance]\nspeeds = [1, 1, 1]\nloads = [0, 0, 0]\nc = 1\n[round]\ntasks = \"tasks.txt\"\n",
    );
    ok(&delaylb(dir.path(), &["--config", "c.toml", "round"]));
    let csv = read(dir.path(), "round.csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows
        .iter()
        .all(|r| r.split(',').nth(3).unwrap().parse::<usize>().unwrap() < 3));
}

#[test]
fn replicate_places_exactly_r_copies() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "c.toml",
        "[instance]\nspeeds = [1, 2, 1, 3]\nloads = [40, 0, 10, 5]\nc = 5\n[replicate]\nr = 3\ntasks = 50\n",
    );
    ok(&delaylb(dir.path(), &["--config", "c.toml", "replicate"]));
    let csv = read(dir.path(), "replicate.csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 50);
    for row in rows {
        let servers: Vec<usize> = row
            .split(',')
            .nth(2)
            .unwrap()
            .split(';')
            .map(|s| s.parse().unwrap())
            .collect();
        let mut distinct = servers.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 3, "{row}");
    }
    let out = delaylb(dir.path(), &["--config", "c.toml", "replicate", "--r", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

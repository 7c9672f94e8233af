use std::path::Path;
use std::process::{Command, Output};

use osmix::pipeline::RunConfig;

const TWO_STATE: &str = r#"
seed = 4

[dgp]
format = "ascending"
auctions = 1000
competition = { kind = "known", n = 4, weights = [0.6, 0.4] }

[[dgp.states]]
value_dist = { family = "beta", alpha = 2.0, beta = 5.0 }
prob_w0 = 0.25

[[dgp.states]]
value_dist = { family = "beta", alpha = 5.0, beta = 2.0 }
prob_w0 = 0.75

[estimation]
r = 3
"#;

const UNKNOWN_N: &str = r#"
seed = 1

[dgp]
format = "ascending"
auctions = 50000
competition = { kind = "unknown", support = [2, 3, 4], weights = [[0.3, 0.4, 0.3]] }

[[dgp.states]]
value_dist = { family = "uniform", lower = 0.0, upper = 1.0 }
prob_w0 = 0.5

[estimation]
r = 2
k = 1
"#;

fn osmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osmix")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn run_mode(mode: &str, config: &str, out: &Path) -> Output {
    osmix(&[mode, "--config", config, "--out-dir", out.to_str().unwrap()])
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn manifest(out: &Path) -> Vec<String> {
    json(&out.join("manifest.json"))["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

fn assert_manifest_matches_directory(out: &Path) {
    let mut listed = manifest(out);
    listed.sort();
    let mut present: Vec<String> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    present.sort();
    assert_eq!(listed, present);
}

#[test]
fn template_is_printed_and_parses() {
    let out = osmix(&["--emit-template"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    cfg.validate().unwrap();
}

#[test]
fn simulate_writes_requested_rows_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TWO_STATE);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_mode("simulate", &config, &a).status.success());
    assert!(run_mode("simulate", &config, &b).status.success());
    let csv = std::fs::read_to_string(a.join("dataset.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "auction_id,x_lo,x_hi,w,n,k");
    assert_eq!(lines.count(), 1000);
    assert_eq!(csv, std::fs::read_to_string(b.join("dataset.csv")).unwrap());
    assert_manifest_matches_directory(&a);

    let c = dir.path().join("c");
    let out = osmix(&["simulate", "--config", &config, "--out-dir", c.to_str().unwrap(), "--seed", "5"]);
    assert!(out.status.success());
    assert_ne!(csv, std::fs::read_to_string(c.join("dataset.csv")).unwrap());
}

#[test]
fn missing_rank_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &TWO_STATE.replace("r = 3", ""));
    let out = run_mode("identify", &config, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("estimation.r"));
}

#[test]
fn bad_data_fails_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    std::fs::write(&data, "auction_id,x_lo,x_hi,w\n0,0.5,0.2,0\n").unwrap();
    let text = format!("{TWO_STATE}\n[data]\npath = {:?}\n", data.to_str().unwrap());
    let config = write_config(dir.path(), &text);
    let out_dir = dir.path().join("out");
    let out = run_mode("identify", &config, &out_dir);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(std::fs::read_dir(&out_dir).unwrap().count(), 0);
}

#[test]
fn simulated_dataset_round_trips_through_identify() {
    let dir = tempfile::tempdir().unwrap();
    let text = TWO_STATE.replace("auctions = 1000", "auctions = 20000");
    let config = write_config(dir.path(), &text);
    let sim = dir.path().join("sim");
    assert!(run_mode("simulate", &config, &sim).status.success());

    let data = sim.join("dataset.csv");
    let text = format!("{text}\n[data]\npath = {:?}\n", data.to_str().unwrap());
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("est");
    let res = run_mode("identify", &config, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_manifest_matches_directory(&out);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["estimate"]["K"], 2);
    assert!(out.join("rank_report.json").exists());
    let est = std::fs::read_to_string(out.join("estimate_components.csv")).unwrap();
    assert!(est.starts_with("state,x,F_hat"));
    assert_eq!(est.lines().count(), 1 + 2 * 101);

    let again = dir.path().join("est2");
    assert!(run_mode("identify", &config, &again).status.success());
    assert_eq!(est, std::fs::read_to_string(again.join("estimate_components.csv")).unwrap());
}

#[test]
fn oracle_check_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TWO_STATE);
    let out = dir.path().join("out");
    let res = run_mode("oracle_check", &config, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = json(&out.join("summary.json"));
    assert!(summary["sup_norm_max"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn montecarlo_table_has_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let text = TWO_STATE.replace("auctions = 1000", "auctions = 20000")
        + "k = 2\n\n[montecarlo]\nreplications = 3\n";
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let res = run_mode("montecarlo", &config, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let table = std::fs::read_to_string(out.join("montecarlo_table.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap(), "metric,state,bias,rmse,coverage");
    assert_eq!(lines.count(), 6);
    assert_manifest_matches_directory(&out);
}

#[test]
fn sieve_fit_writes_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let text = TWO_STATE.replace("auctions = 1000", "auctions = 5000") + "k = 2\n\n[sieve]\norder = 6\nmultistarts = 3\n";
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let res = run_mode("sieve_fit", &config, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let params = json(&out.join("sieve_params.json"));
    assert_eq!(params["order"], 6);
    assert_eq!(params["params"]["densities"].as_array().unwrap().len(), 2);
    let summary = json(&out.join("summary.json"));
    for s in summary["truth_errors"]["sup_norm"].as_array().unwrap() {
        assert!(s.as_f64().unwrap() < 0.06);
    }
}

#[test]
fn unknown_competition_writes_joint_weights() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), UNKNOWN_N);
    let out = dir.path().join("out");
    let res = run_mode("identify_unknown_n", &config, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let comp = std::fs::read_to_string(out.join("competition.csv")).unwrap();
    let mut lines = comp.lines();
    assert_eq!(lines.next().unwrap(), "k,n,p_kn");
    let total: f64 = lines.map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn missing_subcommand_exits_with_config_status() {
    assert_eq!(osmix(&[]).status.code(), Some(2));
    assert_eq!(osmix(&["identify"]).status.code(), Some(2));
}

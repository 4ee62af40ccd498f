//! End-to-end runs of the `dle` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name);
    format!("table:{}", path.display())
}

fn dle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dle"))
        .args(args)
        .current_dir(dir)
        .env_remove("DLE_REMOTE_URL")
        .env_remove("DLE_REMOTE_KEY")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn lines(path: PathBuf) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn branching_args(model: &str) -> Vec<&str> {
    vec!["enumerate", "--model", model, "--rule", "epsilon_inclusive:0.1", "--policy", "probfirst", "--k", "4"]
}

#[test]
fn branching_run_writes_four_leaves_with_full_coverage() {
    let dir = TempDir::new().unwrap();
    let model = fixture("branching.json");
    ok(&dle(dir.path(), &branching_args(&model)));

    let leaves = lines(dir.path().join("leaves.jsonl"));
    assert_eq!(leaves.len(), 4);
    let texts: Vec<&str> = leaves.iter().map(|l| l["text"].as_str().unwrap()).collect();
    assert_eq!(texts, ["A A A", "A C", "A A D", "B A"]);
    let masses = [0.504, 0.27, 0.126, 0.1];
    for (leaf, m) in leaves.iter().zip(masses) {
        assert!((leaf["q"].as_f64().unwrap() - m).abs() < 1e-12);
        for field in ["tokens", "log_q", "new_tokens", "reused_prefix", "stop_reason", "order"] {
            assert!(leaf.get(field).is_some(), "missing {field}");
        }
    }

    let metrics = json(dir.path().join("leaves.metrics.json"));
    assert!((metrics["prompts"][0]["coverage"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(metrics["prompts"][0]["frontier_exhausted"], true);

    let manifest = json(dir.path().join("leaves.manifest.json"));
    assert_eq!(manifest["command"], "enumerate");
    assert_eq!(manifest["config"]["rule"], "epsilon_inclusive:0.1");
    assert!(manifest["degraded"].as_array().unwrap().is_empty());
}

#[test]
fn strict_epsilon_drops_the_boundary_leaf() {
    let dir = TempDir::new().unwrap();
    let model = fixture("branching.json");
    ok(&dle(dir.path(), &["enumerate", "--model", &model, "--rule", "epsilon:0.1", "--k", "4"]));
    let leaves = lines(dir.path().join("leaves.jsonl"));
    assert_eq!(leaves.len(), 3);
    assert!(leaves.iter().all(|l| l["text"] != "B A"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let model = fixture("branching.json");
    let cases: Vec<Vec<&str>> = vec![
        vec!["enumerate", "--model", &model, "--rule", "nucleus:0.9", "--k", "4"],
        vec!["enumerate", "--model", &model, "--rule", "top_p:1.5", "--k", "4"],
        vec!["enumerate", "--model", &model, "--rule", "top_k:2", "--policy", "bfs"],
        vec!["enumerate", "--model", &model, "--rule", "top_k:2", "--early-stop-n", "0"],
        vec!["enumerate", "--model", "table:missing.json", "--rule", "top_k:2"],
        vec!["enumerate", "--model", "remote:5", "--rule", "top_k:2"],
        vec!["enumerate", "--model", &model, "--rule", "top_k:2", "--prompt", "Z"],
        vec!["cache-sim", "--in", "missing.jsonl"],
        vec!["sample", "--model", &model, "--rule", "top_k:2"],
        vec!["vote", "--in", "x.jsonl", "--weighting", "softmax"],
    ];
    for args in cases {
        let out = dle(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let model = fixture("branching.json");
    let prompts = dir.path().join("prompts.txt");
    fs::write(&prompts, "\nA\nB\nA A\n").unwrap();
    let prompts = prompts.to_str().unwrap();
    let run = |out: &str, threads: &str, policy: &str| {
        let args = [
            "enumerate", "--model", &model, "--rule", "top_k:2", "--policy", policy, "--prompt-file", prompts,
            "--out", out, "--threads", threads,
        ];
        ok(&dle(dir.path(), &args));
        let manifest = json(dir.path().join(out.replace(".jsonl", ".manifest.json")));
        let hash = manifest["outputs"][0]["sha256"].as_str().unwrap().to_string();
        (fs::read(dir.path().join(out)).unwrap(), hash)
    };
    for policy in ["probfirst", "divfirst", "randbranch:7"] {
        let (a, ha) = run("a.jsonl", "1", policy);
        let (b, hb) = run("b.jsonl", "1", policy);
        let (c, hc) = run("c.jsonl", "3", policy);
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(ha, hb);
        assert_eq!(ha, hc);
    }
    let records = lines(dir.path().join("a.jsonl"));
    let indices: Vec<u64> = records.iter().map(|r| r["prompt_index"].as_u64().unwrap()).collect();
    assert!(indices.windows(2).all(|w| w[0] <= w[1]), "prompt order kept");
}

#[test]
fn sampling_is_seed_stable() {
    let dir = TempDir::new().unwrap();
    let model = fixture("branching.json");
    let run = |out: &str, seed: &str| {
        let args = [
            "sample", "--model", &model, "--rule", "epsilon_inclusive:0.1", "--k", "50", "--seed", seed, "--out", out,
        ];
        ok(&dle(dir.path(), &args));
        fs::read_to_string(dir.path().join(out)).unwrap()
    };
    let a = run("a.jsonl", "11");
    assert_eq!(a, run("b.jsonl", "11"));
    assert_ne!(a, run("c.jsonl", "12"));
    let draws: Vec<Value> = a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(draws.len(), 50);
    assert!(draws.iter().enumerate().all(|(i, d)| d["draw"] == i as u64));
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<Option<f64>>>) {
    let mut rows = text.lines();
    let header = rows.next().unwrap().split(',').map(str::to_string).collect();
    let body = rows
        .map(|r| r.split(',').map(|c| c.parse::<f64>().ok()).collect())
        .collect();
    (header, body)
}

#[test]
fn coverage_curve_matches_closed_forms() {
    let dir = TempDir::new().unwrap();
    let model = fixture("two_leaf.json");
    let out = dle(
        dir.path(),
        &["coverage-curve", "--model", &model, "--rule", "top_k:2", "--k", "1..6", "--replicates", "400", "--seed", "5"],
    );
    ok(&out);
    let (header, rows) = parse_csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(
        header,
        ["k", "coverage_dle", "expected_coverage_closed", "coverage_sampled_mean", "coverage_sampled_std"]
    );
    assert_eq!(rows.len(), 6);
    let col = |i: usize| rows.iter().map(|r| r[i].unwrap()).collect::<Vec<f64>>();
    let (dle_cov, closed, sampled) = (col(1), col(2), col(3));
    assert!((dle_cov[0] - 0.7).abs() < 1e-12);
    assert!((closed[0] - 0.58).abs() < 1e-12);
    assert!((closed[1] - 0.79).abs() < 1e-12);
    assert!(dle_cov[1..].iter().all(|&c| (c - 1.0).abs() < 1e-12));
    assert!(dle_cov.windows(2).all(|w| w[1] >= w[0]));
    let diffs: Vec<f64> = closed.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(diffs.iter().all(|&d| d >= 0.0));
    assert!(diffs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    // 400 replicates: standard error of the sampled mean is below 0.012
    for (s, c) in sampled.iter().zip(&closed) {
        assert!((s - c).abs() < 0.05, "{s} vs {c}");
    }
}

#[test]
fn compare_writes_token_columns_and_manifest() {
    let dir = TempDir::new().unwrap();
    let model = fixture("branching.json");
    let args = [
        "compare", "--model", &model, "--rule", "epsilon_inclusive:0.1", "--k", "1,2,4", "--replicates", "5", "--out",
        "curve.csv",
    ];
    ok(&dle(dir.path(), &args));
    let (header, rows) = parse_csv(&fs::read_to_string(dir.path().join("curve.csv")).unwrap());
    assert_eq!(header.len(), 7);
    assert_eq!(header[5], "tokens_dle");
    // k=4 exhausts the tree: 11 generated tokens, full coverage
    assert_eq!(rows[2][1], Some(1.0));
    assert_eq!(rows[2][5], Some(11.0));
    let manifest = json(dir.path().join("curve.manifest.json"));
    assert_eq!(manifest["command"], "compare");
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn cache_sim_on_enumerated_leaves() {
    let dir = TempDir::new().unwrap();
    let model = fixture("branching.json");
    ok(&dle(dir.path(), &branching_args(&model)));
    let out = dle(dir.path(), &["cache-sim", "--in", "leaves.jsonl", "--capacity", "inf", "--evict", "none"]);
    ok(&out);
    let stats: Value = serde_json::from_slice(&out.stdout).unwrap();
    // leaves AAA$, AC$, AAD$, BA$: shared prefixes A, AA
    assert_eq!(stats["l_flat"], 14);
    assert_eq!(stats["c_th"], 3);
    assert_eq!(stats["c_act"], 3);

    let out = dle(dir.path(), &["cache-sim", "--in", "leaves.jsonl", "--capacity", "0", "--evict", "lru"]);
    ok(&out);
    let stats: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["c_act"], 0);
    assert_eq!(stats["c_th"], 3);
}

#[test]
fn vote_over_sampled_draws() {
    let dir = TempDir::new().unwrap();
    let model = fixture("two_leaf.json");
    ok(&dle(dir.path(), &["sample", "--model", &model, "--rule", "top_k:2", "--k", "200", "--seed", "1"]));
    let out = dle(dir.path(), &["vote", "--in", "leaves.jsonl", "--accept", "b"]);
    ok(&out);
    let votes: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(votes[0]["winner"], "a");
    assert_eq!(votes[0]["pass_at_k"], true);
    let a = votes[0]["tally"]["a"]["count"].as_u64().unwrap();
    let b = votes[0]["tally"]["b"]["count"].as_u64().unwrap();
    assert_eq!(a + b, 200);
}

#[test]
fn ngram_model_roundtrip_through_enumerate() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("corpus.txt"), "ab\nab\nac\n").unwrap();
    ok(&dle(
        dir.path(),
        &["ngram-train", "--corpus", "corpus.txt", "--order", "2", "--alpha", "0.001", "--out", "ng.json"],
    ));
    ok(&dle(
        dir.path(),
        &["enumerate", "--model", "ngram:ng.json", "--rule", "top_p:0.95", "--prompt", "a", "--early-stop-n", "off"],
    ));
    let leaves = lines(dir.path().join("leaves.jsonl"));
    let texts: Vec<&str> = leaves.iter().map(|l| l["text"].as_str().unwrap()).collect();
    assert_eq!(texts, ["b", "c"]);
    let q0 = leaves[0]["q"].as_f64().unwrap();
    assert!(q0 > 0.6 && q0 < 0.7, "{q0}");
}

#[test]
fn model_failure_after_first_leaf_is_degraded() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("gap.json");
    fs::write(
        &path,
        r#"{"vocab": ["a", "b", "<eos>"], "eos": "<eos>",
            "transitions": {"": {"a": 0.6, "b": 0.4}, "a": {"<eos>": 1.0}}}"#,
    )
    .unwrap();
    let out = dle(dir.path(), &["enumerate", "--model", "table:gap.json", "--rule", "top_k:2", "--k", "4"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(dir.path().join("leaves.jsonl")).len(), 1);
    let manifest = json(dir.path().join("leaves.manifest.json"));
    assert_eq!(manifest["degraded"].as_array().unwrap().len(), 1);
    let metrics = json(dir.path().join("leaves.metrics.json"));
    assert!(metrics["prompts"][0]["degraded"].is_string());
}

#[test]
fn oracle_reports_leaf_set_and_closed_forms() {
    let dir = TempDir::new().unwrap();
    let model = fixture("two_leaf.json");
    let out = dle(dir.path(), &["oracle", "--model", &model, "--rule", "top_k:2", "--k", "1,2", "--max-seq-len", "4"]);
    ok(&out);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report[0]["leaves"].as_array().unwrap().len(), 2);
    assert!((report[0]["per_k"][1]["expected_coverage_closed"].as_f64().unwrap() - 0.79).abs() < 1e-12);
    assert!((report[0]["per_k"][0]["top_k_coverage"].as_f64().unwrap() - 0.7).abs() < 1e-12);
}

#[test]
fn tree_dump_lists_every_node() {
    let dir = TempDir::new().unwrap();
    let model = fixture("branching.json");
    let mut args = branching_args(&model);
    args.extend(["--dump-tree", "tree.json"]);
    ok(&dle(dir.path(), &args));
    let dump = json(dir.path().join("tree.json"));
    let nodes = dump[0]["nodes"].as_array().unwrap();
    assert!(nodes[0]["parent"].is_null());
    for key in ["id", "parent", "token", "edge_weight", "log_mass", "status"] {
        assert!(nodes.iter().all(|n| n.get(key).is_some()), "missing {key}");
    }
    let leaves = nodes.iter().filter(|n| n["status"] == "leaf").count();
    assert_eq!(leaves, 4);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const FOUR_ITEM: &str = r#"{"m": 4, "rho": 0.0, "goal": 1, "prereqs": {"1": [3,4], "2": [3,4], "3": [4], "4": []}}"#;

fn apg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = apg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Pipeline {
    dir: TempDir,
}

impl Pipeline {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Four-item domain solved and sampled exhaustively.
    fn four_item() -> Self {
        let p = Pipeline {
            dir: TempDir::new().unwrap(),
        };
        fs::write(p.path("domain.json"), FOUR_ITEM).unwrap();
        ok(&["solve", "--domain", s(&p.path("domain.json")), "--out", s(&p.path("policy.json"))]);
        ok(&[
            "sample",
            "--domain",
            s(&p.path("domain.json")),
            "--policy",
            s(&p.path("policy.json")),
            "--exhaustive",
            "--out",
            s(&p.path("tuples.json")),
        ]);
        p
    }

    fn build(&self, name: &str, epsilon: Option<&str>) -> PathBuf {
        let out = self.path(name);
        let tuples = self.path("tuples.json");
        let policy = self.path("policy.json");
        let mut args = vec!["build-apg", "--transitions", s(&tuples), "--policy", s(&policy)];
        if let Some(e) = epsilon {
            args.extend(["--epsilon", e]);
        }
        args.extend(["--out", s(&out)]);
        ok(&args);
        out
    }

    fn dot(&self, apg_path: &Path) -> String {
        let out = self.path("graph.dot");
        ok(&["export-dot", "--apg", s(apg_path), "--out", s(&out)]);
        fs::read_to_string(out).unwrap()
    }
}

fn edge_labels(dot: &str) -> Vec<String> {
    dot.lines()
        .filter(|l| l.contains("->"))
        .map(|l| l.split("label=\"").nth(1).unwrap().trim_end_matches("\"];").to_string())
        .collect()
}

#[test]
fn four_item_pipeline_at_half_epsilon_is_deterministic() {
    let p = Pipeline::four_item();
    let graph = p.build("apg.json", Some("0.5"));
    let dot = p.dot(&graph);
    let labels = edge_labels(&dot);
    assert!(!labels.is_empty());
    assert!(labels.iter().all(|l| l == "1.000"), "{labels:?}");
    assert!(dot.contains("END -> END [label=\"1.000\"];"));
    for name in ["policy.json", "tuples.json", "apg.json", "graph.dot"] {
        let manifest = p.path(&format!("{name}.manifest.json"));
        assert!(manifest.exists(), "missing manifest for {name}");
    }
}

#[test]
fn default_epsilon_uses_the_action_gap() {
    // The gap is 1 here and the a_4 class splits only when |I| exceeds it,
    // which -1 does not, so the a_4 node reaches a_1 and a_3 evenly.
    let p = Pipeline::four_item();
    let graph = p.build("apg.json", None);
    let policy: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.path("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["min_action_gap"], 1.0);
    let labels = edge_labels(&p.dot(&graph));
    assert_eq!(labels.iter().filter(|l| *l == "0.500").count(), 2, "{labels:?}");
}

#[test]
fn explain_lists_the_features_fixed_in_the_node() {
    let p = Pipeline::four_item();
    let graph = p.build("apg.json", None);
    let text = ok(&[
        "explain",
        "--apg",
        s(&graph),
        "--policy",
        s(&p.path("policy.json")),
        "--state",
        "0011",
    ]);
    assert!(text.contains("summary: take a_1 (no feature constraints)"), "{text}");
    assert!(text.contains("f_3=1"), "{text}");
    assert!(text.contains("f_4=1"), "{text}");
}

#[test]
fn predict_three_steps_from_empty_inventory() {
    let p = Pipeline::four_item();
    let graph = p.build("apg.json", Some("0.5"));
    let text = ok(&[
        "predict",
        "--apg",
        s(&graph),
        "--policy",
        s(&p.path("policy.json")),
        "--state",
        "0000",
        "--n",
        "3",
    ]);
    assert_eq!(text, "a_1\t1.000000\n");
}

#[test]
fn generated_domains_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        ok(&["generate-domain", "--m", "6", "--rho", "0.25", "--seed", "3", "--out", s(out)]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let domain: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(domain["m"], 6);
    assert_eq!(domain["goal"], 1);
}

#[test]
fn malformed_json_reports_line_and_exit_code() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("domain.json");
    fs::write(&bad, "{\n  \"m\": 4,\n  \"rho\": oops\n}").unwrap();
    let out = apg(&["solve", "--domain", s(&bad), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("domain.json:3:"), "{err}");
}

#[test]
fn unknown_schema_major_is_a_version_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("domain.json");
    let text = FOUR_ITEM.replacen('{', "{\"schema_version\": \"2.0\", ", 1);
    fs::write(&path, text).unwrap();
    let out = apg(&["solve", "--domain", s(&path), "--out", s(&dir.path().join("p.json"))]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let p = Pipeline::four_item();
    let graph = p.build("apg.json", None);
    let missing = apg(&["export-dot", "--apg", s(&p.path("nope.json")), "--out", s(&p.path("x.dot"))]);
    assert_eq!(missing.status.code(), Some(3));
    let wide = apg(&[
        "explain",
        "--apg",
        s(&graph),
        "--policy",
        s(&p.path("policy.json")),
        "--state",
        "00000",
    ]);
    assert_eq!(wide.status.code(), Some(6));
    let terminal = apg(&[
        "predict",
        "--apg",
        s(&graph),
        "--policy",
        s(&p.path("policy.json")),
        "--state",
        "1000",
        "--n",
        "1",
    ]);
    assert_eq!(terminal.status.code(), Some(9));
    let usage = apg(&["sample", "--domain", "d.json", "--policy", "p.json", "--out", "t.json"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn size_experiment_writes_csvs_and_manifest() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("cfg.json");
    fs::write(&config, r#"{"num_instances": 2, "m_values": [6, 7], "seed": 5}"#).unwrap();
    let out = dir.path().join("size.csv");
    ok(&["experiment", "size", "--config", s(&config), "--out", s(&out)]);
    let summary = fs::read_to_string(&out).unwrap();
    let mut lines = summary.lines();
    assert_eq!(
        lines.next(),
        Some("m,instances,median_nodes,mean_nodes,min_nodes,max_nodes,median_ratio")
    );
    assert_eq!(lines.count(), 2);
    let per_instance = fs::read_to_string(dir.path().join("size.instances.csv")).unwrap();
    assert_eq!(per_instance.lines().count(), 5);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("size.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1);
}

#[test]
fn experiment_config_rejects_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("cfg.json");
    fs::write(&config, r#"{"instances": 2}"#).unwrap();
    let out = apg(&["experiment", "nhop", "--config", s(&config), "--out", s(&dir.path().join("n.csv"))]);
    assert_eq!(out.status.code(), Some(10));
}

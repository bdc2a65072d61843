use std::path::Path;
use std::process::{Command, Output};

fn argus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_argus"))
        .args(args)
        .output()
        .expect("argus runs")
}

fn ok(args: &[&str]) -> String {
    let out = argus(args);
    assert!(
        out.status.success(),
        "argus {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

fn corpus(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("corpus.json");
    ok(&["synth", "--small", "--seed", "3", "--out", s(&path), "--records-dir", s(&dir.join("rec"))]);
    path
}

#[test]
fn policy_catalog_round_trip_and_diff() {
    let dir = tempfile::tempdir().unwrap();
    let cat = dir.path().join("catalog.jsonl");
    ok(&["policy", "export", s(&cat)]);
    let out = ok(&["policy", "import", s(&cat)]);
    assert!(out.contains("2024-h2\t32 active"));
    assert!(out.contains("2025-h1\t37 active"));
    let diff = ok(&["policy", "diff", "2024-h2", "2025-h1", "--catalog", s(&cat)]);
    let ids: Vec<&str> = diff.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(ids, ["P33", "P34", "P35", "P36", "P37"]);
    assert!(!argus(&["policy", "diff", "2024-h2", "2099-h1"]).status.success());
}

#[test]
fn data_ingest_export_and_blend() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let rec = dir.path().join("rec");
    let store = dir.path().join("store.log");
    ok(&["data", "ingest", s(&rec.join("gold.jsonl")), "--partition", "gold", "--store", s(&store)]);
    let out = ok(&["data", "ingest", s(&rec.join("historical.jsonl")), "--partition", "historical", "--store", s(&store)]);
    assert!(out.contains("store holds 600"));
    // Re-ingesting the same ids is rejected.
    assert!(!argus(&["data", "ingest", s(&rec.join("gold.jsonl")), "--partition", "gold", "--store", s(&store)])
        .status
        .success());

    let exported = dir.path().join("gold_export.jsonl");
    ok(&["data", "export", "--store", s(&store), "--partition", "gold", "--out", s(&exported)]);
    assert_eq!(lines(&exported), 100);
    let first: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&exported).unwrap().lines().next().unwrap()).unwrap();
    for field in ["sample_id", "input", "labels", "cot", "policy_version", "source"] {
        assert!(first.get(field).is_some(), "missing {field}");
    }

    let sft = dir.path().join("sft.jsonl");
    let out = ok(&[
        "data", "blend", "--gold", s(&rec.join("gold.jsonl")), "--hist", s(&rec.join("historical.jsonl")),
        "--ratio", "0.4", "--seed", "7", "--out", s(&sft),
    ]);
    assert!(out.contains("300 records (100 gold, 200 historical)"));
    let again = dir.path().join("sft2.jsonl");
    ok(&[
        "data", "blend", "--gold", s(&rec.join("gold.jsonl")), "--hist", s(&rec.join("historical.jsonl")),
        "--ratio", "0.4", "--seed", "7", "--out", s(&again),
    ]);
    assert_eq!(std::fs::read(&sft).unwrap(), std::fs::read(&again).unwrap());
    assert!(!argus(&[
        "data", "blend", "--gold", s(&rec.join("gold.jsonl")), "--hist", s(&rec.join("historical.jsonl")),
        "--ratio", "1.5", "--out", s(&again),
    ])
    .status
    .success());
}

#[test]
fn index_build_from_corpus_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let idx = dir.path().join("index.json");
    let out = ok(&["index", "build", "--corpus", s(&c), "--out", s(&idx)]);
    assert!(out.starts_with("indexed 137 documents"));
    let out = ok(&["index", "build", "--exemplars", s(&dir.path().join("rec/gold.jsonl")), "--out", s(&idx)]);
    assert!(out.starts_with("indexed 137 documents"));
    let out = ok(&["index", "build", "--out", s(&idx)]);
    assert!(out.starts_with("indexed 37 documents"));
}

#[test]
fn rectify_writes_transcripts_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let out_dir = dir.path().join("rect");
    let out = ok(&["rectify", "--corpus", s(&c), "--scope", "conflicts_only", "--workers", "2", "--out-dir", s(&out_dir)]);
    let summary = out.lines().next().unwrap();
    assert!(summary.starts_with("Stage I+II: debated "), "{summary}");
    let adjudications = lines(&out_dir.join("adjudications.jsonl"));
    assert!(adjudications > 0);
    assert_eq!(lines(&out_dir.join("provenance.jsonl")), adjudications);
    assert!(lines(&out_dir.join("transcripts.jsonl")) >= adjudications);
    assert!(!argus(&["rectify", "--corpus", s(&c), "--scope", "everything", "--out-dir", s(&out_dir)])
        .status
        .success());
}

#[test]
fn discover_and_rewards() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let ids = dir.path().join("latent.txt");
    let out = ok(&["discover", "--corpus", s(&c), "--policy", "P34", "--tau", "0.7", "--out", s(&ids)]);
    assert!(out.starts_with("P34: "), "{out}");
    assert!(!argus(&["discover", "--corpus", s(&c), "--policy", "P1"]).status.success());

    let roll = dir.path().join("rollouts.jsonl");
    let out = ok(&["rewards", "--corpus", s(&c), "--stage", "II", "--group-size", "4", "--out", s(&roll)]);
    let n: usize = out.split_whitespace().next().unwrap().parse().unwrap();
    assert_eq!(lines(&roll), n);
    assert_eq!(n % 4, 0);
    let rec: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(&roll).unwrap().lines().next().unwrap()).unwrap();
    for field in ["sample_id", "group_id", "response_labels", "reward_total", "advantage", "stage"] {
        assert!(rec.get(field).is_some(), "missing {field}");
    }
    assert!(!argus(&["rewards", "--corpus", s(&c), "--stage", "I", "--out", s(&roll)]).status.success());
}

#[test]
fn eval_tables_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let rep = dir.path().join("stages.jsonl");
    let out = ok(&["eval", "ablate-stages", "--corpus", s(&c), "--seed", "7", "--out", s(&rep)]);
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("Stage")).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(lines(&rep), 3);
    let out = ok(&["eval", "score", "--corpus", s(&c), "--stage", "I"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("Stage I ")).count(), 1);
    let out = ok(&["eval", "ablate-components", "--corpus", s(&c)]);
    for label in ["Full", "w/o Prosecutor", "w/o Defender", "w/o Rationale (Labels Only)"] {
        assert!(out.lines().any(|l| l.starts_with(label)), "missing row {label}");
    }
    let adv = dir.path().join("adv.json");
    let out = ok(&["eval", "adversarial", "--corpus", s(&c), "--out", s(&adv)]);
    assert!(out.starts_with("positives "));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&adv).unwrap()).unwrap();
    assert!(report["relative_drop"].as_f64().unwrap() > 0.0);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = argus(&["eval", "score", "--corpus", s(&dir.path().join("missing.json"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading corpus"));

    let cfg = dir.path().join("service.toml");
    std::fs::write(&cfg, "sampling_rate = 0.05\n").unwrap();
    let out = argus(&["serve", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no backend configured"));
}

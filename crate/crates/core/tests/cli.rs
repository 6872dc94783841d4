use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_docprompt"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/tldr")
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap()
}

fn metric(report: &Value, name: &str) -> f64 {
    report["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["name"] == name)
        .unwrap_or_else(|| panic!("no metric {name}"))["value"]
        .as_f64()
        .unwrap()
}

fn stage_statuses(stderr: &[u8]) -> Vec<(String, String)> {
    json_lines(&String::from_utf8_lossy(stderr))
        .into_iter()
        .map(|v| (v["stage"].as_str().unwrap().to_string(), v["status"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn run_fixture_then_rerun_skips_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("experiment.toml");
    let args = ["run", "--config", config.to_str().unwrap(), "--work-dir", dir.path().to_str().unwrap()];

    let first = bin().args(args).output().unwrap();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let stages = stage_statuses(&first.stderr);
    assert!(!stages.is_empty());
    assert!(stages.iter().all(|(_, s)| s == "ran"), "{stages:?}");
    let report: Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(metric(&report, "cmd_acc"), 100.0);
    assert!(dir.path().join("report.json").exists());
    let saved = fs::read(dir.path().join("report.json")).unwrap();
    assert_eq!(saved, first.stdout);

    let second = bin().args(args).output().unwrap();
    assert!(second.status.success());
    let again = stage_statuses(&second.stderr);
    assert_eq!(again.len(), stages.len());
    assert!(again.iter().all(|(_, s)| s == "skipped"), "{again:?}");
    assert_eq!(second.stdout, first.stdout);
}

#[test]
fn staged_commands_reproduce_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let fx = fixtures();

    let ingest = json_lines(&run_ok(&[
        "ingest",
        "--manuals",
        fx.join("manuals").to_str().unwrap(),
        "--pages",
        fx.join("pages").to_str().unwrap(),
        "--pool-out",
        &p("pool.jsonl"),
        "--examples-out",
        &p("examples.jsonl"),
    ]));
    assert_eq!(ingest[0]["manuals"], 10);
    let n_examples = ingest[0]["examples"].as_u64().unwrap();
    assert!(n_examples > 10);

    let oracle = json_lines(&run_ok(&[
        "oracle", "--pool", &p("pool.jsonl"), "--examples", &p("examples.jsonl"), "--out", &p("annotated.jsonl"),
    ]));
    assert_eq!(oracle[0]["examples"], n_examples);

    let split = json_lines(&run_ok(&[
        "split", "--examples", &p("annotated.jsonl"), "--mode", "disjoint", "--seed", "1234", "--targets", "6,2,2",
        "--out", &p("split.jsonl"),
    ]));
    assert_eq!(split[0]["violations"], 0);
    assert_eq!(split[0]["sizes"]["test"]["groups"], 2);

    for kind in ["paragraph", "manual"] {
        let built = json_lines(&run_ok(&[
            "index", "build", "--pool", &p("pool.jsonl"), "--kind", kind, "--out", &p(&format!("{kind}.bm25")),
        ]));
        assert!(built[0]["units"].as_u64().unwrap() > 0);
    }

    let hits = json_lines(&run_ok(&["index", "search", "--index", &p("paragraph.bm25"), "--query", "big ascii font", "--k", "3"]));
    assert!(!hits.is_empty() && hits.len() <= 3);
    assert_eq!(hits[0]["rank"], 1);
    let two = json_lines(&run_ok(&[
        "index", "two-stage", "--manual-index", &p("manual.bm25"), "--paragraph-index", &p("paragraph.bm25"),
        "--query", "print text with a big ascii art font", "--k", "5",
    ]));
    let parent = two[0]["doc_ref"].as_str().unwrap().split('#').next().unwrap().to_string();
    assert!(two.iter().all(|h| h["doc_ref"].as_str().unwrap().starts_with(&format!("{parent}#"))));

    run_ok(&[
        "retrieve", "--examples", &p("split.jsonl"), "--method", "two-stage", "--index", &p("paragraph.bm25"),
        "--manual-index", &p("manual.bm25"), "--k", "10", "--out", &p("retrieved.jsonl"),
    ]);
    let recall: Value = serde_json::from_str(&run_ok(&[
        "eval", "retrieval", "--results", &p("retrieved.jsonl"), "--oracles", &p("split.jsonl"), "--ks", "1,10",
    ]))
    .unwrap();
    let r1 = metric(&recall, "recall@1");
    let r10 = metric(&recall, "recall@10");
    assert!((0.0..=r10).contains(&r1) && r10 <= 100.0);

    let prompts = json_lines(&run_ok(&[
        "prompt", "--pool", &p("pool.jsonl"), "--examples", &p("split.jsonl"), "--retrieved", &p("retrieved.jsonl"),
        "--out", &p("prompts.jsonl"),
    ]));
    assert_eq!(prompts[0]["shots"], 3);

    let generated = json_lines(&run_ok(&[
        "generate", "--prompts", &p("prompts.jsonl"), "--mock", "--n", "2", "--temperatures", "0.2,0.4",
        "--out", &p("samples.jsonl"),
    ]));
    assert_eq!(generated[0]["failures"], 0);
    assert_eq!(generated[0]["samples"].as_u64().unwrap(), 4 * prompts[0]["prompts"].as_u64().unwrap());

    let staged: Value = serde_json::from_str(&run_ok(&[
        "eval", "gen", "--refs", &p("split.jsonl"), "--hyps", &p("samples.jsonl"), "--language", "bash",
        "--out", &p("staged.json"),
    ]))
    .unwrap();
    assert!(metric(&staged, "cmd_acc") >= 0.0);
}

#[test]
fn missing_config_reports_json_error() {
    let out = bin().args(["run", "--config", "/nonexistent/experiment.toml"]).output().unwrap();
    let err = error_line(&out);
    assert!(err["error"].as_str().unwrap().contains("/nonexistent/experiment.toml"));
    assert!(err["causes"].is_array());
}

#[test]
fn missing_input_path_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(
        &config,
        "seed = 1\nlanguage = \"bash\"\nwork_dir = \"work\"\n[input]\nmanuals_dir = \"no-such-manuals\"\ntldr_dir = \"no-such-pages\"\n",
    )
    .unwrap();
    let out = bin().args(["run", "--config", config.to_str().unwrap()]).output().unwrap();
    let err = error_line(&out);
    assert!(err["error"].as_str().unwrap().contains("no-such-manuals"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("typo.toml");
    fs::write(&config, "seed = 1\nlanguage = \"bash\"\nwork_dir = \"w\"\nsede = 2\n").unwrap();
    let out = bin().args(["run", "--config", config.to_str().unwrap()]).output().unwrap();
    assert!(error_line(&out)["error"].as_str().unwrap().contains("sede"));
}

#[test]
fn pass_at_k_from_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples.jsonl");
    fs::write(&samples, "{\"example_id\":\"a\",\"n\":10,\"c\":3}\n{\"example_id\":\"b\",\"n\":10,\"c\":0}\n").unwrap();
    let report: Value =
        serde_json::from_str(&run_ok(&["eval", "pass-at-k", "--samples", samples.to_str().unwrap(), "--k", "1,2"])).unwrap();
    // a: 3/10 and 1 - C(7,2)/C(10,2) = 24/45; b: 0
    assert!((metric(&report, "pass@1") - 15.0).abs() < 1e-9);
    assert!((metric(&report, "pass@2") - 100.0 * 12.0 / 45.0).abs() < 1e-9);

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"example_id\":\"a\",\"n\":2,\"c\":3}\n").unwrap();
    let out = bin().args(["eval", "pass-at-k", "--samples", bad.to_str().unwrap()]).output().unwrap();
    error_line(&out);
}

#[test]
fn overlap_from_plain_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("s.txt"), dir.path().join("t.txt"));
    fs::write(&s, "list all files\n").unwrap();
    fs::write(&t, "list files\n").unwrap();
    let report: Value = serde_json::from_str(&run_ok(&[
        "eval", "overlap", "--sources", s.to_str().unwrap(), "--targets", t.to_str().unwrap(), "--n-max", "2",
    ]))
    .unwrap();
    assert_eq!(metric(&report, "overlap@1"), 100.0);
    assert_eq!(metric(&report, "overlap@2"), 0.0);
}

#[test]
fn diff_reports_deltas_and_unit_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    fs::write(
        &a,
        r#"{"metrics":[{"name":"cmd_acc","unit":"percent","value":40.0},{"name":"f1","unit":"fraction","value":0.5},{"name":"gone","unit":"count","value":3.0}],"rows":[]}"#,
    )
    .unwrap();
    fs::write(
        &b,
        r#"{"metrics":[{"name":"cmd_acc","unit":"percent","value":55.0},{"name":"f1","unit":"percent","value":60.0},{"name":"new","unit":"raw","value":1.0}],"rows":[]}"#,
    )
    .unwrap();
    let lines = json_lines(&run_ok(&["diff", a.to_str().unwrap(), b.to_str().unwrap()]));
    let names: Vec<&str> = lines.iter().map(|l| l["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["cmd_acc", "f1", "gone", "new"]);
    assert_eq!(lines[0]["delta"], 15.0);
    assert_eq!(lines[1]["comparable"], false);
    assert!(lines[1]["delta"].is_null());
    assert!(lines[2]["b"].is_null());
    assert!(lines[3]["a"].is_null());
}

#[test]
fn dense_search_from_cli() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("docs.tsv");
    fs::write(&emb, "embeddings dim=2 normalized=false\nx#0\t1 0\ny#0\t0 1\nz#0\t1 1\n").unwrap();
    let hits = json_lines(&run_ok(&[
        "dense", "search", "--embeddings", emb.to_str().unwrap(), "--query-vector", "1,0.9", "--k", "2",
    ]));
    let refs: Vec<&str> = hits.iter().map(|h| h["doc_ref"].as_str().unwrap()).collect();
    assert_eq!(refs, ["z#0", "x#0"]);

    let out = bin()
        .args(["dense", "search", "--embeddings", emb.to_str().unwrap(), "--query-vector", "1,0,0"])
        .output()
        .unwrap();
    error_line(&out);
}

#[test]
fn split_targets_need_three_values() {
    let dir = tempfile::tempdir().unwrap();
    let examples = dir.path().join("ex.jsonl");
    fs::write(&examples, "").unwrap();
    let out = bin()
        .args(["split", "--examples", examples.to_str().unwrap(), "--mode", "disjoint", "--seed", "1", "--targets", "6,2"])
        .args(["--out", dir.path().join("o.jsonl").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(error_line(&out)["error"].as_str().unwrap().contains("exactly three"));
}

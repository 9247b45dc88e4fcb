use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic")
}

fn condsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = condsim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "one summary line: {stdout}");
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_of(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap_or_default())
        .unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {stderr}"))
}

fn relationships(dir: &Path) -> PathBuf {
    let d = data_dir();
    let rels = dir.join("rels.jsonl");
    ok(&[
        "parse-captions",
        "--captions",
        s(&d.join("captions.jsonl")),
        "--concreteness",
        s(&d.join("concreteness.tsv")),
        "--out",
        s(&rels),
    ]);
    rels
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    v.sort();
    v
}

#[test]
fn mining_twice_gives_identical_files() {
    let tmp = TempDir::new().unwrap();
    let rels = relationships(tmp.path());
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    for out in [&a, &b] {
        ok(&["mine-triplets", "--relationships", s(&rels), "--n", "100", "--seed", "7", "--out", s(out)]);
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 100);

    let c = tmp.path().join("c.jsonl");
    ok(&["mine-triplets", "--relationships", s(&rels), "--n-triplets", "100", "--seed", "8", "--out", s(&c)]);
    assert_ne!(bytes, fs::read(&c).unwrap());
}

#[test]
fn evaluate_image_only_reports_four_tasks() {
    let tmp = TempDir::new().unwrap();
    let d = data_dir();
    let templates = tmp.path().join("templates.jsonl");
    ok(&["build-benchmark", "--annotations", s(&d), "--quota", "20", "--out", s(&templates)]);
    let report = tmp.path().join("report.json");
    let line = ok(&[
        "evaluate",
        "--templates",
        s(&templates),
        "--embeddings",
        s(&d.join("embeddings.gceb")),
        "--scorer",
        "image-only",
        "--out",
        s(&report),
    ]);
    assert!(line.starts_with("evaluate: image-only"), "{line}");
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let tasks: Vec<&str> = v["tasks"].as_array().unwrap().iter().map(|t| t["task"].as_str().unwrap()).collect();
    assert_eq!(tasks, ["focus_attribute", "change_attribute", "focus_object", "change_object"]);
    assert_eq!(v["ks"], serde_json::json!([1, 2, 3]));
    assert_eq!(v["scorer"], "image-only");
}

#[test]
fn builds_and_stub_embeddings_are_idempotent_and_inputs_untouched() {
    let tmp = TempDir::new().unwrap();
    let d = data_dir();
    let before = snapshot(&d);
    let rels = relationships(tmp.path());
    let triplets = tmp.path().join("t.jsonl");
    ok(&["mine-triplets", "--relationships", s(&rels), "--n", "200", "--out", s(&triplets)]);
    for name in ["x", "y"] {
        let dir = tmp.path().join(name);
        ok(&[
            "build-benchmark",
            "--annotations",
            s(&d),
            "--task",
            "change-object",
            "--quota",
            "10",
            "--seed",
            "3",
            "--out",
            s(&dir.join("templates.jsonl")),
        ]);
        ok(&[
            "manifest",
            "--templates",
            s(&dir.join("templates.jsonl")),
            "--triplets",
            s(&triplets),
            "--out",
            s(&dir.join("manifest.jsonl")),
        ]);
        ok(&[
            "stub-embed",
            "--manifest",
            s(&dir.join("manifest.jsonl")),
            "--dim",
            "16",
            "--out",
            s(&dir.join("emb.gceb")),
        ]);
        ok(&[
            "evaluate",
            "--templates",
            s(&dir.join("templates.jsonl")),
            "--embeddings",
            s(&dir.join("emb.gceb")),
            "--scorer",
            "image+text",
            "--out",
            s(&dir.join("report.json")),
        ]);
    }
    let x = snapshot(&tmp.path().join("x"));
    let y = snapshot(&tmp.path().join("y"));
    assert_eq!(x.len(), 5);
    for ((_, a), (_, b)) in x.iter().zip(&y) {
        assert_eq!(a, b);
    }
    assert_eq!(before, snapshot(&d));
}

#[test]
fn usage_errors_exit_2_with_json() {
    let out = condsim(&["mine-triplets", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["kind"], "usage");

    let out = condsim(&["evaluate", "--scorer", "image-only"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_of(&out);
    assert_eq!(e["stage"], "evaluate");
    assert!(e["error"].as_str().unwrap().starts_with("evaluate:"), "{e}");

    let out = condsim(&["nonsense"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let out = condsim(&[
        "mine-triplets",
        "--relationships",
        s(&tmp.path().join("missing.jsonl")),
        "--n",
        "5",
        "--out",
        s(&tmp.path().join("t.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_of(&out);
    assert_eq!((e["stage"].as_str(), e["kind"].as_str()), (Some("mine-triplets"), Some("data")));

    let bad = tmp.path().join("bad.jsonl");
    fs::write(&bad, "{\"image_id\": \"a\"}\n").unwrap();
    let out = condsim(&["mine-triplets", "--relationships", s(&bad), "--n", "5", "--out", s(&tmp.path().join("t.jsonl"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_of(&out)["error"].as_str().unwrap().contains("bad.jsonl:1"));
}

#[test]
fn diverging_training_exits_4() {
    let tmp = TempDir::new().unwrap();
    let d = data_dir();
    let rels = relationships(tmp.path());
    let triplets = tmp.path().join("t.jsonl");
    ok(&["mine-triplets", "--relationships", s(&rels), "--n", "64", "--out", s(&triplets)]);
    let out = condsim(&[
        "train",
        "--triplets",
        s(&triplets),
        "--embeddings",
        s(&d.join("embeddings.gceb")),
        "--batch-size",
        "32",
        "--steps",
        "20",
        "--lr",
        "1e300",
        "--out",
        s(&tmp.path().join("m.gcck")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_of(&out)["kind"], "numeric");
    assert!(!tmp.path().join("m.gcck").exists());
}

#[test]
fn config_file_supplies_settings_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let rels = relationships(tmp.path());
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"seed": 7, "n_triplets": 30, "paths": {"relationships": "rels.jsonl", "mine-triplets.out": "from_cfg.jsonl"}}"#,
    )
    .unwrap();
    ok(&["--config", s(&cfg), "mine-triplets"]);
    let from_cfg = fs::read(tmp.path().join("from_cfg.jsonl")).unwrap();
    let direct = tmp.path().join("direct.jsonl");
    ok(&["mine-triplets", "--relationships", s(&rels), "--n", "30", "--seed", "7", "--out", s(&direct)]);
    assert_eq!(from_cfg, fs::read(&direct).unwrap());

    let line = ok(&["mine-triplets", "--config", s(&cfg), "--n", "12", "--out", s(&direct)]);
    assert!(line.contains("12 of 12"), "{line}");

    fs::write(&cfg, r#"{"sede": 1}"#).unwrap();
    let out = condsim(&["--config", s(&cfg), "mine-triplets"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exhausted_mining_warns_and_keeps_partial_output() {
    let tmp = TempDir::new().unwrap();
    let rels = tmp.path().join("r.jsonl");
    fs::write(
        &rels,
        "{\"image_id\":\"img1\",\"subject\":\"horse\",\"predicate\":\"in\",\"object\":\"meadow\",\"concreteness\":5.0}\n\
         {\"image_id\":\"img2\",\"subject\":\"horse\",\"predicate\":\"on\",\"object\":\"canvas\",\"concreteness\":5.0}\n",
    )
    .unwrap();
    let out_path = tmp.path().join("t.jsonl");
    let out = condsim(&["mine-triplets", "--relationships", s(&rels), "--n", "5", "--out", s(&out_path)]);
    assert!(out.status.success());
    let warning = error_of(&out);
    assert_eq!(warning["warning"], "mining_exhausted");
    assert_eq!(warning["mined"], 2);
    assert_eq!(fs::read_to_string(&out_path).unwrap().lines().count(), 2);
}

/// parse-captions → mine-triplets → build-benchmark → train → evaluate ×4 →
/// report, on the bundled corpus and its pipeline config.
#[test]
fn full_pipeline_combiner_beats_image_plus_text() {
    let tmp = TempDir::new().unwrap();
    let t = tmp.path();
    let cfg = data_dir().join("pipeline.json");
    let cfg = s(&cfg);
    let p = |name: &str| t.join(name);
    ok(&["--config", cfg, "parse-captions", "--out", s(&p("rels.jsonl"))]);
    ok(&["--config", cfg, "mine-triplets", "--relationships", s(&p("rels.jsonl")), "--out", s(&p("trip.jsonl"))]);
    ok(&["--config", cfg, "build-benchmark", "--out", s(&p("templates.jsonl"))]);
    ok(&[
        "--config",
        cfg,
        "train",
        "--triplets",
        s(&p("trip.jsonl")),
        "--log",
        s(&p("log.csv")),
        "--out",
        s(&p("model.gcck")),
    ]);
    let mut reports = Vec::new();
    for scorer in ["image-only", "text-only", "image+text", "combiner"] {
        let out = p(&format!("{scorer}.json"));
        ok(&[
            "--config",
            cfg,
            "evaluate",
            "--templates",
            s(&p("templates.jsonl")),
            "--scorer",
            scorer,
            "--checkpoint",
            s(&p("model.gcck")),
            "--out",
            s(&out),
        ]);
        reports.push(out);
    }
    let mut args = vec!["report".to_string()];
    args.extend(reports.iter().map(|r| s(r).to_string()));
    args.extend(["--out".to_string(), s(&p("table.txt")).to_string()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let avg = |name: &str| -> f64 {
        let v: Value = serde_json::from_str(&fs::read_to_string(p(&format!("{name}.json"))).unwrap()).unwrap();
        v["average_r1"].as_f64().unwrap()
    };
    let table = fs::read_to_string(p("table.txt")).unwrap();
    println!("{table}");
    assert!(table.contains("Focus Attribute") && table.contains("combiner"));
    let log = fs::read_to_string(p("log.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr,val_r1\n"));
    assert!(
        avg("combiner") > avg("image+text"),
        "combiner {} vs image+text {}",
        avg("combiner"),
        avg("image+text")
    );
}

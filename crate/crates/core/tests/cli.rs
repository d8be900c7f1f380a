use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn reknet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reknet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is json")
}

const GOLDEN: &str = r#"{"id":"g1","passage":"W: Tom, how long have you worked here? M: Ten years.","question":"What do we learn from the conversation?","candidates":["The man has been working in a small company for a long time.","The man used to work for a big company, but now he works in a small one.","The man works in a small company, but he doesn't like it."],"label":0}"#;

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = reknet(&["gradcheck", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = reknet(&["ingest", "--out", "kb"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_file_is_an_operational_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = reknet(&["ingest", "--kb", "nope.tsv", "--out", "kb"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn span_variant_without_extractor_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.jsonl"), format!("{GOLDEN}\n")).unwrap();
    fs::write(dir.path().join("kb.tsv"), "").unwrap();
    let out = reknet(
        &[
            "train",
            "--dataset",
            "d.jsonl",
            "--dev",
            "d.jsonl",
            "--kb",
            "kb.tsv",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn empty_kb_ingests_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("kb.tsv"), "").unwrap();
    let s = summary(&reknet(&["ingest", "--kb", "kb.tsv", "--out", "kb"], dir.path()));
    assert_eq!(s["stored"], 0);
    assert_eq!(s["quadruples"], 0);
}

#[test]
fn ingest_drops_unretained_relations() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("kb.tsv"),
        "doctor\tCapableOf\thelp\t4.4\ndoctor\tExternalURL\thttp\t1.0\ncup\tAtLocation\ttable\t0.01\n",
    )
    .unwrap();
    let s = summary(&reknet(&["ingest", "--kb", "kb.tsv", "--out", "kb"], dir.path()));
    assert_eq!(s["stored"], 2);
}

#[test]
fn enrich_golden_example() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("d.jsonl"), format!("{GOLDEN}\n")).unwrap();
    let s = summary(&reknet(
        &["enrich", "--dataset", "d.jsonl", "--out", "e.jsonl"],
        dir.path(),
    ));
    assert_eq!(s["enriched"], 1);
    let row: Value = serde_json::from_str(fs::read_to_string(dir.path().join("e.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(
        row["enriched_question"],
        "The man work in a small company. What do we learn from the conversation?"
    );
    assert_eq!(row["prefix_tokens"].as_array().unwrap().len(), 7);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let s = summary(&reknet(&["gradcheck", "--seed", "7"], dir.path()));
    assert_eq!(s["passed"], true);
}

#[test]
fn retrieve_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("gen.json"),
        r#"{"examples": 40, "span_train": 5, "span_heldout": 5}"#,
    )
    .unwrap();
    summary(&reknet(&["gen-synthetic", "--config", "gen.json", "--out", "data"], p));
    for out in ["a.jsonl", "b.jsonl"] {
        let s = summary(&reknet(
            &[
                "retrieve",
                "--dataset",
                "data/dev.jsonl",
                "--kb",
                "data/kb.tsv",
                "--out",
                out,
            ],
            p,
        ));
        assert_eq!(s["examples"], 4);
    }
    assert_eq!(
        fs::read(p.join("a.jsonl")).unwrap(),
        fs::read(p.join("b.jsonl")).unwrap()
    );
}

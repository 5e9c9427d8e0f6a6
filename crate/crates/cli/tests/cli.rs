use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

fn phrasecap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phrasecap"))
        .args(args)
        .output()
        .expect("binary runs")
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Workspace {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    /// Runs with the fixture config and artifact paths inside the workspace.
    fn run(&self, args: &[&str]) -> Output {
        let config = fixture().join("config.toml");
        let (model, lm, vocab) = (
            self.path("model.bin"),
            self.path("lm.json"),
            self.path("vocab.json"),
        );
        let mut all = vec![
            "--config",
            config.to_str().unwrap(),
            "--model",
            &model,
            "--lm",
            &lm,
            "--vocab",
            &vocab,
        ];
        all.extend_from_slice(args);
        phrasecap(&all)
    }

    fn train(&self) {
        let out = self.run(&["--out", &self.path("trace.json"), "train"]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

fn stdout_json_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn missing_captions_file_is_an_input_error() {
    let out = phrasecap(&["--captions", "/definitely/not/here.jsonl", "stats"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/definitely/not/here.jsonl"), "{err}");
}

#[test]
fn stats_on_empty_corpus_succeeds() {
    let ws = Workspace::new();
    let empty = ws.path("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = phrasecap(&["--captions", &empty, "stats"]);
    assert_eq!(out.status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["sentences"], 0);
    assert_eq!(stats["structures"].as_array().unwrap().len(), 0);
}

#[test]
fn stats_reports_structures_for_fixture() {
    let out = Workspace::new().run(&["stats"]);
    assert_eq!(out.status.code(), Some(0));
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["sentences"], 15);
    let top = &stats["structures"][0];
    assert_eq!(
        top["pattern"],
        serde_json::json!(["NP", "VP", "NP", "PP", "NP"])
    );
    assert_eq!(top["count"], 9);
}

#[test]
fn malformed_config_is_rejected() {
    let ws = Workspace::new();
    let cfg = ws.path("bad.toml");
    std::fs::write(&cfg, "[decode]\nbeam_width = 0\n").unwrap();
    let out = phrasecap(&["--config", &cfg, "stats"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beam_width"));
}

#[test]
fn build_vocab_threshold_flag_overrides_config() {
    let ws = Workspace::new();
    let out = ws.run(&[
        "--out",
        &ws.path("v5.json"),
        "build-vocab",
        "--threshold",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("v5.json")).unwrap()).unwrap();
    assert_eq!(v["threshold"], 5);
    for p in v["phrases"].as_array().unwrap() {
        assert!(p["count"].as_u64().unwrap() >= 5);
    }
    assert!(String::from_utf8_lossy(&out.stderr).contains("total"));
}

#[test]
fn same_seed_training_is_byte_identical() {
    let a = Workspace::new();
    let b = Workspace::new();
    a.train();
    b.train();
    for f in ["model.bin", "lm.json", "vocab.json", "trace.json"] {
        assert_eq!(
            std::fs::read(a.path(f)).unwrap(),
            std::fs::read(b.path(f)).unwrap(),
            "{f} differs"
        );
    }
    let c = Workspace::new();
    let out = c.run(&["--seed", "99", "--out", &c.path("trace.json"), "train"]);
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(
        std::fs::read(a.path("model.bin")).unwrap(),
        std::fs::read(c.path("model.bin")).unwrap()
    );
}

#[test]
fn generate_keeps_request_order_and_flags_unknown_images() {
    let ws = Workspace::new();
    ws.train();
    let out = ws.run(&["generate", "img3", "missing", "img1"]);
    assert_eq!(out.status.code(), Some(0));
    let lines = stdout_json_lines(&out);
    let ids: Vec<&str> = lines
        .iter()
        .map(|l| l["image_id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["img3", "missing", "img1"]);
    assert!(lines[1]["text"].is_null());
    assert!(lines[1]["reason"].as_str().unwrap().contains("unknown"));
    assert!(lines[0]["text"].as_str().unwrap().ends_with(" ."));

    let out = ws.run(&["generate", "missing"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_verbose_includes_ranking() {
    let ws = Workspace::new();
    ws.train();
    let out = ws.run(&["--verbose", "generate", "img2"]);
    assert_eq!(out.status.code(), Some(0));
    let line = &stdout_json_lines(&out)[0];
    let ranking = line["ranking"].as_array().unwrap();
    assert!(!ranking.is_empty());
    assert_eq!(ranking[0]["text"], line["text"]);
    let scores: Vec<f64> = ranking
        .iter()
        .map(|r| r["match_score"].as_f64().unwrap())
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn generate_refuses_model_from_other_vocabulary() {
    let ws = Workspace::new();
    ws.train();
    let other = ws.path("other_vocab.json");
    let out = ws.run(&["--out", &other, "build-vocab", "--threshold", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let out = ws.run(&["--vocab", &other, "generate", "img1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_phrases_respects_caps() {
    let ws = Workspace::new();
    ws.train();
    let out = ws.run(&["predict-phrases", "img1"]);
    assert_eq!(out.status.code(), Some(0));
    let line = &stdout_json_lines(&out)[0];
    let sel = &line["selection"];
    assert!(sel["np"].as_array().unwrap().len() <= 6);
    assert!(sel["vp"].as_array().unwrap().len() <= 3);
    assert!(sel["pp"].as_array().unwrap().len() <= 3);
    assert_eq!(
        line["phrases"].as_array().unwrap().len(),
        sel["np"].as_array().unwrap().len()
            + sel["vp"].as_array().unwrap().len()
            + sel["pp"].as_array().unwrap().len()
    );
}

#[test]
fn evaluate_without_references_is_an_input_error() {
    let ws = Workspace::new();
    let cands = ws.path("c.jsonl");
    std::fs::write(&cands, "{\"image_id\":\"img1\",\"text\":\"a dog .\"}\n").unwrap();
    let captions = fixture().join("captions.jsonl");
    let out = phrasecap(&[
        "--captions",
        captions.to_str().unwrap(),
        "evaluate",
        "--candidates",
        &cands,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("references"));
}

#[test]
fn evaluate_reports_all_blocks() {
    let ws = Workspace::new();
    let cands = ws.path("c.jsonl");
    std::fs::write(
        &cands,
        "{\"image_id\":\"img1\",\"text\":\"a dog chases a ball .\"}\n{\"image_id\":\"img2\",\"text\":\"a cat watches the sofa .\"}\n",
    )
    .unwrap();
    let out = ws.run(&["evaluate", "--candidates", &cands]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["recall"].is_null());
    assert_eq!(report["bleu"]["candidate_length"], 12);
    assert_eq!(report["novelty"]["generated"], 2);
    assert_eq!(report["novelty"]["in_training"], 1);
    assert_eq!(report["human_agreement"]["images"], 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("BLEU"));
}

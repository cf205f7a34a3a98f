mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use musilingo::data::{self, Split, Version};
use musilingo::model::CAPTION_QUESTION;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_musilingo")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Two clips and their captions plus a tiny pre-trained checkpoint.
fn fixture(dir: &Path) -> (String, String) {
    let clips: Vec<_> = (0..2).map(|i| waveform_clip(&format!("c{i}"), i, 256, 256)).collect();
    data::save_dataset(&clips, &dir.join("clips.jsonl")).unwrap();
    let caps: Vec<_> = (0..2).map(|i| caption(&format!("c{i}"), OVERFIT_CAPTIONS[i as usize])).collect();
    data::save_dataset(&caps, &dir.join("captions.jsonl")).unwrap();
    let ckpt = dir.join("pre.ckpt");
    let o = run(&[
        "pretrain",
        "--clips",
        &s(&dir.join("clips.jsonl")),
        "--captions",
        &s(&dir.join("captions.jsonl")),
        "--out",
        &s(&ckpt),
        "--set",
        "trainer.steps=3",
    ]);
    stdout(&o);
    (s(&dir.join("clips.jsonl")), s(&ckpt))
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_one() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["pretrain", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["pretrain", "--set", "trainer.lr=abc", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let clips = dir.path().join("clips.jsonl");
    data::save_dataset(&[waveform_clip("c0", 0, 64, 64)], &clips).unwrap();
    let o = run(&["caption", "--checkpoint", &s(&bad), "--clips", &s(&clips), "--clip-id", "c0"]);
    assert_eq!(o.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn caption_equals_infer_with_captioning_question_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (clips, ckpt) = fixture(dir.path());
    let base = ["--checkpoint", &ckpt, "--clips", &clips, "--clip-id", "c1", "--max-new", "16"];
    let cap = stdout(&run(&[&["caption"], &base[..]].concat()));
    let inf = stdout(&run(&[&["infer"], &base[..], &["--question", CAPTION_QUESTION]].concat()));
    assert_eq!(cap, inf);
    assert_eq!(cap, stdout(&run(&[&["caption"], &base[..]].concat())));
}

#[test]
fn checkpoint_from_another_config_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let (clips, ckpt) = fixture(dir.path());
    let args = ["caption", "--checkpoint", &ckpt, "--clips", &clips, "--clip-id", "c0", "--max-new", "4"];
    let o = run(&[&args[..], &["--set", "lm.dim=48"]].concat());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
}

#[test]
fn datagen_then_audit_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let caps: Vec<_> = (0..40).map(|i| caption(&format!("c{i}"), &format!("A slow piano piece number {i}."))).collect();
    let cap_path = dir.path().join("captions.jsonl");
    data::save_dataset(&caps, &cap_path).unwrap();
    let qa_path = dir.path().join("qa.jsonl");
    stdout(&run(&["datagen", "--captions", &s(&cap_path), "--version", "v2", "--out", &s(&qa_path)]));
    let pairs = data::load_qa(&qa_path).unwrap();
    assert!(!pairs.is_empty());
    assert!(dir.path().join("qa.jsonl.report.json").exists());

    let sheet = dir.path().join("sheet.jsonl");
    stdout(&run(&["audit-sample", "--qa", &s(&qa_path), "--fraction", "0.5", "--seed", "3", "--out", &s(&sheet)]));
    let text = std::fs::read_to_string(&sheet).unwrap();
    assert_eq!(text.lines().count(), pairs.len() / 2);

    // an untouched sheet has nothing to summarize
    assert_eq!(run(&["audit-summarize", "--sheet", &s(&sheet)]).status.code(), Some(2));

    let filled: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            for k in ["clarity", "feasibility", "practicality"] {
                v[k] = "yes".into();
            }
            v["output_quality"] = "pass".into();
            format!("{v}\n")
        })
        .collect();
    std::fs::write(&sheet, filled).unwrap();
    let summary = stdout(&run(&["audit-summarize", "--sheet", &s(&sheet)]));
    assert!(summary.contains("100.0"), "{summary}");
}

#[test]
fn eval_scores_identical_predictions_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = vec![
        qa("c0", "What is playing?", "A calm piano.", Version::Short, Split::Test),
        qa("c1", "What is playing?", "Loud rock drums.", Version::Short, Split::Test),
    ];
    let refs = dir.path().join("ref.jsonl");
    data::save_dataset(&pairs, &refs).unwrap();
    let preds = dir.path().join("pred.jsonl");
    let lines: String = pairs
        .iter()
        .map(|p| format!("{}\n", serde_json::json!({"clip_id": p.clip_id, "question": p.question, "prediction": p.answer})))
        .collect();
    std::fs::write(&preds, lines).unwrap();
    let out = dir.path().join("report.json");
    stdout(&run(&["eval", "--pred", &s(&preds), "--ref", &s(&refs), "--out", &s(&out)]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let text = report.to_string();
    assert!(text.contains("100"), "{text}");
    assert!(dir.path().join("report.json.txt").exists());
}

use std::path::Path;
use std::process::{Command, Output};

use dstream_core::config::ModelConfig;

fn dstream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dstream")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(dstream(&["--help"]).status.code(), Some(0));
    assert_eq!(dstream(&[]).status.code(), Some(2));
    assert_eq!(dstream(&["transcribe"]).status.code(), Some(2));
    assert_eq!(dstream(&["eval", "--checkpoint", "x", "--taus", "abc"]).status.code(), Some(2));
    let o = dstream(&["transcribe", "/nonexistent.wav", "--checkpoint", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    assert_eq!(dstream(&["targets", "--words", "nosuchword:300"]).status.code(), Some(3));
}

#[test]
fn targets_inline_words() {
    let w = &ModelConfig::tiny().vocab.words;
    let spec = format!("{}:300,{}:420", w[0], w[1]);
    let a = stdout(&dstream(&["targets", "--words", &spec, "--delay-ms", "240"]));
    assert_eq!(a, stdout(&dstream(&["targets", "--words", &spec, "--delay-ms", "240"])));
    let ids: Vec<u32> = a.split_whitespace().map(|s| s.parse().unwrap()).collect();
    // word 0 is ready at ceil(540/80)-1 = 6
    assert!(ids[..6].iter().all(|&i| i == ids[0]));
    assert_ne!(ids[6], ids[0]);
    let off = stdout(&dstream(&["targets", "--words", &spec, "--delay-ms", "240", "--no-grouping"]));
    assert!(off.split_whitespace().count() >= ids.len());
    let debug = stdout(&dstream(&["targets", "--words", &spec, "--debug"]));
    assert!(debug.contains("[W]") && debug.contains("[P]"));
}

#[test]
fn synth_train_transcribe_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ckpt");
    stdout(&dstream(&["synth", "--out", p(&data), "--count", "3"]));
    assert!(data.join("utt0002.wav").exists());
    let labels = std::fs::read_to_string(data.join("labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 3);

    let t = stdout(&dstream(&["targets", "--labels", p(&data.join("labels.jsonl")), "--index", "1"]));
    assert!(!t.trim().is_empty());

    stdout(&dstream(&["train", "--out", p(&ckpt), "--steps", "3", "--utterances", "6"]));
    assert!(ckpt.join("manifest.json").exists());
    let metrics = std::fs::read_to_string(ckpt.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let wav = data.join("utt0000.wav");
    let run = |pad: &str| {
        let out = stdout(&dstream(&["transcribe", p(&wav), "--checkpoint", p(&ckpt), "--json", "--left-pad-frames", pad]));
        serde_json::from_str::<serde_json::Value>(&out).unwrap()
    };
    let a = run("0");
    assert_eq!(a, run("0"));
    assert_eq!(a["delay_ms"], 480);
    let pad = run("4");
    assert_eq!(pad["stream"].as_array().unwrap()[0][0], 4);

    let report = dir.path().join("report.jsonl");
    let eval = |r: &Path| {
        let args = ["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--taus", "240,480", "--pads", "0,2", "--report", p(r)];
        stdout(&dstream(&args))
    };
    let table = eval(&report);
    assert!(table.contains("240") && table.contains("480"));
    let first = std::fs::read_to_string(&report).unwrap();
    assert_eq!(first.lines().count(), 4);
    eval(&report);
    assert_eq!(first, std::fs::read_to_string(&report).unwrap());
}

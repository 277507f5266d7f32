use std::path::Path;
use std::process::{Command, Output};

use ofrnn::{read_dataset, read_subject, write_subject};
use ofrnn_core::pipeline::data::{cohort_params, phantom_subject};
use ofrnn_core::synth::PhantomParams;

fn ofrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofrnn")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FAST: &str = r#"{
  "window": 3,
  "flow": {"beta": 0.0, "outer_iters": 2, "solver_iters": 5},
  "lstm": {"layers": 1, "hidden": 4, "epochs": 1, "batch_size": 16},
  "sae": {"hidden": [6, 4], "pretrain_epochs": 1, "finetune_epochs": 2, "batch_size": 32},
  "samples_per_subject": 60,
  "lstm_samples_per_subject": 10
}"#;

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = cohort_params(&PhantomParams { frames: 4, ..Default::default() }, 1, 5);
    let s = phantom_subject("case_a", &params).unwrap();
    let path = dir.path().join("case_a");
    write_subject(&s, &path).unwrap();
    assert!(path.join("frames/frame_03.pgm").is_file());
    assert!(path.join("flows/flow_02.flo").is_file());
    let back = read_subject(&path).unwrap();
    assert_eq!(back.id, "case_a");
    assert_eq!((back.mask.clone(), back.myocardium.clone()), (s.mask.clone(), s.myocardium.clone()));
    assert_eq!((back.slice_level, back.center, back.reference_angle), (s.slice_level, s.center, s.reference_angle));
    assert_eq!(back.sequence.len(), 4);
    let (lo, hi) = back.sequence.frames().iter().fold((1.0f64, 0.0f64), |(a, b), f| {
        let (c, d) = f.min_max();
        (a.min(c), b.max(d))
    });
    assert_eq!((lo, hi), (0.0, 1.0));
    let gt = back.gt_flows.unwrap();
    let orig = s.gt_flows.unwrap();
    for (a, b) in gt.flows().iter().zip(orig.flows()) {
        assert!(a.u().iter().zip(b.u()).all(|(x, y)| (x - y).abs() < 1e-5));
    }
    assert_eq!(read_dataset(dir.path()).unwrap().len(), 1);
}

#[test]
fn cli_end_to_end_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = root.join("fast.json");
    std::fs::write(&cfg, FAST).unwrap();

    let out = ofrnn(&["synth", "--out", p(&data), "--count", "3", "--frames", "5", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("phantom_02/meta.json").is_file());

    let full = root.join("full");
    assert!(ofrnn(&["synth", "--out", p(&full), "--count", "1", "--frames", "4", "--uncropped"]).status.success());
    let out = ofrnn(&["localize", p(&full.join("phantom_00"))]);
    assert!(out.status.success());
    let b: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((b["w"].as_u64(), b["h"].as_u64()), (Some(64), Some(64)));

    let flows = root.join("flows");
    let out = ofrnn(&["--config", p(&cfg), "flow", p(&data.join("phantom_00")), "--out", p(&flows)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(flows.join("flow_03.flo").is_file() && !flows.join("flow_04.flo").exists());

    let out = ofrnn(&["--config", p(&cfg), "benchmark-flow", p(&data.join("phantom_00"))]);
    assert!(out.status.success());
    let bench: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(bench["density"], 1.0);

    let model = root.join("model.json");
    let args = ["--config", p(&cfg), "--seed", "4", "train", p(&data), "--out", p(&model)];
    assert!(ofrnn(&args).status.success());
    let first = std::fs::read(&model).unwrap();
    assert!(ofrnn(&args).status.success());
    assert_eq!(std::fs::read(&model).unwrap(), first);

    let pred = root.join("pred");
    let out = ofrnn(&["infer", p(&data.join("phantom_01")), "--model", p(&model), "--out", p(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pred.join("mask.pgm").is_file());
    let scores = std::fs::read_to_string(pred.join("scores.csv")).unwrap();
    assert!(scores.starts_with("x,y,score\n") && scores.lines().count() > 100);

    let ev = root.join("eval");
    assert!(ofrnn(&["eval", p(&data), "--model", p(&model), "--out", p(&ev)]).status.success());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().is_some());
    assert!(std::fs::read_to_string(ev.join("roc.csv")).unwrap().starts_with("fpr,tpr\n0,0\n"));

    let out = ofrnn(&["--config", p(&cfg), "--mode", "global", "ablate", p(&data), "--holdout", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ab: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(ab["local"].is_object() && ab["global"].is_object() && ab["combined"].is_object());

    let out = ofrnn(&["--config", p(&cfg), "patch-sweep", p(&data), "--sizes", "3,5", "--holdout", "1"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().next(), Some("size,accuracy,seconds"));
    assert_eq!(csv.lines().count(), 3);

    assert_eq!(ofrnn(&["--config", p(&cfg), "patch-sweep", p(&data), "--sizes", "4", "--holdout", "1"]).status.code(), Some(2));
    assert_eq!(ofrnn(&["train", p(&root.join("nowhere")), "--out", p(&model)]).status.code(), Some(2));
    assert_eq!(ofrnn(&["--mode", "both", "localize", "x"]).status.code(), Some(2));
    assert_eq!(ofrnn(&["ablate", p(&data), "--folds", "5"]).status.code(), Some(2));

    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"version": 7}"#).unwrap();
    let out = ofrnn(&["infer", p(&data.join("phantom_01")), "--model", p(&bad), "--out", p(&pred)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported model version 7"));

    let diverge = root.join("diverge.json");
    std::fs::write(&diverge, FAST.replace(r#""finetune_epochs": 2,"#, r#""finetune_epochs": 2, "optimizer": {"learning_rate": 1e300},"#)).unwrap();
    let out = ofrnn(&["--config", p(&diverge), "train", p(&data), "--out", p(&root.join("m2.json"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

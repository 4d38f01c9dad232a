use std::path::Path;
use std::process::Command;

use usbone::{run, EXIT_ARGUMENT, EXIT_IO, EXIT_OK};

fn usbone(args: &[&str]) -> i32 {
    let mut argv = vec!["usbone"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small network and few pairs so a default-length run finishes quickly.
const TINY_CONFIG: &str = r#"{
  "tga": {"attenuation_a": 0.16},
  "bonemap": {"scales": [2.0, 4.0, 8.0]},
  "network": {"widths": [2, 2, 4, 4, 4, 4], "keypoints": 2},
  "train": {"batch_size": 2, "train_pairs": 2, "val_pairs": 2}
}"#;

#[test]
fn unknown_flag_or_subcommand_is_a_usage_error() {
    let bin = env!("CARGO_BIN_EXE_usbone");
    for args in [&["eval", "--bogus"][..], &["frobnicate"][..], &[][..]] {
        let out = Command::new(bin).args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("Usage"), "{err}");
        assert!(out.stdout.is_empty());
    }
    let help = Command::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn missing_files_exit_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(usbone(&["eval", "--pred", p(&missing), "--truth", p(&missing)]), EXIT_IO);
    assert_eq!(usbone(&["tga", "--in", p(&missing), "--out", p(&dir.path().join("o.png"))]), EXIT_IO);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    let out = dir.path().join("ph");
    assert_eq!(usbone(&["phantom", "--out", p(&out), "--config", p(&cfg)]), EXIT_IO);
}

#[test]
fn invalid_values_exit_with_argument_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ph");
    assert_eq!(usbone(&["phantom", "--out", p(&out), "--size", "4"]), EXIT_ARGUMENT);
    assert_eq!(usbone(&["phantom", "--out", p(&out), "--frames", "many"]), EXIT_ARGUMENT);
}

#[test]
fn phantom_eval_overlay_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("ph");
    assert_eq!(usbone(&["phantom", "--out", p(&ph), "--size", "32", "--frames", "4", "--seed", "5"]), EXIT_OK);
    for i in 0..4 {
        assert!(ph.join(format!("frame_{i:04}.png")).exists());
    }
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ph.join("truth.json")).unwrap()).unwrap();
    let rois = truth["rois"].as_array().unwrap();
    assert_eq!(rois.len(), 4);

    // One keypoint at each ROI's top-left corner, one far outside.
    let mut kp = serde_json::Map::new();
    for (i, roi) in rois.iter().enumerate() {
        let (t, l) = (roi["top"].as_f64().unwrap(), roi["left"].as_f64().unwrap());
        let outside = if i % 2 == 0 { [t, l] } else { [0.0, 0.0] };
        kp.insert(i.to_string(), serde_json::json!([outside]));
    }
    let pred = dir.path().join("kp.json");
    std::fs::write(&pred, serde_json::Value::Object(kp).to_string()).unwrap();
    let report_path = dir.path().join("report.json");
    let bin = env!("CARGO_BIN_EXE_usbone");
    let out = Command::new(bin)
        .args(["eval", "--pred", p(&pred), "--truth", p(&ph.join("truth.json")), "--out", p(&report_path)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(printed, saved);
    assert_eq!(printed["hit_rate"].as_f64(), Some(0.5));
    assert_eq!(printed["frames_evaluated"].as_u64(), Some(4));
    assert_eq!(printed["records"].as_array().unwrap().len(), 4);

    assert_eq!(usbone(&["eval", "--pred", p(&pred), "--truth", p(&ph.join("truth.json")), "--top-n", "2"]), EXIT_ARGUMENT);

    let ov = dir.path().join("ov");
    let truth_path = ph.join("truth.json");
    assert_eq!(
        usbone(&["overlay", "--data", p(&ph), "--pred", p(&pred), "--truth", p(&truth_path), "--out", p(&ov)]),
        EXIT_OK
    );
    assert!(ov.join("overlay_0003.png").exists());
}

#[test]
fn phantom_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (d, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        assert_eq!(usbone(&["phantom", "--out", p(d), "--size", "32", "--frames", "3", "--seed", seed]), EXIT_OK);
    }
    let read = |d: &Path| std::fs::read(d.join("frame_0001.png")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn tga_and_bonemap_write_per_frame_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("ph");
    assert_eq!(usbone(&["phantom", "--out", p(&ph), "--size", "32", "--frames", "3"]), EXIT_OK);
    let tga = dir.path().join("tga");
    assert_eq!(usbone(&["tga", "--in", p(&ph), "--out", p(&tga), "--a", "0.08"]), EXIT_OK);
    assert!(tga.join("frame_0002.png").exists());
    let single = dir.path().join("one.png");
    assert_eq!(usbone(&["tga", "--in", p(&ph.join("frame_0000.png")), "--out", p(&single)]), EXIT_OK);
    let dir_out = usbone_core::io::load_frame_native(tga.join("frame_0000.png")).unwrap();
    assert_eq!(usbone_core::io::load_frame_native(&single).unwrap().dims(), dir_out.dims());

    let bm = dir.path().join("bm");
    assert_eq!(usbone(&["bonemap", "--in", p(&ph), "--out", p(&bm), "--scales", "4,8", "--a", "0.08"]), EXIT_OK);
    for s in 0..2 {
        for ext in ["usf", "png"] {
            assert!(bm.join(format!("scale_{s}/frame_0002.{ext}")).exists());
        }
    }
    assert!(!bm.join("scale_2").exists());
    let grid = usbone_core::io::load_usf(bm.join("scale_1/frame_0000.usf")).unwrap();
    assert_eq!(grid.dims(), (32, 32));
    assert!(grid.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn default_training_run_logs_one_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let ph = dir.path().join("ph");
    assert_eq!(usbone(&["phantom", "--out", p(&ph), "--size", "16", "--frames", "8", "--config", p(&cfg)]), EXIT_OK);
    let run_dir = dir.path().join("run");
    assert_eq!(usbone(&["train", "--data", p(&ph), "--out", p(&run_dir), "--config", p(&cfg), "--seed", "1"]), EXIT_OK);
    assert!(run_dir.join("checkpoint.ustp").exists());
    let log = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 100);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["epoch"].as_u64(), Some(99));

    let kp = dir.path().join("kp.json");
    let ckpt = run_dir.join("checkpoint.ustp");
    let infer = ["infer", "--checkpoint", p(&ckpt), "--data", p(&ph), "--out", p(&kp), "--config", p(&cfg)];
    assert_eq!(usbone(&infer), EXIT_OK);
    let pred: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&kp).unwrap()).unwrap();
    let frames = pred.as_object().unwrap();
    assert_eq!(frames.len(), 8);
    for pts in frames.values() {
        let pts = pts.as_array().unwrap();
        assert_eq!(pts.len(), 2);
        for pt in pts {
            for v in pt.as_array().unwrap() {
                assert!((0.0..=15.0).contains(&v.as_f64().unwrap()));
            }
        }
    }
    let first = std::fs::read(&kp).unwrap();
    assert_eq!(usbone(&infer), EXIT_OK);
    assert_eq!(std::fs::read(&kp).unwrap(), first);

    let truth = ph.join("truth.json");
    assert_eq!(usbone(&["eval", "--pred", p(&kp), "--truth", p(&truth)]), EXIT_OK);

    // A checkpoint for a different architecture is rejected as a format error.
    let wrong = dir.path().join("wrong.json");
    std::fs::write(&wrong, TINY_CONFIG.replace("\"keypoints\": 2", "\"keypoints\": 3")).unwrap();
    let infer_wrong = ["infer", "--checkpoint", p(&ckpt), "--data", p(&ph), "--out", p(&kp), "--config", p(&wrong)];
    assert_ne!(usbone(&infer_wrong), EXIT_OK);
}

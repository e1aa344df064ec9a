use std::path::Path;
use std::process::{Command, Output};

use hhpnet::io::{write_frames, FrameRecord, HeadRecord};
use hhpnet::laeo::{HeadInstance, LaeoFrame};
use hhpnet::synthetic::{generate_sample, NoiseModel};
use hhpnet::{EulerPose, PoseEstimate};
use rand::SeedableRng;
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hhpnet"))
        .args(args)
        .env_remove("HHPNET_SEED")
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("spawn hhpnet")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

/// Small train/val split in `dir`.
fn split(dir: &TempDir) -> (String, String) {
    let (tr, va) = (p(dir, "train.jsonl"), p(dir, "val.jsonl"));
    ok(&["synth", "--n", "200", "--seed", "1", "--out", &tr]);
    ok(&["synth", "--n", "60", "--seed", "2", "--out", &va]);
    (tr, va)
}

fn train(tr: &str, va: &str, out: &str, extra: &[&str]) {
    let mut args = vec![
        "train", "--data", tr, "--val", va, "--epochs", "2", "--alpha", "0.2", "--quiet", "--out",
        out,
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn read(path: &str) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn synth_train_eval_infer() {
    let dir = TempDir::new().unwrap();
    let (tr, va) = split(&dir);
    assert_eq!(String::from_utf8(read(&tr)).unwrap().lines().count(), 200);
    let model = p(&dir, "m.bin");
    train(&tr, &va, &model, &[]);
    let history = String::from_utf8(read(&format!("{model}.history.jsonl"))).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert_eq!(history.matches("\"best\":true").count(), 1);

    let report = p(&dir, "report.json");
    ok(&["eval", "--model", &model, "--data", &va, "--report", &report]);
    let v: Value = serde_json::from_slice(&read(&report)).unwrap();
    for k in ["yaw", "pitch", "roll", "overall"] {
        assert!(v["mae"][k].as_f64().unwrap().is_finite());
    }
    let corr = v["uncertainty_correlations"].as_object().unwrap();
    assert_eq!(corr.len(), 3);
    assert!(v["keypoint_groups"].as_array().is_some());

    let out = ok(&["infer", "--model", &model, "--data", &va]);
    let lines: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 60);
    assert_eq!(lines[0]["id"], "synth-000000");
    assert_eq!(lines[0]["pose"].as_array().unwrap().len(), 3);
    assert_eq!(lines[0]["log_var"].as_array().unwrap().len(), 3);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (tr, va) = split(&dir);
    let (a, b) = (p(&dir, "a.bin"), p(&dir, "b.bin"));
    train(&tr, &va, &a, &["--seed", "5"]);
    train(&tr, &va, &b, &["--seed", "5"]);
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&format!("{a}.history.jsonl")), read(&format!("{b}.history.jsonl")));
    let r1 = ok(&["eval", "--model", &a, "--data", &va]).stdout;
    let r2 = ok(&["eval", "--model", &a, "--data", &va]).stdout;
    assert_eq!(r1, r2);

    let c = p(&dir, "c.bin");
    train(&tr, &va, &c, &["--seed", "6"]);
    assert_ne!(read(&a), read(&c));
}

#[test]
fn seed_comes_from_environment() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (p(&dir, "a.jsonl"), p(&dir, "b.jsonl"), p(&dir, "c.jsonl"));
    let synth = |out: &str, seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_hhpnet"));
        cmd.args(["synth", "--n", "5", "--out", out]).env_remove("HHPNET_SEED");
        if let Some(s) = seed {
            cmd.env("HHPNET_SEED", s);
        }
        assert!(cmd.status().unwrap().success());
    };
    synth(&a, Some("9"));
    ok(&["synth", "--n", "5", "--seed", "9", "--out", &b]);
    synth(&c, None);
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn losses_give_distinct_models_and_alpha_shrinks_file() {
    let dir = TempDir::new().unwrap();
    let (tr, va) = split(&dir);
    let (unc, mse, comb) = (p(&dir, "unc.bin"), p(&dir, "mse.bin"), p(&dir, "comb.bin"));
    train(&tr, &va, &unc, &["--loss", "unc"]);
    train(&tr, &va, &mse, &["--loss", "mse"]);
    train(&tr, &va, &comb, &["--loss", "comb"]);
    assert_ne!(read(&unc), read(&mse));
    assert_ne!(read(&mse), read(&comb));

    let big = p(&dir, "big.bin");
    ok(&[
        "train", "--data", &tr, "--val", &va, "--epochs", "1", "--alpha", "1", "--quiet", "--out",
        &big,
    ]);
    let big_len = read(&big).len();
    assert!(big_len < 500_000, "{big_len}");
    let ratio = big_len as f64 / read(&unc).len() as f64;
    assert!((4.0..=16.0).contains(&ratio), "{ratio}");
}

#[test]
fn malformed_record_reports_line() {
    let dir = TempDir::new().unwrap();
    let (tr, va) = split(&dir);
    let text = String::from_utf8(read(&tr)).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = r#"{"id":"bad","keypoints":[[0,0,1]],"pose":[0,0,0]}"#;
    let broken = p(&dir, "broken.jsonl");
    std::fs::write(&broken, lines.join("\n")).unwrap();
    let out = run(&[
        "train", "--data", &broken, "--val", &va, "--epochs", "1", "--out", &p(&dir, "m.bin"),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("broken.jsonl:4:"), "{err}");
    assert!(!dir.path().join("m.bin").exists());
}

#[test]
fn eval_needs_ground_truth_but_infer_does_not() {
    let dir = TempDir::new().unwrap();
    let (tr, va) = split(&dir);
    let model = p(&dir, "m.bin");
    train(&tr, &va, &model, &[]);
    let text = String::from_utf8(read(&va)).unwrap();
    let unlabelled: String = text
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("pose");
            format!("{v}\n")
        })
        .collect();
    let data = p(&dir, "unlabelled.jsonl");
    std::fs::write(&data, unlabelled).unwrap();
    assert!(!run(&["eval", "--model", &model, "--data", &data]).status.success());
    ok(&["infer", "--model", &model, "--data", &data]);
}

#[test]
fn synth_rejects_empty_dataset() {
    let dir = TempDir::new().unwrap();
    let out = run(&["synth", "--n", "0", "--out", &p(&dir, "x.jsonl")]);
    assert!(!out.status.success());
}

fn head(id: &str, x: f64, yaw: f64, s: f64) -> HeadInstance {
    HeadInstance {
        id: id.into(),
        centroid: (x, 100.0),
        estimate: PoseEstimate {
            pose: EulerPose::new(yaw, 0.0, 0.0),
            log_var: [s; 3],
        },
    }
}

fn laeo_frames(dir: &TempDir) -> String {
    let frames = vec![
        LaeoFrame {
            frame_id: "single".into(),
            heads: vec![head("a", 0.0, 30.0, 1.0)],
            laeo_pairs: vec![],
        },
        LaeoFrame {
            frame_id: "mutual".into(),
            heads: vec![head("a", 0.0, 60.0, 1.0), head("b", 200.0, -50.0, 2.0)],
            laeo_pairs: vec![("a".into(), "b".into())],
        },
        LaeoFrame {
            // b is unreliable and looking away
            frame_id: "gated".into(),
            heads: vec![head("a", 0.0, 60.0, 1.0), head("b", 200.0, 40.0, 9.0)],
            laeo_pairs: vec![("a".into(), "b".into())],
        },
    ];
    let path = p(dir, "frames.jsonl");
    write_frames(Path::new(&path), &frames).unwrap();
    path
}

fn pair_lines(path: &str) -> Vec<Value> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn laeo_scores_pairs_with_and_without_gate() {
    let dir = TempDir::new().unwrap();
    let frames = laeo_frames(&dir);
    let (report, pairs) = (p(&dir, "laeo.json"), p(&dir, "pairs.jsonl"));
    ok(&["laeo", "--frames", &frames, "--report", &report, "--pairs", &pairs]);
    let lines = pair_lines(&pairs);
    assert_eq!(lines.len(), 2, "the single-head frame has no pairs");
    assert_eq!(lines[0]["frame_id"], "mutual");
    assert_eq!(lines[0]["is_laeo"], true);
    assert_eq!(lines[1]["is_laeo"], true);
    assert_eq!(lines[1]["baseline_is_laeo"], false);

    let v: Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(v["baseline"]["recall"], 0.5);
    assert_eq!(v["with_uncertainty"]["recall"], 1.0);
    assert_eq!(v["gate"]["delta"], 7.0);

    let huge = p(&dir, "huge.json");
    ok(&["laeo", "--frames", &frames, "--delta", "1e300", "--report", &huge]);
    let h: Value = serde_json::from_slice(&read(&huge)).unwrap();
    assert_eq!(h["with_uncertainty"], h["baseline"]);
    assert!(h.get("baseline").is_some() && h.get("with_uncertainty").is_some());

    let again = p(&dir, "again.json");
    ok(&["laeo", "--frames", &frames, "--report", &again]);
    assert_eq!(read(&report), read(&again));
}

#[test]
fn laeo_keypoint_heads_need_a_model() {
    let dir = TempDir::new().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let kp = |pose: EulerPose, rng: &mut rand_chacha::ChaCha8Rng| {
        let (set, _) = generate_sample(pose, &NoiseModel::noiseless(), rng);
        Some(set.points.iter().map(|k| [k.x1, k.x2, k.c]).collect())
    };
    let frame = FrameRecord {
        frame_id: "kp".into(),
        heads: vec![
            HeadRecord {
                id: "a".into(),
                centroid: [0.0, 0.0],
                keypoints: kp(EulerPose::new(40.0, 0.0, 0.0), &mut rng),
                estimate: None,
            },
            HeadRecord {
                id: "b".into(),
                centroid: [100.0, 0.0],
                keypoints: kp(EulerPose::new(-40.0, 0.0, 0.0), &mut rng),
                estimate: None,
            },
        ],
        laeo_pairs: vec![["a".into(), "b".into()]],
    };
    let frames = p(&dir, "kp.jsonl");
    std::fs::write(&frames, format!("{}\n", serde_json::to_string(&frame).unwrap())).unwrap();
    let out = run(&["laeo", "--frames", &frames]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no model"));

    let (tr, va) = split(&dir);
    let model = p(&dir, "m.bin");
    train(&tr, &va, &model, &[]);
    let pairs = p(&dir, "pairs.jsonl");
    ok(&["laeo", "--frames", &frames, "--model", &model, "--pairs", &pairs]);
    assert_eq!(pair_lines(&pairs).len(), 1);
}

#[test]
fn ablate_prints_three_by_four_table() {
    let dir = TempDir::new().unwrap();
    let (tr, va) = split(&dir);
    let report = p(&dir, "ablation.json");
    let out = ok(&[
        "ablate", "--data", &tr, "--val", &va, "--seed", "1", "--alpha", "0.2", "--epochs", "2",
        "--report", &report,
    ]);
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 3);
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["MSE", "COMB", "UNC"]);
    for r in &rows {
        assert_eq!(r.len(), 5);
        assert!(r[1..].iter().all(|x| x.parse::<f64>().is_ok()));
    }
    let v: Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
}

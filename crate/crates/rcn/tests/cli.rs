use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcn")).args(args).output().expect("spawn rcn")
}

fn ok(args: &[&str]) -> String {
    let out = rcn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn tiny_cfg() -> String {
    repo_file("../../configs/tiny.cfg").display().to_string()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--out", s(d), "--seed", "5", "--train", "2", "--test", "1"]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 3 * (12 + 1));
    assert_eq!(ta, tb);
    assert!(ta.contains_key(Path::new("train/train_00000/frame_00011.pgm")));
    assert!(ta.contains_key(Path::new("test/test_00000/gt.txt")));
}

#[test]
fn eval_det_reproduces_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let fx = repo_file("tests/fixtures/eval_det");
    let stdout = ok(&[
        "eval-det",
        "--detections",
        s(&fx.join("detections.csv")),
        "--gt",
        s(&fx.join("gt")),
        "--out",
        s(&curve),
        "--t0",
        "0",
    ]);
    let mr: f64 = stdout.trim().strip_prefix("log_avg_mr=").unwrap().parse().unwrap();
    // Nine reference points: seven read 0.8, two read 0.4.
    let reads = [0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.4, 0.4];
    let oracle = (reads.iter().map(|m: &f64| m.ln()).sum::<f64>() / 9.0).exp();
    assert_eq!(mr, oracle);
    assert!((mr - 0.685_795).abs() < 1e-6);
    assert_eq!(std::fs::read_to_string(&curve).unwrap(), std::fs::read_to_string(fx.join("expected_curve.csv")).unwrap());
}

#[test]
fn bad_config_keys_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.k = 3\nmodel.kernal = 5\n").unwrap();
    let out = rcn(&["grad-check", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.kernal"));
    assert_eq!(rcn(&["train", "--bogus-flag"]).status.code(), Some(2));
    let missing = rcn(&["detect", "--data", s(dir.path()), "--ckpt", s(&dir.path().join("none")), "--out", s(&dir.path().join("d.csv"))]);
    assert_ne!(missing.status.code(), Some(0));
}

#[test]
fn grad_check_passes_on_the_micro_model() {
    let stdout = ok(&["grad-check"]);
    let err: f64 = stdout.split_whitespace().next().unwrap().strip_prefix("max_rel_error=").unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn train_detect_track_evaluate_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--config", &tiny_cfg()]);
    let mut runs = Vec::new();
    for run in ["r1", "r2"] {
        let r = dir.path().join(run);
        std::fs::create_dir_all(&r).unwrap();
        let (c1, c2) = (r.join("s1.ckpt"), r.join("s2.ckpt"));
        ok(&["train", "--data", s(&data), "--stage", "1", "--config", &tiny_cfg(), "--out", s(&c1)]);
        ok(&["train", "--data", s(&data), "--stage", "2", "--init", s(&c1), "--out", s(&c2)]);
        ok(&["detect", "--data", s(&data), "--ckpt", s(&c2), "--out", s(&r.join("det.csv"))]);
        ok(&["track", "--data", s(&data), "--ckpt", s(&c2), "--out", s(&r.join("tracks.csv"))]);
        let det = ok(&["eval-det", "--detections", s(&r.join("det.csv")), "--gt", s(&data.join("test")), "--out", s(&r.join("det_curve.csv"))]);
        let trk = ok(&["eval-track", "--tracks", s(&r.join("tracks.csv")), "--gt", s(&data.join("test")), "--out", s(&r.join("trk_curve.csv"))]);
        let mr: f64 = det.trim().strip_prefix("log_avg_mr=").unwrap().parse().unwrap();
        let auc: f64 = trk.trim().strip_prefix("auc=").unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&mr) && (0.0..=1.0).contains(&auc));
        let log = std::fs::read_to_string(r.join("s2.ckpt.log")).unwrap();
        assert_eq!(log.lines().count(), 20);
        assert_eq!(log.lines().next().unwrap().split('\t').count(), 3);
        runs.push(tree(&r));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn ablate_on_the_tiny_config_reports_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--config", &tiny_cfg()]);
    let report = dir.path().join("report.csv");
    ok(&["ablate", "--data", s(&data), "--config", &tiny_cfg(), "--out", s(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,seed,log_avg_mr"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(rows.len() >= 4);
    for v in ["full", "no_tracking", "no_recurrence", "single_frame"] {
        assert!(rows.iter().any(|r| r[0] == v), "{v} missing");
    }
    for r in &rows {
        let mr: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&mr));
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use duoloc_bench::io::read_results;

fn duoloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duoloc")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.toml");
    let text = format!(
        "num_db = 30\nnum_points = 1200\nnum_queries = 8\ndepth_min = 1.5\ndepth_max = 10.0\nretrieval_k = 5\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a.scene");
    let b = dir.path().join("b.scene");
    for out in [&a, &b] {
        let o = duoloc(&["generate", "--seed", "7", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    for key in [
        "\"version\"",
        "\"db_images\"",
        "\"q_wxyz\"",
        "\"points_gt\"",
        "\"points_obs\"",
        "\"visibility\"",
        "\"queries\"",
    ] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn localize_noise_free_scene_succeeds_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "pixel_sigma = 0.0\noutlier_ratio = 0.0\n");
    let scene = dir.path().join("s.scene");
    let out = dir.path().join("run");
    assert!(duoloc(&["generate", "--seed", "3", "--config", &cfg, "--out", scene.to_str().unwrap()]).status.success());
    let o = duoloc(&[
        "localize",
        "--seed",
        "3",
        "--config",
        &cfg,
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_results(fs::File::open(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(records.len(), 8 * 5);
    assert!(records.iter().all(|r| r.success && r.trans_err_m < 1e-5), "{records:?}");
}

#[test]
fn sweep_continuous_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "grid_keep_every_n = [1, 2]\n");
    let sweep = dir.path().join("sweep");
    let cont = dir.path().join("cont");
    let o = duoloc(&["sweep", "--seed", "1", "--config", &cfg, "--out", sweep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = duoloc(&["continuous", "--seed", "1", "--config", &cfg, "--out", cont.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = dir.path().join("all.csv");
    let o = duoloc(&[
        "report",
        sweep.join("results.csv").to_str().unwrap(),
        cont.join("results.csv").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(report).unwrap();
    // Header plus 2 cells x 5 methods plus static and continuous rows.
    assert_eq!(text.lines().count(), 1 + 10 + 2);
    assert!(text.lines().next().unwrap().contains("recall_0.25m_2deg"));
}

#[test]
fn usage_errors_exit_with_one() {
    let o = duoloc(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = duoloc(&["sweep"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "confidence = 2.0\n").unwrap();
    let o = duoloc(&["sweep", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let scene = dir.path().join("x.scene");
    fs::write(&scene, "{\"version\": 1}").unwrap();
    let o = duoloc(&["localize", "--scene", scene.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

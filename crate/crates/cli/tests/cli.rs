use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SCENARIO: &str = "radius = 20.0\nframes = 150\nlandmarks = 1500\nring = [30.0, 45.0]\ndynamic_objects = 2\nmoving_objects = 1\nobject_distance = [8.0, 12.0]\nwidth = 320\nheight = 240\nfocal = 200.0\n";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermoslam")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path) -> std::path::PathBuf {
    let sc = dir.join("scenario.toml");
    fs::write(&sc, SCENARIO).unwrap();
    let data = dir.join("data");
    let o = bin(&["sim", "--config", s(&sc), "--seed", "3", "--out", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

#[test]
fn sim_then_slam_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let out = dir.path().join("run");
    let o = bin(&["slam", s(&data), "--sync", "--seed", "1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("CR         100.00 %"), "{stdout}");
    for f in ["trajectory.txt", "manifest.toml", "timing.toml", "config.toml", "metrics.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(fs::read_to_string(out.join("manifest.toml")).unwrap().contains("status = \"ok\""));
    assert!(fs::read_to_string(out.join("config.toml")).unwrap().contains("seed = 1"));

    let gt = data.join("gt.txt");
    let report = dir.path().join("self.txt");
    let o = bin(&["eval", s(&gt), s(&gt), "--align", "se3", "--out", s(&report)]);
    assert!(o.status.success());
    let kv = fs::read_to_string(&report).unwrap();
    let ate: f64 = kv.lines().find_map(|l| l.strip_prefix("ate_rmse=")).unwrap().parse().unwrap();
    assert!(ate < 1e-9);
    assert!(kv.contains("cr=1.000000000"));
}

#[test]
fn features_are_written_and_inspectable() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path());
    let feats = dir.path().join("feats");
    let o = bin(&["features", s(&data), "--out", s(&feats)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(&feats).unwrap().count(), 300);
    let one = fs::read_dir(&feats).unwrap().next().unwrap().unwrap().path();
    let o = bin(&["features", "--inspect", s(&one)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("keypoints"));
}

#[test]
fn missing_calibration_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("left")).unwrap();
    let o = bin(&["slam", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("calib"));
}

#[test]
fn disjoint_trajectories_fail_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    fs::write(&a, "0.0 0 0 0 0 0 0 1\n0.1 1 0 0 0 0 0 1\n0.2 2 0 0 0 0 0 1\n").unwrap();
    fs::write(&b, "10.0 0 0 0 0 0 0 1\n10.1 1 0 0 0 0 0 1\n10.2 2 0 0 0 0 0 1\n").unwrap();
    let o = bin(&["eval", s(&a), s(&b)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("overlap"));
}

#[test]
fn bad_thread_cap_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_thermoslam"))
        .args(["sim", "--out", s(&dir.path().join("x"))])
        .env("THERMOSLAM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thermoslam::dynfilter::DynamicMask;
use thermoslam::evalsim::{compute_metrics, write_dataset, CircleScenario, SyntheticWorld};
use thermoslam::pipeline::{run, write_outputs, DiskDataset, FrameSource, PipelineConfig, SimSource, Slam};
use thermoslam::Error;

fn small_scenario() -> CircleScenario {
    CircleScenario {
        radius: 20.0,
        frames: 150,
        landmarks: 1500,
        ring: [30.0, 45.0],
        dynamic_objects: 2,
        moving_objects: 1,
        object_distance: [8.0, 12.0],
        width: 320,
        height: 240,
        focal: 200.0,
        ..Default::default()
    }
}

fn small_world() -> SyntheticWorld {
    small_scenario().build(3).unwrap()
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_seed_writes_identical_datasets() {
    let sc = CircleScenario { frames: 12, ..small_scenario() };
    let world = sc.build(5).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&world, 5, a.path()).unwrap();
    write_dataset(&sc.build(5).unwrap(), 5, b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 2 + 12 * 5);
    assert!(ta == tb);
}

#[test]
fn no_dynamic_objects_gives_empty_masks() {
    let sc = CircleScenario {
        frames: 5,
        dynamic_objects: 0,
        moving_objects: 0,
        ..small_scenario()
    };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&sc.build(1).unwrap(), 1, dir.path()).unwrap();
    for e in fs::read_dir(dir.path().join("masks")).unwrap() {
        assert!(DynamicMask::load(&e.unwrap().path()).unwrap().is_empty());
    }
}

#[test]
fn circle_ground_truth_length() {
    let world = CircleScenario::default().build(0).unwrap();
    let len = world.ground_truth().path_length();
    // 399 chords of a 400-gon inscribed in the 50 m circle
    let chords = 399.0 * 2.0 * 50.0 * (std::f64::consts::PI / 400.0).sin();
    assert!((len - chords).abs() < 1e-6, "{len} vs {chords}");
    // the open path lacks the closing chord; inscribed chords are barely shorter
    let full = 2.0 * std::f64::consts::PI * 50.0;
    assert!((len - full * 399.0 / 400.0).abs() < 1e-3 * full);
}

#[test]
fn missing_calibration_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("left")).unwrap();
    fs::create_dir_all(dir.path().join("right")).unwrap();
    assert!(matches!(DiskDataset::open(dir.path()), Err(Error::Config(_))));
}

#[test]
fn stereo_mismatch_names_the_frame() {
    let sc = CircleScenario { frames: 4, ..small_scenario() };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&sc.build(2).unwrap(), 2, dir.path()).unwrap();
    let mut right: Vec<_> = fs::read_dir(dir.path().join("right")).unwrap().map(|e| e.unwrap().path()).collect();
    right.sort();
    fs::remove_file(&right[2]).unwrap();
    let stem = right[2].file_stem().unwrap().to_string_lossy().into_owned();
    match DiskDataset::open(dir.path()) {
        Err(Error::Ingestion(msg)) => assert!(msg.contains(&stem), "{msg}"),
        other => panic!("expected an ingestion error, got {other:?}"),
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(matches!(PipelineConfig::parse("[tracking]\nradius = 10.0\nradious = 3.0\n"), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::parse("[eval]\nbest_of = 0\n"), Err(Error::Config(_))));
    let cfg = PipelineConfig::default();
    assert_eq!(PipelineConfig::parse(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn disk_run_tracks_every_frame_and_writes_outputs() {
    let world = small_world();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&world, 3, dir.path()).unwrap();
    let data = DiskDataset::open(dir.path()).unwrap();
    let cfg = PipelineConfig { sync: true, ..Default::default() };
    let out = run(&data, &cfg, vec![dir.path().display().to_string()]);
    assert_eq!(out.manifest.status, "ok", "{:?}", out.manifest.error);
    assert_eq!(out.manifest.frames, 150);
    let m = compute_metrics(&out.trajectory, &data.ground_truth().unwrap(), cfg.eval.align.into()).unwrap();
    assert_eq!(m.cr, 1.0);
    assert!(m.ate_rmse < 0.005 * m.gt_length, "{m}");

    let o = dir.path().join("out");
    write_outputs(&o, &out).unwrap();
    for f in ["trajectory.txt", "manifest.toml", "timing.toml"] {
        assert!(o.join(f).is_file(), "{f}");
    }
    let manifest = fs::read_to_string(o.join("manifest.toml")).unwrap();
    assert!(manifest.contains(&cfg.hash()));
}

#[test]
fn threaded_backend_matches_inline_quality() {
    let world = small_world();
    let src = SimSource::new(&world, 3);
    let cfg = PipelineConfig { sync: false, ..Default::default() };
    let out = run(&src, &cfg, Vec::new());
    assert_eq!(out.manifest.status, "ok", "{:?}", out.manifest.error);
    let m = compute_metrics(&out.trajectory, &world.ground_truth(), cfg.eval.align.into()).unwrap();
    assert_eq!(m.cr, 1.0);
    assert!(m.ate_rmse < 0.005 * m.gt_length, "{m}");
    assert!(out.manifest.keyframes > 1);
}

#[test]
fn failed_runs_still_produce_a_manifest() {
    let sc = CircleScenario { frames: 6, ..small_scenario() };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&sc.build(4).unwrap(), 4, dir.path()).unwrap();
    let mut left: Vec<_> = fs::read_dir(dir.path().join("left")).unwrap().map(|e| e.unwrap().path()).collect();
    left.sort();
    fs::write(&left[3], b"not a png").unwrap();
    let data = DiskDataset::open(dir.path()).unwrap();
    let out = run(&data, &PipelineConfig { sync: true, ..Default::default() }, Vec::new());
    assert_eq!(out.manifest.status, "failed");
    assert!(out.manifest.error.is_some());
    assert_eq!(out.manifest.frames, 3);
}

#[test]
fn without_segmentation_nothing_is_filtered() {
    let world = small_world();
    let src = SimSource::new(&world, 3);
    let mut cfg = PipelineConfig { sync: true, ..Default::default() };
    cfg.dynfilter.enabled = false;
    let mut slam = Slam::new(&cfg, src.calibration()).unwrap();
    for i in 0..30 {
        let o = slam.process(src.frame(i).unwrap()).unwrap();
        assert_eq!(o.filtered, 0);
    }
}

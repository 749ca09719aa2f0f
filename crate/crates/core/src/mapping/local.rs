use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;

use super::ba::{BaObservation, BaParams, BaProblem, BaReport};
use super::{KeyframeId, Map, PointId};

/// Keyframe window around `center`: itself plus up to `neighbours` most
/// covisible keyframes, sorted by id.
pub fn local_window(map: &Map, center: KeyframeId, neighbours: usize) -> Vec<KeyframeId> {
    let mut w: BTreeSet<KeyframeId> = map.top_covisible(center, neighbours).into_iter().collect();
    w.insert(center);
    w.into_iter().collect()
}

struct Built {
    problem: BaProblem,
    kf_ids: Vec<KeyframeId>,
    point_ids: Vec<PointId>,
    /// (keyframe, point) of each observation.
    edges: Vec<(KeyframeId, PointId)>,
}

fn build(map: &Map, free: &[KeyframeId], points: &BTreeSet<PointId>, fix_first: bool) -> Built {
    let free_set: BTreeSet<KeyframeId> = free.iter().copied().collect();
    let mut kf_ids: Vec<KeyframeId> = free.to_vec();
    let mut fixed_ids: BTreeSet<KeyframeId> = BTreeSet::new();
    for p in points {
        for kf in map.points[p].observations.keys() {
            if !free_set.contains(kf) {
                fixed_ids.insert(*kf);
            }
        }
    }
    kf_ids.extend(fixed_ids.iter().copied());
    let slot: BTreeMap<KeyframeId, usize> = kf_ids.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let point_ids: Vec<PointId> = points.iter().copied().collect();
    let mut observations = Vec::new();
    let mut edges = Vec::new();
    for (j, pid) in point_ids.iter().enumerate() {
        for (&kf, &kp) in &map.points[pid].observations {
            let k = &map.keyframes[&kf];
            let key = &k.features.keypoints[kp];
            observations.push(BaObservation {
                pose: slot[&kf],
                point: j,
                uv: Vector2::new(key.u as f64, key.v as f64),
                u_r: k.stereo.get(kp).and_then(|s| s.map(|s| s.u_r)),
            });
            edges.push((kf, *pid));
        }
    }
    let mut fixed: Vec<bool> = kf_ids.iter().map(|k| !free_set.contains(k)).collect();
    if fix_first && !fixed.is_empty() {
        fixed[0] = true;
    }
    Built {
        problem: BaProblem {
            k: map.rig.intrinsics,
            baseline: map.rig.baseline,
            poses: kf_ids.iter().map(|k| map.keyframes[k].pose).collect(),
            fixed,
            points: point_ids.iter().map(|p| map.points[p].position).collect(),
            observations,
        },
        kf_ids,
        point_ids,
        edges,
    }
}

fn write_back(map: &mut Map, b: &Built, params: &BaParams) -> usize {
    for (i, kf) in b.kf_ids.iter().enumerate() {
        if !b.problem.fixed[i] {
            map.keyframes.get_mut(kf).expect("window keyframe").pose = b.problem.poses[i];
        }
    }
    for (j, pid) in b.point_ids.iter().enumerate() {
        map.points.get_mut(pid).expect("window point").position = b.problem.points[j];
    }
    let errs = b.problem.reprojection_errors();
    let mut removed = 0;
    for (e, &(kf, pid)) in errs.iter().zip(&b.edges) {
        if *e > params.outlier_threshold {
            map.remove_observation(kf, pid);
            removed += 1;
        }
    }
    map.cull_orphans();
    removed
}

/// Optimizes the window around `center` with the oldest window keyframe and
/// every outside observer held fixed; drops outlier observations afterwards.
pub fn local_bundle_adjust(map: &mut Map, center: KeyframeId, neighbours: usize, params: &BaParams) -> BaReport {
    let window = local_window(map, center, neighbours);
    let points = map.points_of(&window);
    if points.is_empty() {
        return BaReport::default();
    }
    let mut b = build(map, &window, &points, true);
    let report = b.problem.solve(params);
    let removed = write_back(map, &b, params);
    log::debug!(
        "local BA kf {center}: {} kfs, {} pts, cost {:.3} → {:.3}, {removed} outliers",
        window.len(),
        points.len(),
        report.initial_cost,
        report.final_cost
    );
    report
}

/// Optimizes every keyframe and point with the first keyframe fixed.
pub fn global_bundle_adjust(map: &mut Map, params: &BaParams) -> BaReport {
    let all: Vec<KeyframeId> = map.keyframes.keys().copied().collect();
    let points: BTreeSet<PointId> = map.points.keys().copied().collect();
    if all.is_empty() || points.is_empty() {
        return BaReport::default();
    }
    let mut b = build(map, &all, &points, true);
    let report = b.problem.solve(params);
    write_back(map, &b, params);
    report
}

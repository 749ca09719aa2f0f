//! Keyframes, map points, covisibility and bundle adjustment.

mod ba;
mod io;
mod local;

pub use ba::{BaObservation, BaParams, BaProblem, BaReport};
pub use io::{load_map, read_map, save_map, write_map};
pub use local::{global_bundle_adjust, local_bundle_adjust, local_window};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::Vector3;

use crate::features::{hamming, BinaryDescriptor, FeatureSet};
use crate::geometry::{triangulate_stereo, PoseSE3, StereoRig};

pub type KeyframeId = u64;
pub type PointId = u64;

/// Right-image evidence for one left keypoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoObs {
    pub u_r: f64,
    /// Triangulated position in the keyframe's camera frame.
    pub pc: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub timestamp: f64,
    /// World-to-camera.
    pub pose: PoseSE3,
    pub features: FeatureSet,
    /// Map point observed by each keypoint.
    pub observations: Vec<Option<PointId>>,
    pub stereo: Vec<Option<StereoObs>>,
}

impl Keyframe {
    pub fn new(timestamp: f64, pose: PoseSE3, features: FeatureSet, stereo: Vec<Option<StereoObs>>) -> Self {
        let n = features.len();
        Self {
            id: 0,
            timestamp,
            pose,
            features,
            observations: vec![None; n],
            stereo,
        }
    }

    pub fn observed_points(&self) -> impl Iterator<Item = PointId> + '_ {
        self.observations.iter().filter_map(|o| *o)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub id: PointId,
    pub position: Vector3<f64>,
    pub descriptor: BinaryDescriptor,
    /// Observing keyframe → keypoint index.
    pub observations: BTreeMap<KeyframeId, usize>,
    /// Keyframe that created the point.
    pub reference: KeyframeId,
}

/// `frames_since_kf ≥ max_gap` or `inliers_now < 0.75 · inliers_ref`.
pub fn should_insert_keyframe(frames_since_kf: usize, inliers_now: usize, inliers_ref: usize, max_gap: usize) -> bool {
    frames_since_kf >= max_gap || (inliers_now as f64) < 0.75 * inliers_ref as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoParams {
    /// Maximum row difference between left and right keypoints.
    pub row_tolerance: f64,
    pub tau_h: u32,
    /// Disparity threshold of the depth gate, pixels.
    pub d_min: f64,
}

impl Default for StereoParams {
    fn default() -> Self {
        Self {
            row_tolerance: 2.0,
            tau_h: 64,
            d_min: 2.0,
        }
    }
}

/// Matches left keypoints to right keypoints on nearly the same row with
/// positive disparity; mutual best Hamming distance. Accepted matches are
/// triangulated and passed through the depth gate `0 < Z < b f / d_min`.
pub fn stereo_match(left: &FeatureSet, right: &FeatureSet, rig: &StereoRig, params: &StereoParams) -> Vec<Option<StereoObs>> {
    let mut rows: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (j, kp) in right.keypoints.iter().enumerate() {
        rows.entry(kp.v.floor() as i64).or_default().push(j);
    }
    let tol = params.row_tolerance;
    let candidates = |u: f64, v: f64| {
        let lo = (v - tol).floor() as i64;
        let hi = (v + tol).floor() as i64;
        rows.range(lo..=hi).flat_map(|(_, js)| js.iter().copied()).filter(move |&j| {
            let kp = &right.keypoints[j];
            ((kp.v as f64) - v).abs() <= tol && (kp.u as f64) < u
        })
    };
    // left → right best
    let mut best_lr: Vec<Option<(u32, usize)>> = vec![None; left.len()];
    for (i, kp) in left.keypoints.iter().enumerate() {
        for j in candidates(kp.u as f64, kp.v as f64) {
            let d = hamming(&left.binary[i], &right.binary[j]);
            if d <= params.tau_h && best_lr[i].is_none_or(|(bd, bj)| (d, j) < (bd, bj)) {
                best_lr[i] = Some((d, j));
            }
        }
    }
    // right → left best among the left keypoints that chose it
    let mut best_rl: Vec<Option<(u32, usize)>> = vec![None; right.len()];
    for (i, b) in best_lr.iter().enumerate() {
        if let Some((d, j)) = *b {
            if best_rl[j].is_none_or(|(bd, bi)| (d, i) < (bd, bi)) {
                best_rl[j] = Some((d, i));
            }
        }
    }
    let z_max = rig.max_depth(params.d_min);
    best_lr
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (_, j) = (*b)?;
            if best_rl[j].map(|(_, bi)| bi) != Some(i) {
                return None;
            }
            let (kl, kr) = (&left.keypoints[i], &right.keypoints[j]);
            let pc = triangulate_stereo(rig, kl.u as f64, kl.v as f64, kr.u as f64).ok()?;
            (pc.z > 0.0 && pc.z < z_max).then_some(StereoObs { u_r: kr.u as f64, pc })
        })
        .collect()
}

/// Everything the map stores, keyed by stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub rig: StereoRig,
    pub keyframes: BTreeMap<KeyframeId, Keyframe>,
    pub points: BTreeMap<PointId, MapPoint>,
    /// Symmetric shared-point counts.
    pub covisibility: BTreeMap<KeyframeId, BTreeMap<KeyframeId, u32>>,
    next_keyframe: KeyframeId,
    next_point: PointId,
}

impl Map {
    pub fn new(rig: StereoRig) -> Self {
        Self {
            rig,
            keyframes: BTreeMap::new(),
            points: BTreeMap::new(),
            covisibility: BTreeMap::new(),
            next_keyframe: 0,
            next_point: 0,
        }
    }

    /// Inserts a keyframe, assigning the next id. Existing observations in
    /// `kf.observations` are registered.
    pub fn add_keyframe(&mut self, mut kf: Keyframe) -> KeyframeId {
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        kf.id = id;
        let obs: Vec<(usize, PointId)> = kf.observations.iter().enumerate().filter_map(|(i, o)| o.map(|p| (i, p))).collect();
        kf.observations.iter_mut().for_each(|o| *o = None);
        self.keyframes.insert(id, kf);
        self.covisibility.entry(id).or_default();
        for (i, p) in obs {
            self.add_observation(id, i, p);
        }
        id
    }

    /// New point observed by `kf` at keypoint `kp`.
    pub fn add_point(&mut self, position: Vector3<f64>, kf: KeyframeId, kp: usize) -> PointId {
        let id = self.next_point;
        self.next_point += 1;
        let descriptor = self.keyframes[&kf].features.binary[kp];
        self.points.insert(
            id,
            MapPoint {
                id,
                position,
                descriptor,
                observations: BTreeMap::new(),
                reference: kf,
            },
        );
        self.add_observation(kf, kp, id);
        id
    }

    /// Links keypoint `kp` of `kf` to `point`. Returns false if either side
    /// is already linked or the ids are unknown.
    pub fn add_observation(&mut self, kf: KeyframeId, kp: usize, point: PointId) -> bool {
        let Some(k) = self.keyframes.get(&kf) else { return false };
        if kp >= k.observations.len() || k.observations[kp].is_some() {
            return false;
        }
        let Some(p) = self.points.get(&point) else { return false };
        if p.observations.contains_key(&kf) {
            return false;
        }
        let others: Vec<KeyframeId> = p.observations.keys().copied().collect();
        for o in others {
            *self.covisibility.entry(kf).or_default().entry(o).or_insert(0) += 1;
            *self.covisibility.entry(o).or_default().entry(kf).or_insert(0) += 1;
        }
        self.keyframes.get_mut(&kf).expect("checked").observations[kp] = Some(point);
        self.points.get_mut(&point).expect("checked").observations.insert(kf, kp);
        self.update_descriptor(point);
        true
    }

    pub fn remove_observation(&mut self, kf: KeyframeId, point: PointId) {
        let Some(p) = self.points.get_mut(&point) else { return };
        let Some(kp) = p.observations.remove(&kf) else { return };
        let others: Vec<KeyframeId> = p.observations.keys().copied().collect();
        if let Some(k) = self.keyframes.get_mut(&kf) {
            k.observations[kp] = None;
        }
        for o in others {
            for (a, b) in [(kf, o), (o, kf)] {
                if let Some(row) = self.covisibility.get_mut(&a) {
                    if let Some(w) = row.get_mut(&b) {
                        *w -= 1;
                        if *w == 0 {
                            row.remove(&b);
                        }
                    }
                }
            }
        }
        if self.points.get(&point).is_some_and(|p| !p.observations.is_empty()) {
            self.update_descriptor(point);
        }
    }

    /// Removes points without observations; returns how many were dropped.
    pub fn cull_orphans(&mut self) -> usize {
        let before = self.points.len();
        self.points.retain(|_, p| !p.observations.is_empty());
        before - self.points.len()
    }

    pub fn remove_point(&mut self, point: PointId) {
        let kfs: Vec<KeyframeId> = self.points.get(&point).map(|p| p.observations.keys().copied().collect()).unwrap_or_default();
        for kf in kfs {
            self.remove_observation(kf, point);
        }
        self.points.remove(&point);
    }

    /// Observation whose descriptor has the smallest median Hamming distance
    /// to all the others.
    pub fn update_descriptor(&mut self, point: PointId) {
        let Some(p) = self.points.get(&point) else { return };
        let descs: Vec<BinaryDescriptor> = p
            .observations
            .iter()
            .filter_map(|(kf, &kp)| self.keyframes.get(kf).map(|k| k.features.binary[kp]))
            .collect();
        if descs.is_empty() {
            return;
        }
        let mut best = (u32::MAX, 0usize);
        for (i, a) in descs.iter().enumerate() {
            let mut d: Vec<u32> = descs.iter().map(|b| hamming(a, b)).collect();
            d.sort_unstable();
            let med = d[(d.len() - 1) / 2];
            if med < best.0 {
                best = (med, i);
            }
        }
        self.points.get_mut(&point).expect("exists").descriptor = descs[best.1];
    }

    /// Shared-point counts computed directly from the observations.
    pub fn covisibility_from_scratch(&self) -> BTreeMap<KeyframeId, BTreeMap<KeyframeId, u32>> {
        let mut out: BTreeMap<KeyframeId, BTreeMap<KeyframeId, u32>> = self.keyframes.keys().map(|&k| (k, BTreeMap::new())).collect();
        for p in self.points.values() {
            let kfs: Vec<KeyframeId> = p.observations.keys().copied().collect();
            for (i, &a) in kfs.iter().enumerate() {
                for &b in &kfs[i + 1..] {
                    *out.entry(a).or_default().entry(b).or_insert(0) += 1;
                    *out.entry(b).or_default().entry(a).or_insert(0) += 1;
                }
            }
        }
        out
    }

    /// Up to `k` neighbours by descending weight, ties to the lower id.
    pub fn top_covisible(&self, kf: KeyframeId, k: usize) -> Vec<KeyframeId> {
        let Some(row) = self.covisibility.get(&kf) else { return Vec::new() };
        let mut v: Vec<(u32, KeyframeId)> = row.iter().map(|(&id, &w)| (w, id)).collect();
        v.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        v.into_iter().take(k).map(|(_, id)| id).collect()
    }

    /// Triangulates every stereo keypoint of `kf` that has no map point yet.
    pub fn create_map_points(&mut self, kf: KeyframeId, d_min: f64) -> Vec<PointId> {
        let z_max = self.rig.max_depth(d_min);
        let Some(k) = self.keyframes.get(&kf) else { return Vec::new() };
        let inv = k.pose.inverse();
        let todo: Vec<(usize, Vector3<f64>)> = k
            .stereo
            .iter()
            .enumerate()
            .filter(|(i, _)| k.observations[*i].is_none())
            .filter_map(|(i, s)| s.and_then(|s| (s.pc.z > 0.0 && s.pc.z < z_max).then(|| (i, inv.transform(&s.pc)))))
            .collect();
        todo.into_iter().map(|(i, pw)| self.add_point(pw, kf, i)).collect()
    }

    pub fn latest_keyframe(&self) -> Option<KeyframeId> {
        self.keyframes.keys().next_back().copied()
    }

    /// Immutable view for tracking.
    pub fn snapshot(&self) -> Arc<MapSnapshot> {
        Arc::new(MapSnapshot {
            keyframes: self
                .keyframes
                .iter()
                .map(|(&id, k)| {
                    (
                        id,
                        KeyframeSummary {
                            pose: k.pose,
                            timestamp: k.timestamp,
                            points: k.observed_points().collect(),
                        },
                    )
                })
                .collect(),
            points: self.points.iter().map(|(&id, p)| (id, (p.position, p.descriptor))).collect(),
            covisibility: self.covisibility.clone(),
        })
    }

    /// Ids of the points observed by `kfs`, deduplicated and sorted.
    pub fn points_of(&self, kfs: &[KeyframeId]) -> BTreeSet<PointId> {
        kfs.iter()
            .filter_map(|k| self.keyframes.get(k))
            .flat_map(|k| k.observed_points())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeSummary {
    pub pose: PoseSE3,
    pub timestamp: f64,
    pub points: Vec<PointId>,
}

/// Read-only copy of the map published to the tracker.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MapSnapshot {
    pub keyframes: BTreeMap<KeyframeId, KeyframeSummary>,
    pub points: BTreeMap<PointId, (Vector3<f64>, BinaryDescriptor)>,
    pub covisibility: BTreeMap<KeyframeId, BTreeMap<KeyframeId, u32>>,
}

impl MapSnapshot {
    pub fn top_covisible(&self, kf: KeyframeId, k: usize) -> Vec<KeyframeId> {
        let Some(row) = self.covisibility.get(&kf) else { return Vec::new() };
        let mut v: Vec<(u32, KeyframeId)> = row.iter().map(|(&id, &w)| (w, id)).collect();
        v.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        v.into_iter().take(k).map(|(_, id)| id).collect()
    }
}

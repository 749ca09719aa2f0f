//! The per-frame system: preprocessing, features, dynamic filtering and
//! tracking on the caller's thread; mapping and loop closing either inline
//! or on a worker fed through a keyframe queue.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::{Vector2, Vector3};

use super::config::{PipelineConfig, Provider};
use super::manifest::{RunManifest, Stage, StageTimes, STAGES};
use super::source::{FrameSource, InputFrame};
use crate::dynfilter::{filter_dynamic, track_flow_pyr, DynamicMask, FlowPyramid};
use crate::error::{Error, Result};
use crate::evalsim::{Stamped, Trajectory};
use crate::features::{detect_features, FeatureSet};
use crate::geometry::{Calibration, PoseSE3, StereoRig};
use crate::image::GrayF;
use crate::loopclose::LoopCloser;
use crate::mapping::{local_bundle_adjust, should_insert_keyframe, stereo_match, BaParams, Keyframe, KeyframeId, Map, MapSnapshot, PointId, StereoParams};
use crate::preproc::{Preprocessor, RawThermalFrame};
use crate::tracking::{descriptor_track, photometric_align, predict_pose, refine_pnp, MapCandidate, MotionModel, PhotoPoint, TrackStatus};

/// Exterior points used to estimate the epipolar geometry for the filter.
const MAX_FLOW_EXTERIOR: usize = 200;
/// Widening of the search radius on the retry after a failed track.
const RETRY_RADIUS_FACTOR: f64 = 3.0;

/// A new keyframe for the mapping backend.
#[derive(Clone, Debug)]
pub struct KeyframeJob {
    pub timestamp: f64,
    pub pose: PoseSE3,
    pub features: FeatureSet,
    pub right: FeatureSet,
    /// `(map point, keypoint)` links found by tracking.
    pub tracked: Vec<(PointId, usize)>,
}

/// Keyframe insertion, stereo points, local BA and loop closing.
#[derive(Clone, Debug)]
pub struct Mapper {
    pub map: Map,
    pub closer: LoopCloser,
    pub loops: usize,
    pub times: StageTimes,
    loop_enabled: bool,
    stereo: StereoParams,
    ba: BaParams,
    covisible: usize,
    d_min: f64,
}

impl Mapper {
    pub fn new(rig: StereoRig, cfg: &PipelineConfig) -> Self {
        Self {
            map: Map::new(rig),
            closer: LoopCloser::new(cfg.loop_params()),
            loops: 0,
            times: StageTimes::default(),
            loop_enabled: cfg.loopclose.enabled,
            stereo: cfg.stereo_params(),
            ba: cfg.ba_params(),
            covisible: cfg.mapping.covisible,
            d_min: cfg.mapping.d_min,
        }
    }

    pub fn process(&mut self, job: KeyframeJob) -> Result<KeyframeId> {
        let t0 = Instant::now();
        let stereo = stereo_match(&job.features, &job.right, &self.map.rig, &self.stereo);
        let id = self.map.add_keyframe(Keyframe::new(job.timestamp, job.pose, job.features, stereo));
        for (pid, kp) in job.tracked {
            self.map.add_observation(id, kp, pid);
        }
        self.map.create_map_points(id, self.d_min);
        if self.map.keyframes.len() > 1 && self.ba.max_iters > 0 {
            local_bundle_adjust(&mut self.map, id, self.covisible, &self.ba);
        }
        self.times.add(Stage::Mapping, t0.elapsed());
        let t1 = Instant::now();
        if self.loop_enabled {
            if self.closer.process_keyframe(&mut self.map, id)?.is_some() {
                self.loops += 1;
            }
        } else {
            // still indexed, for relocalization
            self.closer.insert_keyframe(&self.map.keyframes[&id]);
        }
        self.times.add(Stage::LoopClosing, t1.elapsed());
        Ok(id)
    }
}

struct Published {
    snapshot: Arc<MapSnapshot>,
    error: Option<String>,
}

enum Backend {
    Inline(Box<Mapper>),
    Threaded {
        tx: Option<mpsc::Sender<KeyframeJob>>,
        shared: Arc<Mutex<Published>>,
        handle: Option<JoinHandle<Mapper>>,
    },
}

impl Backend {
    fn spawn(mut mapper: Mapper) -> Self {
        let (tx, rx) = mpsc::channel::<KeyframeJob>();
        let shared = Arc::new(Mutex::new(Published {
            snapshot: mapper.map.snapshot(),
            error: None,
        }));
        let out = Arc::clone(&shared);
        let handle = std::thread::spawn(move || {
            for job in rx {
                let r = mapper.process(job);
                let mut p = out.lock().expect("publisher lock");
                match r {
                    Ok(_) => p.snapshot = mapper.map.snapshot(),
                    Err(e) => {
                        p.error = Some(e.to_string());
                        break;
                    }
                }
            }
            mapper
        });
        Backend::Threaded {
            tx: Some(tx),
            shared,
            handle: Some(handle),
        }
    }
}

/// What the tracker keeps of the previous frame.
struct LastFrame {
    reference: KeyframeId,
    /// Pose relative to the reference keyframe.
    relative: PoseSE3,
    pyramid: FlowPyramid,
    /// Tracked map points and their pixels, for photometric alignment.
    inliers: Vec<(PointId, Vector2<f64>)>,
    tracked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub reference: Option<KeyframeId>,
    pub relative: PoseSE3,
    pub tracked: bool,
}

/// Summary of one processed frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameOutcome {
    pub tracked: bool,
    pub inliers: usize,
    pub keyframe: Option<KeyframeId>,
    pub filtered: usize,
}

pub struct Slam {
    cfg: PipelineConfig,
    calib: Calibration,
    pre_left: Preprocessor,
    pre_right: Preprocessor,
    backend: Backend,
    snapshot: Arc<MapSnapshot>,
    motion: MotionModel,
    last: Option<LastFrame>,
    reference: Option<KeyframeId>,
    /// Poses of keyframes sent to a worker that has not published them yet.
    pending: BTreeMap<KeyframeId, PoseSE3>,
    next_keyframe: KeyframeId,
    frames_since_keyframe: usize,
    lost_streak: usize,
    records: Vec<FrameRecord>,
    times: StageTimes,
    relocalizations: usize,
    frame_index: u64,
    /// Time spent in the inline backend, kept out of the tracking stage.
    inline_backend: Duration,
}

fn subset(fs: &FeatureSet, keep: impl Fn(usize) -> bool) -> FeatureSet {
    let idx: Vec<usize> = (0..fs.len()).filter(|&i| keep(i)).collect();
    FeatureSet {
        timestamp: fs.timestamp,
        keypoints: idx.iter().map(|&i| fs.keypoints[i]).collect(),
        descriptors: idx.iter().map(|&i| fs.descriptors[i].clone()).collect(),
        binary: idx.iter().map(|&i| fs.binary[i]).collect(),
    }
}

struct Tracked {
    pose: PoseSE3,
    /// `(map point, keypoint)` of the PnP inliers.
    links: Vec<(PointId, usize)>,
}

impl Slam {
    pub fn new(cfg: &PipelineConfig, calib: Calibration) -> Result<Self> {
        cfg.validate()?;
        let mapper = Mapper::new(calib.rig, cfg);
        let snapshot = mapper.map.snapshot();
        let backend = if cfg.sync { Backend::Inline(Box::new(mapper)) } else { Backend::spawn(mapper) };
        Ok(Self {
            cfg: cfg.clone(),
            calib,
            pre_left: Preprocessor::new(cfg.preproc_params())?,
            pre_right: Preprocessor::new(cfg.preproc_params())?,
            backend,
            snapshot,
            motion: MotionModel::default(),
            last: None,
            reference: None,
            pending: BTreeMap::new(),
            next_keyframe: 0,
            frames_since_keyframe: 0,
            lost_streak: 0,
            records: Vec::new(),
            times: StageTimes::default(),
            relocalizations: 0,
            frame_index: 0,
            inline_backend: Duration::ZERO,
        })
    }

    /// World-to-camera estimate of the latest frame under the current map.
    pub fn current_pose(&self) -> PoseSE3 {
        self.records
            .last()
            .and_then(|r| Some(r.relative * self.keyframe_pose(r.reference?)?))
            .unwrap_or_default()
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    fn keyframe_pose(&self, id: KeyframeId) -> Option<PoseSE3> {
        self.snapshot.keyframes.get(&id).map(|k| k.pose).or_else(|| self.pending.get(&id).copied())
    }

    fn refresh_snapshot(&mut self) -> Result<()> {
        if let Backend::Threaded { shared, .. } = &self.backend {
            let p = shared.lock().expect("publisher lock");
            if let Some(e) = &p.error {
                return Err(Error::EstimationFailed(format!("mapping: {e}")));
            }
            self.snapshot = Arc::clone(&p.snapshot);
        }
        let known = &self.snapshot.keyframes;
        self.pending.retain(|id, _| !known.contains_key(id));
        Ok(())
    }

    fn submit(&mut self, job: KeyframeJob) -> Result<KeyframeId> {
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        match &mut self.backend {
            Backend::Inline(m) => {
                let t = Instant::now();
                let got = m.process(job)?;
                self.inline_backend += t.elapsed();
                debug_assert_eq!(got, id);
                self.snapshot = m.map.snapshot();
            }
            Backend::Threaded { tx, .. } => {
                self.pending.insert(id, job.pose);
                tx.as_ref()
                    .expect("open queue")
                    .send(job)
                    .map_err(|_| Error::EstimationFailed("mapping worker stopped".into()))?;
            }
        }
        self.reference = Some(id);
        self.frames_since_keyframe = 0;
        Ok(id)
    }

    /// Drops mask-interior keypoints that fail the epipolar test against the
    /// previous frame; all of them when there is no previous frame or the
    /// geometry cannot be estimated.
    fn filter(&mut self, features: FeatureSet, mask: Option<&DynamicMask>, pyramid: &FlowPyramid) -> (FeatureSet, usize) {
        let Some(mask) = mask.filter(|m| self.cfg.dynfilter.enabled && !m.is_empty()) else {
            return (features, 0);
        };
        let params = self.cfg.filter_params(self.frame_index);
        let inside: Vec<bool> = features
            .keypoints
            .iter()
            .map(|k| mask.contains(k.u as f64, k.v as f64, params.dilation))
            .collect();
        let n_inside = inside.iter().filter(|&&b| b).count();
        if n_inside == 0 {
            return (features, 0);
        }
        let drop: BTreeSet<usize> = match &self.last {
            None => (0..features.len()).filter(|&i| inside[i]).collect(),
            Some(last) => {
                let exterior: Vec<usize> = (0..features.len()).filter(|&i| !inside[i]).collect();
                let stride = exterior.len().div_ceil(MAX_FLOW_EXTERIOR).max(1);
                let chosen: Vec<usize> = (0..features.len()).filter(|&i| inside[i]).chain(exterior.into_iter().step_by(stride)).collect();
                let kps: Vec<_> = chosen.iter().map(|&i| features.keypoints[i]).collect();
                let corr = track_flow_pyr(&last.pyramid, pyramid, &kps, &params.lk);
                match filter_dynamic(&corr, mask, &params) {
                    Ok(o) => o.removed.into_iter().map(|j| chosen[j]).filter(|&i| inside[i]).collect(),
                    Err(e) => {
                        log::debug!("frame {}: dynamic filter unavailable ({e}), dropping masked points", self.frame_index);
                        (0..features.len()).filter(|&i| inside[i]).collect()
                    }
                }
            }
        };
        let n = drop.len();
        (subset(&features, |i| !drop.contains(&i)), n)
    }

    fn local_map(&self, reference: KeyframeId) -> Vec<MapCandidate> {
        let snap = &self.snapshot;
        let anchor = if snap.keyframes.contains_key(&reference) {
            Some(reference)
        } else {
            snap.keyframes.keys().next_back().copied()
        };
        let Some(anchor) = anchor else { return Vec::new() };
        let mut kfs = vec![anchor];
        kfs.extend(snap.top_covisible(anchor, self.cfg.tracking.local_keyframes));
        let ids: BTreeSet<PointId> = kfs
            .iter()
            .filter_map(|k| snap.keyframes.get(k))
            .flat_map(|k| k.points.iter().copied())
            .collect();
        ids.into_iter()
            .filter_map(|id| {
                snap.points.get(&id).map(|(p, d)| MapCandidate {
                    id,
                    position: *p,
                    descriptor: *d,
                })
            })
            .collect()
    }

    fn track_against(&self, cands: &[MapCandidate], features: &FeatureSet, pred: &PoseSE3, radius: f64) -> Option<Tracked> {
        let tp = self.cfg.tracking_params();
        let k = self.calib.rig.intrinsics;
        let matches = descriptor_track(cands, features, pred, &k, (self.calib.width, self.calib.height), radius, tp.tau_h);
        if matches.len() < tp.pnp.min_inliers {
            return None;
        }
        let corr: Vec<(Vector3<f64>, Vector2<f64>)> = matches
            .iter()
            .map(|m| {
                let kp = &features.keypoints[m.keypoint];
                (cands[m.point].position, Vector2::new(kp.u as f64, kp.v as f64))
            })
            .collect();
        let r = refine_pnp(&corr, &k, pred, &tp.pnp);

        (r.status == TrackStatus::Ok).then(|| Tracked {
            pose: r.pose,
            links: matches
                .iter()
                .zip(&r.inliers)
                .filter(|(_, &ok)| ok)
                .map(|(m, _)| (cands[m.point].id, m.keypoint))
                .collect(),
        })
    }

    fn relocalize(&self, features: &FeatureSet) -> Option<(KeyframeId, PoseSE3)> {
        let Backend::Inline(m) = &self.backend else { return None };
        let tp = self.cfg.tracking_params();
        m.closer
            .relocalize(&m.map, features, &self.calib.rig.intrinsics, &tp.pnp, self.cfg.tracking.reloc_candidates)
            .map(|(kf, pose, _)| (kf, pose))
    }

    pub fn process(&mut self, input: InputFrame) -> Result<FrameOutcome> {
        let t = Instant::now();
        let (w, h) = (self.calib.width, self.calib.height);
        if (input.left.width, input.left.height) != (w, h) {
            return Err(Error::Ingestion(format!("frame {} has size {}x{}, expected {w}x{h}", input.timestamp, input.left.width, input.left.height)));
        }
        let left = self.pre_left.process(&RawThermalFrame::from_grid(input.timestamp, input.left))?;
        let builtin = self.cfg.features.provider == Provider::Builtin;
        let right = if builtin {
            Some(self.pre_right.process(&RawThermalFrame::from_grid(input.timestamp, input.right))?)
        } else {
            None
        };
        let pyramid = FlowPyramid::new(&GrayF::from_u8(w, h, &left.data), self.cfg.lk_params().max_level);
        self.times.add(Stage::Preproc, t.elapsed());

        let t = Instant::now();
        let (features, right_features) = match (builtin, input.features) {
            (true, _) => {
                let dp = self.cfg.detector_params();
                (detect_features(&left, &dp), detect_features(right.as_ref().expect("preprocessed"), &dp))
            }
            (false, Some((mut l, mut r))) => {
                l.timestamp = input.timestamp;
                r.timestamp = input.timestamp;
                (l, r)
            }
            (false, None) => return Err(Error::Config("feature provider 'file' needs a features/ directory".into())),
        };
        self.times.add(Stage::Features, t.elapsed());

        let t = Instant::now();
        let (features, filtered) = self.filter(features, input.mask.as_ref(), &pyramid);
        self.times.add(Stage::Dynfilter, t.elapsed());

        let t = Instant::now();
        let backend_before = self.inline_backend;
        self.refresh_snapshot()?;
        let outcome = self.track(input.timestamp, features, right_features, pyramid, filtered);
        self.times.add(Stage::Tracking, t.elapsed().saturating_sub(self.inline_backend - backend_before));
        self.frame_index += 1;
        outcome
    }

    fn track(&mut self, timestamp: f64, features: FeatureSet, right: FeatureSet, pyramid: FlowPyramid, filtered: usize) -> Result<FrameOutcome> {
        let index = self.frame_index;
        let Some(last) = self.last.as_ref().filter(|_| self.reference.is_some()) else {
            // bootstrap at the origin
            let pose = PoseSE3::identity();
            let id = self.submit(KeyframeJob {
                timestamp,
                pose,
                features,
                right,
                tracked: Vec::new(),
            })?;
            self.motion = MotionModel::new(pose);
            self.finish_frame(timestamp, id, PoseSE3::identity(), true, pyramid, Vec::new());
            return Ok(FrameOutcome {
                tracked: true,
                inliers: 0,
                keyframe: Some(id),
                filtered,
            });
        };
        let reference = self.reference.expect("checked");
        let last_pose = match self.keyframe_pose(last.reference) {
            Some(p) => last.relative * p,
            None => return Err(Error::EstimationFailed(format!("keyframe {} vanished", last.reference))),
        };
        self.motion.last_pose = last_pose;
        let predicted = predict_pose(&self.motion);
        let mut pred = predicted;
        if self.cfg.tracking.dual_level && last.tracked {
            let pts: Vec<PhotoPoint> = last
                .inliers
                .iter()
                .filter_map(|(pid, uv)| {
                    self.snapshot.points.get(pid).map(|(pw, _)| PhotoPoint {
                        pc: last_pose.transform(pw),
                        uv: *uv,
                    })
                })
                .collect();
            let init = if self.motion.valid { self.motion.velocity } else { PoseSE3::identity() };
            let tp = self.cfg.tracking_params();
            match photometric_align(&last.pyramid, &pyramid, &pts, &self.calib.rig.intrinsics, &init, &tp.photo) {
                Ok(rel) => pred = rel * last_pose,
                Err(e) => log::debug!("frame {index}: photometric alignment failed ({e})"),
            }
        }

        let cands = self.local_map(reference);
        // no velocity yet: the prediction is only the last pose
        let radius = self.cfg.tracking.radius * if self.motion.valid { 1.0 } else { RETRY_RADIUS_FACTOR };
        let mut result = self.track_against(&cands, &features, &pred, radius);
        if result.is_none() {
            result = self.track_against(&cands, &features, &predicted, radius * RETRY_RADIUS_FACTOR);
        }
        let mut reference = reference;
        if result.is_none() {
            if let Some((kf, pose)) = self.relocalize(&features) {
                log::info!("frame {index}: relocalized against keyframe {kf}");
                self.relocalizations += 1;
                reference = kf;
                self.reference = Some(kf);
                let cands = self.local_map(kf);
                result = self.track_against(&cands, &features, &pose, radius).or(Some(Tracked { pose, links: Vec::new() }));
            }
        }

        let Some(tr) = result else {
            self.lost_streak += 1;
            log::debug!("frame {index}: lost ({} in a row)", self.lost_streak);
            let ref_pose = self.keyframe_pose(reference).expect("reference known");
            if self.lost_streak >= self.cfg.tracking.max_lost {
                // re-anchor at the dead-reckoned pose
                let id = self.submit(KeyframeJob {
                    timestamp,
                    pose: predicted,
                    features,
                    right,
                    tracked: Vec::new(),
                })?;
                self.lost_streak = 0;
                self.motion.update(predicted);
                self.finish_frame(timestamp, id, PoseSE3::identity(), false, pyramid, Vec::new());
                return Ok(FrameOutcome {
                    tracked: false,
                    inliers: 0,
                    keyframe: Some(id),
                    filtered,
                });
            }
            self.motion.update(predicted);
            self.finish_frame(timestamp, reference, predicted * ref_pose.inverse(), false, pyramid, Vec::new());
            return Ok(FrameOutcome {
                tracked: false,
                inliers: 0,
                keyframe: None,
                filtered,
            });
        };
        self.lost_streak = 0;
        self.motion.update(tr.pose);
        self.frames_since_keyframe += 1;
        let inliers = tr.links.len();
        let ref_points = self.snapshot.keyframes.get(&reference).map(|k| k.points.len()).unwrap_or(inliers);
        let pixels: Vec<(PointId, Vector2<f64>)> = tr
            .links
            .iter()
            .map(|&(pid, kp)| (pid, Vector2::new(features.keypoints[kp].u as f64, features.keypoints[kp].v as f64)))
            .collect();
        if should_insert_keyframe(self.frames_since_keyframe, inliers, ref_points, self.cfg.mapping.max_gap) {
            let id = self.submit(KeyframeJob {
                timestamp,
                pose: tr.pose,
                features,
                right,
                tracked: tr.links,
            })?;
            self.finish_frame(timestamp, id, PoseSE3::identity(), true, pyramid, pixels);
            return Ok(FrameOutcome {
                tracked: true,
                inliers,
                keyframe: Some(id),
                filtered,
            });
        }
        let ref_pose = self.keyframe_pose(reference).expect("reference known");
        self.finish_frame(timestamp, reference, tr.pose * ref_pose.inverse(), true, pyramid, pixels);
        Ok(FrameOutcome {
            tracked: true,
            inliers,
            keyframe: None,
            filtered,
        })
    }

    fn finish_frame(&mut self, timestamp: f64, reference: KeyframeId, relative: PoseSE3, tracked: bool, pyramid: FlowPyramid, inliers: Vec<(PointId, Vector2<f64>)>) {
        self.records.push(FrameRecord {
            timestamp,
            reference: Some(reference),
            relative,
            tracked,
        });
        self.last = Some(LastFrame {
            reference,
            relative,
            pyramid,
            inliers,
            tracked,
        });
    }

    /// Records a frame that could not be processed at all.
    pub fn skip(&mut self, timestamp: f64) {
        self.records.push(FrameRecord {
            timestamp,
            reference: None,
            relative: PoseSE3::identity(),
            tracked: false,
        });
        self.frame_index += 1;
    }

    /// Drains the backend and returns the final map state.
    pub fn finish(mut self) -> Result<Finished> {
        let mapper = match std::mem::replace(&mut self.backend, Backend::Threaded { tx: None, shared: Arc::new(Mutex::new(Published { snapshot: Arc::default(), error: None })), handle: None }) {
            Backend::Inline(m) => *m,
            Backend::Threaded { tx, shared, handle } => {
                drop(tx);
                let m = handle.expect("worker").join().map_err(|_| Error::EstimationFailed("mapping worker panicked".into()))?;
                if let Some(e) = &shared.lock().expect("publisher lock").error {
                    return Err(Error::EstimationFailed(format!("mapping: {e}")));
                }
                m
            }
        };
        let poses = self
            .records
            .iter()
            .map(|r| {
                let pose = r
                    .reference
                    .and_then(|k| mapper.map.keyframes.get(&k))
                    .map(|k| (r.relative * k.pose).inverse());
                Stamped {
                    timestamp: r.timestamp,
                    pose: pose.unwrap_or_default(),
                    tracked: r.tracked && pose.is_some(),
                }
            })
            .collect();
        let mut times = self.times;
        times.merge(&mapper.times);
        Ok(Finished {
            trajectory: Trajectory::new(poses)?,
            times,
            relocalizations: self.relocalizations,
            mapper,
        })
    }
}

pub struct Finished {
    /// Camera-to-world, one entry per input frame.
    pub trajectory: Trajectory,
    pub times: StageTimes,
    pub relocalizations: usize,
    pub mapper: Mapper,
}

/// Result of a complete run, successful or not.
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub manifest: RunManifest,
    pub times: StageTimes,
    pub wall: Duration,
    pub mapper: Option<Mapper>,
}

/// Runs every frame of `source` through the system. Failures are reported
/// in the manifest, with whatever trajectory was estimated before them.
pub fn run(source: &dyn FrameSource, cfg: &PipelineConfig, inputs: Vec<String>) -> RunOutput {
    let start = Instant::now();
    let mut manifest = RunManifest::new(cfg.hash(), inputs);
    let mut failure: Option<Error> = None;
    let mut slam = match Slam::new(cfg, source.calibration()) {
        Ok(s) => Some(s),
        Err(e) => {
            failure = Some(e);
            None
        }
    };
    let mut ingest = StageTimes::default();
    if let Some(s) = slam.as_mut() {
        for i in 0..source.len() {
            let t = Instant::now();
            let frame = source.frame(i);
            ingest.add(Stage::Ingest, t.elapsed());
            let r = frame.and_then(|f| s.process(f));
            if let Err(e) = r {
                log::error!("frame {i}: {e}");
                failure = Some(e);
                break;
            }
        }
    }
    let (trajectory, mut times, mapper) = match slam.map(Slam::finish) {
        Some(Ok(f)) => {
            manifest.relocalizations = f.relocalizations;
            (f.trajectory, f.times, Some(f.mapper))
        }
        Some(Err(e)) => {
            failure.get_or_insert(e);
            (Trajectory::default(), StageTimes::default(), None)
        }
        None => (Trajectory::default(), StageTimes::default(), None),
    };
    times.merge(&ingest);
    manifest.frames = trajectory.len();
    manifest.tracked_frames = trajectory.poses.iter().filter(|p| p.tracked).count();
    if let Some(m) = &mapper {
        manifest.keyframes = m.map.keyframes.len();
        manifest.map_points = m.map.points.len();
        manifest.loop_closures = m.loops;
    }
    manifest.stage_calls = STAGES.iter().map(|s| (s.name().to_string(), times.calls[*s as usize])).collect();
    match failure {
        None => manifest.status = "ok".into(),
        Some(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
        }
    }
    RunOutput {
        trajectory,
        manifest,
        times,
        wall: start.elapsed(),
        mapper,
    }
}

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::LoopCandidate;
use crate::features::match_mutual_nn;
use crate::geometry::{estimate_fundamental_ransac, umeyama_sim3, RansacParams, Sim3, StereoRig, Vector7};
use crate::mapping::{Keyframe, KeyframeId, Map};

/// Temporal grouping of candidates with nearby keyframe ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Island {
    /// Member ids, ascending.
    pub keyframes: Vec<KeyframeId>,
    pub mean_score: f64,
    /// Highest-scoring member.
    pub best: KeyframeId,
}

impl Island {
    pub fn first(&self) -> KeyframeId {
        self.keyframes[0]
    }
    pub fn last(&self) -> KeyframeId {
        *self.keyframes.last().expect("islands are non-empty")
    }
}

/// Splits candidates into maximal runs whose consecutive ids differ by at
/// most `span` and returns the run with the highest mean score. Ties go to
/// the run holding the best single candidate, then to the lower ids.
pub fn select_island(candidates: &[LoopCandidate], span: u64) -> Option<Island> {
    let mut c: Vec<(KeyframeId, f64)> = candidates.iter().map(|c| (c.keyframe, c.score)).collect();
    c.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
    c.dedup_by_key(|x| x.0);
    let mut islands: Vec<Vec<(KeyframeId, f64)>> = Vec::new();
    for x in c {
        match islands.last_mut() {
            Some(run) if x.0 - run.last().expect("non-empty").0 <= span => run.push(x),
            _ => islands.push(vec![x]),
        }
    }
    let summarize = |run: &Vec<(KeyframeId, f64)>| {
        let mean = run.iter().map(|x| x.1).sum::<f64>() / run.len() as f64;
        // best member: highest score, lowest id
        let best = run.iter().copied().fold(run[0], |b, x| if x.1 > b.1 { x } else { b });
        (mean, best)
    };
    islands
        .iter()
        .map(|run| (run, summarize(run)))
        .reduce(|a, b| {
            let ((ma, ba), (mb, bb)) = (a.1, b.1);
            if mb > ma || (mb == ma && bb.1 > ba.1) {
                b
            } else {
                a
            }
        })
        .map(|(run, (mean, best))| Island {
            keyframes: run.iter().map(|x| x.0).collect(),
            mean_score: mean,
            best: best.0,
        })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyParams {
    pub tau_inl: usize,
    pub tau_h: u32,
    pub fundamental: RansacParams,
    pub sim3_iters: usize,
    /// Symmetric reprojection gate for Sim(3) inliers, pixels.
    pub reproj_threshold: f64,
    pub seed: u64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            tau_inl: 20,
            tau_h: 64,
            fundamental: RansacParams {
                threshold: 1.0,
                ..RansacParams::default()
            },
            sim3_iters: 200,
            reproj_threshold: 3.0,
            seed: 0x100b_c105_e000_0001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyStage {
    Fundamental,
    Similarity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("loop rejected at the {stage:?} stage with {inliers} inliers")]
pub struct LoopRejection {
    pub stage: VerifyStage,
    pub inliers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopMatch {
    pub candidate: KeyframeId,
    /// Maps candidate-camera points into the current camera.
    pub relative: Sim3,
    /// (current keypoint, candidate keypoint) pairs consistent with `relative`.
    pub inliers: Vec<(usize, usize)>,
}

/// Camera-frame position of a keypoint: its map point if any, else its
/// stereo triangulation.
fn camera_point(kf: &Keyframe, map: Option<&Map>, i: usize) -> Option<Vector3<f64>> {
    if let (Some(m), Some(pid)) = (map, kf.observations.get(i).copied().flatten()) {
        if let Some(p) = m.points.get(&pid) {
            return Some(kf.pose.transform(&p.position));
        }
    }
    kf.stereo.get(i).copied().flatten().map(|s| s.pc)
}

/// Measured right column, or the one implied by the camera-frame point.
fn right_column(kf: &Keyframe, rig: &StereoRig, i: usize, pc: &Vector3<f64>) -> Option<f64> {
    match kf.stereo.get(i).copied().flatten() {
        Some(s) => Some(s.u_r),
        None => rig.project_right_u(pc),
    }
}

struct Pair {
    cur: Vector3<f64>,
    cand: Vector3<f64>,
    /// Measured (u, v, u_right) in each keyframe.
    z_cur: Vector3<f64>,
    z_cand: Vector3<f64>,
    idx: (usize, usize),
}

/// Left pixel plus right column of a camera-frame point.
fn project_stereo(rig: &StereoRig, x: &Vector3<f64>) -> Option<Vector3<f64>> {
    let uv = rig.intrinsics.project(x)?;
    Some(Vector3::new(uv.x, uv.y, rig.project_right_u(x)?))
}

/// Stereo reprojection error of the pair in both directions.
fn residuals(rig: &StereoRig, s: &Sim3, p: &Pair) -> Option<[f64; 6]> {
    let a = project_stereo(rig, &s.transform(&p.cand))? - p.z_cur;
    let b = project_stereo(rig, &s.inverse().transform(&p.cur))? - p.z_cand;
    Some([a.x, a.y, a.z, b.x, b.y, b.z])
}

fn norms(r: &[f64; 6]) -> (f64, f64) {
    (Vector3::new(r[0], r[1], r[2]).norm(), Vector3::new(r[3], r[4], r[5]).norm())
}

fn is_inlier(rig: &StereoRig, s: &Sim3, p: &Pair, th: f64) -> bool {
    residuals(rig, s, p).is_some_and(|r| {
        let (a, b) = norms(&r);
        a <= th && b <= th
    })
}

fn count_inliers(rig: &StereoRig, s: &Sim3, pairs: &[Pair], th: f64) -> Vec<bool> {
    pairs.iter().map(|p| is_inlier(rig, s, p, th)).collect()
}

/// Gauss–Newton with step halving on the Huber symmetric reprojection
/// error; numeric Jacobian in the left tangent. The right-image column
/// keeps the scale observable when the translation is small.
fn refine_sim3(rig: &StereoRig, init: Sim3, pairs: &[&Pair], delta: f64) -> Sim3 {
    let huber = |r: f64| if r <= delta { 0.5 * r * r } else { delta * (r - 0.5 * delta) };
    let cost = |s: &Sim3| -> f64 {
        pairs
            .iter()
            .map(|p| {
                residuals(rig, s, p).map_or(huber(1e3) * 2.0, |r| {
                    let (a, b) = norms(&r);
                    huber(a) + huber(b)
                })
            })
            .sum()
    };
    let mut s = init;
    let mut c = cost(&s);
    for _ in 0..10 {
        let n = pairs.len() * 6;
        let mut j = DMatrix::<f64>::zeros(n, 7);
        let mut e = DVector::<f64>::zeros(n);
        let mut w = DVector::<f64>::zeros(n);
        for (i, p) in pairs.iter().enumerate() {
            let Some(r0) = residuals(rig, &s, p) else { continue };
            let (na, nb) = norms(&r0);
            let (wa, wb) = (if na <= delta { 1.0 } else { delta / na }, if nb <= delta { 1.0 } else { delta / nb });
            for (r, v) in r0.iter().enumerate() {
                e[6 * i + r] = *v;
                w[6 * i + r] = if r < 3 { wa } else { wb };
            }
            for col in 0..7 {
                let h = 1e-6;
                let mut d = Vector7::zeros();
                d[col] = h;
                let (Some(rp), Some(rm)) = (residuals(rig, &s.retract(&d), p), residuals(rig, &s.retract(&(-d)), p)) else { continue };
                for r in 0..6 {
                    j[(6 * i + r, col)] = (rp[r] - rm[r]) / (2.0 * h);
                }
            }
        }
        let jw = DMatrix::from_fn(n, 7, |r, c| j[(r, c)] * w[r]);
        let h = jw.transpose() * &j + DMatrix::identity(7, 7) * 1e-9;
        let g = jw.transpose() * &e;
        let Some(step) = h.cholesky().map(|ch| -ch.solve(&g)) else { break };
        let mut step = Vector7::from_iterator(step.iter().copied());
        let mut improved = false;
        for _ in 0..6 {
            let cand = s.retract(&step);
            let cc = cost(&cand);
            if cc < c {
                s = cand;
                c = cc;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved || step.norm() < 1e-10 {
            break;
        }
    }
    s
}

/// Two-stage geometric check of `cand` against `curr`: epipolar consistency
/// of descriptor matches, then a similarity transform between the matched
/// 3D points refined on symmetric reprojection error.
pub fn verify_loop(curr: &Keyframe, cand: &Keyframe, map: Option<&Map>, rig: &StereoRig, params: &VerifyParams) -> Result<LoopMatch, LoopRejection> {
    let matches = match_mutual_nn(&curr.features.binary, &cand.features.binary, params.tau_h);
    let reject = |stage, inliers| LoopRejection { stage, inliers };
    if matches.len() < params.tau_inl.max(8) {
        return Err(reject(VerifyStage::Fundamental, 0));
    }
    let px = |kf: &Keyframe, i: usize| {
        let kp = &kf.features.keypoints[i];
        Vector2::new(kp.u as f64, kp.v as f64)
    };
    let corr: Vec<(Vector2<f64>, Vector2<f64>)> = matches.iter().map(|&(i, j, _)| (px(curr, i), px(cand, j))).collect();
    let f_inliers = match estimate_fundamental_ransac(&corr, &params.fundamental) {
        Ok((_, inl)) => inl,
        Err(_) => return Err(reject(VerifyStage::Fundamental, 0)),
    };
    let n_f = f_inliers.iter().filter(|&&b| b).count();
    if n_f < params.tau_inl {
        return Err(reject(VerifyStage::Fundamental, n_f));
    }

    let pairs: Vec<Pair> = matches
        .iter()
        .zip(&f_inliers)
        .filter(|(_, &ok)| ok)
        .filter_map(|(&(i, j, _), _)| {
            let (cur, cnd) = (camera_point(curr, map, i)?, camera_point(cand, map, j)?);
            let (a, b) = (px(curr, i), px(cand, j));
            Some(Pair {
                cur,
                cand: cnd,
                z_cur: Vector3::new(a.x, a.y, right_column(curr, rig, i, &cur)?),
                z_cand: Vector3::new(b.x, b.y, right_column(cand, rig, j, &cnd)?),
                idx: (i, j),
            })
        })
        .collect();
    if pairs.len() < params.tau_inl.max(3) {
        return Err(reject(VerifyStage::Similarity, pairs.len()));
    }
    let th = params.reproj_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Sim3)> = None;
    for _ in 0..params.sim3_iters {
        let idx = sample(&mut rng, pairs.len(), 3);
        let src: Vec<Vector3<f64>> = idx.iter().map(|i| pairs[i].cand).collect();
        let dst: Vec<Vector3<f64>> = idx.iter().map(|i| pairs[i].cur).collect();
        let Ok(s) = umeyama_sim3(&src, &dst, true) else { continue };
        let n = pairs.iter().filter(|p| is_inlier(rig, &s, p, th)).count();
        if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
            best = Some((n, s));
            if n == pairs.len() {
                break;
            }
        }
    }
    let Some((n_best, s)) = best else {
        return Err(reject(VerifyStage::Similarity, 0));
    };
    if n_best < params.tau_inl {
        return Err(reject(VerifyStage::Similarity, n_best));
    }
    let mask = count_inliers(rig, &s, &pairs, th);
    let inl: Vec<&Pair> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p).collect();
    let src: Vec<Vector3<f64>> = inl.iter().map(|p| p.cand).collect();
    let dst: Vec<Vector3<f64>> = inl.iter().map(|p| p.cur).collect();
    let s = umeyama_sim3(&src, &dst, true).unwrap_or(s);
    let s = refine_sim3(rig, s, &inl, th);

    let mask = count_inliers(rig, &s, &pairs, th);
    let inliers: Vec<(usize, usize)> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p.idx).collect();
    if inliers.len() < params.tau_inl {
        return Err(reject(VerifyStage::Similarity, inliers.len()));
    }
    Ok(LoopMatch {
        candidate: cand.id,
        relative: s,
        inliers,
    })
}

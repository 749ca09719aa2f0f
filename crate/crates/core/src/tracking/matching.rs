use nalgebra::Vector3;

use crate::features::{hamming, BinaryDescriptor, FeatureSet};
use crate::geometry::{Intrinsics, PoseSE3};

/// A map point offered to the projection matcher.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapCandidate {
    pub id: u64,
    pub position: Vector3<f64>,
    pub descriptor: BinaryDescriptor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionMatch {
    /// Index into the candidate list.
    pub point: usize,
    /// Index into the frame's keypoints.
    pub keypoint: usize,
    pub distance: u32,
}

/// Projects each candidate with `pred`, searches keypoints within `radius`
/// and keeps the closest descriptor with distance `≤ tau_h`. A keypoint
/// claimed twice goes to the lower distance, then the lower point index.
pub fn descriptor_track(
    candidates: &[MapCandidate],
    frame: &FeatureSet,
    pred: &PoseSE3,
    k: &Intrinsics,
    size: (usize, usize),
    radius: f64,
    tau_h: u32,
) -> Vec<ProjectionMatch> {
    let (w, h) = (size.0 as f64, size.1 as f64);
    let cell = radius.max(1.0);
    let (gw, gh) = ((w / cell).ceil() as usize + 1, (h / cell).ceil() as usize + 1);
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); gw * gh];
    for (i, kp) in frame.keypoints.iter().enumerate() {
        let (cx, cy) = ((kp.u as f64 / cell).floor(), (kp.v as f64 / cell).floor());
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < gw && (cy as usize) < gh {
            grid[cy as usize * gw + cx as usize].push(i);
        }
    }
    let r2 = radius * radius;
    // best claim per keypoint: (distance, point index)
    let mut claims: Vec<Option<(u32, usize)>> = vec![None; frame.len()];
    for (pi, cand) in candidates.iter().enumerate() {
        let Some(uv) = k.project(&pred.transform(&cand.position)) else { continue };
        if uv.x < 0.0 || uv.y < 0.0 || uv.x >= w || uv.y >= h {
            continue;
        }
        let (x0, x1) = (((uv.x - radius) / cell).floor().max(0.0) as usize, (((uv.x + radius) / cell).floor() as usize).min(gw - 1));
        let (y0, y1) = (((uv.y - radius) / cell).floor().max(0.0) as usize, (((uv.y + radius) / cell).floor() as usize).min(gh - 1));
        let mut best: Option<(u32, usize)> = None;
        for gy in y0..=y1 {
            for gx in x0..=x1 {
                for &ki in &grid[gy * gw + gx] {
                    let kp = &frame.keypoints[ki];
                    let (du, dv) = (kp.u as f64 - uv.x, kp.v as f64 - uv.y);
                    if du * du + dv * dv > r2 {
                        continue;
                    }
                    let d = hamming(&cand.descriptor, &frame.binary[ki]);
                    if d <= tau_h && best.is_none_or(|(bd, bk)| (d, ki) < (bd, bk)) {
                        best = Some((d, ki));
                    }
                }
            }
        }
        if let Some((d, ki)) = best {
            if claims[ki].is_none_or(|(cd, cp)| (d, pi) < (cd, cp)) {
                claims[ki] = Some((d, pi));
            }
        }
    }
    let mut out: Vec<ProjectionMatch> = claims
        .iter()
        .enumerate()
        .filter_map(|(ki, c)| c.map(|(d, pi)| ProjectionMatch { point: pi, keypoint: ki, distance: d }))
        .collect();
    out.sort_by_key(|m| m.point);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, Keypoint, DESC_DIM};

    fn desc_with_bits(flip: &[usize]) -> Descriptor {
        let mut raw = vec![1.0f32; DESC_DIM];
        for &i in flip {
            raw[i] = -1.0;
        }
        Descriptor::normalized(&raw).unwrap()
    }

    fn k() -> Intrinsics {
        Intrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap()
    }

    fn cand(id: u64, u: f64, v: f64, flip: &[usize]) -> MapCandidate {
        let p = k().unproject(u, v, 10.0);
        MapCandidate {
            id,
            position: p,
            descriptor: crate::features::binarize(&desc_with_bits(flip)),
        }
    }

    #[test]
    fn exact_projection_matches_at_zero() {
        let fs = FeatureSet::new(0.0, vec![Keypoint::new(100.0, 100.0, 1.0)], vec![desc_with_bits(&[])]).unwrap();
        let m = descriptor_track(&[cand(0, 100.0, 100.0, &[])], &fs, &PoseSE3::identity(), &k(), (640, 480), 15.0, 64);
        assert_eq!(m, vec![ProjectionMatch { point: 0, keypoint: 0, distance: 0 }]);
    }

    #[test]
    fn radius_gate() {
        let fs = FeatureSet::new(0.0, vec![Keypoint::new(116.0, 100.0, 1.0)], vec![desc_with_bits(&[])]).unwrap();
        let m = descriptor_track(&[cand(0, 100.0, 100.0, &[])], &fs, &PoseSE3::identity(), &k(), (640, 480), 15.0, 64);
        assert!(m.is_empty());
    }

    #[test]
    fn one_to_one_prefers_lower_distance() {
        let fs = FeatureSet::new(0.0, vec![Keypoint::new(200.0, 200.0, 1.0)], vec![desc_with_bits(&[])]).unwrap();
        let flips40: Vec<usize> = (0..40).collect();
        let flips10: Vec<usize> = (100..110).collect();
        let cands = [cand(0, 201.0, 200.0, &flips40), cand(1, 199.0, 201.0, &flips10)];
        let m = descriptor_track(&cands, &fs, &PoseSE3::identity(), &k(), (640, 480), 15.0, 64);
        assert_eq!(m, vec![ProjectionMatch { point: 1, keypoint: 0, distance: 10 }]);
    }

    #[test]
    fn hamming_gate() {
        let fs = FeatureSet::new(0.0, vec![Keypoint::new(200.0, 200.0, 1.0)], vec![desc_with_bits(&[])]).unwrap();
        let flips: Vec<usize> = (0..65).collect();
        let m = descriptor_track(&[cand(0, 200.0, 200.0, &flips)], &fs, &PoseSE3::identity(), &k(), (640, 480), 15.0, 64);
        assert!(m.is_empty());
    }
}

//! Suppression of keypoints on independently moving objects: semantic masks
//! flag suspects, and an epipolar test against the motion of the rest of the
//! scene decides which suspects really move.

mod flow;

pub use flow::{track_flow_pyr, track_point, FlowCorrespondence, FlowPyramid, LkParams};

use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::features::Keypoint;
use crate::geometry::{epipolar_distance, estimate_fundamental_ransac, FundamentalMatrix, RansacParams};
use crate::image::{read_gray8, Grid, GrayF};
use crate::preproc::PreprocFrame;

/// Boolean image, `true` on pixels belonging to potentially dynamic objects.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMask {
    pub width: usize,
    pub height: usize,
    pub bitmap: Vec<bool>,
}

impl DynamicMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bitmap: vec![false; width * height],
        }
    }

    pub fn from_grid(grid: &Grid<u8>) -> Self {
        Self {
            width: grid.width,
            height: grid.height,
            bitmap: grid.data.iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_grid(&read_gray8(path)?))
    }

    pub fn to_grid(&self) -> Grid<u8> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.bitmap.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bitmap[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        !self.bitmap.iter().any(|&b| b)
    }

    /// True if any mask pixel lies within `radius` of the pixel nearest `(u, v)`.
    pub fn contains(&self, u: f64, v: f64, radius: usize) -> bool {
        let (x, y) = (u.round() as isize, v.round() as isize);
        let r = radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as usize) < self.width && (py as usize) < self.height && self.get(px as usize, py as usize) {
                    return true;
                }
            }
        }
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterParams {
    /// Epipolar distance gate for mask-interior points, in pixels.
    pub tau: f64,
    /// Mask dilation radius applied before the interior test.
    pub dilation: usize,
    pub ransac: RansacParams,
    pub lk: LkParams,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            dilation: 3,
            ransac: RansacParams::default(),
            lk: LkParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    pub fundamental: FundamentalMatrix,
    /// Correspondences annotated with their mask membership.
    pub correspondences: Vec<FlowCorrespondence>,
}

/// Sparse flow from keypoints of `curr` back into `prev`.
pub fn track_flow(prev: &PreprocFrame, curr: &PreprocFrame, points: &[Keypoint], params: &LkParams) -> Result<Vec<FlowCorrespondence>> {
    if (prev.width, prev.height) != (curr.width, curr.height) {
        return Err(Error::InvalidInput("frames differ in size".into()));
    }
    let pp = FlowPyramid::new(&GrayF::from_u8(prev.width, prev.height, &prev.data), params.max_level);
    let pc = FlowPyramid::new(&GrayF::from_u8(curr.width, curr.height, &curr.data), params.max_level);
    Ok(track_flow_pyr(&pp, &pc, points, params))
}

/// Estimates `F` from tracked mask-exterior correspondences, then keeps
/// exterior points that tracked and interior points that tracked and lie
/// within `tau` of their epipolar line.
pub fn filter_dynamic(corr: &[FlowCorrespondence], mask: &DynamicMask, params: &FilterParams) -> Result<FilterOutcome> {
    let annotated: Vec<FlowCorrespondence> = corr
        .iter()
        .map(|c| FlowCorrespondence {
            in_mask: mask.contains(c.p_t.x, c.p_t.y, params.dilation),
            ..*c
        })
        .collect();
    let exterior: Vec<(Vector2<f64>, Vector2<f64>)> = annotated
        .iter()
        .filter(|c| c.tracked && !c.in_mask)
        .map(|c| (c.p_t, c.p_prev))
        .collect();
    if exterior.len() < 8 {
        return Err(Error::FilterUnavailable(exterior.len()));
    }
    let (f, _) = estimate_fundamental_ransac(&exterior, &params.ransac)?;
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, c) in annotated.iter().enumerate() {
        let keep = c.tracked
            && (!c.in_mask || epipolar_distance(&f, &c.p_t, &c.p_prev).map(|d| d < params.tau).unwrap_or(false));
        if keep {
            kept.push(i);
        } else {
            removed.push(i);
        }
    }
    Ok(FilterOutcome {
        kept,
        removed,
        fundamental: f,
        correspondences: annotated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsim::planted::{planted_flow_scene, PlantedFlowSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(n_parked: usize, n_moving: usize) -> PlantedFlowSpec {
        PlantedFlowSpec {
            n_static: 60,
            n_parked,
            n_moving,
            ..Default::default()
        }
    }

    #[test]
    fn empty_mask_keeps_all_tracked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = planted_flow_scene(&mut rng, &spec(0, 0));
        s.corr[3].tracked = false;
        let mask = DynamicMask::empty(s.mask.width, s.mask.height);
        let out = filter_dynamic(&s.corr, &mask, &FilterParams::default()).unwrap();
        assert_eq!(out.removed, vec![3]);
        assert_eq!(out.kept.len(), s.corr.len() - 1);
    }

    #[test]
    fn independent_movers_removed_static_kept() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = planted_flow_scene(&mut rng, &spec(0, 15));
            let out = filter_dynamic(&s.corr, &s.mask, &FilterParams::default()).unwrap();
            for (i, &mv) in s.moving.iter().enumerate() {
                assert_eq!(out.kept.contains(&i), !mv, "seed {seed} point {i}");
            }
        }
    }

    #[test]
    fn parked_objects_obeying_the_geometry_are_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = planted_flow_scene(&mut rng, &spec(12, 0));
        let out = filter_dynamic(&s.corr, &s.mask, &FilterParams::default()).unwrap();
        assert!(out.correspondences.iter().filter(|c| c.in_mask).count() >= 12);
        assert!(out.removed.is_empty());
    }

    #[test]
    fn too_few_exterior_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sp = spec(0, 0);
        sp.n_static = 7;
        let s = planted_flow_scene(&mut rng, &sp);
        assert!(matches!(
            filter_dynamic(&s.corr, &s.mask, &FilterParams::default()),
            Err(Error::FilterUnavailable(7))
        ));
    }

    #[test]
    fn interior_points_never_change_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = planted_flow_scene(&mut rng, &spec(5, 15));
        let base = filter_dynamic(&s.corr, &s.mask, &FilterParams::default()).unwrap();
        let exterior: Vec<_> = base.correspondences.iter().filter(|c| !c.in_mask).cloned().collect();
        let mut interior: Vec<_> = base.correspondences.iter().filter(|c| c.in_mask).cloned().collect();
        interior.reverse();
        let mut shuffled = exterior.clone();
        shuffled.extend(interior);
        let a = filter_dynamic(&shuffled, &s.mask, &FilterParams::default()).unwrap();
        let b = filter_dynamic(&exterior, &s.mask, &FilterParams::default()).unwrap();
        assert_eq!(a.fundamental, base.fundamental);
        assert_eq!(b.fundamental, base.fundamental);
    }

    #[test]
    fn exact_interior_points_always_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = planted_flow_scene(&mut rng, &spec(0, 0));
        let out = filter_dynamic(&s.corr, &s.mask, &FilterParams::default()).unwrap();
        let f = out.fundamental;
        // a correspondence placed exactly on its epipolar line
        let p_t = s.corr[0].p_t + Vector2::new(3.0, 2.0);
        let l = f.line(&p_t);
        let foot = {
            let q = s.corr[0].p_prev;
            let d = (l.x * q.x + l.y * q.y + l.z) / (l.x * l.x + l.y * l.y);
            q - Vector2::new(l.x, l.y) * d
        };
        assert!(epipolar_distance(&f, &p_t, &foot).unwrap() < 1e-9);
        let mut corr = s.corr.clone();
        corr.push(FlowCorrespondence { p_t, p_prev: foot, tracked: true, in_mask: false });
        let mut mask = DynamicMask::empty(s.mask.width, s.mask.height);
        mask.bitmap[p_t.y.round() as usize * mask.width + p_t.x.round() as usize] = true;
        let out = filter_dynamic(&corr, &mask, &FilterParams::default()).unwrap();
        assert!(out.kept.contains(&(corr.len() - 1)));
    }

    #[test]
    fn mask_contains_with_dilation() {
        let mut m = DynamicMask::empty(20, 20);
        m.bitmap[10 * 20 + 10] = true;
        assert!(m.contains(10.0, 10.0, 0));
        assert!(!m.contains(13.0, 10.0, 0));
        assert!(m.contains(13.0, 10.0, 3));
        assert!(!m.contains(13.0, 13.0, 3));
    }
}

//! Direct sparse alignment of two frames over small patches around points
//! with known depth, coarse-to-fine on an image pyramid.

use nalgebra::{Matrix1x6, Matrix6, Vector2, Vector3, Vector6};

use crate::dynfilter::FlowPyramid;
use crate::error::{Error, Result};
use crate::geometry::{hat, Intrinsics, PoseSE3};

/// A point seen in the reference frame: camera-frame position and its pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotoPoint {
    pub pc: Vector3<f64>,
    pub uv: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotoParams {
    pub levels: usize,
    pub iterations: usize,
    /// Huber threshold on intensity residuals.
    pub huber: f64,
    pub min_points: usize,
}

impl Default for PhotoParams {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 20,
            huber: 10.0,
            min_points: 10,
        }
    }
}

const OFFSETS: [f64; 4] = [-2.0, -1.0, 0.0, 1.0];
const PATCH_PX: f64 = 16.0;
/// Residual charged to each pixel of a patch that leaves the image.
const OUTSIDE_RESIDUAL: f64 = 64.0;

fn huber(r: f64, d: f64) -> f64 {
    let a = r.abs();
    if a <= d {
        0.5 * r * r
    } else {
        d * (a - 0.5 * d)
    }
}

fn scaled(k: &Intrinsics, level: usize) -> Intrinsics {
    let s = 1.0 / (1u32 << level) as f64;
    Intrinsics {
        fx: k.fx * s,
        fy: k.fy * s,
        cx: k.cx * s,
        cy: k.cy * s,
    }
}

/// Reference patch intensities at one level, `None` when out of bounds.
fn reference_patches(last: &FlowPyramid, points: &[PhotoPoint], level: usize) -> Vec<Option<[f64; 16]>> {
    let img = &last.levels[level];
    let s = 1.0 / (1u32 << level) as f64;
    points
        .iter()
        .map(|p| {
            let (u, v) = (p.uv.x * s, p.uv.y * s);
            if !img.contains(u, v, 2.0) {
                return None;
            }
            let mut out = [0.0; 16];
            for (j, oy) in OFFSETS.iter().enumerate() {
                for (i, ox) in OFFSETS.iter().enumerate() {
                    out[j * 4 + i] = img.sample(u + ox, v + oy);
                }
            }
            Some(out)
        })
        .collect()
}

struct LevelEval {
    cost: f64,
    h: Matrix6<f64>,
    g: Vector6<f64>,
}

fn evaluate(
    curr: &FlowPyramid,
    level: usize,
    k: &Intrinsics,
    points: &[PhotoPoint],
    refs: &[Option<[f64; 16]>],
    pose: &PoseSE3,
    huber_d: f64,
    with_jacobian: bool,
) -> LevelEval {
    let img = &curr.levels[level];
    let (gx, gy) = (&curr.gx[level], &curr.gy[level]);
    let mut out = LevelEval {
        cost: 0.0,
        h: Matrix6::zeros(),
        g: Vector6::zeros(),
    };
    for (p, r) in points.iter().zip(refs) {
        let Some(r) = r else { continue };
        let q = pose.transform(&p.pc);
        let Some(uv) = k.project(&q).filter(|uv| img.contains(uv.x, uv.y, 2.0)) else {
            out.cost += PATCH_PX * huber(OUTSIDE_RESIDUAL, huber_d);
            continue;
        };
        let jq = if with_jacobian {
            let mut jt = nalgebra::Matrix3x6::zeros();
            jt.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&q)));
            jt.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
            Some(k.projection_jacobian(&q) * jt)
        } else {
            None
        };
        for (j, oy) in OFFSETS.iter().enumerate() {
            for (i, ox) in OFFSETS.iter().enumerate() {
                let (x, y) = (uv.x + ox, uv.y + oy);
                let res = img.sample(x, y) - r[j * 4 + i];
                out.cost += huber(res, huber_d);
                if let Some(jq) = &jq {
                    let w = if res.abs() <= huber_d { 1.0 } else { huber_d / res.abs() };
                    let grad = nalgebra::Matrix1x2::new(gx.sample(x, y), gy.sample(x, y));
                    let jrow: Matrix1x6<f64> = grad * jq;
                    out.h += w * jrow.transpose() * jrow;
                    out.g += w * jrow.transpose() * res;
                }
            }
        }
    }
    out
}

/// Full-resolution robust patch cost of `pose` (reference → current).
pub fn photometric_cost(last: &FlowPyramid, curr: &FlowPyramid, points: &[PhotoPoint], k: &Intrinsics, pose: &PoseSE3, huber_d: f64) -> f64 {
    let refs = reference_patches(last, points, 0);
    evaluate(curr, 0, k, points, &refs, pose, huber_d, false).cost
}

/// Gauss–Newton on the relative pose `T_curr_last`, coarse to fine. Never
/// returns a pose whose full-resolution cost exceeds that of `init`.
pub fn photometric_align(
    last: &FlowPyramid,
    curr: &FlowPyramid,
    points: &[PhotoPoint],
    k: &Intrinsics,
    init: &PoseSE3,
    params: &PhotoParams,
) -> Result<PoseSE3> {
    if last.levels.len() != curr.levels.len() || last.width() != curr.width() || last.height() != curr.height() {
        return Err(Error::InvalidInput("pyramids differ in shape".into()));
    }
    let usable: Vec<PhotoPoint> = points
        .iter()
        .filter(|p| p.pc.z > 0.0 && last.levels[0].contains(p.uv.x, p.uv.y, 2.0))
        .cloned()
        .collect();
    if usable.len() < params.min_points {
        return Err(Error::AlignFailed(format!("{} usable points, need {}", usable.len(), params.min_points)));
    }
    let top = params.levels.clamp(1, last.levels.len()) - 1;
    let mut pose = *init;
    for level in (0..=top).rev() {
        let kl = scaled(k, level);
        let refs = reference_patches(last, &usable, level);
        let mut cur = evaluate(curr, level, &kl, &usable, &refs, &pose, params.huber, true);
        for _ in 0..params.iterations {
            let Some(ch) = (cur.h + Matrix6::identity() * 1e-9).cholesky() else { break };
            let mut step = -ch.solve(&cur.g);
            let mut improved = false;
            for _ in 0..4 {
                let cand = pose.retract(&step);
                let next = evaluate(curr, level, &kl, &usable, &refs, &cand, params.huber, true);
                if next.cost < cur.cost {
                    pose = cand;
                    cur = next;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved || step.norm() < 1e-8 {
                break;
            }
        }
    }
    let c_init = photometric_cost(last, curr, &usable, k, init, params.huber);
    let c_final = photometric_cost(last, curr, &usable, k, &pose, params.huber);
    Ok(if c_final <= c_init { pose } else { *init })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayF;

    fn k() -> Intrinsics {
        Intrinsics::new(200.0, 200.0, 160.0, 120.0).unwrap()
    }

    /// Fronto-parallel textured plane at depth `z` seen by a camera offset by `tx` along x.
    fn render(tx: f64, z: f64) -> GrayF {
        let kk = k();
        let (w, h) = (320, 240);
        let tex = |x: f64, y: f64| 128.0 + 50.0 * (1.7 * x).sin() * (1.3 * y).cos() + 30.0 * (0.9 * x + 2.1 * y).sin();
        let data = (0..w * h)
            .map(|i| {
                let (u, v) = ((i % w) as f64, (i / w) as f64);
                // ray hits the plane at (X, Y, z) in the camera frame; world X = X + tx
                let x = (u - kk.cx) / kk.fx * z + tx;
                let y = (v - kk.cy) / kk.fy * z;
                tex(x, y) as f32
            })
            .collect();
        GrayF::from_vec(w, h, data).unwrap()
    }

    fn points(z: f64) -> Vec<PhotoPoint> {
        let kk = k();
        let mut out = Vec::new();
        for j in 0..8 {
            for i in 0..10 {
                let uv = Vector2::new(40.0 + 25.0 * i as f64, 35.0 + 24.0 * j as f64);
                out.push(PhotoPoint { pc: kk.unproject(uv.x, uv.y, z), uv });
            }
        }
        out
    }

    #[test]
    fn self_alignment_is_identity() {
        let img = FlowPyramid::new(&render(0.0, 5.0), 2);
        let pose = photometric_align(&img, &img, &points(5.0), &k(), &PoseSE3::identity(), &PhotoParams::default()).unwrap();
        assert!(pose.log().norm() < 1e-9);
        assert!(photometric_cost(&img, &img, &points(5.0), &k(), &pose, 10.0) < 1e-12);
    }

    #[test]
    fn recovers_small_translation() {
        let z = 5.0;
        let last = FlowPyramid::new(&render(0.0, z), 2);
        let curr = FlowPyramid::new(&render(0.05, z), 2);
        let pose = photometric_align(&last, &curr, &points(z), &k(), &PoseSE3::identity(), &PhotoParams::default()).unwrap();
        // camera moved +0.05 along x, so last-frame points shift by -0.05
        let t = pose.translation;
        assert!((t.x + 0.05).abs() < 0.05 * 0.05, "{t:?}");
    }

    #[test]
    fn never_worse_than_init() {
        let z = 5.0;
        let last = FlowPyramid::new(&render(0.0, z), 2);
        let curr = FlowPyramid::new(&render(0.05, z), 2);
        let truth = PoseSE3::from_translation(Vector3::new(-0.05, 0.0, 0.0));
        let pose = photometric_align(&last, &curr, &points(z), &k(), &truth, &PhotoParams::default()).unwrap();
        let p = points(z);
        assert!(photometric_cost(&last, &curr, &p, &k(), &pose, 10.0) <= photometric_cost(&last, &curr, &p, &k(), &truth, 10.0));
    }

    #[test]
    fn too_few_points_fail() {
        let img = FlowPyramid::new(&render(0.0, 5.0), 2);
        let p = &points(5.0)[..9];
        assert!(matches!(
            photometric_align(&img, &img, p, &k(), &PoseSE3::identity(), &PhotoParams::default()),
            Err(Error::AlignFailed(_))
        ));
    }
}

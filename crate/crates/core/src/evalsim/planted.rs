//! Small planted-geometry generators used by oracles and benchmarks.

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dynfilter::{DynamicMask, FlowCorrespondence};
use crate::geometry::{fundamental_from_motion, FundamentalMatrix, Intrinsics, PoseSE3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedFlowSpec {
    pub width: usize,
    pub height: usize,
    /// Static points outside every mask.
    pub n_static: usize,
    /// Static points inside a mask (parked objects).
    pub n_parked: usize,
    /// Independently moving points inside a mask.
    pub n_moving: usize,
    /// Range of the displacement of movers off their epipolar line, pixels.
    pub lateral: (f64, f64),
    /// Std-dev of Gaussian noise added to the tracked (previous-frame) point.
    pub noise: f64,
    /// Half side of the square mask blob drawn around each masked point.
    pub blob: usize,
}

impl Default for PlantedFlowSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            n_static: 60,
            n_parked: 0,
            n_moving: 15,
            lateral: (5.0, 15.0),
            noise: 0.0,
            blob: 6,
        }
    }
}

pub struct FlowScene {
    pub corr: Vec<FlowCorrespondence>,
    pub mask: DynamicMask,
    /// Ground-truth motion flag per correspondence.
    pub moving: Vec<bool>,
    pub truth: FundamentalMatrix,
}

/// One frame pair: random camera motion, random 3-D points, masked movers
/// pushed off their epipolar lines, parked points left consistent.
pub fn planted_flow_scene<R: Rng>(rng: &mut R, spec: &PlantedFlowSpec) -> FlowScene {
    let k = Intrinsics::new(400.0, 400.0, spec.width as f64 / 2.0, spec.height as f64 / 2.0).expect("positive focal");
    let km = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
    let xi = Vector6::new(
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.5..0.5),
    );
    let prev_from_cur = PoseSE3::exp(&xi);
    let truth = FundamentalMatrix(fundamental_from_motion(&km, &prev_from_cur.rotation, &prev_from_cur.translation));
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite std-dev");
    let margin = 30.0;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let inside = |q: &Vector2<f64>| q.x > margin && q.x < w - margin && q.y > margin && q.y < h - margin;

    let mut mask = DynamicMask::empty(spec.width, spec.height);
    let mut corr = Vec::new();
    let mut moving = Vec::new();
    let draw = |rng: &mut R| -> (Vector2<f64>, Vector2<f64>) {
        loop {
            let p = Vector3::new(rng.random_range(-12.0..12.0), rng.random_range(-9.0..9.0), rng.random_range(8.0..40.0));
            if let (Some(a), Some(b)) = (k.project(&p), k.project(&prev_from_cur.transform(&p))) {
                if inside(&a) && inside(&b) {
                    return (a, b);
                }
            }
        }
    };

    // masked points first so exterior points can avoid the blobs
    let n_masked = spec.n_parked + spec.n_moving;
    for idx in 0..n_masked {
        let (a, mut b) = draw(rng);
        let is_moving = idx >= spec.n_parked;
        if is_moving {
            let l = truth.line(&a);
            let normal = Vector2::new(l.x, l.y).normalize();
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mag = rng.random_range(spec.lateral.0..=spec.lateral.1);
            let along = Vector2::new(-normal.y, normal.x) * rng.random_range(-3.0..3.0);
            b += normal * (sign * mag) + along;
        }
        let (cx, cy) = (a.x.round() as usize, a.y.round() as usize);
        for y in cy.saturating_sub(spec.blob)..=(cy + spec.blob).min(spec.height - 1) {
            for x in cx.saturating_sub(spec.blob)..=(cx + spec.blob).min(spec.width - 1) {
                mask.bitmap[y * spec.width + x] = true;
            }
        }
        corr.push((a, b));
        moving.push(is_moving);
    }
    let mut n = 0;
    while n < spec.n_static {
        let (a, b) = draw(rng);
        if mask.contains(a.x, a.y, 6) {
            continue;
        }
        corr.push((a, b));
        moving.push(false);
        n += 1;
    }
    let corr = corr
        .into_iter()
        .map(|(a, b)| {
            let jitter = if spec.noise > 0.0 {
                Vector2::new(noise.sample(rng), noise.sample(rng))
            } else {
                Vector2::zeros()
            };
            FlowCorrespondence {
                p_t: a,
                p_prev: b + jitter,
                tracked: true,
                in_mask: false,
            }
        })
        .collect();
    FlowScene {
        corr,
        mask,
        moving,
        truth,
    }
}

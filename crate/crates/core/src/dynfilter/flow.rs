//! Pyramidal Lucas–Kanade sparse flow.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::features::Keypoint;
use crate::image::GrayF;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LkParams {
    /// Odd side length of the square integration window.
    pub window: usize,
    /// Index of the coarsest pyramid level (0 = full resolution only).
    pub max_level: usize,
    pub max_iters: usize,
    /// Stop when the update shrinks below this many pixels.
    pub epsilon: f64,
    /// Minimum eigenvalue of the per-pixel averaged gradient matrix.
    pub min_eigen: f64,
    /// Mean absolute intensity residual above which a track is rejected.
    pub max_residual: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        Self {
            window: 21,
            max_level: 3,
            max_iters: 30,
            epsilon: 0.01,
            min_eigen: 1e-2,
            max_residual: 20.0,
        }
    }
}

/// Image pyramid with gradients, built once per frame and reused.
#[derive(Clone, Debug)]
pub struct FlowPyramid {
    pub levels: Vec<GrayF>,
    pub gx: Vec<GrayF>,
    pub gy: Vec<GrayF>,
}

impl FlowPyramid {
    pub fn new(img: &GrayF, max_level: usize) -> Self {
        let levels = img.pyramid(max_level + 1);
        let (gx, gy) = levels.iter().map(|l| l.gradients()).unzip();
        Self { levels, gx, gy }
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowCorrespondence {
    pub p_t: Vector2<f64>,
    pub p_prev: Vector2<f64>,
    pub tracked: bool,
    pub in_mask: bool,
}

/// Tracks one point from `from` into `to`; `None` when the track fails.
pub fn track_point(from: &FlowPyramid, to: &FlowPyramid, p: Vector2<f64>, params: &LkParams) -> Option<Vector2<f64>> {
    let half = (params.window / 2) as isize;
    let n_px = (params.window * params.window) as f64;
    let top = params.max_level.min(from.levels.len() - 1).min(to.levels.len() - 1);
    let mut guess = Vector2::zeros();
    let side = params.window;
    let (mut tmpl, mut tx, mut ty, mut warped) = (Vec::with_capacity(side * side), Vec::new(), Vec::new(), Vec::new());

    for level in (0..=top).rev() {
        let scale = 1.0 / (1u32 << level) as f64;
        let pl = p * scale;
        let (img_f, gx, gy, img_t) = (&from.levels[level], &from.gx[level], &from.gy[level], &to.levels[level]);
        if !img_f.contains(pl.x, pl.y, 0.0) {
            return None;
        }
        img_f.sample_window(pl.x, pl.y, half as usize, &mut tmpl);
        gx.sample_window(pl.x, pl.y, half as usize, &mut tx);
        gy.sample_window(pl.x, pl.y, half as usize, &mut ty);
        let mut g = Matrix2::<f64>::zeros();
        for (ix, iy) in tx.iter().zip(&ty) {
            g[(0, 0)] += ix * ix;
            g[(0, 1)] += ix * iy;
            g[(1, 1)] += iy * iy;
        }
        g[(1, 0)] = g[(0, 1)];
        let tr = 0.5 * (g[(0, 0)] + g[(1, 1)]);
        let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(0, 1)];
        let min_eig = (tr - (tr * tr - det).max(0.0).sqrt()) / n_px;
        if min_eig < params.min_eigen {
            return None;
        }
        let g_inv = g.try_inverse()?;

        let mut d = guess;
        for _ in 0..params.max_iters {
            let target = pl + d;
            if !img_t.contains(target.x, target.y, -(half as f64)) {
                return None;
            }
            img_t.sample_window(target.x, target.y, half as usize, &mut warped);
            let mut b = Vector2::zeros();
            for (((w, t), ix), iy) in warped.iter().zip(&tmpl).zip(&tx).zip(&ty) {
                let e = w - t;
                b.x += e * ix;
                b.y += e * iy;
            }
            let step = -(g_inv * b);
            d += step;
            if !d.x.is_finite() || !d.y.is_finite() {
                return None;
            }
            if step.norm() < params.epsilon {
                break;
            }
        }
        if level == 0 {
            let q = p + d;
            if !to.levels[0].contains(q.x, q.y, 0.0) {
                return None;
            }
            img_t.sample_window(q.x, q.y, half as usize, &mut warped);
            let err: f64 = warped.iter().zip(&tmpl).map(|(w, t)| (w - t).abs()).sum::<f64>() / n_px;
            if err > params.max_residual {
                return None;
            }
            return Some(q);
        }
        guess = d * 2.0;
    }
    None
}

/// Tracks current-frame keypoints back into the previous frame.
pub fn track_flow_pyr(prev: &FlowPyramid, curr: &FlowPyramid, points: &[Keypoint], params: &LkParams) -> Vec<FlowCorrespondence> {
    points
        .par_iter()
        .map(|k| {
            let p_t = Vector2::new(k.u as f64, k.v as f64);
            match track_point(curr, prev, p_t, params) {
                Some(p_prev) => FlowCorrespondence {
                    p_t,
                    p_prev,
                    tracked: true,
                    in_mask: false,
                },
                None => FlowCorrespondence {
                    p_t,
                    p_prev: p_t,
                    tracked: false,
                    in_mask: false,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(x: f64, y: f64) -> f64 {
        128.0 + 40.0 * (0.21 * x).sin() * (0.17 * y).cos() + 30.0 * (0.09 * x + 0.13 * y).sin() + 20.0 * (0.31 * y - 0.05 * x).cos()
    }

    fn render(w: usize, h: usize, shift: (f64, f64)) -> GrayF {
        GrayF::from_vec(w, h, (0..w * h).map(|i| texture((i % w) as f64 - shift.0, (i / w) as f64 - shift.1) as f32).collect()).unwrap()
    }

    #[test]
    fn zero_motion_is_a_fixed_point() {
        let img = render(160, 120, (0.0, 0.0));
        let pyr = FlowPyramid::new(&img, 3);
        for (u, v) in [(40.0, 40.0), (80.5, 60.25), (120.0, 90.0)] {
            let q = track_point(&pyr, &pyr, Vector2::new(u, v), &LkParams::default()).unwrap();
            assert!((q - Vector2::new(u, v)).norm() < 0.1);
        }
    }

    #[test]
    fn recovers_pure_translation() {
        let prev = FlowPyramid::new(&render(200, 160, (0.0, 0.0)), 3);
        // current content sits 3 px to the right of where it was
        let curr = FlowPyramid::new(&render(200, 160, (3.0, 0.0)), 3);
        let pts: Vec<Keypoint> = (0..5)
            .flat_map(|i| (0..4).map(move |j| Keypoint::new(40.0 + 30.0 * i as f32, 40.0 + 25.0 * j as f32, 1.0)))
            .collect();
        let corr = track_flow_pyr(&prev, &curr, &pts, &LkParams::default());
        for c in &corr {
            assert!(c.tracked);
            let flow = c.p_prev - c.p_t;
            assert!((flow - Vector2::new(-3.0, 0.0)).norm() < 0.25, "{flow:?}");
        }
    }

    #[test]
    fn flat_region_is_untracked() {
        let img = GrayF::from_vec(100, 100, vec![90.0; 10000]).unwrap();
        let pyr = FlowPyramid::new(&img, 3);
        assert!(track_point(&pyr, &pyr, Vector2::new(50.0, 50.0), &LkParams::default()).is_none());
    }
}

//! Sparse bundle adjustment over poses and points, solved by
//! Levenberg–Marquardt on the Schur complement of the point block.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Vector2, Vector3, Vector6};
use rayon::prelude::*;

use crate::geometry::{hat, Intrinsics, PoseSE3, Z_MIN};

/// One measurement of point `point` in camera `pose`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaObservation {
    pub pose: usize,
    pub point: usize,
    pub uv: Vector2<f64>,
    /// Right-image column; adds a third residual when stereo terms are on.
    pub u_r: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaParams {
    pub max_iters: usize,
    /// Huber threshold on the residual norm, pixels.
    pub huber: f64,
    pub initial_lambda: f64,
    pub use_stereo: bool,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub rel_tol: f64,
    /// Observations above this reprojection error are dropped after map-level BA.
    pub outlier_threshold: f64,
}

impl Default for BaParams {
    fn default() -> Self {
        Self {
            max_iters: 10,
            huber: 2.0,
            initial_lambda: 1e-3,
            use_stereo: true,
            rel_tol: 1e-6,
            outlier_threshold: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step.
    pub cost_log: Vec<f64>,
    pub iterations: usize,
}

/// Residual norm charged to observations that fall behind the camera.
const BEHIND_RESIDUAL: f64 = 1e3;
/// Floor for the Marquardt diagonal.
const MIN_DIAG: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BaProblem {
    pub k: Intrinsics,
    pub baseline: f64,
    pub poses: Vec<PoseSE3>,
    pub fixed: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<BaObservation>,
}

pub(crate) fn huber_norm(r: f64, d: f64) -> f64 {
    if r <= d {
        0.5 * r * r
    } else {
        d * (r - 0.5 * d)
    }
}

/// IRLS weight of the Huber cost at residual norm `r`.
pub fn huber_weight(r: f64, d: f64) -> f64 {
    if r <= d {
        1.0
    } else {
        d / r
    }
}

struct Linearized {
    jc: Matrix3x6<f64>,
    jp: Matrix3<f64>,
    e: Vector3<f64>,
    w: f64,
}

impl BaProblem {
    /// Residual `π(T p) − z`, third row the right-image column when stereo
    /// is used and observed, otherwise zero. `None` behind the camera.
    pub fn residual(&self, o: &BaObservation, stereo: bool) -> Option<Vector3<f64>> {
        let q = self.poses[o.pose].transform(&self.points[o.point]);
        if q.z <= Z_MIN {
            return None;
        }
        let k = &self.k;
        let u = k.fx * q.x / q.z + k.cx;
        let v = k.fy * q.y / q.z + k.cy;
        let r = match (stereo, o.u_r) {
            (true, Some(ur)) => k.fx * (q.x - self.baseline) / q.z + k.cx - ur,
            _ => 0.0,
        };
        Some(Vector3::new(u - o.uv.x, v - o.uv.y, r))
    }

    /// Jacobians of [`residual`](Self::residual) with respect to a left pose
    /// perturbation `(ω, ν)` and to the point.
    pub fn jacobians(&self, o: &BaObservation, stereo: bool) -> (Matrix3x6<f64>, Matrix3<f64>) {
        let pose = &self.poses[o.pose];
        let q = pose.transform(&self.points[o.point]);
        let k = &self.k;
        let iz = 1.0 / q.z;
        let iz2 = iz * iz;
        let mut dq = Matrix3::zeros();
        dq[(0, 0)] = k.fx * iz;
        dq[(0, 2)] = -k.fx * q.x * iz2;
        dq[(1, 1)] = k.fy * iz;
        dq[(1, 2)] = -k.fy * q.y * iz2;
        if stereo && o.u_r.is_some() {
            dq[(2, 0)] = k.fx * iz;
            dq[(2, 2)] = -k.fx * (q.x - self.baseline) * iz2;
        }
        let mut dt = Matrix3x6::zeros();
        dt.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&q)));
        dt.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        (dq * dt, dq * pose.rotation)
    }

    pub fn cost(&self, params: &BaParams) -> f64 {
        self.observations
            .iter()
            .map(|o| {
                let r = self.residual(o, params.use_stereo).map_or(BEHIND_RESIDUAL, |e| e.norm());
                huber_norm(r, params.huber)
            })
            .sum()
    }

    /// Per-observation weights used in the next normal equations.
    pub fn weights(&self, params: &BaParams) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| self.residual(o, params.use_stereo).map_or(0.0, |e| huber_weight(e.norm(), params.huber)))
            .collect()
    }

    /// Index of each free pose in the reduced system.
    pub fn free_index(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.fixed
            .iter()
            .map(|&f| {
                (!f).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    }

    fn linearize(&self, params: &BaParams) -> Vec<Option<Linearized>> {
        self.observations
            .par_iter()
            .map(|o| {
                let e = self.residual(o, params.use_stereo)?;
                let (jc, jp) = self.jacobians(o, params.use_stereo);
                Some(Linearized {
                    jc,
                    jp,
                    e,
                    w: huber_weight(e.norm(), params.huber),
                })
            })
            .collect()
    }

    /// Damped Gauss–Newton step `(H + λ·diag H) δ = −g` for free poses and
    /// all points, with points eliminated first.
    pub fn schur_step(&self, params: &BaParams, lambda: f64) -> (Vec<Vector6<f64>>, Vec<Vector3<f64>>) {
        let lin = self.linearize(params);
        self.schur_step_from(&lin, lambda)
    }

    fn schur_step_from(&self, lin: &[Option<Linearized>], lambda: f64) -> (Vec<Vector6<f64>>, Vec<Vector3<f64>>) {
        let free = self.free_index();
        let nc = free.iter().flatten().count();
        let np = self.points.len();

        let mut hpp = vec![Matrix3::<f64>::zeros(); np];
        let mut gp = vec![Vector3::<f64>::zeros(); np];
        let mut hcc = vec![nalgebra::Matrix6::<f64>::zeros(); nc];
        let mut gc = vec![Vector6::<f64>::zeros(); nc];
        // (camera slot, W block) per observation, grouped by point
        let mut by_point: Vec<Vec<(usize, nalgebra::Matrix6x3<f64>)>> = vec![Vec::new(); np];
        for (o, l) in self.observations.iter().zip(lin) {
            let Some(l) = l else { continue };
            let jpw = l.jp.transpose() * l.w;
            hpp[o.point] += jpw * l.jp;
            gp[o.point] += jpw * l.e;
            if let Some(c) = free[o.pose] {
                let jcw = l.jc.transpose() * l.w;
                hcc[c] += jcw * l.jc;
                gc[c] += jcw * l.e;
                by_point[o.point].push((c, jcw * l.jp));
            }
        }
        let damp3 = |m: &Matrix3<f64>| {
            let mut d = *m;
            for i in 0..3 {
                d[(i, i)] += lambda * m[(i, i)].max(MIN_DIAG);
            }
            d
        };
        let hpp_inv: Vec<Matrix3<f64>> = hpp.iter().map(|m| damp3(m).try_inverse().unwrap_or_else(Matrix3::zeros)).collect();

        let mut s = DMatrix::<f64>::zeros(6 * nc, 6 * nc);
        let mut rhs = DVector::<f64>::zeros(6 * nc);
        for c in 0..nc {
            let mut block = hcc[c];
            for i in 0..6 {
                block[(i, i)] += lambda * hcc[c][(i, i)].max(MIN_DIAG);
            }
            s.fixed_view_mut::<6, 6>(6 * c, 6 * c).copy_from(&block);
            rhs.fixed_rows_mut::<6>(6 * c).copy_from(&(-gc[c]));
        }
        for (j, obs) in by_point.iter().enumerate() {
            let inv = hpp_inv[j];
            for &(c1, w1) in obs {
                let w1i = w1 * inv;
                let mut r = rhs.fixed_rows_mut::<6>(6 * c1);
                r += w1i * gp[j];
                for &(c2, w2) in obs {
                    let mut blk = s.fixed_view_mut::<6, 6>(6 * c1, 6 * c2);
                    blk -= w1i * w2.transpose();
                }
            }
        }
        let dc = if nc == 0 {
            DVector::zeros(0)
        } else {
            match s.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => s.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(6 * nc)),
            }
        };
        let dcs: Vec<Vector6<f64>> = (0..nc).map(|c| dc.fixed_rows::<6>(6 * c).into_owned()).collect();
        let dps: Vec<Vector3<f64>> = (0..np)
            .map(|j| {
                let mut r = -gp[j];
                for &(c, w) in &by_point[j] {
                    r -= w.transpose() * dcs[c];
                }
                hpp_inv[j] * r
            })
            .collect();
        (dcs, dps)
    }

    /// Copy with the step applied (`exp(δ)·T` for poses, `p + δ` for points).
    pub fn apply(&self, dc: &[Vector6<f64>], dp: &[Vector3<f64>]) -> Self {
        let free = self.free_index();
        let mut out = self.clone();
        for (i, f) in free.iter().enumerate() {
            if let Some(c) = f {
                out.poses[i] = self.poses[i].retract(&dc[*c]);
            }
        }
        for (p, d) in out.points.iter_mut().zip(dp) {
            *p += d;
        }
        out
    }

    /// Levenberg–Marquardt; the cost never increases.
    pub fn solve(&mut self, params: &BaParams) -> BaReport {
        let mut cost = self.cost(params);
        let mut report = BaReport {
            initial_cost: cost,
            final_cost: cost,
            cost_log: Vec::new(),
            iterations: 0,
        };
        let mut lambda = params.initial_lambda;
        let mut lin = self.linearize(params);
        for it in 0..params.max_iters {
            report.iterations = it + 1;
            let mut accepted = false;
            for _ in 0..10 {
                let (dc, dp) = self.schur_step_from(&lin, lambda);
                let cand = self.apply(&dc, &dp);
                let c = cand.cost(params);
                if c.is_finite() && c < cost {
                    let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    *self = cand;
                    cost = c;
                    report.cost_log.push(c);
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel < params.rel_tol {
                        report.final_cost = cost;
                        return report;
                    }
                    break;
                }
                lambda *= 4.0;
            }
            if !accepted {
                break;
            }
            lin = self.linearize(params);
        }
        report.final_cost = cost;
        report
    }

    /// Reprojection error of each observation in pixels (left image only).
    pub fn reprojection_errors(&self) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| self.residual(o, false).map_or(f64::INFINITY, |e| e.norm()))
            .collect()
    }
}

use nalgebra::{Matrix2x6, Matrix6, Vector2, Vector3, Vector6};

use crate::geometry::{hat, Intrinsics, PoseSE3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PnpParams {
    /// Post-fit reprojection error above which a correspondence is an outlier.
    pub reproj_gate: f64,
    pub min_inliers: usize,
    pub max_iters: usize,
}

impl Default for PnpParams {
    fn default() -> Self {
        Self {
            reproj_gate: 2.0,
            min_inliers: 15,
            max_iters: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackStatus {
    Ok,
    Lost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub pose: PoseSE3,
    /// Per-correspondence inlier flag.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub status: TrackStatus,
    /// Cost after each accepted step of the final refit, starting at the initial cost.
    pub cost_log: Vec<f64>,
}

/// `∂π(exp(δ)·T·p) / ∂δ` at `δ = 0`, tangent order (ω, ν).
pub fn reprojection_jacobian(k: &Intrinsics, pose: &PoseSE3, pw: &Vector3<f64>) -> Matrix2x6<f64> {
    let pc = pose.transform(pw);
    let jp = k.projection_jacobian(&pc);
    let mut jt = nalgebra::Matrix3x6::zeros();
    jt.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&pc)));
    jt.fixed_view_mut::<3, 3>(0, 3).copy_from(&nalgebra::Matrix3::identity());
    jp * jt
}

fn residual(k: &Intrinsics, pose: &PoseSE3, pw: &Vector3<f64>, uv: &Vector2<f64>) -> Option<Vector2<f64>> {
    k.project(&pose.transform(pw)).map(|p| p - uv)
}

/// Weighted cost `Σ wᵢ ½‖eᵢ‖²`; points behind the camera add a large constant.
fn cost(k: &Intrinsics, pose: &PoseSE3, corr: &[(Vector3<f64>, Vector2<f64>)], w: &[f64]) -> f64 {
    corr.iter()
        .zip(w)
        .filter(|(_, &wi)| wi > 0.0)
        .map(|((pw, uv), &wi)| match residual(k, pose, pw, uv) {
            Some(e) => 0.5 * wi * e.norm_squared(),
            None => 0.5 * wi * 1e8,
        })
        .sum()
}

/// Levenberg–Marquardt on `Σ wᵢ ½‖uᵢ − π(T pᵢ)‖²` with fixed weights.
/// Returns the pose and the cost after each accepted step.
pub fn lm_pose(
    corr: &[(Vector3<f64>, Vector2<f64>)],
    weights: &[f64],
    k: &Intrinsics,
    init: &PoseSE3,
    max_iters: usize,
) -> (PoseSE3, Vec<f64>) {
    let mut pose = *init;
    let mut c = cost(k, &pose, corr, weights);
    let mut log = vec![c];
    let mut lambda = 1e-4;
    for _ in 0..max_iters {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for ((pw, uv), &wi) in corr.iter().zip(weights) {
            if wi <= 0.0 {
                continue;
            }
            let Some(e) = residual(k, &pose, pw, uv) else { continue };
            let j = reprojection_jacobian(k, &pose, pw);
            h += wi * j.transpose() * j;
            g += wi * j.transpose() * e;
        }
        if g.amax() < 1e-12 {
            break;
        }
        let mut accepted = false;
        for _ in 0..10 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-9);
            }
            let Some(step) = damped.cholesky().map(|ch| -ch.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = pose.retract(&step);
            let cc = cost(k, &cand, corr, weights);
            if cc < c {
                let rel = (c - cc) / c.max(1e-300);
                pose = cand;
                c = cc;
                log.push(c);
                lambda = (lambda * 0.3).max(1e-10);
                accepted = true;
                if rel < 1e-12 || step.norm() < 1e-12 {
                    return (pose, log);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    (pose, log)
}

fn errors(k: &Intrinsics, pose: &PoseSE3, corr: &[(Vector3<f64>, Vector2<f64>)]) -> Vec<f64> {
    corr.iter()
        .map(|(pw, uv)| residual(k, pose, pw, uv).map_or(f64::INFINITY, |e| e.norm()))
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().cloned().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return f64::INFINITY;
    }
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

/// Robust initial fit, outlier gating, then one least-squares refit on the
/// inliers.
pub fn refine_pnp(corr: &[(Vector3<f64>, Vector2<f64>)], k: &Intrinsics, init: &PoseSE3, params: &PnpParams) -> TrackResult {
    let lost = |pose: PoseSE3| TrackResult {
        pose,
        inliers: vec![false; corr.len()],
        inlier_count: 0,
        status: TrackStatus::Lost,
        cost_log: Vec::new(),
    };
    if corr.len() < 4 {
        return lost(*init);
    }
    // Cauchy-reweighted passes with a shrinking scale keep gross outliers
    // from dragging the fit used for gating.
    let mut pose = *init;
    for _ in 0..8 {
        let e = errors(k, &pose, corr);
        let scale = (1.4826 * median(&e)).max(params.reproj_gate);
        let w: Vec<f64> = e
            .iter()
            .map(|&x| if x.is_finite() { 1.0 / (1.0 + (x / scale).powi(2)) } else { 0.0 })
            .collect();
        let (next, _) = lm_pose(corr, &w, k, &pose, 5);
        let moved = (next.log() - pose.log()).norm();
        pose = next;
        if moved < 1e-10 && scale <= params.reproj_gate {
            break;
        }
    }
    let gate = |pose: &PoseSE3| -> Vec<bool> { errors(k, pose, corr).iter().map(|&x| x <= params.reproj_gate).collect() };
    let first = gate(&pose);
    let weights: Vec<f64> = first.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    if first.iter().filter(|&&b| b).count() < 4 {
        return lost(pose);
    }
    let (pose, cost_log) = lm_pose(corr, &weights, k, &pose, params.max_iters);
    let inliers = gate(&pose);
    let inlier_count = inliers.iter().filter(|&&b| b).count();
    TrackResult {
        pose,
        inliers,
        inlier_count,
        status: if inlier_count >= params.min_inliers { TrackStatus::Ok } else { TrackStatus::Lost },
        cost_log,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, truth: &PoseSE3, n: usize) -> Vec<(Vector3<f64>, Vector2<f64>)> {
        let inv = truth.inverse();
        (0..n)
            .map(|_| {
                let pc = Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-6.0..6.0), rng.random_range(5.0..30.0));
                let pw = inv.transform(&pc);
                (pw, k().project(&pc).unwrap())
            })
            .collect()
    }

    fn perturbed(truth: &PoseSE3) -> PoseSE3 {
        let d = Vector6::new(0.1 / 3f64.sqrt(), -0.1 / 3f64.sqrt(), 0.1 / 3f64.sqrt(), 0.2 / 3f64.sqrt(), 0.2 / 3f64.sqrt(), -0.2 / 3f64.sqrt());
        truth.retract(&d)
    }

    fn pose_err(a: &PoseSE3, b: &PoseSE3) -> f64 {
        (a.inverse() * *b).log().norm()
    }

    #[test]
    fn recovers_pose_from_perturbed_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = PoseSE3::exp(&Vector6::new(0.1, -0.2, 0.05, 1.0, 0.5, -0.3));
        let corr = scene(&mut rng, &truth, 60);
        let r = refine_pnp(&corr, &k(), &perturbed(&truth), &PnpParams::default());
        assert_eq!(r.status, TrackStatus::Ok);
        assert!(pose_err(&r.pose, &truth) < 1e-6);
        assert_eq!(r.inlier_count, 60);
    }

    #[test]
    fn true_pose_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = PoseSE3::exp(&Vector6::new(0.0, 0.3, 0.0, 0.0, 0.0, 2.0));
        let corr = scene(&mut rng, &truth, 40);
        let r = refine_pnp(&corr, &k(), &truth, &PnpParams::default());
        assert!(pose_err(&r.pose, &truth) < 1e-9);
        assert!(r.cost_log[0] < 1e-18);
    }

    #[test]
    fn gross_outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = PoseSE3::exp(&Vector6::new(0.05, 0.1, -0.05, 0.5, 0.0, 0.2));
        let mut corr = scene(&mut rng, &truth, 70);
        for _ in 0..30 {
            let pw = corr[rng.random_range(0..70)].0 + Vector3::new(rng.random_range(-1.0..1.0), 0.0, 0.0);
            corr.push((pw, Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))));
        }
        let r = refine_pnp(&corr, &k(), &perturbed(&truth), &PnpParams::default());
        assert!(pose_err(&r.pose, &truth) < 1e-3, "{}", pose_err(&r.pose, &truth));
        assert!(r.inliers[..70].iter().all(|&b| b));
    }

    #[test]
    fn too_few_is_lost() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corr = scene(&mut rng, &PoseSE3::identity(), 3);
        assert_eq!(refine_pnp(&corr, &k(), &PoseSE3::identity(), &PnpParams::default()).status, TrackStatus::Lost);
        let corr = scene(&mut rng, &PoseSE3::identity(), 10);
        assert_eq!(refine_pnp(&corr, &k(), &PoseSE3::identity(), &PnpParams::default()).status, TrackStatus::Lost);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kk = k();
        for _ in 0..100 {
            let pose = PoseSE3::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.3..0.3)));
            let pc = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(3.0..20.0));
            let pw = pose.inverse().transform(&pc);
            let j = reprojection_jacobian(&kk, &pose, &pw);
            let h = 1e-6;
            for c in 0..6 {
                let mut d = Vector6::zeros();
                d[c] = h;
                let plus = kk.project(&pose.retract(&d).transform(&pw)).unwrap();
                let minus = kk.project(&pose.retract(&-d).transform(&pw)).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let rel = (fd - j.column(c)).norm() / j.column(c).norm().max(1.0);
                assert!(rel < 1e-5, "{rel}");
            }
        }
    }

    #[test]
    fn accepted_steps_never_raise_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let truth = PoseSE3::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.2..0.2)));
            let mut corr = scene(&mut rng, &truth, 50);
            for c in corr.iter_mut() {
                c.1 += Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
            let r = refine_pnp(&corr, &k(), &perturbed(&truth), &PnpParams::default());
            assert!(r.cost_log.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}

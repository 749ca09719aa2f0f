//! Trajectory alignment and accuracy metrics.

use std::fmt;

use nalgebra::Vector3;

use super::trajectory::{Stamped, Trajectory};
use crate::error::{Error, Result};
use crate::geometry::{umeyama_sim3, PoseSE3, Sim3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    /// No alignment.
    None,
    SE3,
    Sim3,
}

/// `(est index, gt index)` for every estimated pose whose nearest ground
/// truth timestamp is within half the ground-truth period.
pub fn associate(est: &Trajectory, gt: &Trajectory) -> Vec<(usize, usize)> {
    let half = 0.5 * gt.median_period().max(1e-9);
    let mut out = Vec::new();
    let mut j = 0;
    for (i, e) in est.poses.iter().enumerate() {
        while j + 1 < gt.len() && gt.poses[j + 1].timestamp <= e.timestamp {
            j += 1;
        }
        let best = [j, j + 1]
            .into_iter()
            .filter(|&k| k < gt.len())
            .min_by(|&a, &b| (gt.poses[a].timestamp - e.timestamp).abs().total_cmp(&(gt.poses[b].timestamp - e.timestamp).abs()));
        if let Some(k) = best {
            if (gt.poses[k].timestamp - e.timestamp).abs() <= half {
                out.push((i, k));
            }
        }
    }
    out
}

fn apply(s: &Sim3, p: &Stamped) -> Stamped {
    Stamped {
        timestamp: p.timestamp,
        pose: PoseSE3::new(s.rotation * p.pose.rotation, s.transform(&p.pose.translation)),
        tracked: p.tracked,
    }
}

/// Umeyama fit of associated tracked positions; returns the transformed
/// estimate and the transform applied.
pub fn align_trajectories(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<(Trajectory, Sim3)> {
    let pairs: Vec<(usize, usize)> = associate(est, gt).into_iter().filter(|&(i, _)| est.poses[i].tracked).collect();
    if pairs.len() < 3 {
        return Err(Error::InsufficientOverlap(pairs.len()));
    }
    let s = match mode {
        AlignMode::None => Sim3::identity(),
        AlignMode::SE3 | AlignMode::Sim3 => {
            let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| est.poses[i].pose.translation).collect();
            let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| gt.poses[j].pose.translation).collect();
            umeyama_sim3(&src, &dst, mode == AlignMode::Sim3)?
        }
    };
    let aligned = Trajectory {
        poses: est.poses.iter().map(|p| apply(&s, p)).collect(),
    };
    Ok((aligned, s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ate_rmse: f64,
    /// ATE-RMSE divided by the ground-truth path length.
    pub t_apm: f64,
    /// Fraction of the ground-truth path covered by tracked estimates.
    pub cr: f64,
    pub alignment: Sim3,
    pub associated: usize,
    pub gt_length: f64,
}

impl MetricsReport {
    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        format!(
            "ate_rmse={:.9}\nt_apm={:.9}\ncr={:.9}\nassociated={}\ngt_length={:.9}\nscale={:.9}\n",
            self.ate_rmse, self.t_apm, self.cr, self.associated, self.gt_length, self.alignment.scale
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ATE-RMSE   {:.4} m", self.ate_rmse)?;
        writeln!(f, "t_apm      {:.6}", self.t_apm)?;
        writeln!(f, "CR         {:.2} %", 100.0 * self.cr)?;
        writeln!(f, "associated {}", self.associated)?;
        write!(f, "gt length  {:.3} m (alignment scale {:.5})", self.gt_length, self.alignment.scale)
    }
}

/// ATE-RMSE over associated tracked pairs after alignment, t_apm and the
/// completion ratio.
pub fn compute_metrics(est: &Trajectory, gt: &Trajectory, mode: AlignMode) -> Result<MetricsReport> {
    let gt_length = gt.path_length();
    if gt_length <= 0.0 {
        return Err(Error::InvalidInput("ground truth has zero length".into()));
    }
    let (aligned, alignment) = align_trajectories(est, gt, mode)?;
    let pairs: Vec<(usize, usize)> = associate(&aligned, gt).into_iter().filter(|&(i, _)| aligned.poses[i].tracked).collect();
    let sq: f64 = pairs
        .iter()
        .map(|&(i, j)| (aligned.poses[i].pose.translation - gt.poses[j].pose.translation).norm_squared())
        .sum();
    let ate_rmse = (sq / pairs.len() as f64).sqrt();
    let mut covered = vec![false; gt.len()];
    for &(_, j) in &pairs {
        covered[j] = true;
    }
    let covered_len: f64 = gt
        .poses
        .windows(2)
        .enumerate()
        .filter(|(k, _)| covered[*k] && covered[k + 1])
        .map(|(_, w)| (w[1].pose.translation - w[0].pose.translation).norm())
        .sum();
    Ok(MetricsReport {
        ate_rmse,
        t_apm: ate_rmse / gt_length,
        cr: covered_len / gt_length,
        alignment,
        associated: pairs.len(),
        gt_length,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn helix(n: usize) -> Trajectory {
        Trajectory::from_poses((0..n).map(|i| {
            let a = i as f64 * 0.05;
            (i as f64 * 0.1, PoseSE3::new(so3_exp(&Vector3::new(0.0, a, 0.0)), Vector3::new(5.0 * a.cos(), 0.1 * i as f64, 5.0 * a.sin())))
        }))
        .unwrap()
    }

    #[test]
    fn identical_trajectories() {
        let gt = helix(50);
        let m = compute_metrics(&gt, &gt, AlignMode::SE3).unwrap();
        assert!(m.ate_rmse < 1e-9 && m.t_apm < 1e-9);
        assert_eq!(m.cr, 1.0);
    }

    #[test]
    fn scale_and_shift_are_absorbed() {
        let gt = helix(50);
        let scaled = Trajectory {
            poses: gt
                .poses
                .iter()
                .map(|p| Stamped {
                    pose: PoseSE3::new(p.pose.rotation, 2.0 * p.pose.translation),
                    ..*p
                })
                .collect(),
        };
        let (_, s) = align_trajectories(&scaled, &gt, AlignMode::Sim3).unwrap();
        assert!((s.scale - 0.5).abs() < 1e-9);
        assert!(compute_metrics(&scaled, &gt, AlignMode::Sim3).unwrap().ate_rmse < 1e-9);

        let shifted = Trajectory {
            poses: gt
                .poses
                .iter()
                .map(|p| Stamped {
                    pose: PoseSE3::new(p.pose.rotation, p.pose.translation + Vector3::new(1.0, 0.0, 0.0)),
                    ..*p
                })
                .collect(),
        };
        assert!(compute_metrics(&shifted, &gt, AlignMode::SE3).unwrap().ate_rmse < 1e-9);
    }

    #[test]
    fn half_coverage() {
        let gt = helix(101);
        let est = Trajectory {
            poses: gt.poses[..51].to_vec(),
        };
        let m = compute_metrics(&est, &gt, AlignMode::SE3).unwrap();
        let seg = gt.path_length() / 100.0;
        assert!((m.cr - 0.5).abs() <= seg / gt.path_length() + 1e-12, "{}", m.cr);
    }

    #[test]
    fn disjoint_times_fail() {
        let gt = helix(20);
        let est = Trajectory::from_poses(gt.poses.iter().map(|p| (p.timestamp + 100.0, p.pose))).unwrap();
        assert!(matches!(compute_metrics(&est, &gt, AlignMode::SE3), Err(Error::InsufficientOverlap(_))));
    }

    #[test]
    fn rigid_transform_of_both_is_invisible() {
        let gt = helix(40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = Trajectory::from_poses(gt.poses.iter().map(|p| {
            (p.timestamp, PoseSE3::new(p.pose.rotation, p.pose.translation + Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2))))
        }))
        .unwrap();
        let g = Sim3::new(1.0, so3_exp(&Vector3::new(0.3, -1.0, 0.5)), Vector3::new(4.0, 5.0, -6.0));
        let move_all = |t: &Trajectory| Trajectory {
            poses: t.poses.iter().map(|p| apply(&g, p)).collect(),
        };
        let a = compute_metrics(&est, &gt, AlignMode::SE3).unwrap();
        let b = compute_metrics(&move_all(&est), &move_all(&gt), AlignMode::SE3).unwrap();
        assert!((a.ate_rmse - b.ate_rmse).abs() < 1e-9);
        assert!((a.cr - b.cr).abs() < 1e-12);
    }

    fn jitter(gt: &Trajectory, sigma: f64, rng: &mut ChaCha8Rng) -> Trajectory {
        use rand_distr::{Distribution, Normal};
        let n = Normal::new(0.0, sigma).unwrap();
        Trajectory {
            poses: gt
                .poses
                .iter()
                .map(|p| Stamped {
                    pose: PoseSE3::new(p.pose.rotation, p.pose.translation + Vector3::from_fn(|_, _| n.sample(rng))),
                    ..*p
                })
                .collect(),
        }
    }

    #[test]
    fn noise_floor_matches_residual_degrees_of_freedom() {
        // SE3 alignment absorbs 6 of the 3N position degrees of freedom
        let (n, sigma) = (1000, 0.1);
        let gt = helix(n);
        let oracle = sigma * 3f64.sqrt() * ((n as f64 - 2.0) / n as f64).sqrt();
        let mut mean = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            mean += compute_metrics(&jitter(&gt, sigma, &mut rng), &gt, AlignMode::SE3).unwrap().ate_rmse / 100.0;
        }
        assert!((mean - oracle).abs() < 0.1 * oracle, "{mean} vs {oracle}");
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn alignment_modes_are_ordered(seed in any::<u64>(), sigma in 0.01f64..1.0, scale in 0.5f64..2.0, yaw in -3.0f64..3.0) {
            let gt = helix(60);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = jitter(&gt, sigma, &mut rng);
            let g = Sim3::new(scale, so3_exp(&Vector3::new(0.1, yaw, -0.2)), Vector3::new(1.0, -2.0, 0.5));
            let est = Trajectory { poses: noisy.poses.iter().map(|p| apply(&g, p)).collect() };
            let sim = compute_metrics(&est, &gt, AlignMode::Sim3).unwrap().ate_rmse;
            let se = compute_metrics(&est, &gt, AlignMode::SE3).unwrap().ate_rmse;
            let none = compute_metrics(&est, &gt, AlignMode::None).unwrap().ate_rmse;
            prop_assert!(sim <= se + 1e-9 && se <= none + 1e-9, "{sim} {se} {none}");
        }

        #[test]
        fn coverage_grows_with_tracked_poses(cut in 3usize..60, extra in 1usize..20) {
            let gt = helix(80);
            let part = |k: usize| Trajectory { poses: gt.poses[..k.min(80)].to_vec() };
            let a = compute_metrics(&part(cut), &gt, AlignMode::SE3).unwrap().cr;
            let b = compute_metrics(&part(cut + extra), &gt, AlignMode::SE3).unwrap().cr;
            prop_assert!(a <= b + 1e-12 && (0.0..=1.0).contains(&b));
        }
    }
}

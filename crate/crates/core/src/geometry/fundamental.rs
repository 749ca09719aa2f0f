//! Fundamental matrix estimation.
//!
//! Correspondences are `(p_t, p_prev)` pairs. `F` is oriented so that
//! `F · p_t` is the epipolar line in the previous image, i.e.
//! `p_prevᵀ F p_t = 0`.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FundamentalMatrix(pub Matrix3<f64>);

impl FundamentalMatrix {
    /// Epipolar line `(a, b, c)` in the previous image for a current pixel.
    pub fn line(&self, p_t: &Vector2<f64>) -> Vector3<f64> {
        self.0 * Vector3::new(p_t.x, p_t.y, 1.0)
    }

    pub fn residual(&self, p_t: &Vector2<f64>, p_prev: &Vector2<f64>) -> f64 {
        Vector3::new(p_prev.x, p_prev.y, 1.0).dot(&self.line(p_t))
    }
}

/// Point-to-line distance `|a u + b v + c| / √(a² + b²)`.
pub fn epipolar_distance_to_line(line: &Vector3<f64>, p: &Vector2<f64>) -> Result<f64> {
    let n = (line.x * line.x + line.y * line.y).sqrt();
    if n <= f64::EPSILON * line.norm().max(1e-300) || n == 0.0 {
        return Err(Error::DegenerateGeometry("epipolar line has a = b = 0".into()));
    }
    Ok((line.x * p.x + line.y * p.y + line.z).abs() / n)
}

/// Distance of `p_prev` from the epipolar line `F p_t`.
pub fn epipolar_distance(f: &FundamentalMatrix, p_t: &Vector2<f64>, p_prev: &Vector2<f64>) -> Result<f64> {
    epipolar_distance_to_line(&f.line(p_t), p_prev)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub threshold: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            max_iters: 200,
            confidence: 0.999,
            seed: 0x5eed_f00d_cafe_0001,
        }
    }
}

/// Similarity normalizing points to zero mean and mean distance √2.
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

/// Normalized eight-point solve with rank-2 enforcement; needs ≥ 8 pairs.
pub fn eight_point(corr: &[(Vector2<f64>, Vector2<f64>)]) -> Result<FundamentalMatrix> {
    if corr.len() < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            got: corr.len(),
        });
    }
    let cur: Vec<_> = corr.iter().map(|c| c.0).collect();
    let prev: Vec<_> = corr.iter().map(|c| c.1).collect();
    let ta = hartley(&cur);
    let tb = hartley(&prev);
    let rows = corr.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in cur.iter().zip(&prev).enumerate() {
        let x = ta * Vector3::new(pa.x, pa.y, 1.0);
        let y = tb * Vector3::new(pb.x, pb.y, 1.0);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = y[r] * x[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::EstimationFailed("SVD failed".into()))?;
    // singular values are sorted descending; the null vector is the last row
    let (_, min_idx) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((f64::INFINITY, 0), |(best, bi), (i, &s)| if s < best { (s, i) } else { (best, bi) });
    let f = vt.row(min_idx);
    let fm = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let svd = fm.svd(true, true);
    let (u, vt3) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut sv = svd.singular_values;
    let smallest = (0..3).min_by(|&i, &j| sv[i].total_cmp(&sv[j])).expect("3 values");
    sv[smallest] = 0.0;
    let rank2 = u * Matrix3::from_diagonal(&sv) * vt3;
    let mut full = tb.transpose() * rank2 * ta;
    let norm = full.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::EstimationFailed("degenerate eight-point system".into()));
    }
    full /= norm;
    Ok(FundamentalMatrix(full))
}

fn inlier_mask(f: &FundamentalMatrix, corr: &[(Vector2<f64>, Vector2<f64>)], thr: f64) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = corr
        .iter()
        .map(|(a, b)| epipolar_distance(f, a, b).map(|d| d < thr).unwrap_or(false))
        .collect();
    let n = mask.iter().filter(|&&m| m).count();
    (mask, n)
}

/// RANSAC over minimal eight-point samples, followed by a refit on all
/// inliers. Deterministic for a fixed seed.
pub fn estimate_fundamental_ransac(
    corr: &[(Vector2<f64>, Vector2<f64>)],
    params: &RansacParams,
) -> Result<(FundamentalMatrix, Vec<bool>)> {
    if corr.len() < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            got: corr.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(FundamentalMatrix, Vec<bool>, usize)> = None;
    let mut needed_iters = params.max_iters;
    let mut iter = 0;
    let mut subset = Vec::with_capacity(8);
    while iter < params.max_iters.min(needed_iters) {
        iter += 1;
        subset.clear();
        subset.extend(sample(&mut rng, corr.len(), 8).into_iter().map(|i| corr[i]));
        let Ok(f) = eight_point(&subset) else { continue };
        let (mask, n) = inlier_mask(&f, corr, params.threshold);
        if best.as_ref().map_or(true, |b| n > b.2) {
            let ratio = n as f64 / corr.len() as f64;
            let p_good = ratio.powi(8);
            needed_iters = if p_good >= 1.0 - 1e-12 {
                0
            } else if p_good <= 0.0 {
                params.max_iters
            } else {
                ((1.0 - params.confidence).ln() / (1.0 - p_good).ln()).ceil().max(1.0) as usize
            };
            best = Some((f, mask, n));
        }
    }
    let (f, mask, n) = best.ok_or_else(|| Error::EstimationFailed("no valid sample".into()))?;
    if n < 8 {
        return Err(Error::EstimationFailed(format!("best model has only {n} inliers")));
    }
    let inliers: Vec<_> = corr
        .iter()
        .zip(&mask)
        .filter_map(|(c, &m)| m.then_some(*c))
        .collect();
    if let Ok(refit) = eight_point(&inliers) {
        let (rmask, rn) = inlier_mask(&refit, corr, params.threshold);
        if rn >= n {
            return Ok((refit, rmask));
        }
    }
    Ok((f, mask))
}

/// `[t]× R` style essential matrix expressed in pixels, useful for
/// synthesizing ground truth: `K⁻ᵀ E K⁻¹` with `E = [t]× R` where
/// `(R, t)` maps current-camera points into the previous camera.
pub fn fundamental_from_motion(
    k: &Matrix3<f64>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> SMatrix<f64, 3, 3> {
    let kinv = k.try_inverse().expect("invertible K");
    kinv.transpose() * crate::geometry::hat(t) * r * kinv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, PoseSE3};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};

    fn line_distance(l: Vector3<f64>, p: Vector2<f64>) -> f64 {
        epipolar_distance_to_line(&l, &p).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(line_distance(Vector3::new(0.0, 1.0, -240.0), Vector2::new(100.0, 240.0)), 0.0);
        assert!((line_distance(Vector3::new(0.0, 1.0, -240.0), Vector2::new(100.0, 243.0)) - 3.0).abs() < 1e-12);
        assert_eq!(line_distance(Vector3::new(3.0, 4.0, -50.0), Vector2::new(10.0, 5.0)), 0.0);
        assert!(matches!(
            epipolar_distance_to_line(&Vector3::new(0.0, 0.0, 1.0), &Vector2::new(1.0, 1.0)),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    /// Two-view scene: returns (p_t, p_prev) pairs from a known motion.
    fn planted(n: usize, seed: u64) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        let k = Intrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // current camera at identity, previous camera displaced
        let prev_from_cur = PoseSE3::exp(&Vector6::new(0.02, -0.05, 0.01, 0.4, 0.1, -0.2));
        let mut out = Vec::new();
        while out.len() < n {
            let p = Vector3::new(
                rng.random_range(-8.0..8.0),
                rng.random_range(-6.0..6.0),
                rng.random_range(5.0..40.0),
            );
            let (Some(a), Some(b)) = (k.project(&p), k.project(&prev_from_cur.transform(&p))) else {
                continue;
            };
            if a.x < 0.0 || a.x > 640.0 || a.y < 0.0 || a.y > 480.0 || b.x < 0.0 || b.x > 640.0 || b.y < 0.0 || b.y > 480.0 {
                continue;
            }
            out.push((a, b));
        }
        out
    }

    #[test]
    fn exact_correspondences_all_inliers() {
        let corr = planted(50, 3);
        let (f, mask) = estimate_fundamental_ransac(&corr, &RansacParams::default()).unwrap();
        assert!(mask.iter().all(|&m| m));
        for (a, b) in &corr {
            assert!(epipolar_distance(&f, a, b).unwrap() < 1e-6);
        }
        assert!(f.0.determinant().abs() < 1e-6);
    }

    #[test]
    fn planted_outliers_are_rejected() {
        let corr = planted(50, 4);
        let (f_true, _) = estimate_fundamental_ransac(&corr, &RansacParams::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let mut all = corr.clone();
        let mut planted_out = 0;
        while planted_out < 20 {
            let a = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let b = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            // keep only outliers that are genuinely off their epipolar line
            if epipolar_distance(&f_true, &a, &b).unwrap() < 2.0 {
                continue;
            }
            all.push((a, b));
            planted_out += 1;
        }
        let (_, mask) = estimate_fundamental_ransac(&all, &RansacParams::default()).unwrap();
        assert!(mask[..50].iter().all(|&m| m));
        assert!(mask[50..].iter().all(|&m| !m));
    }

    #[test]
    fn too_few_correspondences() {
        let corr = planted(7, 5);
        assert!(matches!(
            estimate_fundamental_ransac(&corr, &RansacParams::default()),
            Err(Error::InsufficientData { needed: 8, got: 7 })
        ));
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let mut corr = planted(40, 6);
        corr.push((Vector2::new(10.0, 10.0), Vector2::new(600.0, 400.0)));
        let a = estimate_fundamental_ransac(&corr, &RansacParams::default()).unwrap();
        let b = estimate_fundamental_ransac(&corr, &RansacParams::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn recovered_matrix_matches_motion_up_to_scale() {
        let k = Intrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap();
        let km = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let prev_from_cur = PoseSE3::exp(&Vector6::new(0.02, -0.05, 0.01, 0.4, 0.1, -0.2));
        let mut truth = fundamental_from_motion(&km, &prev_from_cur.rotation, &prev_from_cur.translation);
        truth /= truth.norm();
        let (f, _) = estimate_fundamental_ransac(&planted(60, 7), &RansacParams::default()).unwrap();
        let diff = (f.0 - truth).norm().min((f.0 + truth).norm());
        assert!(diff < 1e-6, "{diff}");
    }
}

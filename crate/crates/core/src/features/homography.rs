use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Planar projective map normalized so that `H[2][2] = 1` when possible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let m = if m[(2, 2)].abs() > 1e-15 { m / m[(2, 2)] } else { m };
        if !(m.determinant().abs() > 1e-12) || m.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateGeometry("homography is singular".into()));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Maps a pixel; `None` if it lands at or behind the line at infinity.
    pub fn apply(&self, p: &Vector2<f64>) -> Option<Vector2<f64>> {
        let q = self.0 * Vector3::new(p.x, p.y, 1.0);
        (q.z > 1e-12).then(|| Vector2::new(q.x / q.z, q.y / q.z))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| Error::DegenerateGeometry("homography is singular".into()))?;
        Self::new(inv)
    }
}

/// Half-ranges of the random components. All zero gives the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomographyBounds {
    /// Translation as a fraction of the image width / height.
    pub translation: f64,
    /// In-plane rotation in radians.
    pub rotation: f64,
    /// Maximum `|s - 1|` of the isotropic scale.
    pub scale: f64,
    /// Corner displacement caused by the projective row, as a fraction.
    pub perspective: f64,
}

impl Default for HomographyBounds {
    fn default() -> Self {
        Self {
            translation: 0.05,
            rotation: 0.1,
            scale: 0.1,
            perspective: 0.05,
        }
    }
}

impl HomographyBounds {
    pub fn zero() -> Self {
        Self {
            translation: 0.0,
            rotation: 0.0,
            scale: 0.0,
            perspective: 0.0,
        }
    }
}

fn polygon_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.x * b.y - b.x * a.y
        })
        .sum();
    0.5 * twice.abs()
}

/// Clips a simple polygon against the axis-aligned box `[0,w]×[0,h]`.
fn clip_to_rect(poly: &[Vector2<f64>], w: f64, h: f64) -> Vec<Vector2<f64>> {
    // (normal axis, sign, bound): keep points with sign * coord <= sign * bound
    let edges: [(usize, f64, f64); 4] = [(0, -1.0, 0.0), (0, 1.0, w), (1, -1.0, 0.0), (1, 1.0, h)];
    let mut out: Vec<Vector2<f64>> = poly.to_vec();
    for (axis, sign, bound) in edges {
        if out.is_empty() {
            break;
        }
        let inside = |p: &Vector2<f64>| sign * p[axis] <= sign * bound;
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let cross = |a: Vector2<f64>, b: Vector2<f64>| {
                let t = (bound - a[axis]) / (b[axis] - a[axis]);
                a + (b - a) * t
            };
            match (inside(&prev), inside(&cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(cross(prev, cur)),
                (false, true) => {
                    out.push(cross(prev, cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Fraction of the frame covered by the warped frame:
/// `area(H(frame) ∩ frame) / area(frame)`. Zero when a corner maps to infinity.
pub fn quad_overlap(h: &Homography, width: f64, height: f64) -> f64 {
    let corners = [
        Vector2::new(0.0, 0.0),
        Vector2::new(width, 0.0),
        Vector2::new(width, height),
        Vector2::new(0.0, height),
    ];
    let mut quad = Vec::with_capacity(4);
    for c in &corners {
        match h.apply(c) {
            Some(p) => quad.push(p),
            None => return 0.0,
        }
    }
    polygon_area(&clip_to_rect(&quad, width, height)) / (width * height)
}

fn symmetric<R: Rng>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

fn compose(width: f64, height: f64, tx: f64, ty: f64, theta: f64, s: f64, px: f64, py: f64) -> Matrix3<f64> {
    let (cx, cy) = (width / 2.0, height / 2.0);
    let to_centre = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let back = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
    let (sn, cs) = theta.sin_cos();
    let rs = Matrix3::new(s * cs, -s * sn, 0.0, s * sn, s * cs, 0.0, 0.0, 0.0, 1.0);
    let persp = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
    back * rs * persp * to_centre
}

/// Random translation, rotation, scale and perspective about the image
/// centre, rejection-sampled until the warped frame covers at least
/// `min_overlap` of the original.
pub fn sample_homography<R: Rng>(
    rng: &mut R,
    width: f64,
    height: f64,
    bounds: &HomographyBounds,
    min_overlap: f64,
) -> Result<Homography> {
    const MAX_TRIES: usize = 1000;
    for _ in 0..MAX_TRIES {
        let tx = symmetric(rng, bounds.translation) * width;
        let ty = symmetric(rng, bounds.translation) * height;
        let theta = symmetric(rng, bounds.rotation);
        let s = 1.0 + symmetric(rng, bounds.scale);
        let px = symmetric(rng, bounds.perspective) / (width / 2.0);
        let py = symmetric(rng, bounds.perspective) / (height / 2.0);
        let Ok(h) = Homography::new(compose(width, height, tx, ty, theta, s, px, py)) else {
            continue;
        };
        if quad_overlap(&h, width, height) >= min_overlap {
            return Ok(h);
        }
    }
    Err(Error::SamplingFailed(MAX_TRIES))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_bounds_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = sample_homography(&mut rng, 640.0, 480.0, &HomographyBounds::zero(), 0.85).unwrap();
        assert!((h.0 - Matrix3::identity()).norm() < 1e-12);
        assert!((quad_overlap(&h, 640.0, 480.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn translation_overlap_arithmetic() {
        let h = Homography::new(Matrix3::new(1.0, 0.0, 32.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let o = quad_overlap(&h, 640.0, 480.0);
        assert!((o - 0.95).abs() < 1e-12);
        assert!(o >= 0.85);
    }

    /// Independent overlap estimate by dense point sampling.
    fn grid_overlap(h: &Homography, w: f64, hgt: f64) -> f64 {
        let inv = h.inverse().unwrap();
        let n = 200;
        let mut hit = 0;
        for j in 0..n {
            for i in 0..n {
                let p = Vector2::new((i as f64 + 0.5) * w / n as f64, (j as f64 + 0.5) * hgt / n as f64);
                if let Some(q) = inv.apply(&p) {
                    if q.x >= 0.0 && q.x <= w && q.y >= 0.0 && q.y <= hgt {
                        hit += 1;
                    }
                }
            }
        }
        hit as f64 / (n * n) as f64
    }

    #[test]
    fn sampled_homographies_meet_the_overlap_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bounds = HomographyBounds {
            translation: 0.1,
            rotation: 0.2,
            scale: 0.15,
            perspective: 0.1,
        };
        for _ in 0..100 {
            let h = sample_homography(&mut rng, 640.0, 480.0, &bounds, 0.85).unwrap();
            let exact = quad_overlap(&h, 640.0, 480.0);
            assert!(exact >= 0.85);
            assert!((exact - grid_overlap(&h, 640.0, 480.0)).abs() < 0.01);
        }
    }

    #[test]
    fn impossible_overlap_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bounds = HomographyBounds {
            translation: 0.5,
            ..HomographyBounds::zero()
        };
        assert!(matches!(
            sample_homography(&mut rng, 100.0, 100.0, &bounds, 1.01),
            Err(Error::SamplingFailed(1000))
        ));
    }
}

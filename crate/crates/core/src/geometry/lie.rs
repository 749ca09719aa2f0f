//! SO(3), SE(3) and Sim(3) with exponential/logarithm maps.
//!
//! Tangent ordering is rotation first: `(ω, ν)` for se(3) and `(ω, ν, λ)`
//! for sim(3), where `λ` is the log-scale. Perturbations are applied on the
//! left: `T ← exp(δ) · T`.

use std::ops::Mul;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, Vector3, Vector6};

pub type Vector7 = SVector<f64, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;

/// Angles below this use truncated Taylor series for the trigonometric
/// coefficient functions.
const SERIES_THRESHOLD: f64 = 1e-3;

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] using the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// `sin(x)/x`
fn sinc(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// `(1 - cos x) / x²`
fn one_minus_cos_over_sq(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        let x2 = x * x;
        0.5 - x2 / 24.0 + x2 * x2 / 720.0
    } else {
        (1.0 - x.cos()) / (x * x)
    }
}

/// `(x - sin x) / x³`
fn x_minus_sin_over_cube(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        let x2 = x * x;
        1.0 / 6.0 - x2 / 120.0 + x2 * x2 / 5040.0
    } else {
        (x - x.sin()) / (x * x * x)
    }
}

pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    Matrix3::identity() + k * sinc(theta) + k * k * one_minus_cos_over_sq(theta)
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let v = 2.0 * vee(r); // 2 sinθ n
    let sin_t = 0.5 * v.norm();
    let cos_t = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_t.atan2(cos_t);
    if cos_t > -0.99 {
        // θ / (2 sinθ) · v
        return 0.5 * v / sinc(theta);
    }
    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part (1 - cosθ) n nᵀ.
    let sym = 0.5 * (r + r.transpose()) - Matrix3::identity() * cos_t;
    let nn = sym / (1.0 - cos_t);
    let col = (0..3)
        .max_by(|&a, &b| nn[(a, a)].total_cmp(&nn[(b, b)]))
        .expect("three columns");
    let mut n: Vector3<f64> = nn.column(col).into();
    n /= n.norm();
    if n.dot(&v) < 0.0 {
        n = -n;
    }
    n * theta
}

/// Rigid transform. Used with the world-to-camera convention throughout the
/// crate: `p_c = R p_w + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        Self::new(
            reorthonormalize(self.rotation * other.rotation),
            self.rotation * other.translation + self.translation,
        )
    }

    /// Position of the frame origin expressed in the outer frame, i.e. the
    /// camera centre for a world-to-camera pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn exp(xi: &Vector6<f64>) -> Self {
        let w = Vector3::new(xi[0], xi[1], xi[2]);
        let nu = Vector3::new(xi[3], xi[4], xi[5]);
        let theta = w.norm();
        let k = hat(&w);
        let v = Matrix3::identity()
            + k * one_minus_cos_over_sq(theta)
            + k * k * x_minus_sin_over_cube(theta);
        Self::new(so3_exp(&w), v * nu)
    }

    pub fn log(&self) -> Vector6<f64> {
        let w = so3_log(&self.rotation);
        let theta = w.norm();
        let k = hat(&w);
        let e = if theta < SERIES_THRESHOLD {
            let t2 = theta * theta;
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        } else {
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - 0.5 * k + e * k * k;
        let nu = v_inv * self.translation;
        Vector6::new(w.x, w.y, w.z, nu.x, nu.y, nu.z)
    }

    /// Left-multiplicative update `exp(δ) · self`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        PoseSE3::exp(delta).compose(self)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Checks orthonormality and det(R) = +1 within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() < tol && (r.determinant() - 1.0).abs() < tol
    }

    /// Projects the rotation back onto SO(3) via SVD.
    pub fn orthonormalized(&self) -> Self {
        Self::new(nearest_rotation(&self.rotation), self.translation)
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;
    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

impl Mul<Vector3<f64>> for PoseSE3 {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.transform(&rhs)
    }
}

/// Pulls a product of rotations back onto SO(3). Rounding otherwise
/// compounds through chains such as constant-velocity extrapolation.
fn reorthonormalize(r: Matrix3<f64>) -> Matrix3<f64> {
    let rtr = r.transpose() * r;
    if (rtr - Matrix3::identity()).amax() < 1e-13 {
        return r;
    }
    // one polar-decomposition Newton step, quadratic near SO(3)
    r * (Matrix3::identity() * 1.5 - rtr * 0.5)
}

pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u");
    let vt = svd.v_t.expect("v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

/// Gauss–Legendre nodes and weights on [0, 1].
fn gauss_legendre() -> &'static [(f64, f64)] {
    static NODES: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    NODES.get_or_init(|| {
        const N: usize = 24;
        let mut out = Vec::with_capacity(N);
        for i in 1..=N {
            let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (N as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=N {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = N as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            out.push((0.5 * (x + 1.0), 0.5 * w));
        }
        out
    })
}

/// `W = ∫₀¹ e^{λs} exp(s[ω]×) ds`, the translation coupling of sim(3) exp.
fn sim3_w(w: &Vector3<f64>, lambda: f64) -> Matrix3<f64> {
    let theta = w.norm();
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for &(s, wt) in gauss_legendre() {
        let e = (lambda * s).exp() * wt;
        a += e;
        b += e * s * sinc(theta * s);
        c += e * s * s * one_minus_cos_over_sq(theta * s);
    }
    let k = hat(w);
    Matrix3::identity() * a + k * b + k * k * c
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn from_pose(pose: &PoseSE3) -> Self {
        Self::new(1.0, pose.rotation, pose.translation)
    }

    /// Rigid part with translation divided by the scale.
    pub fn to_pose(&self) -> PoseSE3 {
        PoseSE3::new(self.rotation, self.translation / self.scale)
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn compose(&self, o: &Sim3) -> Sim3 {
        Sim3::new(
            self.scale * o.scale,
            reorthonormalize(self.rotation * o.rotation),
            self.scale * (self.rotation * o.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Sim3::new(inv_s, rt, -(rt * self.translation) * inv_s)
    }

    pub fn exp(x: &Vector7) -> Sim3 {
        let w = Vector3::new(x[0], x[1], x[2]);
        let nu = Vector3::new(x[3], x[4], x[5]);
        let lambda = x[6];
        Sim3::new(lambda.exp(), so3_exp(&w), sim3_w(&w, lambda) * nu)
    }

    pub fn log(&self) -> Vector7 {
        let w = so3_log(&self.rotation);
        let lambda = self.scale.ln();
        let wm = sim3_w(&w, lambda);
        let nu = wm.lu().solve(&self.translation).unwrap_or_else(Vector3::zeros);
        Vector7::from_column_slice(&[w.x, w.y, w.z, nu.x, nu.y, nu.z, lambda])
    }

    pub fn retract(&self, delta: &Vector7) -> Sim3 {
        Sim3::exp(delta).compose(self)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Sim3 {
        let sr: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let s = sr.determinant().cbrt();
        Sim3::new(s, sr / s, m.fixed_view::<3, 1>(0, 3).into())
    }

    /// Adjoint: `g · exp(x) · g⁻¹ = exp(Ad_g x)`.
    pub fn adjoint(&self) -> Matrix7 {
        let g = self.to_matrix();
        let gi = self.inverse().to_matrix();
        let mut out = Matrix7::zeros();
        for k in 0..7 {
            let mut e = Vector7::zeros();
            e[k] = 1.0;
            out.set_column(k, &sim3_vee(&(g * sim3_hat(&e) * gi)));
        }
        out
    }
}

impl Mul for Sim3 {
    type Output = Sim3;
    fn mul(self, rhs: Sim3) -> Sim3 {
        self.compose(&rhs)
    }
}

pub fn sim3_hat(x: &Vector7) -> Matrix4<f64> {
    let w = Vector3::new(x[0], x[1], x[2]);
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(hat(&w) + Matrix3::identity() * x[6]));
    m[(0, 3)] = x[3];
    m[(1, 3)] = x[4];
    m[(2, 3)] = x[5];
    m
}

pub fn sim3_vee(m: &Matrix4<f64>) -> Vector7 {
    let a: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let lambda = a.trace() / 3.0;
    let w = vee(&a);
    Vector7::from_column_slice(&[w.x, w.y, w.z, m[(0, 3)], m[(1, 3)], m[(2, 3)], lambda])
}

/// Matrix of the Lie bracket `y ↦ [x, y]` on sim(3).
pub fn sim3_ad(x: &Vector7) -> Matrix7 {
    let hx = sim3_hat(x);
    let mut out = Matrix7::zeros();
    for k in 0..7 {
        let mut e = Vector7::zeros();
        e[k] = 1.0;
        let he = sim3_hat(&e);
        out.set_column(k, &sim3_vee(&(hx * he - he * hx)));
    }
    out
}

/// Left Jacobian `Σ adⁿ / (n+1)!`: `exp(x + δ) ≈ exp(J_l δ) exp(x)`.
pub fn sim3_left_jacobian(x: &Vector7) -> Matrix7 {
    let ad = sim3_ad(x);
    let mut term = Matrix7::identity();
    let mut acc = Matrix7::identity();
    for n in 1..80 {
        term = term * ad / (n as f64 + 1.0);
        acc += term;
        if term.abs().max() < 1e-18 {
            break;
        }
    }
    acc
}

/// Inverse left Jacobian: `log(exp(δ) exp(x)) ≈ x + J_l⁻¹(x) δ`.
pub fn sim3_left_jacobian_inv(x: &Vector7) -> Matrix7 {
    sim3_left_jacobian(x)
        .try_inverse()
        .unwrap_or_else(Matrix7::identity)
}

/// Inverse right Jacobian: `log(exp(x) exp(δ)) ≈ x + J_r⁻¹(x) δ`.
pub fn sim3_right_jacobian_inv(x: &Vector7) -> Matrix7 {
    sim3_left_jacobian_inv(&(-x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scaling-and-squaring Taylor matrix exponential, independent of the
    /// closed forms above.
    fn expm(m: &Matrix4<f64>) -> Matrix4<f64> {
        let norm = m.abs().max();
        let squarings = (norm.max(1e-300).log2().ceil() as i32 + 4).max(0);
        let a = m / 2f64.powi(squarings);
        let mut term = Matrix4::identity();
        let mut acc = Matrix4::identity();
        for k in 1..30 {
            term = term * a / k as f64;
            acc += term;
        }
        for _ in 0..squarings {
            acc = acc * acc;
        }
        acc
    }

    fn random_tangent7(rng: &mut ChaCha8Rng, max_rot: f64) -> Vector7 {
        let mut axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        axis /= axis.norm();
        let w = axis * rng.random_range(0.0..max_rot);
        Vector7::from_column_slice(&[
            w.x,
            w.y,
            w.z,
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.0..1.0),
        ])
    }

    #[test]
    fn identity_exp_log() {
        assert_eq!(PoseSE3::exp(&Vector6::zeros()), PoseSE3::identity());
        assert!(PoseSE3::identity().log().norm() < 1e-15);
        let s = Sim3::exp(&Vector7::zeros());
        assert!((s.scale - 1.0).abs() < 1e-15);
        assert!(Sim3::identity().log().norm() < 1e-15);
    }

    #[test]
    fn quarter_turns_compose_to_half_turn() {
        let q = PoseSE3::exp(&Vector6::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0));
        let h = PoseSE3::exp(&Vector6::new(0.0, 0.0, std::f64::consts::PI, 0.0, 0.0, 0.0));
        assert!(((q * q).rotation - h.rotation).abs().max() < 1e-12);
    }

    #[test]
    fn repeated_extrapolation_stays_orthonormal() {
        let mut last = PoseSE3::exp(&Vector6::new(0.0, 0.3, 0.0, 20.0, 0.0, -5.0));
        let step = PoseSE3::exp(&Vector6::new(1e-3, 0.0157, -2e-4, 0.78, 0.01, -0.02));
        let mut pose = step * last;
        for _ in 0..400 {
            let velocity = pose * last.inverse();
            last = pose;
            pose = velocity * pose;
        }
        assert!((pose.rotation.transpose() * pose.rotation - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn so3_log_near_pi() {
        for angle in [std::f64::consts::PI - 1e-9, std::f64::consts::PI - 1e-4, 3.0] {
            let w = Vector3::new(1.0, -2.0, 0.5).normalize() * angle;
            let back = so3_log(&so3_exp(&w));
            assert!((back - w).norm() < 1e-7, "angle {angle}: {back:?}");
        }
    }

    #[test]
    fn se3_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let x = random_tangent7(&mut rng, 3.1);
            let xi = Vector6::from_column_slice(&x.as_slice()[..6]);
            let back = PoseSE3::exp(&xi).log();
            assert!((back - xi).norm() < 1e-9, "{xi:?} -> {back:?}");
        }
    }

    #[test]
    fn sim3_round_trip_random_and_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..500 {
            let mut x = random_tangent7(&mut rng, 3.1);
            if i % 5 == 0 {
                x *= 1e-7;
            }
            let back = Sim3::exp(&x).log();
            assert!((back - x).norm() < 1e-9, "{x:?} -> {back:?}");
        }
    }

    #[test]
    fn closed_forms_match_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = random_tangent7(&mut rng, 3.0);
            let reference = expm(&sim3_hat(&x));
            assert!((Sim3::exp(&x).to_matrix() - reference).abs().max() < 1e-9);
            let mut x6 = x;
            x6[6] = 0.0;
            let xi = Vector6::from_column_slice(&x6.as_slice()[..6]);
            assert!((PoseSE3::exp(&xi).to_matrix() - expm(&sim3_hat(&x6))).abs().max() < 1e-9);
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let x = random_tangent7(&mut rng, 3.1);
            let t = PoseSE3::exp(&Vector6::from_column_slice(&x.as_slice()[..6]));
            let id = t * t.inverse();
            assert!((id.to_matrix() - Matrix4::identity()).abs().max() < 1e-12);
            let s = Sim3::exp(&x);
            let sid = s * s.inverse();
            assert!((sid.to_matrix() - Matrix4::identity()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn adjoint_conjugates_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Sim3::exp(&random_tangent7(&mut rng, 2.0));
        let x = random_tangent7(&mut rng, 0.5);
        let lhs = g * Sim3::exp(&x) * g.inverse();
        let rhs = Sim3::exp(&(g.adjoint() * x));
        assert!((lhs.to_matrix() - rhs.to_matrix()).abs().max() < 1e-9);
    }

    #[test]
    fn inverse_left_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = random_tangent7(&mut rng, 1.5);
            let jinv = sim3_left_jacobian_inv(&x);
            let e = Sim3::exp(&x);
            let h = 1e-6;
            for k in 0..7 {
                let mut d = Vector7::zeros();
                d[k] = h;
                let plus = (Sim3::exp(&d) * e).log();
                let minus = (Sim3::exp(&(-d)) * e).log();
                let col = (plus - minus) / (2.0 * h);
                assert!((col - jinv.column(k)).norm() < 1e-6, "column {k}");
            }
        }
    }
}

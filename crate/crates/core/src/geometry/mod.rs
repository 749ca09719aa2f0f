//! Camera model, rigid and similarity transforms, stereo triangulation,
//! two-view epipolar geometry and closed-form point-set alignment.

mod fundamental;
mod lie;
mod umeyama;

pub use fundamental::{
    eight_point, epipolar_distance, epipolar_distance_to_line, estimate_fundamental_ransac, fundamental_from_motion,
    FundamentalMatrix, RansacParams,
};
pub use lie::{
    hat, nearest_rotation, sim3_ad, sim3_hat, sim3_left_jacobian, sim3_left_jacobian_inv,
    sim3_right_jacobian_inv, sim3_vee, so3_exp, so3_log, vee, Matrix7, PoseSE3, Sim3, Vector7,
};
pub use umeyama::umeyama_sim3;

use std::path::Path;

use nalgebra::{Matrix2x3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Points closer than this to the image plane count as behind the camera.
pub const Z_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pinhole projection of a camera-frame point, `None` behind the camera.
    #[inline]
    pub fn project(&self, pc: &Vector3<f64>) -> Option<Vector2<f64>> {
        if pc.z <= Z_MIN {
            return None;
        }
        Some(Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    /// `∂(u, v) / ∂p_c`.
    #[inline]
    pub fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }

    /// Back-projects a pixel to the point at depth `z`: `z K⁻¹ (u, v, 1)ᵀ`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }
}

/// Rectified stereo pair; the right camera sits `baseline` metres along +x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoRig {
    pub intrinsics: Intrinsics,
    pub baseline: f64,
}

impl StereoRig {
    pub fn new(intrinsics: Intrinsics, baseline: f64) -> Result<Self> {
        if !(baseline > 0.0) {
            return Err(Error::InvalidInput(format!(
                "baseline must be positive, got {baseline}"
            )));
        }
        Ok(Self {
            intrinsics,
            baseline,
        })
    }

    /// `b · f`, the disparity-depth product.
    pub fn bf(&self) -> f64 {
        self.baseline * self.intrinsics.fx
    }

    /// Horizontal pixel coordinate of a left-camera point in the right image.
    #[inline]
    pub fn project_right_u(&self, pc: &Vector3<f64>) -> Option<f64> {
        if pc.z <= Z_MIN {
            return None;
        }
        Some(self.intrinsics.fx * (pc.x - self.baseline) / pc.z + self.intrinsics.cx)
    }

    /// Depth threshold `b f / d_min`.
    pub fn max_depth(&self, d_min: f64) -> f64 {
        self.bf() / d_min
    }
}

/// Depth from disparity `Z = b f / (u_L - u_R)`, then `Z K⁻¹ (u_L, v_L, 1)ᵀ`.
pub fn triangulate_stereo(rig: &StereoRig, u_l: f64, v_l: f64, u_r: f64) -> Result<Vector3<f64>> {
    let d = u_l - u_r;
    if !(d > 0.0) {
        return Err(Error::NonPositiveDisparity(d));
    }
    let z = rig.bf() / d;
    Ok(rig.intrinsics.unproject(u_l, v_l, z))
}

/// World point into the image of a camera with world-to-camera `pose`.
pub fn project(pose: &PoseSE3, k: &Intrinsics, pw: &Vector3<f64>) -> Option<Vector2<f64>> {
    k.project(&pose.transform(pw))
}

/// Stereo calibration plus image size, as read from `calib.txt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub rig: StereoRig,
    pub width: usize,
    pub height: usize,
}

impl Calibration {
    pub fn parse(text: &str) -> Result<Self> {
        let mut vals: [Option<f64>; 7] = [None; 7];
        const KEYS: [&str; 7] = ["fx", "fy", "cx", "cy", "baseline", "width", "height"];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(['=', ':'])
                .or_else(|| line.split_once(char::is_whitespace))
                .ok_or_else(|| Error::parse("calibration", lineno + 1, "expected 'key = value'"))?;
            let (k, v) = (k.trim(), v.trim());
            let idx = KEYS
                .iter()
                .position(|&kk| kk == k)
                .ok_or_else(|| Error::parse("calibration", lineno + 1, format!("unknown key '{k}'")))?;
            let parsed: f64 = v
                .parse()
                .map_err(|_| Error::parse("calibration", lineno + 1, format!("bad number '{v}'")))?;
            vals[idx] = Some(parsed);
        }
        let get = |i: usize| {
            vals[i].ok_or_else(|| Error::Config(format!("calibration is missing '{}'", KEYS[i])))
        };
        let k = Intrinsics::new(get(0)?, get(1)?, get(2)?, get(3)?)?;
        let rig = StereoRig::new(k, get(4)?)?;
        let (w, h) = (get(5)?, get(6)?);
        if !(w >= 1.0 && h >= 1.0) {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(Self {
            rig,
            width: w as usize,
            height: h as usize,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let k = &self.rig.intrinsics;
        format!(
            "fx = {}\nfy = {}\ncx = {}\ncy = {}\nbaseline = {}\nwidth = {}\nheight = {}\n",
            k.fx, k.fy, k.cx, k.cy, self.rig.baseline, self.width, self.height
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> StereoRig {
        StereoRig::new(Intrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn triangulate_principal_ray_and_offset() {
        let p = triangulate_stereo(&rig(), 320.0, 240.0, 310.0).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 20.0)).norm() < 1e-12);
        let p = triangulate_stereo(&rig(), 400.0, 240.0, 390.0).unwrap();
        assert!((p - Vector3::new(4.0, 0.0, 20.0)).norm() < 1e-12);
    }

    #[test]
    fn triangulate_rejects_non_positive_disparity() {
        assert!(matches!(
            triangulate_stereo(&rig(), 300.0, 240.0, 300.0),
            Err(Error::NonPositiveDisparity(_))
        ));
        assert!(triangulate_stereo(&rig(), 300.0, 240.0, 305.0).is_err());
    }

    #[test]
    fn project_then_triangulate_round_trip() {
        let r = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let z = rng.random_range(2.0..50.0);
            let p = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-5.0..5.0), z);
            let uv = r.intrinsics.project(&p).unwrap();
            let ur = r.project_right_u(&p).unwrap();
            let back = triangulate_stereo(&r, uv.x, uv.y, ur).unwrap();
            assert!((back - p).norm() < 1e-9);
        }
    }

    #[test]
    fn projection_examples() {
        let k = rig().intrinsics;
        let id = PoseSE3::identity();
        let uv = project(&id, &k, &Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert!((uv - Vector2::new(320.0, 240.0)).norm() < 1e-12);
        assert!(project(&id, &k, &Vector3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn projection_matches_scalar_formula() {
        let k = rig().intrinsics;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let xi = nalgebra::Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5));
            let pose = PoseSE3::exp(&xi);
            let pw = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..20.0));
            let r = pose.rotation;
            let t = pose.translation;
            let x = r[(0, 0)] * pw.x + r[(0, 1)] * pw.y + r[(0, 2)] * pw.z + t.x;
            let y = r[(1, 0)] * pw.x + r[(1, 1)] * pw.y + r[(1, 2)] * pw.z + t.y;
            let z = r[(2, 0)] * pw.x + r[(2, 1)] * pw.y + r[(2, 2)] * pw.z + t.z;
            let got = project(&pose, &k, &pw).unwrap();
            assert!((got.x - (k.fx * x / z + k.cx)).abs() < 1e-9);
            assert!((got.y - (k.fy * y / z + k.cy)).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let k = rig().intrinsics;
        let p = Vector3::new(0.7, -0.4, 5.0);
        let j = k.projection_jacobian(&p);
        let h = 1e-6;
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = h;
            let fd = (k.project(&(p + d)).unwrap() - k.project(&(p - d)).unwrap()) / (2.0 * h);
            assert!((fd - j.column(c)).norm() < 1e-6);
        }
    }

    #[test]
    fn calibration_parse_and_errors() {
        let c = Calibration::parse("fx = 400\nfy=400\ncx: 320\ncy 240\n# c\nbaseline = 0.5\nwidth = 640\nheight = 480\n").unwrap();
        assert_eq!(c.width, 640);
        assert_eq!(Calibration::parse(&c.to_text()).unwrap(), c);
        assert!(matches!(Calibration::parse("fx = 1"), Err(Error::Config(_))));
        assert!(matches!(Calibration::parse("fz = 1"), Err(Error::Parse { .. })));
    }
}

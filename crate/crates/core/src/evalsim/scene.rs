//! Procedural stereo sequences: Gaussian blobs at landmark projections over
//! a smooth sky-like background, rigid dynamic clusters with masks, and
//! ground-truth feature sets with per-landmark stable descriptors.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trajectory::Trajectory;
use crate::dynfilter::DynamicMask;
use crate::error::{Error, Result};
use crate::features::{save_features, BinaryDescriptor, Descriptor, FeatureSet, Keypoint, DESC_DIM};
use crate::geometry::{Calibration, Intrinsics, PoseSE3, StereoRig};
use crate::image::{write_gray16, write_gray8, Grid};

/// Nearest depth at which anything is rendered or emitted.
const NEAR: f64 = 0.5;
const BLOB_SIGMA: f64 = 1.2;
const BLOB_RADIUS: isize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Std-dev of keypoint position noise, pixels.
    pub pixel_sigma: f64,
    /// Per-bit flip probability of emitted descriptors.
    pub bit_flip: f64,
    /// Std-dev of additive image noise, raw counts.
    pub intensity_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.3,
            bit_flip: 0.05,
            intensity_sigma: 20.0,
        }
    }
}

impl NoiseSpec {
    pub fn zero() -> Self {
        Self {
            pixel_sigma: 0.0,
            bit_flip: 0.0,
            intensity_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub descriptor: BinaryDescriptor,
    /// Peak blob amplitude, raw counts.
    pub brightness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClusterMotion {
    Parked,
    /// Triangle wave along `axis` with constant `speed` (m per frame) and
    /// half-range `amplitude`.
    Oscillate { axis: Vector3<f64>, speed: f64, amplitude: f64 },
}

impl ClusterMotion {
    pub fn offset(&self, frame: usize) -> Vector3<f64> {
        match *self {
            ClusterMotion::Parked => Vector3::zeros(),
            ClusterMotion::Oscillate { axis, speed, amplitude } => {
                if amplitude <= 0.0 {
                    return Vector3::zeros();
                }
                let period = 4.0 * amplitude;
                let s = (speed * frame as f64).rem_euclid(period);
                let x = if s < 2.0 * amplitude { s - amplitude } else { 3.0 * amplitude - s };
                axis * x
            }
        }
    }

    pub fn is_moving(&self) -> bool {
        matches!(self, ClusterMotion::Oscillate { speed, amplitude, .. } if *speed > 0.0 && *amplitude > 0.0)
    }
}

/// Points rigidly attached to a moving (or parked) object.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicCluster {
    pub center: Vector3<f64>,
    /// Positions relative to `center`.
    pub points: Vec<Landmark>,
    pub motion: ClusterMotion,
    /// Radius of the mask disk drawn around each projected point, pixels.
    pub mask_radius: f64,
}

impl DynamicCluster {
    pub fn position(&self, point: usize, frame: usize) -> Vector3<f64> {
        self.center + self.motion.offset(frame) + self.points[point].position
    }
}

/// What produced a ground-truth keypoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    Static(usize),
    Dynamic { cluster: usize, point: usize, moving: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub landmarks: Vec<Landmark>,
    pub clusters: Vec<DynamicCluster>,
    /// `(timestamp, world-to-camera)` of the left camera.
    pub trajectory: Vec<(f64, PoseSE3)>,
    pub rig: StereoRig,
    pub width: usize,
    pub height: usize,
    pub noise: NoiseSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFrame {
    pub index: usize,
    pub timestamp: f64,
    /// World-to-camera of the left camera.
    pub pose: PoseSE3,
    pub left: Grid<u16>,
    pub right: Grid<u16>,
    pub features: FeatureSet,
    pub right_features: FeatureSet,
    /// Source of each left keypoint.
    pub sources: Vec<FeatureSource>,
    pub right_sources: Vec<FeatureSource>,
    pub mask: DynamicMask,
}

/// Real descriptor whose binarization is `bits`, all components ±1/16.
pub fn descriptor_from_bits(bits: &BinaryDescriptor) -> Descriptor {
    let raw: Vec<f32> = (0..DESC_DIM).map(|i| if bits.bit(i) { 1.0 / 16.0 } else { -1.0 / 16.0 }).collect();
    Descriptor::normalized(&raw).expect("unit vector")
}

fn random_bits<R: Rng>(rng: &mut R) -> BinaryDescriptor {
    let mut b = BinaryDescriptor::zeros();
    rng.fill(&mut b.0[..]);
    b
}

fn flipped<R: Rng>(bits: &BinaryDescriptor, p: f64, rng: &mut R) -> BinaryDescriptor {
    let mut b = *bits;
    if p > 0.0 {
        for i in 0..DESC_DIM {
            if rng.random::<f64>() < p {
                b.flip_bit(i);
            }
        }
    }
    b
}

/// Smooth function of the viewing direction, so both cameras and all
/// frames agree on it.
fn background(d: &Vector3<f64>) -> f64 {
    let n = d.normalize();
    18000.0 + 2500.0 * (3.0 * n.x + 1.0).sin() * (2.0 * n.y).cos() + 1500.0 * (5.0 * n.z - 2.0 * n.x).sin() * (4.0 * n.y + 0.5).sin()
}

fn splat(img: &mut [f64], w: usize, h: usize, u: f64, v: f64, amp: f64) {
    let (ui, vi) = (u.round() as isize, v.round() as isize);
    let inv = 1.0 / (2.0 * BLOB_SIGMA * BLOB_SIGMA);
    for y in vi - BLOB_RADIUS..=vi + BLOB_RADIUS {
        if y < 0 || y >= h as isize {
            continue;
        }
        for x in ui - BLOB_RADIUS..=ui + BLOB_RADIUS {
            if x < 0 || x >= w as isize {
                continue;
            }
            let (dx, dy) = (x as f64 - u, y as f64 - v);
            img[y as usize * w + x as usize] += amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

fn in_bounds(u: f64, v: f64, w: usize, h: usize) -> bool {
    u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidInput(format!("image size {}x{} too small", self.width, self.height)));
        }
        if let Some(i) = self.trajectory.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidInput(format!("trajectory timestamps not increasing at index {}", i + 1)));
        }
        let n = &self.noise;
        if !(n.pixel_sigma >= 0.0 && n.intensity_sigma >= 0.0 && (0.0..=0.5).contains(&n.bit_flip)) {
            return Err(Error::InvalidInput(format!("invalid noise spec {n:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            rig: self.rig,
            width: self.width,
            height: self.height,
        }
    }

    /// Camera-to-world ground truth.
    pub fn ground_truth(&self) -> Trajectory {
        Trajectory::from_poses(self.trajectory.iter().map(|(t, p)| (*t, p.inverse()))).expect("validated timestamps")
    }

    /// Renders frame `index`. Each frame draws from its own random stream,
    /// so frames can be produced in any order.
    pub fn frame(&self, index: usize, seed: u64) -> SyntheticFrame {
        let (timestamp, pose) = self.trajectory[index];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        let k = self.rig.intrinsics;
        let (w, h) = (self.width, self.height);
        let pix = Normal::new(0.0, self.noise.pixel_sigma.max(1e-300)).expect("finite sigma");
        let jitter = |rng: &mut ChaCha8Rng| if self.noise.pixel_sigma > 0.0 { pix.sample(rng) } else { 0.0 };

        let mut points: Vec<(Vector3<f64>, &Landmark, FeatureSource)> = self
            .landmarks
            .iter()
            .enumerate()
            .map(|(i, l)| (pose.transform(&l.position), l, FeatureSource::Static(i)))
            .collect();
        for (c, cl) in self.clusters.iter().enumerate() {
            for (p, l) in cl.points.iter().enumerate() {
                let src = FeatureSource::Dynamic {
                    cluster: c,
                    point: p,
                    moving: cl.motion.is_moving(),
                };
                points.push((pose.transform(&cl.position(p, index)), l, src));
            }
        }

        let mut left_img = vec![0.0f64; w * h];
        let mut right_img = vec![0.0f64; w * h];
        let (mut lk, mut ld, mut ls) = (Vec::new(), Vec::new(), Vec::new());
        let (mut rk, mut rd, mut rs) = (Vec::new(), Vec::new(), Vec::new());
        for (pc, l, src) in &points {
            if pc.z < NEAR {
                continue;
            }
            let Some(uv) = k.project(pc) else { continue };
            let Some(ur) = self.rig.project_right_u(pc) else { continue };
            splat(&mut left_img, w, h, uv.x, uv.y, l.brightness);
            splat(&mut right_img, w, h, ur, uv.y, l.brightness);
            if in_bounds(uv.x, uv.y, w, h) {
                let (u, v) = (uv.x + jitter(&mut rng), uv.y + jitter(&mut rng));
                let bits = flipped(&l.descriptor, self.noise.bit_flip, &mut rng);
                lk.push(Keypoint::new(u as f32, v as f32, 1.0));
                ld.push(descriptor_from_bits(&bits));
                ls.push(*src);
            }
            if in_bounds(ur, uv.y, w, h) {
                let (u, v) = (ur + jitter(&mut rng), uv.y + jitter(&mut rng));
                let bits = flipped(&l.descriptor, self.noise.bit_flip, &mut rng);
                rk.push(Keypoint::new(u as f32, v as f32, 1.0));
                rd.push(descriptor_from_bits(&bits));
                rs.push(*src);
            }
        }

        let mut mask = DynamicMask::empty(w, h);
        for cl in &self.clusters {
            let r = cl.mask_radius;
            for p in 0..cl.points.len() {
                let pc = pose.transform(&cl.position(p, index));
                if pc.z < NEAR {
                    continue;
                }
                let Some(uv) = k.project(&pc) else { continue };
                let (x0, x1) = ((uv.x - r).floor().max(0.0), (uv.x + r).ceil().min((w - 1) as f64));
                let (y0, y1) = ((uv.y - r).floor().max(0.0), (uv.y + r).ceil().min((h - 1) as f64));
                if x0 > x1 || y0 > y1 {
                    continue;
                }
                for y in y0 as usize..=y1 as usize {
                    for x in x0 as usize..=x1 as usize {
                        let (dx, dy) = (x as f64 - uv.x, y as f64 - uv.y);
                        if dx * dx + dy * dy <= r * r {
                            mask.bitmap[y * w + x] = true;
                        }
                    }
                }
            }
        }

        let noise_seed: u64 = rng.random();
        let left = self.finish(&left_img, &pose, noise_seed, 0);
        let right = self.finish(&right_img, &pose, noise_seed, h as u64);
        SyntheticFrame {
            index,
            timestamp,
            pose,
            left,
            right,
            features: FeatureSet::new(timestamp, lk, ld).expect("matching lengths"),
            right_features: FeatureSet::new(timestamp, rk, rd).expect("matching lengths"),
            sources: ls,
            right_sources: rs,
            mask,
        }
    }

    /// Background plus blobs plus per-row seeded noise, quantized to 16 bits.
    /// The background is evaluated on a coarse lattice and interpolated.
    fn finish(&self, blobs: &[f64], pose: &PoseSE3, seed: u64, row_offset: u64) -> Grid<u16> {
        const STEP: usize = 8;
        let k: Intrinsics = self.rig.intrinsics;
        let (w, h) = (self.width, self.height);
        let r_wc: Matrix3<f64> = pose.rotation.transpose();
        let (gw, gh) = ((w - 1) / STEP + 2, (h - 1) / STEP + 2);
        let lattice: Vec<f64> = (0..gw * gh)
            .map(|i| {
                let (x, y) = ((i % gw * STEP) as f64, (i / gw * STEP) as f64);
                background(&(r_wc * Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0)))
            })
            .collect();
        let sigma = self.noise.intensity_sigma;
        let mut data = vec![0u16; w * h];
        data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(row_offset + y as u64);
            let n = Normal::new(0.0, sigma.max(1e-300)).expect("finite sigma");
            let (gy, fy) = (y / STEP, (y % STEP) as f64 / STEP as f64);
            for (x, px) in row.iter_mut().enumerate() {
                let (gx, fx) = (x / STEP, (x % STEP) as f64 / STEP as f64);
                let at = |i: usize, j: usize| lattice[j * gw + i];
                let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
                let bottom = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
                let mut v = top * (1.0 - fy) + bottom * fy + blobs[y * w + x];
                if sigma > 0.0 {
                    v += n.sample(&mut rng);
                }
                *px = v.round().clamp(0.0, 65535.0) as u16;
            }
        });
        Grid { width: w, height: h, data }
    }
}

/// Frames of `world` in order, rendered on demand.
pub fn generate_sequence(world: &SyntheticWorld, seed: u64) -> impl Iterator<Item = SyntheticFrame> + '_ {
    (0..world.len()).map(move |i| world.frame(i, seed))
}

/// Circle trajectory looking outward, landmarks in a ring around it, and
/// dynamic objects spread evenly along it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircleScenario {
    pub radius: f64,
    pub frames: usize,
    /// Frames per second.
    pub rate: f64,
    pub landmarks: usize,
    /// Inner and outer landmark ring radius.
    pub ring: [f64; 2],
    /// Landmark height range, as a fraction of the distance from the path.
    pub height_ratio: f64,
    pub dynamic_objects: usize,
    /// How many of the dynamic objects move; the rest are parked.
    pub moving_objects: usize,
    pub points_per_object: usize,
    /// Distance of dynamic objects from the path, metres.
    pub object_distance: [f64; 2],
    /// Range of mover speeds, metres per frame.
    pub object_speed: [f64; 2],
    pub object_amplitude: f64,
    pub mask_radius: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub baseline: f64,
    pub noise: NoiseSpec,
}

impl Default for CircleScenario {
    fn default() -> Self {
        Self {
            radius: 50.0,
            frames: 400,
            rate: 10.0,
            landmarks: 4500,
            ring: [60.0, 90.0],
            height_ratio: 1.0,
            dynamic_objects: 12,
            moving_objects: 8,
            points_per_object: 30,
            object_distance: [12.0, 20.0],
            object_speed: [0.15, 0.4],
            object_amplitude: 2.0,
            mask_radius: 10.0,
            width: 640,
            height: 480,
            focal: 400.0,
            baseline: 0.5,
            noise: NoiseSpec::default(),
        }
    }
}

impl CircleScenario {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// World-to-camera pose of frame `i` of `n`.
    pub fn pose_at(radius: f64, i: usize, n: usize) -> PoseSE3 {
        let th = 2.0 * PI * i as f64 / n as f64;
        let (s, c) = th.sin_cos();
        let center = Vector3::new(radius * c, 0.0, radius * s);
        let r_wc = Matrix3::from_columns(&[Vector3::new(s, 0.0, -c), Vector3::new(0.0, 1.0, 0.0), Vector3::new(c, 0.0, s)]);
        PoseSE3::new(r_wc.transpose(), -(r_wc.transpose() * center))
    }

    pub fn build(&self, seed: u64) -> Result<SyntheticWorld> {
        let [r_in, r_out] = self.ring;
        if !(self.radius > 0.0 && self.rate > 0.0 && r_in < r_out && r_in > 0.0 && self.frames > 0) {
            return Err(Error::Config(format!("invalid circle scenario {self:?}")));
        }
        if self.moving_objects > self.dynamic_objects {
            return Err(Error::Config("moving_objects exceeds dynamic_objects".into()));
        }
        let k = Intrinsics::new(self.focal, self.focal, self.width as f64 / 2.0, self.height as f64 / 2.0)?;
        let rig = StereoRig::new(k, self.baseline)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let landmark = |rng: &mut ChaCha8Rng, position: Vector3<f64>| Landmark {
            position,
            descriptor: random_bits(rng),
            brightness: rng.random_range(4000.0..12000.0),
        };
        let landmarks = (0..self.landmarks)
            .map(|_| {
                let r = rng.random_range(r_in * r_in..r_out * r_out).sqrt();
                let phi = rng.random_range(0.0..2.0 * PI);
                let y = rng.random_range(-0.5..0.5) * (r - self.radius).abs() * self.height_ratio;
                landmark(&mut rng, Vector3::new(r * phi.cos(), y, r * phi.sin()))
            })
            .collect();
        let clusters = (0..self.dynamic_objects)
            .map(|c| {
                let phi = 2.0 * PI * (c as f64 + 0.5) / self.dynamic_objects as f64;
                let dist = rng.random_range(self.object_distance[0]..=self.object_distance[1]);
                let radial = Vector3::new(phi.cos(), 0.0, phi.sin());
                let center = radial * (self.radius + dist);
                let tangent = Vector3::new(-phi.sin(), 0.0, phi.cos());
                let points = (0..self.points_per_object)
                    .map(|_| {
                        let off = tangent * rng.random_range(-1.5..1.5) + Vector3::y() * rng.random_range(-1.0..1.0) + radial * rng.random_range(-0.5..0.5);
                        landmark(&mut rng, off)
                    })
                    .collect();
                let motion = if c < self.moving_objects {
                    let axis = if c % 2 == 0 { Vector3::y() } else { radial };
                    ClusterMotion::Oscillate {
                        axis,
                        speed: rng.random_range(self.object_speed[0]..=self.object_speed[1]),
                        amplitude: self.object_amplitude,
                    }
                } else {
                    ClusterMotion::Parked
                };
                DynamicCluster {
                    center,
                    points,
                    motion,
                    mask_radius: self.mask_radius,
                }
            })
            .collect();
        let trajectory = (0..self.frames)
            .map(|i| (i as f64 / self.rate, Self::pose_at(self.radius, i, self.frames)))
            .collect();
        let world = SyntheticWorld {
            landmarks,
            clusters,
            trajectory,
            rig,
            width: self.width,
            height: self.height,
            noise: self.noise,
        };
        world.validate()?;
        Ok(world)
    }
}

/// File stem used for a frame timestamp throughout a dataset.
pub fn timestamp_stem(t: f64) -> String {
    format!("{t:.6}")
}

/// Writes `left/`, `right/`, `features/` (left and `.right` sets),
/// `masks/`, `calib.txt` and `gt.txt` under `out`.
pub fn write_dataset(world: &SyntheticWorld, seed: u64, out: &Path) -> Result<()> {
    world.validate()?;
    for d in ["left", "right", "features", "masks"] {
        let p = out.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let calib = out.join("calib.txt");
    std::fs::write(&calib, world.calibration().to_text()).map_err(|e| Error::io(&calib, e))?;
    world.ground_truth().save(&out.join("gt.txt"))?;
    (0..world.len()).into_par_iter().try_for_each(|i| {
        let f = world.frame(i, seed);
        let stem = timestamp_stem(f.timestamp);
        write_gray16(&out.join("left").join(format!("{stem}.png")), &f.left)?;
        write_gray16(&out.join("right").join(format!("{stem}.png")), &f.right)?;
        save_features(&out.join("features").join(format!("{stem}.feat")), &f.features)?;
        save_features(&out.join("features").join(format!("{stem}.right.feat")), &f.right_features)?;
        write_gray8(&out.join("masks").join(format!("{stem}.png")), &f.mask.to_grid())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{binarize, hamming};

    fn one_point_world(noise: NoiseSpec) -> SyntheticWorld {
        let rig = StereoRig::new(Intrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap(), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        SyntheticWorld {
            landmarks: vec![Landmark {
                position: Vector3::new(0.0, 0.0, 20.0),
                descriptor: random_bits(&mut rng),
                brightness: 8000.0,
            }],
            clusters: Vec::new(),
            trajectory: vec![(0.0, PoseSE3::identity()), (0.1, PoseSE3::identity())],
            rig,
            width: 640,
            height: 480,
            noise,
        }
    }

    #[test]
    fn static_noiseless_frames_are_identical() {
        let w = one_point_world(NoiseSpec::zero());
        let (a, b) = (w.frame(0, 9), w.frame(1, 9));
        assert_eq!(a.left, b.left);
        assert_eq!(a.right, b.right);
        assert_eq!(a.features.keypoints, b.features.keypoints);
        assert_eq!(a.features.binary, b.features.binary);
    }

    #[test]
    fn disparity_of_a_point_at_twenty_metres() {
        let f = one_point_world(NoiseSpec::zero()).frame(0, 0);
        let d = f.features.keypoints[0].u - f.right_features.keypoints[0].u;
        assert!((d - 10.0).abs() < 1e-4, "{d}");
        // the blob peak sits on the projection in both images
        let peak = |g: &Grid<u16>| (0..g.width).max_by_key(|&x| g.get(x, 240)).unwrap();
        assert_eq!(peak(&f.left), 320);
        assert_eq!(peak(&f.right), 310);
    }

    #[test]
    fn descriptor_bits_survive_binarization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_bits(&mut rng);
        assert_eq!(binarize(&descriptor_from_bits(&b)), b);
    }

    #[test]
    fn cross_frame_hamming_matches_the_flip_expectation() {
        let mut w = one_point_world(NoiseSpec {
            bit_flip: 0.05,
            ..NoiseSpec::zero()
        });
        w.trajectory = (0..1001).map(|i| (i as f64, PoseSE3::identity())).collect();
        w.rig = StereoRig::new(Intrinsics::new(400.0, 400.0, 16.0, 8.0).unwrap(), 0.5).unwrap();
        (w.width, w.height) = (32, 16);
        let descs: Vec<BinaryDescriptor> = (0..1001).map(|i| w.frame(i, 5).features.binary[0]).collect();
        let mean = descs.windows(2).map(|p| hamming(&p[0], &p[1]) as f64).sum::<f64>() / 1000.0;
        let expected = 256.0 * 2.0 * 0.05 * 0.95;
        assert!((mean - expected).abs() <= 3.0, "{mean} vs {expected}");
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let sc = CircleScenario {
            frames: 6,
            landmarks: 300,
            width: 160,
            height: 120,
            focal: 100.0,
            ..CircleScenario::default()
        };
        let w = sc.build(11).unwrap();
        assert_eq!(w, sc.build(11).unwrap());
        let fwd: Vec<SyntheticFrame> = generate_sequence(&w, 3).collect();
        assert_eq!(w.frame(4, 3), fwd[4]);
        assert_ne!(w.frame(4, 4).left, fwd[4].left);
    }

    #[test]
    fn circle_length_is_the_circumference() {
        let w = CircleScenario {
            landmarks: 10,
            ..CircleScenario::default()
        }
        .build(0)
        .unwrap();
        let gt = w.ground_truth();
        // 399 chords of a 400-gon
        let expected = 399.0 * 2.0 * 50.0 * (PI / 400.0).sin();
        assert!((gt.path_length() - expected).abs() < 1e-9);
        // one lap less its closing segment
        assert!((gt.path_length() - 2.0 * PI * 50.0).abs() < 2.0 * 2.0 * PI * 50.0 / 400.0);
    }

    #[test]
    fn masks_cover_dynamic_keypoints_only() {
        let sc = CircleScenario {
            frames: 40,
            landmarks: 500,
            dynamic_objects: 2,
            moving_objects: 1,
            ..CircleScenario::default()
        };
        let w = sc.build(2).unwrap();
        let mut dynamic = 0;
        for i in [0, 5, 10, 15] {
            let f = w.frame(i, 1);
            for (kp, src) in f.features.keypoints.iter().zip(&f.sources) {
                if matches!(src, FeatureSource::Dynamic { .. }) {
                    dynamic += 1;
                    assert!(f.mask.contains(kp.u as f64, kp.v as f64, 1));
                }
            }
        }
        assert!(dynamic > 0);
        let none = CircleScenario {
            frames: 3,
            landmarks: 50,
            dynamic_objects: 0,
            moving_objects: 0,
            ..CircleScenario::default()
        }
        .build(0)
        .unwrap();
        assert!(none.frame(1, 0).mask.is_empty());
    }

    #[test]
    fn scenario_rejects_unknown_keys() {
        assert!(CircleScenario::parse("radius = 10.0\nframes = 5\n").is_ok());
        assert!(CircleScenario::parse("radius = 10.0\nfrmes = 5\n").is_err());
    }
}

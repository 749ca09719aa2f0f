//! `TMAP` files: rig, keyframes (pose, features, stereo evidence) and map
//! points with their observation edges. Little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{Keyframe, Map, MapPoint, StereoObs};
use crate::error::{Error, Result};
use crate::features::{read_features, write_features, BinaryDescriptor, DESC_BYTES};
use crate::geometry::{Intrinsics, PoseSE3, StereoRig};

const MAGIC: &[u8; 4] = b"TMAP";
const VERSION: u32 = 1;

fn put_f64s<W: Write>(out: &mut W, vs: &[f64]) -> std::io::Result<()> {
    vs.iter().try_for_each(|v| out.write_all(&v.to_le_bytes()))
}

pub fn write_map<W: Write>(mut out: W, map: &Map) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let k = &map.rig.intrinsics;
    put_f64s(&mut out, &[k.fx, k.fy, k.cx, k.cy, map.rig.baseline])?;
    out.write_all(&map.next_keyframe.to_le_bytes())?;
    out.write_all(&map.next_point.to_le_bytes())?;
    out.write_all(&(map.keyframes.len() as u32).to_le_bytes())?;
    for kf in map.keyframes.values() {
        out.write_all(&kf.id.to_le_bytes())?;
        put_f64s(&mut out, &[kf.timestamp])?;
        let r = kf.pose.rotation;
        let rows: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| r[(i, j)])).collect();
        put_f64s(&mut out, &rows)?;
        put_f64s(&mut out, kf.pose.translation.as_slice())?;
        let mut feat = Vec::new();
        write_features(&mut feat, &kf.features)?;
        out.write_all(&(feat.len() as u64).to_le_bytes())?;
        out.write_all(&feat)?;
        for s in &kf.stereo {
            match s {
                Some(s) => {
                    out.write_all(&[1])?;
                    put_f64s(&mut out, &[s.u_r, s.pc.x, s.pc.y, s.pc.z])?;
                }
                None => out.write_all(&[0])?,
            }
        }
    }
    out.write_all(&(map.points.len() as u32).to_le_bytes())?;
    for p in map.points.values() {
        out.write_all(&p.id.to_le_bytes())?;
        put_f64s(&mut out, p.position.as_slice())?;
        out.write_all(&p.reference.to_le_bytes())?;
        out.write_all(&p.descriptor.0)?;
        out.write_all(&(p.observations.len() as u32).to_le_bytes())?;
        for (kf, kp) in &p.observations {
            out.write_all(&kf.to_le_bytes())?;
            out.write_all(&(*kp as u32).to_le_bytes())?;
        }
    }
    out.flush()
}

struct Cursor<R> {
    inner: R,
    record: usize,
    section: &'static str,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::parse(self.section, self.record, "unexpected end of file"))?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        let v = f64::from_le_bytes(self.bytes()?);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::parse(self.section, self.record, "non-finite value"))
        }
    }
    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.section, self.record, msg)
    }
}

pub fn read_map<R: Read>(input: R) -> Result<Map> {
    let mut c = Cursor {
        inner: input,
        record: 0,
        section: "TMAP header",
    };
    if &c.bytes::<4>()? != MAGIC {
        return Err(c.fail("bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let (fx, fy, cx, cy, b) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?, c.f64()?);
    let rig = StereoRig::new(Intrinsics::new(fx, fy, cx, cy).map_err(|e| c.fail(e.to_string()))?, b).map_err(|e| c.fail(e.to_string()))?;
    let mut map = Map::new(rig);
    map.next_keyframe = c.u64()?;
    map.next_point = c.u64()?;

    let n_kf = c.u32()? as usize;
    c.section = "TMAP keyframe";
    for rec in 0..n_kf {
        c.record = rec;
        let id = c.u64()?;
        let timestamp = c.f64()?;
        let mut r = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r[(i, j)] = c.f64()?;
            }
        }
        let t = c.vec3()?;
        let pose = PoseSE3::new(r, t);
        if !pose.is_valid(1e-6) {
            return Err(c.fail("rotation is not orthonormal"));
        }
        let len = c.u64()? as usize;
        let mut feat = Vec::new();
        (&mut c.inner).take(len as u64).read_to_end(&mut feat).map_err(|e| c.fail(e.to_string()))?;
        if feat.len() != len {
            return Err(c.fail("unexpected end of file"));
        }
        let features = read_features(&feat[..]).map_err(|e| c.fail(format!("embedded features: {e}")))?;
        let mut stereo = Vec::with_capacity(features.len());
        for _ in 0..features.len() {
            stereo.push(match c.u8()? {
                0 => None,
                1 => Some(StereoObs {
                    u_r: c.f64()?,
                    pc: c.vec3()?,
                }),
                f => return Err(c.fail(format!("bad stereo flag {f}"))),
            });
        }
        if id >= map.next_keyframe || map.keyframes.contains_key(&id) {
            return Err(c.fail(format!("keyframe id {id} duplicated or out of range")));
        }
        let mut kf = Keyframe::new(timestamp, pose, features, stereo);
        kf.id = id;
        map.keyframes.insert(id, kf);
    }

    let n_pt = c.u32()? as usize;
    c.section = "TMAP point";
    for rec in 0..n_pt {
        c.record = rec;
        let id = c.u64()?;
        let position = c.vec3()?;
        let reference = c.u64()?;
        let descriptor = BinaryDescriptor(c.bytes::<DESC_BYTES>()?);
        let n_obs = c.u32()? as usize;
        if id >= map.next_point || map.points.contains_key(&id) {
            return Err(c.fail(format!("point id {id} duplicated or out of range")));
        }
        let mut observations = BTreeMap::new();
        for _ in 0..n_obs {
            let kf = c.u64()?;
            let kp = c.u32()? as usize;
            let k = map.keyframes.get_mut(&kf).ok_or_else(|| Error::parse("TMAP point", rec, format!("unknown keyframe {kf}")))?;
            match k.observations.get_mut(kp) {
                Some(slot @ None) => *slot = Some(id),
                _ => return Err(c.fail(format!("keypoint {kp} of keyframe {kf} missing or already linked"))),
            }
            if observations.insert(kf, kp).is_some() {
                return Err(c.fail(format!("keyframe {kf} observes the point twice")));
            }
        }
        map.points.insert(
            id,
            MapPoint {
                id,
                position,
                descriptor,
                observations,
                reference,
            },
        );
    }
    let mut extra = [0u8; 1];
    if c.inner.read(&mut extra).map_err(|e| c.fail(e.to_string()))? != 0 {
        c.section = "TMAP trailer";
        return Err(c.fail("data after the last point"));
    }
    map.covisibility = map.covisibility_from_scratch();
    Ok(map)
}

pub fn save_map(path: &Path, map: &Map) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_map(BufWriter::new(file), map).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: &Path) -> Result<Map> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_map(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, FeatureSet, Keypoint, DESC_DIM};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_map() -> Map {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rig = StereoRig::new(Intrinsics::new(400.0, 400.0, 320.0, 240.0).unwrap(), 0.5).unwrap();
        let mut map = Map::new(rig);
        for i in 0..3 {
            let n = 6;
            let kps = (0..n).map(|j| Keypoint::new(10.0 * j as f32, 5.0, 1.0)).collect();
            let ds = (0..n)
                .map(|_| Descriptor::normalized(&(0..DESC_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>()).unwrap())
                .collect();
            let stereo = (0..n)
                .map(|j| {
                    (j % 2 == 0).then(|| StereoObs {
                        u_r: 3.0,
                        pc: Vector3::new(1.0, 2.0, 3.0 + j as f64),
                    })
                })
                .collect();
            let pose = PoseSE3::new(crate::geometry::so3_exp(&Vector3::new(0.1, 0.2 * i as f64, 0.0)), Vector3::new(i as f64, 0.0, 1.0));
            map.add_keyframe(Keyframe::new(i as f64 * 0.1, pose, FeatureSet::new(i as f64, kps, ds).unwrap(), stereo));
        }
        map.create_map_points(0, 2.0);
        map.add_observation(1, 1, 0);
        map.add_observation(2, 4, 0);
        map.add_observation(2, 5, 1);
        map
    }

    #[test]
    fn round_trip() {
        let map = sample_map();
        let mut buf = Vec::new();
        write_map(&mut buf, &map).unwrap();
        let back = read_map(&buf[..]).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn truncation_and_trailing_data_are_rejected() {
        let mut buf = Vec::new();
        write_map(&mut buf, &sample_map()).unwrap();
        for cut in [3, 30, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(read_map(&buf[..cut]), Err(Error::Parse { .. })), "cut {cut}");
        }
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_map(&long[..]), Err(Error::Parse { .. })));
        let mut bad = buf;
        bad[0] = b'X';
        assert!(read_map(&bad[..]).is_err());
    }
}

//! `FEAT` files: magic, u32 version, f64 timestamp, u32 count, then per
//! keypoint f32 u, v, score and 256 f32 descriptor components. Little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Descriptor, FeatureSet, Keypoint, DESC_DIM};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FEAT";
const VERSION: u32 = 1;
const RECORD_BYTES: usize = 4 * (3 + DESC_DIM);

pub fn write_features<W: Write>(mut out: W, fs: &FeatureSet) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&fs.timestamp.to_le_bytes())?;
    out.write_all(&(fs.len() as u32).to_le_bytes())?;
    let mut rec = Vec::with_capacity(RECORD_BYTES);
    for (k, d) in fs.keypoints.iter().zip(&fs.descriptors) {
        rec.clear();
        for v in [k.u, k.v, k.score].iter().chain(d.0.iter()) {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&rec)?;
    }
    out.flush()
}

pub fn read_features<R: Read>(mut input: R) -> Result<FeatureSet> {
    let mut header = [0u8; 20];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::parse("FEAT header", 0, e.to_string()))?;
    if &header[0..4] != MAGIC {
        return Err(Error::parse("FEAT header", 0, "bad magic"));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::parse("FEAT header", 0, format!("unsupported version {version}")));
    }
    let timestamp = f64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let count = u32::from_le_bytes(header[16..20].try_into().expect("4 bytes")) as usize;

    let mut keypoints = Vec::with_capacity(count.min(1 << 16));
    let mut descriptors = Vec::with_capacity(count.min(1 << 16));
    let mut buf = vec![0u8; RECORD_BYTES];
    let mut vals = vec![0f32; 3 + DESC_DIM];
    for rec in 0..count {
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::parse("FEAT record", rec, format!("file ends before record {rec} of {count}")))?;
        for (v, c) in vals.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse("FEAT record", rec, "non-finite value"));
        }
        let d = Descriptor::normalized(&vals[3..]).map_err(|e| Error::parse("FEAT record", rec, e.to_string()))?;
        keypoints.push(Keypoint::new(vals[0], vals[1], vals[2]));
        descriptors.push(d);
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra).map_err(|e| Error::parse("FEAT trailer", count, e.to_string()))? != 0 {
        return Err(Error::parse("FEAT trailer", count, format!("data beyond the declared {count} records")));
    }
    FeatureSet::new(timestamp, keypoints, descriptors)
}

pub fn save_features(path: &Path, fs: &FeatureSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(BufWriter::new(file), fs).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(BufReader::new(file))
}

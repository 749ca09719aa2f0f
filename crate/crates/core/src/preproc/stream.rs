//! `THRM` raw stream: 16-byte header (magic, u32 width, u32 height, u32
//! frame count) followed by little-endian u16 frames. The stream carries no
//! timestamps; frames are stamped `index * period`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::preproc::RawThermalFrame;

const MAGIC: &[u8; 4] = b"THRM";

pub struct ThrmReader<R: Read> {
    inner: R,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    period: f64,
    next: usize,
}

impl<R: Read> ThrmReader<R> {
    pub fn new(mut inner: R, period: f64) -> Result<Self> {
        let mut header = [0u8; 16];
        inner
            .read_exact(&mut header)
            .map_err(|e| Error::parse("THRM header", 0, e.to_string()))?;
        if &header[0..4] != MAGIC {
            return Err(Error::parse("THRM header", 0, "bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (width, height, frame_count) = (word(4), word(8), word(12));
        if width == 0 || height == 0 {
            return Err(Error::parse("THRM header", 0, "zero dimension"));
        }
        Ok(Self {
            inner,
            width,
            height,
            frame_count,
            period,
            next: 0,
        })
    }
}

impl<R: Read> Iterator for ThrmReader<R> {
    type Item = Result<RawThermalFrame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.frame_count {
            return None;
        }
        let mut buf = vec![0u8; self.width * self.height * 2];
        let idx = self.next;
        self.next += 1;
        if let Err(e) = self.inner.read_exact(&mut buf) {
            self.next = self.frame_count;
            return Some(Err(Error::parse("THRM frame", idx, e.to_string())));
        }
        let data = buf
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Some(RawThermalFrame::new(
            idx as f64 * self.period,
            self.width,
            self.height,
            data,
        ))
    }
}

pub fn read_thrm(path: &Path, period: f64) -> Result<Vec<RawThermalFrame>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ThrmReader::new(BufReader::new(file), period)?.collect()
}

pub fn write_thrm(path: &Path, frames: &[RawThermalFrame]) -> Result<()> {
    let (w, h) = frames
        .first()
        .map(|f| (f.width, f.height))
        .ok_or_else(|| Error::InvalidInput("no frames to write".into()))?;
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::InvalidInput("frames differ in size".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        for v in [w as u32, h as u32, frames.len() as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for f in frames {
            for v in &f.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seq.thrm");
        let frames: Vec<_> = (0..3)
            .map(|k| RawThermalFrame::new(k as f64 * 0.1, 3, 2, vec![k, 1, 2, 3, 4, 65535]).unwrap())
            .collect();
        write_thrm(&p, &frames).unwrap();
        let back = read_thrm(&p, 0.1).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in frames.iter().zip(&back) {
            assert_eq!(a.data, b.data);
            assert!((a.timestamp - b.timestamp).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_stream_reports_frame_index() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"THRM");
        for v in [2u32, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0u8; 8]);
        bytes.extend_from_slice(&[0u8; 3]);
        let frames: Vec<_> = ThrmReader::new(&bytes[..], 1.0).unwrap().collect();
        assert!(frames[0].is_ok());
        assert!(matches!(frames[1], Err(Error::Parse { record: 1, .. })));
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = [0u8; 16];
        assert!(ThrmReader::new(&bytes[..], 1.0).is_err());
    }
}

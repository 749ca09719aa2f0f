//! Minimal row-major grayscale grids plus PNG/PGM codecs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::default(); width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

pub type GrayF = Grid<f32>;

impl GrayF {
    pub fn from_u8(width: usize, height: usize, data: &[u8]) -> Self {
        Self {
            width,
            height,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    pub fn contains(&self, x: f64, y: f64, margin: f64) -> bool {
        x >= margin
            && y >= margin
            && x <= self.width as f64 - 1.0 - margin
            && y <= self.height as f64 - 1.0 - margin
    }

    /// Bilinear interpolation with border clamping.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (xc.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (yc.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = xc - x0 as f64;
        let ay = yc - y0 as f64;
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        (1.0 - ay) * ((1.0 - ax) * p00 + ax * p10) + ay * ((1.0 - ax) * p01 + ax * p11)
    }

    /// Bilinear samples of the `(2·half+1)²` window centred at `(x, y)`, row
    /// by row into `out`. Matches [`GrayF::sample`] per pixel.
    pub fn sample_window(&self, x: f64, y: f64, half: usize, out: &mut Vec<f64>) {
        out.clear();
        let h = half as f64;
        if !self.contains(x - h, y - h, 0.0) || !self.contains(x + h + 1.0, y + h + 1.0, 0.0) {
            for dy in -(half as isize)..=half as isize {
                for dx in -(half as isize)..=half as isize {
                    out.push(self.sample(x + dx as f64, y + dy as f64));
                }
            }
            return;
        }
        // every tap shares the same fractional offsets
        let (xf, yf) = ((x - h).floor(), (y - h).floor());
        let (ax, ay) = (x - h - xf, y - h - yf);
        let (w00, w10, w01, w11) = ((1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay);
        let (x0, y0, side) = (xf as usize, yf as usize, 2 * half + 1);
        for r in 0..side {
            let row0 = &self.data[(y0 + r) * self.width + x0..][..side + 1];
            let row1 = &self.data[(y0 + r + 1) * self.width + x0..][..side + 1];
            for c in 0..side {
                out.push(w00 * row0[c] as f64 + w10 * row0[c + 1] as f64 + w01 * row1[c] as f64 + w11 * row1[c + 1] as f64);
            }
        }
    }

    /// Central-difference gradient image pair (gx, gy).
    pub fn gradients(&self) -> (GrayF, GrayF) {
        let (w, h) = (self.width, self.height);
        let mut gx = GrayF::new(w, h);
        let mut gy = GrayF::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(w - 1);
                let ym = y.saturating_sub(1);
                let yp = (y + 1).min(h - 1);
                let dx = (xp - xm).max(1) as f32;
                let dy = (yp - ym).max(1) as f32;
                gx.set(x, y, (self.get(xp, y) - self.get(xm, y)) / dx);
                gy.set(x, y, (self.get(x, yp) - self.get(x, ym)) / dy);
            }
        }
        (gx, gy)
    }

    /// 2x downsample with a [1 2 1]/4 separable prefilter.
    pub fn pyr_down(&self) -> GrayF {
        let w2 = self.width.div_ceil(2).max(1);
        let h2 = self.height.div_ceil(2).max(1);
        let mut out = GrayF::new(w2, h2);
        let at = |x: isize, y: isize| -> f32 {
            let xc = x.clamp(0, self.width as isize - 1) as usize;
            let yc = y.clamp(0, self.height as isize - 1) as usize;
            self.get(xc, yc)
        };
        const K: [f32; 3] = [0.25, 0.5, 0.25];
        for y in 0..h2 {
            for x in 0..w2 {
                let cx = 2 * x as isize;
                let cy = 2 * y as isize;
                let mut acc = 0.0;
                for (j, ky) in K.iter().enumerate() {
                    for (i, kx) in K.iter().enumerate() {
                        acc += ky * kx * at(cx + i as isize - 1, cy + j as isize - 1);
                    }
                }
                out.set(x, y, acc);
            }
        }
        out
    }

    /// Pyramid with `levels` entries, level 0 being `self`.
    pub fn pyramid(&self, levels: usize) -> Vec<GrayF> {
        let mut pyr = vec![self.clone()];
        for _ in 1..levels.max(1) {
            let next = pyr.last().expect("non-empty").pyr_down();
            pyr.push(next);
        }
        pyr
    }
}

fn ext_lower(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default()
}

/// Reads a single-channel 8- or 16-bit PNG or PGM; 8-bit data is widened.
pub fn read_gray16(path: &Path) -> Result<Grid<u16>> {
    match ext_lower(path).as_str() {
        "png" => read_png(path),
        "pgm" => read_pgm(path),
        other => Err(Error::Ingestion(format!(
            "unsupported image extension '{other}' for {}",
            path.display()
        ))),
    }
}

/// Reads an 8-bit image; 16-bit inputs are rejected.
pub fn read_gray8(path: &Path) -> Result<Grid<u8>> {
    let (g, depth16) = match ext_lower(path).as_str() {
        "png" => read_png_inner(path)?,
        "pgm" => read_pgm_inner(path)?,
        other => {
            return Err(Error::Ingestion(format!(
                "unsupported image extension '{other}' for {}",
                path.display()
            )))
        }
    };
    if depth16 {
        return Err(Error::Ingestion(format!(
            "{} is 16-bit, expected 8-bit",
            path.display()
        )));
    }
    Ok(Grid {
        width: g.width,
        height: g.height,
        data: g.data.into_iter().map(|v| v as u8).collect(),
    })
}

fn read_png(path: &Path) -> Result<Grid<u16>> {
    read_png_inner(path).map(|(g, _)| g)
}

fn read_png_inner(path: &Path) -> Result<(Grid<u16>, bool)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Ingestion(format!(
            "{}: expected single-channel grayscale PNG",
            path.display()
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let (data, deep) = match info.bit_depth {
        png::BitDepth::Sixteen => (
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect(),
            true,
        ),
        png::BitDepth::Eight => (bytes.iter().map(|&b| b as u16).collect(), false),
        d => {
            return Err(Error::Ingestion(format!(
                "{}: unsupported bit depth {d:?}",
                path.display()
            )))
        }
    };
    Ok((Grid::from_vec(w, h, data)?, deep))
}

fn read_pgm(path: &Path) -> Result<Grid<u16>> {
    read_pgm_inner(path).map(|(g, _)| g)
}

fn read_pgm_inner(path: &Path) -> Result<(Grid<u16>, bool)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Ingestion(format!("{}: {m}", path.display()));
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "P5" {
        return Err(bad("only binary P5 PGM is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    let deep = maxval > 255;
    let need = w * h * if deep { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let px = &bytes[pos..pos + need];
    let data = if deep {
        px.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        px.iter().map(|&b| b as u16).collect()
    };
    Ok((Grid::from_vec(w, h, data)?, deep))
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    enc.set_compression(png::Compression::Fast);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_pgm(path: &Path, width: usize, height: usize, maxval: u32, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n{maxval}\n")
        .and_then(|_| w.write_all(bytes))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_gray16(path: &Path, img: &Grid<u16>) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    match ext_lower(path).as_str() {
        "pgm" => write_pgm(path, img.width, img.height, 65535, &bytes),
        _ => write_png(path, img.width, img.height, png::BitDepth::Sixteen, &bytes),
    }
}

pub fn write_gray8(path: &Path, img: &Grid<u8>) -> Result<()> {
    match ext_lower(path).as_str() {
        "pgm" => write_pgm(path, img.width, img.height, 255, &img.data),
        _ => write_png(path, img.width, img.height, png::BitDepth::Eight, &img.data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_sampling_matches_pointwise() {
        let g = GrayF::from_vec(40, 30, (0..1200).map(|i| ((i * 37) % 101) as f32).collect()).unwrap();
        let mut out = Vec::new();
        for (x, y) in [(20.3, 15.7), (2.5, 3.1), (38.9, 28.2), (10.0, 10.0)] {
            g.sample_window(x, y, 3, &mut out);
            let mut k = 0;
            for dy in -3..=3 {
                for dx in -3..=3 {
                    assert!((out[k] - g.sample(x + dx as f64, y + dy as f64)).abs() < 1e-9);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn bilinear_interpolates_between_pixels() {
        let g = GrayF::from_vec(2, 2, vec![0.0, 10.0, 20.0, 30.0]).unwrap();
        assert!((g.sample(0.5, 0.5) - 15.0).abs() < 1e-12);
        assert!((g.sample(1.0, 0.0) - 10.0).abs() < 1e-12);
        assert!((g.sample(5.0, 5.0) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn png_and_pgm_round_trip_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let img = Grid::from_vec(3, 2, vec![0u16, 1, 256, 4000, 65535, 12]).unwrap();
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            write_gray16(&p, &img).unwrap();
            assert_eq!(read_gray16(&p).unwrap(), img);
        }
        let img8 = Grid::from_vec(2, 2, vec![0u8, 7, 200, 255]).unwrap();
        for name in ["b.png", "b.pgm"] {
            let p = dir.path().join(name);
            write_gray8(&p, &img8).unwrap();
            assert_eq!(read_gray8(&p).unwrap(), img8);
        }
    }

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(Grid::from_vec(2, 2, vec![0u8; 3]).is_err());
        assert!(Grid::<u8>::from_vec(0, 2, vec![]).is_err());
    }
}

use crate::error::{Error, Result};
use crate::preproc::PreprocFrame;

/// Contrast-limited adaptive histogram equalization settings.
///
/// `clip_limit` is relative to a flat histogram: a bin may hold at most
/// `clip_limit * tile_pixels / 256` counts. `f64::INFINITY` disables clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct ClaheParams {
    pub clip_limit: f64,
    pub tile_cols: usize,
    pub tile_rows: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 3.0,
            tile_cols: 8,
            tile_rows: 8,
        }
    }
}

impl ClaheParams {
    fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.clip_limit >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "clip limit must be >= 1, got {}",
                self.clip_limit
            )));
        }
        if self.tile_cols == 0 || self.tile_rows == 0 {
            return Err(Error::InvalidInput("tile counts must be >= 1".into()));
        }
        if self.tile_cols > width || self.tile_rows > height {
            return Err(Error::InvalidInput(format!(
                "{}x{} tiles do not fit a {width}x{height} image",
                self.tile_cols, self.tile_rows
            )));
        }
        Ok(())
    }
}

/// Half-open pixel span of tile `i` out of `n` along an axis of length `len`.
fn tile_span(i: usize, n: usize, len: usize) -> (usize, usize) {
    (i * len / n, (i + 1) * len / n)
}

fn equalization_lut(hist: &[u32; 256], clip: f64) -> [u8; 256] {
    let total: u32 = hist.iter().sum();
    let mut bins = [0.0f64; 256];
    if clip.is_finite() {
        let limit = (clip * total as f64 / 256.0).max(1.0);
        let mut excess = 0.0;
        for (b, &h) in bins.iter_mut().zip(hist.iter()) {
            let h = h as f64;
            if h > limit {
                excess += h - limit;
                *b = limit;
            } else {
                *b = h;
            }
        }
        let share = excess / 256.0;
        for b in bins.iter_mut() {
            *b += share;
        }
    } else {
        for (b, &h) in bins.iter_mut().zip(hist.iter()) {
            *b = h as f64;
        }
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0.0;
    let scale = 255.0 / total.max(1) as f64;
    for (v, b) in bins.iter().enumerate() {
        cdf += b;
        lut[v] = (cdf * scale + 0.5).floor().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Global histogram equalization: `v -> round(255 * cdf(v) / n)`.
pub fn equalize_histogram(frame: &PreprocFrame) -> PreprocFrame {
    let mut hist = [0u32; 256];
    for &v in &frame.data {
        hist[v as usize] += 1;
    }
    let lut = equalization_lut(&hist, f64::INFINITY);
    PreprocFrame {
        data: frame.data.iter().map(|&v| lut[v as usize]).collect(),
        ..frame.clone()
    }
}

/// Per-axis interpolation: lower tile, upper tile, weight of upper.
fn axis_weights(len: usize, tiles: usize) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = (0..tiles)
        .map(|i| {
            let (a, b) = tile_span(i, tiles, len);
            (a + b - 1) as f64 / 2.0
        })
        .collect();
    (0..len)
        .map(|p| {
            let x = p as f64;
            if x <= centers[0] {
                return (0, 0, 0.0);
            }
            if x >= centers[tiles - 1] {
                return (tiles - 1, tiles - 1, 0.0);
            }
            let i = centers.iter().rposition(|&c| c <= x).unwrap_or(0);
            let w = (x - centers[i]) / (centers[i + 1] - centers[i]);
            (i, i + 1, w)
        })
        .collect()
}

/// Clipped per-tile equalization, bilinearly blended between tile centers.
pub fn clahe(frame: &PreprocFrame, params: &ClaheParams) -> Result<PreprocFrame> {
    let (w, h) = (frame.width, frame.height);
    params.validate(w, h)?;
    let (tc, tr) = (params.tile_cols, params.tile_rows);

    let mut luts = vec![[0u8; 256]; tc * tr];
    for ty in 0..tr {
        let (y0, y1) = tile_span(ty, tr, h);
        for tx in 0..tc {
            let (x0, x1) = tile_span(tx, tc, w);
            let mut hist = [0u32; 256];
            for y in y0..y1 {
                for &v in &frame.data[y * w + x0..y * w + x1] {
                    hist[v as usize] += 1;
                }
            }
            luts[ty * tc + tx] = equalization_lut(&hist, params.clip_limit);
        }
    }

    let xw = axis_weights(w, tc);
    let yw = axis_weights(h, tr);
    let mut data = vec![0u8; w * h];
    for (y, &(ty0, ty1, ay)) in yw.iter().enumerate() {
        for (x, &(tx0, tx1, ax)) in xw.iter().enumerate() {
            let v = frame.data[y * w + x] as usize;
            let l00 = luts[ty0 * tc + tx0][v] as f64;
            let l01 = luts[ty0 * tc + tx1][v] as f64;
            let l10 = luts[ty1 * tc + tx0][v] as f64;
            let l11 = luts[ty1 * tc + tx1][v] as f64;
            let top = (1.0 - ax) * l00 + ax * l01;
            let bot = (1.0 - ax) * l10 + ax * l11;
            let out = (1.0 - ay) * top + ay * bot;
            data[y * w + x] = (out + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(PreprocFrame {
        timestamp: frame.timestamp,
        width: w,
        height: h,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pf(w: usize, h: usize, data: Vec<u8>) -> PreprocFrame {
        PreprocFrame::new(0.0, w, h, data).unwrap()
    }

    #[test]
    fn constant_image_stays_constant() {
        let f = pf(32, 24, vec![77; 32 * 24]);
        let out = clahe(&f, &ClaheParams::default()).unwrap();
        let first = out.data[0];
        assert!(out.data.iter().all(|&v| v == first));
    }

    #[test]
    fn single_unclipped_tile_is_plain_equalization() {
        let data: Vec<u8> = (0..40 * 30).map(|i| ((i * 37) % 97 + (i / 40) % 50) as u8).collect();
        let f = pf(40, 30, data);
        let params = ClaheParams {
            clip_limit: f64::INFINITY,
            tile_cols: 1,
            tile_rows: 1,
        };
        assert_eq!(clahe(&f, &params).unwrap(), equalize_histogram(&f));
    }

    /// Independent per-pixel evaluation: each pixel recomputes the
    /// histograms of the tiles it blends, straight from the definition.
    fn reference_pixel(f: &PreprocFrame, p: &ClaheParams, x: usize, y: usize) -> u8 {
        let tile_lut = |tx: usize, ty: usize, v: u8| -> f64 {
            let xs = tx * f.width / p.tile_cols..(tx + 1) * f.width / p.tile_cols;
            let ys = ty * f.height / p.tile_rows..(ty + 1) * f.height / p.tile_rows;
            let mut counts = vec![0.0f64; 256];
            let mut n = 0.0;
            for yy in ys.clone() {
                for xx in xs.clone() {
                    counts[f.get(xx, yy) as usize] += 1.0;
                    n += 1.0;
                }
            }
            let limit = (p.clip_limit * n / 256.0).max(1.0);
            let excess: f64 = counts.iter().map(|&c| (c - limit).max(0.0)).sum();
            let below: f64 = counts[..=v as usize]
                .iter()
                .map(|&c| c.min(limit) + excess / 256.0)
                .sum();
            (below * 255.0 / n + 0.5).floor()
        };
        let center = |i: usize, n: usize, len: usize| ((i * len / n) + ((i + 1) * len / n) - 1) as f64 / 2.0;
        let locate = |pos: usize, n: usize, len: usize| -> (usize, usize, f64) {
            let c: Vec<f64> = (0..n).map(|i| center(i, n, len)).collect();
            let x = pos as f64;
            if x <= c[0] {
                (0, 0, 0.0)
            } else if x >= c[n - 1] {
                (n - 1, n - 1, 0.0)
            } else {
                let mut i = 0;
                while c[i + 1] <= x {
                    i += 1;
                }
                (i, i + 1, (x - c[i]) / (c[i + 1] - c[i]))
            }
        };
        let v = f.get(x, y);
        let (x0, x1, ax) = locate(x, p.tile_cols, f.width);
        let (y0, y1, ay) = locate(y, p.tile_rows, f.height);
        let top = (1.0 - ax) * tile_lut(x0, y0, v) + ax * tile_lut(x1, y0, v);
        let bot = (1.0 - ax) * tile_lut(x0, y1, v) + ax * tile_lut(x1, y1, v);
        ((1.0 - ay) * top + ay * bot + 0.5).floor() as u8
    }

    #[test]
    fn two_tile_ramp_matches_reference() {
        let (w, h) = (24, 6);
        let data: Vec<u8> = (0..w * h).map(|i| ((i % w) * 10 + (i / w)) as u8).collect();
        let f = pf(w, h, data);
        let params = ClaheParams {
            clip_limit: 2.0,
            tile_cols: 2,
            tile_rows: 1,
        };
        let out = clahe(&f, &params).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(out.get(x, y), reference_pixel(&f, &params, x, y), "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let f = pf(4, 4, vec![0; 16]);
        let bad_clip = ClaheParams {
            clip_limit: 0.5,
            ..ClaheParams::default()
        };
        assert!(clahe(&f, &bad_clip).is_err());
        assert!(clahe(&f, &ClaheParams::default()).is_err()); // 8x8 tiles on 4x4
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn preserves_dimensions(w in 8usize..48, h in 8usize..48, seed in any::<u64>(),
                                clip in 1.0f64..8.0, tc in 1usize..8, tr in 1usize..8) {
            let data: Vec<u8> = (0..w * h)
                .map(|i| ((i as u64).wrapping_mul(seed | 1).rotate_left(17) % 256) as u8)
                .collect();
            let f = pf(w, h, data);
            let p = ClaheParams { clip_limit: clip, tile_cols: tc, tile_rows: tr };
            let out = clahe(&f, &p).unwrap();
            prop_assert_eq!((out.width, out.height, out.data.len()), (w, h, w * h));
        }
    }
}

//! Built-in corner detector and patch descriptor.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Descriptor, FeatureSet, Keypoint, DESC_DIM};
use crate::image::GrayF;
use crate::preproc::PreprocFrame;

const PATCH: usize = 16;
const PROJECTION_SEED: u64 = 0x7e57_da7a_0000_0256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorParams {
    pub max_points: usize,
    /// Side of the square cells used for per-cell quotas.
    pub grid_cell: usize,
    /// Half-width of the structure-tensor window.
    pub window_radius: usize,
    /// Response threshold relative to the strongest response in the frame.
    pub quality: f32,
    /// Absolute floor on the minimum-eigenvalue response.
    pub min_response: f32,
    pub min_distance: f32,
    pub border: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            max_points: 1000,
            grid_cell: 32,
            window_radius: 2,
            quality: 0.01,
            min_response: 1.0,
            min_distance: 4.0,
            border: 12,
        }
    }
}

/// Fixed orthogonal 256×256 projection, row-major.
fn projection() -> &'static [f32] {
    static P: OnceLock<Vec<f32>> = OnceLock::new();
    P.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let g = DMatrix::<f64>::from_fn(DESC_DIM, DESC_DIM, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        let mut out = Vec::with_capacity(DESC_DIM * DESC_DIM);
        for r in 0..DESC_DIM {
            for c in 0..DESC_DIM {
                out.push(q[(r, c)] as f32);
            }
        }
        out
    })
}

/// Minimum eigenvalue of the box-summed structure tensor at every pixel.
fn min_eigen_response(img: &GrayF, radius: usize) -> GrayF {
    let (w, h) = (img.width, img.height);
    let (gx, gy) = img.gradients();
    let mut xx = vec![0f64; w * h];
    let mut xy = vec![0f64; w * h];
    let mut yy = vec![0f64; w * h];
    for i in 0..w * h {
        let (a, b) = (gx.data[i] as f64, gy.data[i] as f64);
        xx[i] = a * a;
        xy[i] = a * b;
        yy[i] = b * b;
    }
    let box_sum = |src: &[f64]| -> Vec<f64> {
        // integral image
        let mut ii = vec![0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += src[y * w + x];
                ii[(y + 1) * (w + 1) + x + 1] = ii[y * (w + 1) + x + 1] + row;
            }
        }
        let mut out = vec![0f64; w * h];
        for y in 0..h {
            let y0 = y.saturating_sub(radius);
            let y1 = (y + radius + 1).min(h);
            for x in 0..w {
                let x0 = x.saturating_sub(radius);
                let x1 = (x + radius + 1).min(w);
                out[y * w + x] = ii[y1 * (w + 1) + x1] - ii[y0 * (w + 1) + x1] - ii[y1 * (w + 1) + x0]
                    + ii[y0 * (w + 1) + x0];
            }
        }
        out
    };
    let (sxx, sxy, syy) = (box_sum(&xx), box_sum(&xy), box_sum(&yy));
    let mut resp = GrayF::new(w, h);
    for i in 0..w * h {
        let tr = 0.5 * (sxx[i] + syy[i]);
        let det = sxx[i] * syy[i] - sxy[i] * sxy[i];
        let disc = (tr * tr - det).max(0.0).sqrt();
        resp.data[i] = (tr - disc).max(0.0) as f32;
    }
    resp
}

/// Zero-mean, unit-variance 16×16 patch centred on `(u, v)`, projected and
/// normalized. `None` when the patch is flat.
pub(crate) fn patch_descriptor(img: &GrayF, u: f64, v: f64) -> Option<Descriptor> {
    let mut patch = [0f64; PATCH * PATCH];
    let half = PATCH as f64 / 2.0 - 0.5;
    for r in 0..PATCH {
        for c in 0..PATCH {
            patch[r * PATCH + c] = img.sample(u - half + c as f64, v - half + r as f64);
        }
    }
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var < 1e-6 {
        return None;
    }
    let sd = var.sqrt();
    let centred: Vec<f32> = patch.iter().map(|x| ((x - mean) / sd) as f32).collect();
    let p = projection();
    let projected: Vec<f32> = (0..DESC_DIM)
        .map(|r| {
            let row = &p[r * DESC_DIM..(r + 1) * DESC_DIM];
            row.iter().zip(&centred).map(|(a, b)| a * b).sum()
        })
        .collect();
    Descriptor::normalized(&projected).ok()
}

/// Sub-pixel offset of a 1-D parabola through three samples.
fn parabola_offset(l: f32, c: f32, r: f32) -> f32 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    }
}

/// Shi–Tomasi corners with non-maximum suppression, a minimum spacing and
/// per-cell quotas, described by projected intensity patches.
pub fn detect_features(frame: &PreprocFrame, params: &DetectorParams) -> FeatureSet {
    let img = GrayF::from_u8(frame.width, frame.height, &frame.data);
    detect_on(&img, frame.timestamp, params)
}

pub(crate) fn detect_on(img: &GrayF, timestamp: f64, params: &DetectorParams) -> FeatureSet {
    let (w, h) = (img.width, img.height);
    if params.max_points == 0 || w <= 2 * params.border + 2 || h <= 2 * params.border + 2 {
        return FeatureSet::empty(timestamp);
    }
    let resp = min_eigen_response(img, params.window_radius);
    let max_r = resp.data.iter().cloned().fold(0f32, f32::max);
    let thresh = (params.quality * max_r).max(params.min_response);
    if max_r < thresh {
        return FeatureSet::empty(timestamp);
    }

    let b = params.border;
    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    for y in b..h - b {
        for x in b..w - b {
            let r = resp.get(x, y);
            if r < thresh {
                continue;
            }
            let mut is_max = true;
            'nbr: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = resp.get((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                    if n > r {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if is_max {
                candidates.push((r, x, y));
            }
        }
    }
    // strongest first; raster order breaks ties
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));

    let cell = params.grid_cell.max(1);
    let (gw, gh) = (w.div_ceil(cell), h.div_ceil(cell));
    let quota = params.max_points.div_ceil(gw * gh).max(1);
    let mut per_cell = vec![0usize; gw * gh];
    let min_d2 = params.min_distance * params.min_distance;
    let mut accepted: Vec<(f32, f32, f32)> = Vec::new();
    // spatial hash for the spacing test
    let bucket = params.min_distance.max(1.0) as usize;
    let (bw, bh) = (w.div_ceil(bucket), h.div_ceil(bucket));
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); bw * bh];

    for &(r, x, y) in &candidates {
        if accepted.len() >= params.max_points {
            break;
        }
        let ci = (y / cell) * gw + x / cell;
        if per_cell[ci] >= quota {
            continue;
        }
        let ox = parabola_offset(resp.get(x - 1, y), r, resp.get(x + 1, y));
        let oy = parabola_offset(resp.get(x, y - 1), r, resp.get(x, y + 1));
        let (u, v) = (x as f32 + ox, y as f32 + oy);
        let (bx, by) = (x / bucket, y / bucket);
        let mut crowded = false;
        'scan: for ny in by.saturating_sub(1)..(by + 2).min(bh) {
            for nx in bx.saturating_sub(1)..(bx + 2).min(bw) {
                for &k in &buckets[ny * bw + nx] {
                    let (au, av, _) = accepted[k];
                    if (au - u).powi(2) + (av - v).powi(2) < min_d2 {
                        crowded = true;
                        break 'scan;
                    }
                }
            }
        }
        if crowded {
            continue;
        }
        buckets[by * bw + bx].push(accepted.len());
        accepted.push((u, v, r));
        per_cell[ci] += 1;
    }

    let mut keypoints = Vec::with_capacity(accepted.len());
    let mut descriptors = Vec::with_capacity(accepted.len());
    for (u, v, r) in accepted {
        if let Some(d) = patch_descriptor(img, u as f64, v as f64) {
            keypoints.push(Keypoint::new(u, v, (r / max_r).clamp(0.0, 1.0)));
            descriptors.push(d);
        }
    }
    FeatureSet::new(timestamp, keypoints, descriptors).expect("parallel lists")
}

//! Raw 16-bit thermal frames to contrast-enhanced 8-bit images.
//!
//! Each frame is stretched between its low/high intensity percentiles. The
//! bounds are smoothed over time with an exponential moving average so that
//! global gain changes between frames do not show up as flicker, and the
//! stretched image is then equalized locally with CLAHE.

mod clahe;
mod stream;

pub use clahe::{clahe, equalize_histogram, ClaheParams};
pub use stream::{read_thrm, write_thrm, ThrmReader};

use crate::error::{Error, Result};
use crate::image::Grid;

/// A raw radiometric frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RawThermalFrame {
    pub timestamp: f64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl RawThermalFrame {
    pub fn new(timestamp: f64, width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        let g = Grid::from_vec(width, height, data)?;
        Ok(Self {
            timestamp,
            width,
            height,
            data: g.data,
        })
    }

    pub fn from_grid(timestamp: f64, grid: Grid<u16>) -> Self {
        Self {
            timestamp,
            width: grid.width,
            height: grid.height,
            data: grid.data,
        }
    }
}

/// An 8-bit frame ready for feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocFrame {
    pub timestamp: f64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl PreprocFrame {
    pub fn new(timestamp: f64, width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        let g = Grid::from_vec(width, height, data)?;
        Ok(Self {
            timestamp,
            width,
            height,
            data: g.data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn to_grid(&self) -> Grid<u8> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        }
    }
}

/// EMA-smoothed stretch bounds, in raw intensity units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StretchState {
    pub low: f64,
    pub high: f64,
    pub alpha: f64,
    pub initialized: bool,
}

impl StretchState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidInput(format!(
                "smoothing factor must lie in [0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            low: 0.0,
            high: 0.0,
            alpha,
            initialized: false,
        })
    }
}

impl Default for StretchState {
    fn default() -> Self {
        Self::new(0.8).expect("valid default alpha")
    }
}

/// Empirical `p_low`/`p_high` quantiles of the frame intensities.
///
/// Uses the zero-based rank `min(floor(p * n), n - 1)` on the sorted
/// multiset, computed through a 65536-bin histogram. `stride > 1` estimates
/// from every `stride`-th pixel in both directions.
pub fn raw_percentiles(frame: &RawThermalFrame, p_low: f64, p_high: f64) -> Result<(u16, u16)> {
    raw_percentiles_strided(frame, p_low, p_high, 1)
}

pub fn raw_percentiles_strided(
    frame: &RawThermalFrame,
    p_low: f64,
    p_high: f64,
    stride: usize,
) -> Result<(u16, u16)> {
    if frame.data.is_empty() || frame.width == 0 || frame.height == 0 {
        return Err(Error::InvalidInput("empty frame".into()));
    }
    if !(0.0..=1.0).contains(&p_low) || !(0.0..=1.0).contains(&p_high) || p_low >= p_high {
        return Err(Error::InvalidInput(format!(
            "percentiles must satisfy 0 <= p_low < p_high <= 1, got ({p_low}, {p_high})"
        )));
    }
    let stride = stride.max(1);
    let mut hist = vec![0u32; 65536];
    let mut n = 0usize;
    for y in (0..frame.height).step_by(stride) {
        let row = &frame.data[y * frame.width..(y + 1) * frame.width];
        for &v in row.iter().step_by(stride) {
            hist[v as usize] += 1;
            n += 1;
        }
    }
    let rank = |p: f64| -> usize { ((p * n as f64 + 1e-9).floor() as usize).min(n - 1) };
    let value_at = |r: usize| -> u16 {
        let mut acc = 0usize;
        for (v, &c) in hist.iter().enumerate() {
            acc += c as usize;
            if acc > r {
                return v as u16;
            }
        }
        u16::MAX
    };
    Ok((value_at(rank(p_low)), value_at(rank(p_high))))
}

/// One EMA step on the stretch bounds. The first call seeds the state.
pub fn update_stretch(state: StretchState, l_hat: f64, h_hat: f64) -> StretchState {
    if !state.initialized {
        return StretchState {
            low: l_hat,
            high: h_hat,
            alpha: state.alpha,
            initialized: true,
        };
    }
    let a = state.alpha;
    StretchState {
        low: a * state.low + (1.0 - a) * l_hat,
        high: a * state.high + (1.0 - a) * h_hat,
        alpha: a,
        initialized: true,
    }
}

/// Linear map of `[low, high]` onto `[0, 255]`, clamped, round-half-up.
/// A degenerate range yields mid-gray everywhere.
pub fn stretch_to_8bit(frame: &RawThermalFrame, state: &StretchState) -> PreprocFrame {
    let range = state.high - state.low;
    let data = if range <= 0.0 {
        vec![128u8; frame.data.len()]
    } else {
        let scale = 255.0 / range;
        frame
            .data
            .iter()
            .map(|&p| {
                let v = ((p as f64 - state.low) * scale + 0.5).floor();
                v.clamp(0.0, 255.0) as u8
            })
            .collect()
    };
    PreprocFrame {
        timestamp: frame.timestamp,
        width: frame.width,
        height: frame.height,
        data,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocParams {
    pub p_low: f64,
    pub p_high: f64,
    pub alpha: f64,
    pub clahe: ClaheParams,
    /// Pixel stride used for percentile estimation; 1 means the full frame.
    pub percentile_stride: usize,
    pub clahe_enabled: bool,
}

impl Default for PreprocParams {
    fn default() -> Self {
        Self {
            p_low: 0.01,
            p_high: 0.99,
            alpha: 0.8,
            clahe: ClaheParams::default(),
            percentile_stride: 1,
            clahe_enabled: true,
        }
    }
}

/// Stateful per-stream preprocessor.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    params: PreprocParams,
    state: StretchState,
}

impl Preprocessor {
    pub fn new(params: PreprocParams) -> Result<Self> {
        let state = StretchState::new(params.alpha)?;
        Ok(Self { params, state })
    }

    pub fn state(&self) -> &StretchState {
        &self.state
    }

    pub fn process(&mut self, frame: &RawThermalFrame) -> Result<PreprocFrame> {
        let (lo, hi) = raw_percentiles_strided(
            frame,
            self.params.p_low,
            self.params.p_high,
            self.params.percentile_stride,
        )?;
        self.state = update_stretch(self.state, lo as f64, hi as f64);
        let stretched = stretch_to_8bit(frame, &self.state);
        if self.params.clahe_enabled {
            clahe(&stretched, &self.params.clahe)
        } else {
            Ok(stretched)
        }
    }
}

//! Hinge loss over all pairs of descriptor-grid cells under a known warp.

use nalgebra::Vector2;

use super::{Descriptor, Homography};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescLossParams {
    /// Reprojection radius below which a cell pair counts as positive.
    pub r_plus: f64,
    pub m_p: f64,
    pub m_n: f64,
    /// Weight of the positive term.
    pub lambda_d: f64,
    pub cell: f64,
}

impl Default for DescLossParams {
    fn default() -> Self {
        Self {
            r_plus: 8.0,
            m_p: 1.0,
            m_n: 0.2,
            lambda_d: 250.0,
            cell: 8.0,
        }
    }
}

impl DescLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_plus > 0.0 && self.cell > 0.0) || !(0.0 <= self.m_n && self.m_n < self.m_p && self.m_p <= 1.0) {
            return Err(Error::InvalidInput(format!("invalid descriptor loss parameters {self:?}")));
        }
        Ok(())
    }

    /// Centre of cell `(row, col)` in pixels, `(x, y)`.
    pub fn cell_center(&self, row: usize, col: usize) -> Vector2<f64> {
        Vector2::new(self.cell * col as f64 + self.cell / 2.0, self.cell * row as f64 + self.cell / 2.0)
    }

    /// Loss contributed by one cell pair with clipped cosine `c`.
    pub fn pair_loss(&self, c: f64, positive: bool) -> f64 {
        if positive {
            self.lambda_d * (self.m_p - c).max(0.0)
        } else {
            (c - self.m_n).max(0.0)
        }
    }
}

/// Dense `rows × cols` grid of descriptor vectors of length `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * dim || rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!(
                "descriptor grid {rows}x{cols}x{dim} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, dim, data })
    }

    pub fn from_descriptors(rows: usize, cols: usize, descs: &[Descriptor]) -> Result<Self> {
        let data = descs.iter().flat_map(|d| d.0.iter().map(|&x| x as f64)).collect();
        Self::new(rows, cols, super::DESC_DIM, data)
    }

    #[inline]
    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(a: &DescGrid, b: &DescGrid, params: &DescLossParams) -> Result<()> {
    params.validate()?;
    if (a.rows, a.cols, a.dim) != (b.rows, b.cols, b.dim) {
        return Err(Error::InvalidInput(format!(
            "descriptor grids differ in shape: {}x{}x{} vs {}x{}x{}",
            a.rows, a.cols, a.dim, b.rows, b.cols, b.dim
        )));
    }
    Ok(())
}

/// Positive-pair indicator for every (reference cell, warped cell). The
/// radius test is strict: neighbouring centres sit exactly one cell apart
/// and must not count as positives.
fn correspondence(grid: &DescGrid, h: &Homography, params: &DescLossParams) -> Vec<bool> {
    let n = grid.len();
    let warped: Vec<Option<Vector2<f64>>> = (0..n)
        .map(|i| h.apply(&params.cell_center(i / grid.cols, i % grid.cols)))
        .collect();
    let mut s = vec![false; n * n];
    for i in 0..n {
        let Some(wi) = warped[i] else { continue };
        for j in 0..n {
            let cj = params.cell_center(j / grid.cols, j % grid.cols);
            s[i * n + j] = (wi - cj).norm() < params.r_plus;
        }
    }
    s
}

/// Mean pairwise hinge loss over all `(H_c W_c)²` cell pairs.
pub fn descriptor_loss(desc_ref: &DescGrid, desc_warp: &DescGrid, h: &Homography, params: &DescLossParams) -> Result<f64> {
    check(desc_ref, desc_warp, params)?;
    let n = desc_ref.len();
    let s = correspondence(desc_ref, h, params);
    let mut total = 0.0;
    for i in 0..n {
        let di = desc_ref.cell(i);
        for j in 0..n {
            let c = dot(di, desc_warp.cell(j)).max(0.0);
            total += params.pair_loss(c, s[i * n + j]);
        }
    }
    Ok(total / (n * n) as f64)
}

/// Loss plus its subgradient with respect to every component of both grids.
pub fn descriptor_loss_with_grad(
    desc_ref: &DescGrid,
    desc_warp: &DescGrid,
    h: &Homography,
    params: &DescLossParams,
) -> Result<(f64, DescGrid, DescGrid)> {
    check(desc_ref, desc_warp, params)?;
    let n = desc_ref.len();
    let dim = desc_ref.dim;
    let s = correspondence(desc_ref, h, params);
    let norm = 1.0 / (n * n) as f64;
    let mut g_ref = vec![0.0; n * dim];
    let mut g_warp = vec![0.0; n * dim];
    let mut total = 0.0;
    for i in 0..n {
        let di = desc_ref.cell(i);
        for j in 0..n {
            let dj = desc_warp.cell(j);
            let raw = dot(di, dj);
            let c = raw.max(0.0);
            let positive = s[i * n + j];
            total += params.pair_loss(c, positive);
            // derivative of the pair term with respect to the raw cosine
            let dl_dc = if raw <= 0.0 {
                0.0
            } else if positive {
                if c < params.m_p { -params.lambda_d } else { 0.0 }
            } else if c > params.m_n {
                1.0
            } else {
                0.0
            };
            if dl_dc != 0.0 {
                let k = dl_dc * norm;
                for t in 0..dim {
                    g_ref[i * dim + t] += k * dj[t];
                    g_warp[j * dim + t] += k * di[t];
                }
            }
        }
    }
    Ok((
        total * norm,
        DescGrid::new(desc_ref.rows, desc_ref.cols, dim, g_ref)?,
        DescGrid::new(desc_ref.rows, desc_ref.cols, dim, g_warp)?,
    ))
}

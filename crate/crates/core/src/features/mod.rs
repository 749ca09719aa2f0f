//! Keypoints, descriptors, binarization and Hamming matching.

mod detect;
mod homography;
mod io;
mod loss;

pub use detect::{detect_features, DetectorParams};
pub use homography::{quad_overlap, sample_homography, Homography, HomographyBounds};
pub use io::{load_features, read_features, save_features, write_features};
pub use loss::{descriptor_loss, descriptor_loss_with_grad, DescGrid, DescLossParams};

use crate::error::{Error, Result};

pub const DESC_DIM: usize = 256;
pub const DESC_BYTES: usize = DESC_DIM / 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub u: f32,
    pub v: f32,
    pub score: f32,
}

impl Keypoint {
    pub fn new(u: f32, v: f32, score: f32) -> Self {
        Self { u, v, score }
    }
}

/// Real-valued descriptor with unit L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor(pub Box<[f32; DESC_DIM]>);

impl Descriptor {
    /// Normalizes `raw`; fails on a zero or non-finite vector.
    pub fn normalized(raw: &[f32]) -> Result<Self> {
        if raw.len() != DESC_DIM {
            return Err(Error::InvalidInput(format!(
                "descriptor must have {DESC_DIM} components, got {}",
                raw.len()
            )));
        }
        let norm = raw.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidInput("descriptor has zero or non-finite norm".into()));
        }
        let mut out = Box::new([0.0f32; DESC_DIM]);
        if (norm - 1.0).abs() < 1e-7 {
            out.copy_from_slice(raw);
        } else {
            for (o, &x) in out.iter_mut().zip(raw) {
                *o = (x as f64 / norm) as f32;
            }
        }
        Ok(Self(out))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0[..]
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// 256 bits packed most-significant-bit first within each byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinaryDescriptor(pub [u8; DESC_BYTES]);

impl BinaryDescriptor {
    pub fn zeros() -> Self {
        Self([0; DESC_BYTES])
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 8] >> (7 - i % 8)) & 1 == 1
    }

    #[inline]
    pub fn set_bit(&mut self, i: usize, on: bool) {
        let mask = 1u8 << (7 - i % 8);
        if on {
            self.0[i / 8] |= mask;
        } else {
            self.0[i / 8] &= !mask;
        }
    }

    #[inline]
    pub fn flip_bit(&mut self, i: usize) {
        self.0[i / 8] ^= 1u8 << (7 - i % 8);
    }

    pub fn complement(&self) -> Self {
        let mut out = *self;
        out.0.iter_mut().for_each(|b| *b = !*b);
        out
    }

    /// First 16 bits as an integer, used for bucketing.
    #[inline]
    pub fn prefix16(&self) -> u16 {
        u16::from_be_bytes([self.0[0], self.0[1]])
    }

    #[inline]
    pub(crate) fn words(&self) -> [u64; 4] {
        let mut w = [0u64; 4];
        for (i, c) in self.0.chunks_exact(8).enumerate() {
            w[i] = u64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        w
    }
}

/// `bit_i = 1` iff `d_i ≥ 0`.
pub fn binarize(d: &Descriptor) -> BinaryDescriptor {
    binarize_slice(d.as_slice())
}

pub(crate) fn binarize_slice(d: &[f32]) -> BinaryDescriptor {
    let mut out = BinaryDescriptor::zeros();
    for (i, &x) in d.iter().enumerate().take(DESC_DIM) {
        if x >= 0.0 {
            out.0[i / 8] |= 1u8 << (7 - i % 8);
        }
    }
    out
}

#[inline]
pub fn hamming(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
    let (wa, wb) = (a.words(), b.words());
    (wa[0] ^ wb[0]).count_ones()
        + (wa[1] ^ wb[1]).count_ones()
        + (wa[2] ^ wb[2]).count_ones()
        + (wa[3] ^ wb[3]).count_ones()
}

/// Keypoints of one frame with their real and binary descriptors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureSet {
    pub timestamp: f64,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    pub binary: Vec<BinaryDescriptor>,
}

impl FeatureSet {
    pub fn new(timestamp: f64, keypoints: Vec<Keypoint>, descriptors: Vec<Descriptor>) -> Result<Self> {
        if keypoints.len() != descriptors.len() {
            return Err(Error::InvalidInput(format!(
                "{} keypoints but {} descriptors",
                keypoints.len(),
                descriptors.len()
            )));
        }
        let binary = descriptors.iter().map(binarize).collect();
        Ok(Self {
            timestamp,
            keypoints,
            descriptors,
            binary,
        })
    }

    pub fn empty(timestamp: f64) -> Self {
        Self {
            timestamp,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// Index of the nearest descriptor and its distance; the lowest index wins ties.
pub fn nearest(query: &BinaryDescriptor, set: &[BinaryDescriptor]) -> Option<(usize, u32)> {
    let mut best: Option<(usize, u32)> = None;
    for (j, d) in set.iter().enumerate() {
        let h = hamming(query, d);
        if best.is_none_or(|(_, bh)| h < bh) {
            best = Some((j, h));
        }
    }
    best
}

/// Mutual nearest neighbours with Hamming distance `≤ tau_h`, ordered by
/// index into `a`. Returns `(i, j, distance)`.
pub fn match_mutual_nn(a: &[BinaryDescriptor], b: &[BinaryDescriptor], tau_h: u32) -> Vec<(usize, usize, u32)> {
    use rayon::prelude::*;
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let a_to_b: Vec<(usize, u32)> = a.par_iter().map(|d| nearest(d, b).expect("b non-empty")).collect();
    let b_to_a: Vec<usize> = b.par_iter().map(|d| nearest(d, a).expect("a non-empty").0).collect();
    a_to_b
        .iter()
        .enumerate()
        .filter(|&(i, &(j, h))| h <= tau_h && b_to_a[j] == i)
        .map(|(i, &(j, h))| (i, j, h))
        .collect()
}

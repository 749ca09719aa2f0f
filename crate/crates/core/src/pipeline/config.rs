//! TOML run configuration. Every section rejects unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynfilter::{FilterParams, LkParams};
use crate::error::{Error, Result};
use crate::evalsim::AlignMode;
use crate::features::DetectorParams;
use crate::geometry::RansacParams;
use crate::loopclose::{CorrectionParams, LoopParams, PoseGraphParams, VerifyParams};
use crate::mapping::{BaParams, StereoParams};
use crate::preproc::{ClaheParams, PreprocParams};
use crate::tracking::{PhotoParams, PnpParams, TrackingParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provider {
    /// Corner detector run on the preprocessed frames.
    Builtin,
    /// Precomputed `features/<ts>.feat` files.
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
    Se3,
    Sim3,
}

impl From<Alignment> for AlignMode {
    fn from(a: Alignment) -> Self {
        match a {
            Alignment::None => AlignMode::None,
            Alignment::Se3 => AlignMode::SE3,
            Alignment::Sim3 => AlignMode::Sim3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocSection {
    pub alpha: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub percentile_stride: usize,
    pub clahe: bool,
    pub clip_limit: f64,
    pub tiles: [usize; 2],
}

impl Default for PreprocSection {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            p_low: 0.01,
            p_high: 0.99,
            percentile_stride: 1,
            clahe: true,
            clip_limit: 3.0,
            tiles: [8, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesSection {
    pub provider: Provider,
    pub max_points: usize,
    pub grid_cell: usize,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            provider: Provider::Builtin,
            max_points: 1000,
            grid_cell: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynfilterSection {
    pub enabled: bool,
    /// Epipolar gate for mask-interior points, pixels.
    pub tau: f64,
    pub dilation: usize,
    pub ransac_threshold: f64,
    pub ransac_iters: usize,
    pub lk_window: usize,
    pub lk_levels: usize,
}

impl Default for DynfilterSection {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 0.5,
            dilation: 3,
            ransac_threshold: 0.5,
            ransac_iters: 200,
            lk_window: 21,
            lk_levels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSection {
    /// Photometric coarse alignment before descriptor matching.
    pub dual_level: bool,
    pub radius: f64,
    pub tau_h: u32,
    pub min_inliers: usize,
    pub reproj_gate: f64,
    pub photo_levels: usize,
    pub photo_iters: usize,
    /// Covisible keyframes, beyond the reference, that feed the local map.
    pub local_keyframes: usize,
    /// Consecutive lost frames after which a keyframe is forced at the
    /// predicted pose.
    pub max_lost: usize,
    pub reloc_candidates: usize,
}

impl Default for TrackingSection {
    fn default() -> Self {
        Self {
            dual_level: true,
            radius: 15.0,
            tau_h: 64,
            min_inliers: 15,
            reproj_gate: 2.0,
            photo_levels: 3,
            photo_iters: 20,
            local_keyframes: 10,
            max_lost: 5,
            reloc_candidates: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingSection {
    pub max_gap: usize,
    /// Covisible keyframes in the local BA window.
    pub covisible: usize,
    pub d_min: f64,
    pub row_tolerance: f64,
    pub ba_iterations: usize,
    pub huber: f64,
    pub stereo_residual: bool,
}

impl Default for MappingSection {
    fn default() -> Self {
        Self {
            max_gap: 20,
            covisible: 5,
            d_min: 2.0,
            row_tolerance: 2.0,
            ba_iterations: 10,
            huber: 2.0,
            stereo_residual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSection {
    pub enabled: bool,
    pub word_tau: u32,
    pub island_span: u64,
    pub exclude_recent: usize,
    pub min_matches: usize,
    pub consecutive: usize,
    pub tau_inl: usize,
    pub pose_graph_iterations: usize,
    pub min_covisibility: u32,
    pub global_ba: bool,
    pub global_ba_iterations: usize,
}

impl Default for LoopSection {
    fn default() -> Self {
        Self {
            enabled: true,
            word_tau: 48,
            island_span: 3,
            exclude_recent: 30,
            min_matches: 20,
            consecutive: 2,
            tau_inl: 20,
            pose_graph_iterations: 20,
            min_covisibility: 100,
            global_ba: true,
            global_ba_iterations: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub align: Alignment,
    /// Repeat the run with seeds `seed..seed + best_of` and keep the
    /// trajectory with the lowest ATE. Needs ground truth; 1 = single run.
    pub best_of: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            align: Alignment::Sim3,
            best_of: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Run mapping and loop closing inline with tracking.
    pub sync: bool,
    pub preproc: PreprocSection,
    pub features: FeaturesSection,
    pub dynfilter: DynfilterSection,
    pub tracking: TrackingSection,
    pub mapping: MappingSection,
    pub loopclose: LoopSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sync: false,
            preproc: PreprocSection::default(),
            features: FeaturesSection::default(),
            dynfilter: DynfilterSection::default(),
            tracking: TrackingSection::default(),
            mapping: MappingSection::default(),
            loopclose: LoopSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} out of range")))
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical TOML with every value spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preproc;
        check(p.alpha > 0.0 && p.alpha <= 1.0, "preproc.alpha")?;
        check(0.0 <= p.p_low && p.p_low < p.p_high && p.p_high <= 1.0, "preproc.p_low/p_high")?;
        check(p.percentile_stride >= 1, "preproc.percentile_stride")?;
        check(p.clip_limit >= 1.0 && p.tiles[0] >= 1 && p.tiles[1] >= 1, "preproc.clip_limit/tiles")?;
        let f = &self.features;
        check(f.max_points >= 1 && f.grid_cell >= 4, "features.max_points/grid_cell")?;
        let d = &self.dynfilter;
        check(d.tau > 0.0 && d.ransac_threshold > 0.0 && d.ransac_iters >= 1, "dynfilter.tau/ransac")?;
        check(d.lk_window >= 3 && d.lk_window % 2 == 1 && d.lk_levels <= 6, "dynfilter.lk_window/lk_levels")?;
        let t = &self.tracking;
        check(t.radius > 0.0 && t.tau_h <= 256 && t.reproj_gate > 0.0, "tracking.radius/tau_h/reproj_gate")?;
        check(t.min_inliers >= 4 && (1..=6).contains(&t.photo_levels), "tracking.min_inliers/photo_levels")?;
        let m = &self.mapping;
        check(m.max_gap >= 1 && m.d_min > 0.0 && m.row_tolerance >= 0.0 && m.huber > 0.0, "mapping values")?;
        let l = &self.loopclose;
        check(l.word_tau <= 256 && l.consecutive >= 1 && l.tau_inl >= 3, "loopclose values")?;
        check(self.eval.best_of >= 1, "eval.best_of")?;
        Ok(())
    }

    pub fn preproc_params(&self) -> PreprocParams {
        let p = &self.preproc;
        PreprocParams {
            p_low: p.p_low,
            p_high: p.p_high,
            alpha: p.alpha,
            clahe: ClaheParams {
                clip_limit: p.clip_limit,
                tile_cols: p.tiles[0],
                tile_rows: p.tiles[1],
            },
            percentile_stride: p.percentile_stride,
            clahe_enabled: p.clahe,
        }
    }

    pub fn detector_params(&self) -> DetectorParams {
        DetectorParams {
            max_points: self.features.max_points,
            grid_cell: self.features.grid_cell,
            ..DetectorParams::default()
        }
    }

    pub fn lk_params(&self) -> LkParams {
        LkParams {
            window: self.dynfilter.lk_window,
            max_level: self.dynfilter.lk_levels.max(self.tracking.photo_levels.saturating_sub(1)),
            ..LkParams::default()
        }
    }

    pub fn filter_params(&self, frame: u64) -> FilterParams {
        let d = &self.dynfilter;
        FilterParams {
            tau: d.tau,
            dilation: d.dilation,
            ransac: RansacParams {
                threshold: d.ransac_threshold,
                max_iters: d.ransac_iters,
                seed: self.seed ^ frame.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                ..RansacParams::default()
            },
            lk: self.lk_params(),
        }
    }

    pub fn tracking_params(&self) -> TrackingParams {
        let t = &self.tracking;
        TrackingParams {
            radius: t.radius,
            tau_h: t.tau_h,
            pnp: PnpParams {
                reproj_gate: t.reproj_gate,
                min_inliers: t.min_inliers,
                ..PnpParams::default()
            },
            photo: PhotoParams {
                levels: t.photo_levels,
                iterations: t.photo_iters,
                ..PhotoParams::default()
            },
        }
    }

    pub fn stereo_params(&self) -> StereoParams {
        StereoParams {
            row_tolerance: self.mapping.row_tolerance,
            tau_h: self.tracking.tau_h,
            d_min: self.mapping.d_min,
        }
    }

    pub fn ba_params(&self) -> BaParams {
        BaParams {
            max_iters: self.mapping.ba_iterations,
            huber: self.mapping.huber,
            use_stereo: self.mapping.stereo_residual,
            ..BaParams::default()
        }
    }

    pub fn loop_params(&self) -> LoopParams {
        let l = &self.loopclose;
        LoopParams {
            word_tau: l.word_tau,
            exclude_recent: l.exclude_recent,
            island_span: l.island_span,
            min_matches: l.min_matches,
            consecutive: l.consecutive,
            verify: VerifyParams {
                tau_inl: l.tau_inl,
                tau_h: self.tracking.tau_h,
                seed: self.seed,
                ..VerifyParams::default()
            },
            correction: CorrectionParams {
                pose_graph: PoseGraphParams {
                    iterations: l.pose_graph_iterations,
                    ..PoseGraphParams::default()
                },
                min_covisibility: l.min_covisibility,
                global_ba: BaParams {
                    max_iters: l.global_ba_iterations,
                    ..self.ba_params()
                },
                run_global_ba: l.global_ba,
            },
        }
    }
}

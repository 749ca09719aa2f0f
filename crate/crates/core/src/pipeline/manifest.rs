use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Preproc,
    Features,
    Dynfilter,
    Tracking,
    Mapping,
    LoopClosing,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Preproc => "preproc",
            Stage::Features => "features",
            Stage::Dynfilter => "dynfilter",
            Stage::Tracking => "tracking",
            Stage::Mapping => "mapping",
            Stage::LoopClosing => "loop_closing",
        }
    }
}

pub const STAGES: [Stage; 7] = [
    Stage::Ingest,
    Stage::Preproc,
    Stage::Features,
    Stage::Dynfilter,
    Stage::Tracking,
    Stage::Mapping,
    Stage::LoopClosing,
];

/// Wall time and call count per stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub total: [Duration; 7],
    pub calls: [u64; 7],
}

impl StageTimes {
    pub fn add(&mut self, stage: Stage, d: Duration) {
        self.total[stage as usize] += d;
        self.calls[stage as usize] += 1;
    }

    pub fn merge(&mut self, other: &StageTimes) {
        for i in 0..7 {
            self.total[i] += other.total[i];
            self.calls[i] += other.calls[i];
        }
    }

    pub fn to_toml(&self, wall: Duration) -> String {
        let mut s = format!("wall_seconds = {:.6}\n", wall.as_secs_f64());
        for st in STAGES {
            s.push_str(&format!(
                "\n[{}]\nseconds = {:.6}\ncalls = {}\n",
                st.name(),
                self.total[st as usize].as_secs_f64(),
                self.calls[st as usize]
            ));
        }
        s
    }
}

/// Deterministic record of a run. Wall-clock timings live in a separate
/// sidecar so that identical runs produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub code_version: String,
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub status: String,
    pub error: Option<String>,
    pub frames: usize,
    pub tracked_frames: usize,
    pub keyframes: usize,
    pub map_points: usize,
    pub loop_closures: usize,
    pub relocalizations: usize,
    /// Calls per stage; the timings sidecar has the durations.
    pub stage_calls: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(config_hash: String, inputs: Vec<String>) -> Self {
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            inputs,
            status: "running".into(),
            error: None,
            frames: 0,
            tracked_frames: 0,
            keyframes: 0,
            map_points: 0,
            loop_closures: 0,
            relocalizations: 0,
            stage_calls: BTreeMap::new(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

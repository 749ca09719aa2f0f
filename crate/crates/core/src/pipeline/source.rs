//! Frame sources: dataset directories on disk and in-memory synthetic worlds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::dynfilter::DynamicMask;
use crate::error::{Error, Result};
use crate::evalsim::{SyntheticWorld, Trajectory};
use crate::features::{load_features, FeatureSet};
use crate::geometry::Calibration;
use crate::image::{read_gray16, Grid};

/// Everything the pipeline consumes for one stereo frame.
#[derive(Clone, Debug)]
pub struct InputFrame {
    pub timestamp: f64,
    pub left: Grid<u16>,
    pub right: Grid<u16>,
    /// Precomputed left and right features, when the source has them.
    pub features: Option<(FeatureSet, FeatureSet)>,
    pub mask: Option<DynamicMask>,
}

pub trait FrameSource {
    fn calibration(&self) -> Calibration;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn frame(&self, index: usize) -> Result<InputFrame>;
    /// Camera-to-world ground truth, if known.
    fn ground_truth(&self) -> Option<Trajectory> {
        None
    }
}

/// `left/<ts>.png`, `right/<ts>.png`, `calib.txt`, and optionally
/// `features/<ts>.feat` (+ `<ts>.right.feat`), `masks/<ts>.png`, `gt.txt`.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub root: PathBuf,
    pub calib: Calibration,
    /// `(timestamp, file stem)` in time order.
    pub frames: Vec<(f64, String)>,
}

fn stems(dir: &Path, suffix: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(suffix) else { continue };
        let t: f64 = stem
            .parse()
            .map_err(|_| Error::Ingestion(format!("{}: file name is not a timestamp", e.path().display())))?;
        out.insert(stem.to_string(), t);
    }
    Ok(out)
}

impl DiskDataset {
    pub fn open(root: &Path) -> Result<Self> {
        let calib_path = root.join("calib.txt");
        if !calib_path.is_file() {
            return Err(Error::Config(format!("missing calibration file {}", calib_path.display())));
        }
        let calib = Calibration::load(&calib_path)?;
        let left = stems(&root.join("left"), ".png")?;
        let right = stems(&root.join("right"), ".png")?;
        let only_left: Vec<&str> = left.keys().filter(|k| !right.contains_key(*k)).map(String::as_str).collect();
        let only_right: Vec<&str> = right.keys().filter(|k| !left.contains_key(*k)).map(String::as_str).collect();
        if !only_left.is_empty() || !only_right.is_empty() {
            return Err(Error::Ingestion(format!(
                "stereo streams disagree: missing from right: [{}]; missing from left: [{}]",
                only_left.join(", "),
                only_right.join(", ")
            )));
        }
        let mut frames: Vec<(f64, String)> = left.into_iter().map(|(s, t)| (t, s)).collect();
        frames.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = frames.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Ingestion(format!("duplicate timestamp {} ({} and {})", w[0].0, w[0].1, w[1].1)));
        }
        if frames.is_empty() {
            return Err(Error::Ingestion(format!("no frames under {}", root.join("left").display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            calib,
            frames,
        })
    }

    pub fn has_features(&self) -> bool {
        self.root.join("features").is_dir()
    }
}

impl FrameSource for DiskDataset {
    fn calibration(&self) -> Calibration {
        self.calib
    }

    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<InputFrame> {
        let (timestamp, stem) = &self.frames[index];
        let left = read_gray16(&self.root.join("left").join(format!("{stem}.png")))?;
        let right = read_gray16(&self.root.join("right").join(format!("{stem}.png")))?;
        for (side, g) in [("left", &left), ("right", &right)] {
            if (g.width, g.height) != (self.calib.width, self.calib.height) {
                return Err(Error::Ingestion(format!(
                    "{side} frame {stem} is {}x{}, calibration says {}x{}",
                    g.width, g.height, self.calib.width, self.calib.height
                )));
            }
        }
        let fdir = self.root.join("features");
        let features = if fdir.is_dir() {
            let l = load_features(&fdir.join(format!("{stem}.feat")))?;
            let rp = fdir.join(format!("{stem}.right.feat"));
            let r = if rp.is_file() { load_features(&rp)? } else { FeatureSet::empty(*timestamp) };
            Some((l, r))
        } else {
            None
        };
        let mp = self.root.join("masks").join(format!("{stem}.png"));
        let mask = if mp.is_file() { Some(DynamicMask::load(&mp)?) } else { None };
        Ok(InputFrame {
            timestamp: *timestamp,
            left,
            right,
            features,
            mask,
        })
    }

    fn ground_truth(&self) -> Option<Trajectory> {
        let p = self.root.join("gt.txt");
        p.is_file().then(|| Trajectory::load(&p).ok()).flatten()
    }
}

/// Renders frames of a synthetic world on demand.
#[derive(Clone, Debug)]
pub struct SimSource<'a> {
    pub world: &'a SyntheticWorld,
    pub seed: u64,
    /// Attach the ground-truth feature files, as the `file` provider expects.
    pub with_features: bool,
    pub with_masks: bool,
}

impl<'a> SimSource<'a> {
    pub fn new(world: &'a SyntheticWorld, seed: u64) -> Self {
        Self {
            world,
            seed,
            with_features: true,
            with_masks: true,
        }
    }
}

impl FrameSource for SimSource<'_> {
    fn calibration(&self) -> Calibration {
        self.world.calibration()
    }

    fn len(&self) -> usize {
        self.world.len()
    }

    fn frame(&self, index: usize) -> Result<InputFrame> {
        let f = self.world.frame(index, self.seed);
        Ok(InputFrame {
            timestamp: f.timestamp,
            left: f.left,
            right: f.right,
            features: self.with_features.then_some((f.features, f.right_features)),
            mask: self.with_masks.then_some(f.mask),
        })
    }

    fn ground_truth(&self) -> Option<Trajectory> {
        Some(self.world.ground_truth())
    }
}

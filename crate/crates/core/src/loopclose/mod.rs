//! Appearance-based loop detection and map-wide correction.

mod correct;
mod posegraph;
mod verify;
mod vocab;

pub use correct::{apply_loop_correction, apply_vertices, build_pose_graph, fuse_loop_points, merge_points, CorrectionParams, CorrectionReport, LoopEdge};
pub use posegraph::{edge_jacobians, edge_residual, EdgeKind, PoseGraph, PoseGraphEdge, PoseGraphParams, PoseGraphReport};
pub use verify::{select_island, verify_loop, Island, LoopMatch, LoopRejection, VerifyParams, VerifyStage};
pub use vocab::{load_index, read_index, save_index, similarity_score, write_index, InvertedIndex, LoopCandidate, Posting, VisualWord, Vocabulary, WordId};

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};

use crate::error::Result;
use crate::features::{match_mutual_nn, FeatureSet};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::mapping::{Keyframe, KeyframeId, Map};
use crate::tracking::{refine_pnp, PnpParams, TrackStatus};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopParams {
    /// Word radius in bits.
    pub word_tau: u32,
    pub exclude_recent: usize,
    pub island_span: u64,
    /// Fewest tentative matches for a retrieval candidate.
    pub min_matches: usize,
    /// Consecutive keyframes on which the same island must win.
    pub consecutive: usize,
    pub verify: VerifyParams,
    pub correction: CorrectionParams,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            word_tau: 48,
            exclude_recent: 30,
            island_span: 3,
            min_matches: 20,
            consecutive: 2,
            verify: VerifyParams::default(),
            correction: CorrectionParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopEvent {
    pub query: KeyframeId,
    pub island: Island,
    pub matched: LoopMatch,
    pub correction: CorrectionReport,
}

/// Vocabulary, index and detection state. Keyframes must be fed in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopCloser {
    pub params: LoopParams,
    pub vocab: Vocabulary,
    pub index: InvertedIndex,
    pub loops: Vec<LoopEdge>,
    streak: Option<(Island, usize)>,
}

impl LoopCloser {
    pub fn new(params: LoopParams) -> Self {
        Self {
            vocab: Vocabulary::new(params.word_tau),
            index: InvertedIndex::default(),
            loops: Vec::new(),
            streak: None,
            params,
        }
    }

    pub fn from_parts(params: LoopParams, vocab: Vocabulary, index: InvertedIndex) -> Self {
        Self {
            vocab,
            index,
            loops: Vec::new(),
            streak: None,
            params,
        }
    }

    /// Files `kf` and returns an island that has won on enough consecutive
    /// keyframes. Keyframes in `connected` are never candidates.
    pub fn detect(&mut self, kf: &Keyframe, connected: &BTreeSet<KeyframeId>) -> Option<Island> {
        let binary = &kf.features.binary;
        let words: Vec<WordId> = binary.iter().map(|d| self.vocab.assign_or_create(d)).collect();
        let mut cands = self.index.query(&words, binary, self.params.exclude_recent, self.params.min_matches);
        self.index.insert(kf.id, &words, binary);
        cands.retain(|c| !connected.contains(&c.keyframe));
        let Some(island) = select_island(&cands, self.params.island_span) else {
            self.streak = None;
            return None;
        };
        let span = self.params.island_span;
        let count = match &self.streak {
            Some((prev, n)) if island.first() <= prev.last() + span && prev.first() <= island.last() + span => n + 1,
            _ => 1,
        };
        self.streak = Some((island.clone(), count));
        (count >= self.params.consecutive).then_some(island)
    }

    /// Files `kf` for retrieval without looking for loops.
    pub fn insert_keyframe(&mut self, kf: &Keyframe) {
        let words: Vec<WordId> = kf.features.binary.iter().map(|d| self.vocab.assign_or_create(d)).collect();
        self.index.insert(kf.id, &words, &kf.features.binary);
    }

    /// Detection, verification and correction for keyframe `kf_id` of `map`.
    pub fn process_keyframe(&mut self, map: &mut Map, kf_id: KeyframeId) -> Result<Option<LoopEvent>> {
        let Some(kf) = map.keyframes.get(&kf_id) else { return Ok(None) };
        let mut connected: BTreeSet<KeyframeId> = map.covisibility.get(&kf_id).map(|r| r.keys().copied().collect()).unwrap_or_default();
        connected.insert(kf_id);
        let Some(island) = self.detect(kf, &connected) else { return Ok(None) };
        let cand = &map.keyframes[&island.best];
        let matched = match verify_loop(kf, cand, Some(map), &map.rig, &self.params.verify) {
            Ok(m) => m,
            Err(r) => {
                log::debug!("keyframe {kf_id}: candidate {} rejected: {r}", island.best);
                return Ok(None);
            }
        };
        log::info!(
            "loop: keyframe {kf_id} ↔ {} ({} inliers, scale {:.4})",
            matched.candidate,
            matched.inliers.len(),
            matched.relative.scale
        );
        self.loops.push(LoopEdge {
            i: kf_id,
            j: matched.candidate,
            relative: matched.relative,
        });
        let correction = apply_loop_correction(map, kf_id, &matched, &self.loops, &self.params.correction)?;
        self.streak = None;
        Ok(Some(LoopEvent {
            query: kf_id,
            island,
            matched,
            correction,
        }))
    }

    /// Retrieval for a lost frame: the best-scoring keyframes whose map
    /// points give an accepted pose.
    pub fn relocalize(&self, map: &Map, frame: &FeatureSet, k: &Intrinsics, pnp: &PnpParams, max_candidates: usize) -> Option<(KeyframeId, PoseSE3, usize)> {
        // descriptors without a word within the radius cannot share postings
        let (words, descs): (Vec<WordId>, Vec<_>) = frame
            .binary
            .iter()
            .filter_map(|d| self.vocab.nearest(d).filter(|(_, h)| *h <= self.vocab.tau).map(|(w, _)| (w, *d)))
            .unzip();
        let cands = self.index.query(&words, &descs, 0, self.params.min_matches);
        for c in cands.iter().take(max_candidates) {
            let Some(kf) = map.keyframes.get(&c.keyframe) else { continue };
            let corr: Vec<(Vector3<f64>, Vector2<f64>)> = match_mutual_nn(&frame.binary, &kf.features.binary, self.params.verify.tau_h)
                .into_iter()
                .filter_map(|(i, j, _)| {
                    let p = map.points.get(&kf.observations[j]?)?;
                    let kp = &frame.keypoints[i];
                    Some((p.position, Vector2::new(kp.u as f64, kp.v as f64)))
                })
                .collect();
            if corr.len() < pnp.min_inliers {
                continue;
            }
            let r = refine_pnp(&corr, k, &kf.pose, pnp);
            if r.status == TrackStatus::Ok {
                return Some((c.keyframe, r.pose, r.inlier_count));
            }
        }
        None
    }
}

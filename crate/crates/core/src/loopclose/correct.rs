use std::collections::BTreeSet;

use super::posegraph::{EdgeKind, PoseGraph, PoseGraphEdge, PoseGraphParams, PoseGraphReport};
use super::verify::LoopMatch;
use crate::error::Result;
use crate::geometry::Sim3;
use crate::mapping::{global_bundle_adjust, BaParams, BaReport, KeyframeId, Map, PointId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionParams {
    pub pose_graph: PoseGraphParams,
    /// Covisibility weight above which a pair also gets a graph edge.
    pub min_covisibility: u32,
    pub global_ba: BaParams,
    pub run_global_ba: bool,
}

impl Default for CorrectionParams {
    fn default() -> Self {
        Self {
            pose_graph: PoseGraphParams::default(),
            min_covisibility: 100,
            global_ba: BaParams {
                max_iters: 10,
                ..BaParams::default()
            },
            run_global_ba: true,
        }
    }
}

/// A loop constraint: `relative` maps camera `j` into camera `i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopEdge {
    pub i: KeyframeId,
    pub j: KeyframeId,
    pub relative: Sim3,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct CorrectionReport {
    pub pose_graph: PoseGraphReport,
    pub fused: usize,
    pub global_ba: Option<BaReport>,
}

/// Spanning tree to the strongest older neighbour, strong covisibility
/// edges and the given loop edges, all measured from the current poses
/// except the loops. The oldest keyframe is the gauge.
pub fn build_pose_graph(map: &Map, loops: &[LoopEdge], min_covisibility: u32) -> Option<PoseGraph> {
    let first = *map.keyframes.keys().next()?;
    let mut g = PoseGraph::new(first);
    for (&id, kf) in &map.keyframes {
        g.vertices.insert(id, Sim3::from_pose(&kf.pose));
    }
    let rel = |i: KeyframeId, j: KeyframeId| g.vertices[&i] * g.vertices[&j].inverse();
    let mut edges = Vec::new();
    let mut seen: BTreeSet<(KeyframeId, KeyframeId)> = BTreeSet::new();
    let mut prev: Option<KeyframeId> = None;
    for &id in map.keyframes.keys() {
        if let Some(p) = prev {
            let parent = map.covisibility[&id]
                .iter()
                .filter(|(&o, _)| o < id)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&o, _)| o)
                .unwrap_or(p);
            seen.insert((parent, id));
            edges.push(PoseGraphEdge {
                i: id,
                j: parent,
                measurement: rel(id, parent),
                kind: EdgeKind::Odometry,
            });
        }
        prev = Some(id);
    }
    for (&a, row) in &map.covisibility {
        for (&b, &w) in row.range(a + 1..) {
            if w >= min_covisibility && seen.insert((a, b)) {
                edges.push(PoseGraphEdge {
                    i: b,
                    j: a,
                    measurement: rel(b, a),
                    kind: EdgeKind::Odometry,
                });
            }
        }
    }
    for l in loops {
        if g.vertices.contains_key(&l.i) && g.vertices.contains_key(&l.j) {
            edges.push(PoseGraphEdge {
                i: l.i,
                j: l.j,
                measurement: l.relative,
                kind: EdgeKind::Loop,
            });
        }
    }
    g.edges = edges;
    Some(g)
}

/// Moves every keyframe to its optimized vertex and every point rigidly
/// (with scale) along with the keyframe that created it.
pub fn apply_vertices(map: &mut Map, g: &PoseGraph) {
    let old: Vec<(KeyframeId, Sim3)> = map.keyframes.iter().map(|(&k, kf)| (k, Sim3::from_pose(&kf.pose))).collect();
    for p in map.points.values_mut() {
        let (Some(so), Some(sn)) = (old.iter().find(|x| x.0 == p.reference).map(|x| x.1), g.vertices.get(&p.reference)) else {
            continue;
        };
        p.position = sn.inverse().transform(&so.transform(&p.position));
    }
    for (id, kf) in map.keyframes.iter_mut() {
        if let Some(s) = g.vertices.get(id) {
            kf.pose = s.to_pose();
        }
    }
}

/// Links the keypoints matched across the loop to a single map point each.
pub fn fuse_loop_points(map: &mut Map, curr: KeyframeId, m: &LoopMatch) -> usize {
    let mut fused = 0;
    for &(ci, cj) in &m.inliers {
        let pc = map.keyframes[&curr].observations[ci];
        let pj = map.keyframes[&m.candidate].observations[cj];
        match (pc, pj) {
            (Some(a), Some(b)) if a != b => {
                merge_points(map, a, b);
                fused += 1;
            }
            (None, Some(b)) => fused += map.add_observation(curr, ci, b) as usize,
            (Some(a), None) => fused += map.add_observation(m.candidate, cj, a) as usize,
            _ => {}
        }
    }
    fused
}

/// Moves the observations of `from` onto `into` and deletes `from`.
pub fn merge_points(map: &mut Map, from: PointId, into: PointId) {
    let Some(obs) = map.points.get(&from).map(|p| p.observations.clone()) else { return };
    for (kf, kp) in obs {
        map.remove_observation(kf, from);
        if !map.points[&into].observations.contains_key(&kf) {
            map.add_observation(kf, kp, into);
        }
    }
    map.points.remove(&from);
}

/// Pose-graph correction for the new loop, point fusion across it, then an
/// optional global bundle adjustment.
pub fn apply_loop_correction(map: &mut Map, curr: KeyframeId, m: &LoopMatch, loops: &[LoopEdge], params: &CorrectionParams) -> Result<CorrectionReport> {
    let mut report = CorrectionReport::default();
    if let Some(mut g) = build_pose_graph(map, loops, params.min_covisibility) {
        report.pose_graph = g.optimize(&params.pose_graph)?;
        apply_vertices(map, &g);
    }
    report.fused = fuse_loop_points(map, curr, m);
    if params.run_global_ba {
        report.global_ba = Some(global_bundle_adjust(map, &params.global_ba));
    }
    Ok(report)
}

//! Similarity pose graph over keyframes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{sim3_left_jacobian_inv, sim3_right_jacobian_inv, Matrix7, Sim3, Vector7};
use crate::mapping::KeyframeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Measured `S_i · S_j⁻¹` between world-to-camera vertices, i.e. the map
/// from camera `j` into camera `i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGraphEdge {
    pub i: KeyframeId,
    pub j: KeyframeId,
    pub measurement: Sim3,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseGraph {
    pub vertices: BTreeMap<KeyframeId, Sim3>,
    pub edges: Vec<PoseGraphEdge>,
    pub fixed: KeyframeId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseGraphParams {
    pub iterations: usize,
    /// Huber threshold on the tangent residual norm.
    pub huber: f64,
    pub initial_lambda: f64,
}

impl Default for PoseGraphParams {
    fn default() -> Self {
        Self {
            iterations: 20,
            huber: 1.0,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PoseGraphReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub cost_log: Vec<f64>,
}

fn huber(r: f64, d: f64) -> f64 {
    if r <= d {
        0.5 * r * r
    } else {
        d * (r - 0.5 * d)
    }
}

/// `log(Z⁻¹ · S_i · S_j⁻¹)`.
pub fn edge_residual(z: &Sim3, si: &Sim3, sj: &Sim3) -> Vector7 {
    (z.inverse() * *si * sj.inverse()).log()
}

/// Jacobians of [`edge_residual`] under left perturbations of `S_i` and `S_j`.
pub fn edge_jacobians(z: &Sim3, si: &Sim3, sj: &Sim3) -> (Matrix7, Matrix7) {
    let r = edge_residual(z, si, sj);
    let ji = sim3_left_jacobian_inv(&r) * z.inverse().adjoint();
    let jj = -sim3_right_jacobian_inv(&r);
    (ji, jj)
}

impl PoseGraph {
    pub fn new(fixed: KeyframeId) -> Self {
        Self {
            vertices: BTreeMap::new(),
            edges: Vec::new(),
            fixed,
        }
    }

    pub fn cost(&self, huber_d: f64) -> f64 {
        self.edges
            .iter()
            .map(|e| huber(edge_residual(&e.measurement, &self.vertices[&e.i], &self.vertices[&e.j]).norm(), huber_d))
            .sum()
    }

    fn validate(&self) -> Result<()> {
        if !self.vertices.contains_key(&self.fixed) {
            return Err(Error::InvalidInput(format!("fixed vertex {} is not in the graph", self.fixed)));
        }
        let mut adj: BTreeMap<KeyframeId, Vec<KeyframeId>> = BTreeMap::new();
        for e in &self.edges {
            if !self.vertices.contains_key(&e.i) || !self.vertices.contains_key(&e.j) {
                return Err(Error::InvalidInput(format!("edge ({}, {}) references a missing vertex", e.i, e.j)));
            }
            adj.entry(e.i).or_default().push(e.j);
            adj.entry(e.j).or_default().push(e.i);
        }
        let mut seen = BTreeSet::from([self.fixed]);
        let mut queue = VecDeque::from([self.fixed]);
        while let Some(v) = queue.pop_front() {
            for &n in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        if seen.len() != self.vertices.len() {
            return Err(Error::InvalidInput(format!(
                "pose graph is disconnected: {} of {} vertices reachable",
                seen.len(),
                self.vertices.len()
            )));
        }
        Ok(())
    }

    /// Levenberg–Marquardt over all vertices but the fixed one.
    pub fn optimize(&mut self, params: &PoseGraphParams) -> Result<PoseGraphReport> {
        self.validate()?;
        let free: Vec<KeyframeId> = self.vertices.keys().copied().filter(|&k| k != self.fixed).collect();
        let slot: BTreeMap<KeyframeId, usize> = free.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let n = 7 * free.len();
        let mut cost = self.cost(params.huber);
        let mut report = PoseGraphReport {
            initial_cost: cost,
            final_cost: cost,
            cost_log: Vec::new(),
        };
        if n == 0 {
            return Ok(report);
        }
        let mut lambda = params.initial_lambda;
        for _ in 0..params.iterations {
            let mut h = DMatrix::<f64>::zeros(n, n);
            let mut g = DVector::<f64>::zeros(n);
            for e in &self.edges {
                let (si, sj) = (&self.vertices[&e.i], &self.vertices[&e.j]);
                let r = edge_residual(&e.measurement, si, sj);
                let w = if r.norm() <= params.huber { 1.0 } else { params.huber / r.norm() };
                let (ji, jj) = edge_jacobians(&e.measurement, si, sj);
                let blocks = [(slot.get(&e.i), ji), (slot.get(&e.j), jj)];
                for (a, ja) in &blocks {
                    let Some(&a) = a else { continue };
                    g.rows_mut(7 * a, 7).add_assign(&(ja.transpose() * r * w));
                    for (b, jb) in &blocks {
                        let Some(&b) = b else { continue };
                        let mut blk = h.view_mut((7 * a, 7 * b), (7, 7));
                        blk += ja.transpose() * jb * w;
                    }
                }
            }
            let mut accepted = false;
            for _ in 0..10 {
                let mut hd = h.clone();
                for i in 0..n {
                    hd[(i, i)] += lambda * h[(i, i)].max(1e-9);
                }
                let Some(step) = hd.cholesky().map(|c| -c.solve(&g)) else {
                    lambda *= 4.0;
                    continue;
                };
                let mut cand = self.vertices.clone();
                for (k, &s) in &slot {
                    let d = Vector7::from_iterator(step.rows(7 * s, 7).iter().copied());
                    let v = cand.get_mut(k).expect("free vertex");
                    *v = v.retract(&d);
                }
                let old = std::mem::replace(&mut self.vertices, cand);
                let c = self.cost(params.huber);
                if c < cost {
                    let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    cost = c;
                    report.cost_log.push(c);
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel < 1e-12 {
                        report.final_cost = cost;
                        return Ok(report);
                    }
                    break;
                }
                self.vertices = old;
                lambda *= 4.0;
            }
            if !accepted {
                break;
            }
        }
        report.final_cost = cost;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sim3(rng: &mut ChaCha8Rng, scale_spread: f64) -> Sim3 {
        Sim3::new(
            1.0 + rng.random_range(-scale_spread..=scale_spread),
            so3_exp(&Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))),
            Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0)),
        )
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = 1e-6;
        for _ in 0..50 {
            let (si, sj) = (random_sim3(&mut rng, 0.3), random_sim3(&mut rng, 0.3));
            // measurement near the current relative transform keeps the residual moderate
            let z = (si * sj.inverse()).retract(&Vector7::from_fn(|_, _| rng.random_range(-0.3..0.3)));
            let (ji, jj) = edge_jacobians(&z, &si, &sj);
            for k in 0..7 {
                let mut d = Vector7::zeros();
                d[k] = h;
                let fi = (edge_residual(&z, &si.retract(&d), &sj) - edge_residual(&z, &si.retract(&(-d)), &sj)) / (2.0 * h);
                let fj = (edge_residual(&z, &si, &sj.retract(&d)) - edge_residual(&z, &si, &sj.retract(&(-d)))) / (2.0 * h);
                assert!((fi - ji.column(k)).norm() < 1e-5, "i col {k}: {}", (fi - ji.column(k)).norm());
                assert!((fj - jj.column(k)).norm() < 1e-5, "j col {k}");
            }
        }
    }

    /// Cycle of `n` vertices around a circle; odometry edges i → i+1 and a
    /// loop edge n-1 → 0, all exact.
    fn cycle(n: usize) -> (PoseGraph, Vec<Sim3>) {
        let truth: Vec<Sim3> = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let c = Vector3::new(10.0 * a.cos(), 0.0, 10.0 * a.sin());
                let r = so3_exp(&Vector3::new(0.0, -a, 0.0));
                Sim3::new(1.0, r, -(r * c))
            })
            .collect();
        let mut g = PoseGraph::new(0);
        for (i, s) in truth.iter().enumerate() {
            g.vertices.insert(i as KeyframeId, *s);
        }
        for i in 0..n {
            let j = (i + 1) % n;
            g.edges.push(PoseGraphEdge {
                i: j as KeyframeId,
                j: i as KeyframeId,
                measurement: truth[j] * truth[i].inverse(),
                kind: if j == 0 { EdgeKind::Loop } else { EdgeKind::Odometry },
            });
        }
        (g, truth)
    }

    fn max_error(g: &PoseGraph, truth: &[Sim3]) -> f64 {
        truth
            .iter()
            .enumerate()
            .map(|(i, t)| (g.vertices[&(i as KeyframeId)].to_matrix() - t.to_matrix()).abs().max())
            .fold(0.0, f64::max)
    }

    #[test]
    fn exact_graph_is_a_fixed_point() {
        let (mut g, truth) = cycle(10);
        let before = g.clone();
        let rep = g.optimize(&PoseGraphParams::default()).unwrap();
        assert!(rep.final_cost < 1e-20);
        assert!(max_error(&g, &truth) < 1e-9);
        assert!(g.edges.iter().all(|e| edge_residual(&e.measurement, &g.vertices[&e.i], &g.vertices[&e.j]).norm() < 1e-10));
        assert_eq!(g.vertices.len(), before.vertices.len());
    }

    /// Integrates the odometry edges from vertex 0 after corrupting `bad`.
    fn integrate(g: &mut PoseGraph, n: u64) {
        for i in 1..n {
            let e = g.edges.iter().find(|e| e.i == i && e.j == i - 1).unwrap();
            let prev = g.vertices[&(i - 1)];
            g.vertices.insert(i, e.measurement * prev);
        }
    }

    fn drift() -> Vector7 {
        Vector7::from_column_slice(&[0.0, 0.05, 0.0, 0.3, 0.0, 0.2, 0.0])
    }

    #[test]
    fn drifted_estimate_is_pulled_back_by_the_loop() {
        let (mut g, truth) = cycle(10);
        // the estimate drifts at edge 4 → 5 while every measurement is exact
        let bad = g.edges.iter().position(|e| e.j == 4).unwrap();
        let exact = g.edges[bad].measurement;
        g.edges[bad].measurement = exact.retract(&drift());
        integrate(&mut g, 10);
        g.edges[bad].measurement = exact;
        let before = max_error(&g, &truth);
        let rep = g.optimize(&PoseGraphParams { iterations: 50, ..Default::default() }).unwrap();
        let after = max_error(&g, &truth);
        assert!(after <= 0.1 * before, "{before} → {after}");
        let mut prev = rep.initial_cost;
        for c in rep.cost_log {
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn corrupted_measurement_is_spread_over_the_cycle() {
        let (mut g, truth) = cycle(10);
        let bad = g.edges.iter().position(|e| e.j == 4).unwrap();
        g.edges[bad].measurement = g.edges[bad].measurement.retract(&drift());
        integrate(&mut g, 10);
        let before = max_error(&g, &truth);
        g.optimize(&PoseGraphParams { iterations: 50, ..Default::default() }).unwrap();
        // least squares shares the inconsistency among all ten edges
        assert!(max_error(&g, &truth) <= 0.6 * before);
    }

    #[test]
    fn scale_drift_is_recovered() {
        let n = 10;
        let (mut g, truth) = cycle(n);
        // each odometry step carries a scale factor such that the product is 1.1
        let step = 1.1f64.powf(1.0 / (n - 1) as f64);
        for e in g.edges.iter_mut().filter(|e| e.kind == EdgeKind::Odometry) {
            e.measurement.scale *= step;
        }
        integrate(&mut g, n as u64);
        g.optimize(&PoseGraphParams { iterations: 100, ..Default::default() }).unwrap();
        // the mismatch of ln 1.1 spreads evenly over the n edges, leaving
        // vertex i at exp(i·ln1.1 / (n(n−1))) ≤ 1.0096 of the true unit scale
        for (i, t) in truth.iter().enumerate() {
            let s = g.vertices[&(i as u64)].scale / t.scale;
            assert!((s - 1.0).abs() < 0.01, "vertex {i}: {s}");
        }
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let (mut g, _) = cycle(5);
        g.vertices.insert(99, Sim3::identity());
        assert!(matches!(g.optimize(&PoseGraphParams::default()), Err(Error::InvalidInput(_))));
    }
}

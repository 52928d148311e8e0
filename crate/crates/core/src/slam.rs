//! SLAM harness built from three logical workers: point-to-plane ICP
//! tracking with eigenvalue degeneracy detection, relocalization of
//! degenerated keyframes, and loop closing, tied together by batch
//! pose-graph optimization. Also hosts trajectory IO (TUM and KITTI pose
//! formats), the JSON-lines event log, and APE evaluation.
//!
//! The workers are scheduled sequentially and deterministically: each one
//! drains its job queue at its configured cadence while scans arrive in
//! order. This keeps every run reproducible while preserving the queue
//! semantics a threaded deployment would have.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{se3_exp, GeometryError, KdTree, PointCloud, RigidTransform, Twist};
use crate::pipeline::{Model, PipelineError, Solver};
use crate::retrieval::{DescriptorDb, RetrievalError};

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("timestamp association failed: {0}")]
    Association(String),
    #[error("relocalization failed: {0}")]
    RelocalizationFailed(String),
    #[error("trajectory format: {0}")]
    Format(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SlamError>;

/// Tunables for the whole SLAM harness. The degeneracy threshold applies
/// to the smallest eigenvalue of the per-correspondence-normalized normal
/// matrix of the final ICP iteration, and is deliberately conservative:
/// missing a degeneracy is far more damaging than a false alarm.
#[derive(Debug, Clone, Serialize)]
pub struct SlamConfig {
    /// Degeneracy gate on lambda_min of JtJ / n.
    pub lambda_thresh: f64,
    /// Distance rule for keyframe insertion, meters.
    pub keyframe_distance: f64,
    /// Period of keyframes inside a continuous degenerate stretch, seconds.
    pub degenerate_period: f64,
    /// Registration reliability gate (strict) for relocalization.
    pub rho_r: f64,
    /// Descriptor distance gate (strict) for retrieval candidates.
    pub rho_s: f64,
    /// Loop candidates must be at least this many keyframe ids in the past.
    pub exclusion_window: u64,
    /// Scans retained in the tracker's local map.
    pub local_map_scans: usize,
    pub icp_iterations: usize,
    /// Correspondence rejection distance, meters.
    pub icp_max_corr: f64,
    /// Scan points used per ICP iteration (deterministic stride subsample).
    pub icp_sample: usize,
    /// Neighbors for local-map normal estimation.
    pub normal_neighbors: usize,
    pub reloc_hz: f64,
    pub loop_hz: f64,
    pub pgo_iterations: usize,
    pub weight_odometry: f64,
    pub weight_loop: f64,
    pub weight_relocalization: f64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        SlamConfig {
            lambda_thresh: 0.02,
            keyframe_distance: 2.0,
            degenerate_period: 3.0,
            rho_r: 0.05,
            rho_s: 1.0,
            exclusion_window: 100,
            local_map_scans: 10,
            icp_iterations: 20,
            icp_max_corr: 6.0,
            icp_sample: 500,
            normal_neighbors: 8,
            reloc_hz: 2.5,
            loop_hz: 1.0,
            pgo_iterations: 50,
            weight_odometry: 1.0,
            weight_loop: 1.0,
            weight_relocalization: 1.0,
        }
    }
}

// ── tracking ────────────────────────────────────────────────────────────

/// One scan of the local map, held in the world frame with one normal per
/// point.
#[derive(Debug, Clone)]
struct MapScan {
    points: Vec<[f64; 3]>,
    normals: Vec<[f64; 3]>,
}

/// Per-point surface normals from the smallest principal component of the
/// k-neighborhood. Orientation is arbitrary, which point-to-plane
/// residuals are insensitive to.
pub fn estimate_normals(points: &[[f64; 3]], k: usize) -> Vec<[f64; 3]> {
    let tree = KdTree::build(points);
    points
        .iter()
        .map(|&p| {
            let nb = tree.knn(p, k.min(points.len()));
            let m = nb.len() as f64;
            let mut c = [0.0; 3];
            for &(i, _) in &nb {
                for d in 0..3 {
                    c[d] += points[i][d] / m;
                }
            }
            let mut cov = Matrix3::zeros();
            for &(i, _) in &nb {
                let d = Vector3::new(
                    points[i][0] - c[0],
                    points[i][1] - c[1],
                    points[i][2] - c[2],
                );
                cov += d * d.transpose();
            }
            let eig = cov.symmetric_eigen();
            let mut best = 0;
            for j in 1..3 {
                if eig.eigenvalues[j] < eig.eigenvalues[best] {
                    best = j;
                }
            }
            let n = eig.eigenvectors.column(best);
            [n[0], n[1], n[2]]
        })
        .collect()
}

/// Outcome of tracking one scan.
#[derive(Debug, Clone)]
pub struct TrackOutcome {
    pub pose: RigidTransform,
    pub degenerated: bool,
    /// Smallest eigenvalue of the normalized final-iteration normal matrix.
    pub lambda_min: f64,
    /// ICP diverged or starved of correspondences; the pose is the best
    /// iterate reached.
    pub lost: bool,
    pub final_error: f64,
}

/// Scan-to-local-map tracker. The local map keeps the most recent scans in
/// the world frame; each new scan is aligned to it by point-to-plane ICP
/// started from a constant-velocity prediction.
#[derive(Debug)]
pub struct TrackerState {
    pub pose: RigidTransform,
    prev_pose: RigidTransform,
    local_map: VecDeque<MapScan>,
    /// Spectrum summary of the last tracked scan.
    pub lambda_min: f64,
}

impl TrackerState {
    /// Anchors the first scan at the identity pose.
    pub fn new(first: &PointCloud, cfg: &SlamConfig) -> Result<TrackerState> {
        if first.len() < 10 {
            return Err(SlamError::InvalidInput(format!(
                "first scan has {} points",
                first.len()
            )));
        }
        let mut state = TrackerState {
            pose: RigidTransform::identity(),
            prev_pose: RigidTransform::identity(),
            local_map: VecDeque::new(),
            lambda_min: f64::INFINITY,
        };
        state.insert_scan(first, &RigidTransform::identity(), cfg);
        Ok(state)
    }

    fn insert_scan(&mut self, cloud: &PointCloud, pose: &RigidTransform, cfg: &SlamConfig) {
        let world: Vec<[f64; 3]> = cloud.points.iter().map(|&p| pose.apply(p)).collect();
        let normals = estimate_normals(&world, cfg.normal_neighbors);
        self.local_map.push_back(MapScan {
            points: world,
            normals,
        });
        while self.local_map.len() > cfg.local_map_scans {
            self.local_map.pop_front();
        }
    }

    /// Re-anchors the tracker after a pose-graph update: `c` left-composes
    /// every held pose and the local map.
    pub fn apply_correction(&mut self, c: &RigidTransform) {
        self.pose = c.compose(&self.pose);
        self.prev_pose = c.compose(&self.prev_pose);
        for scan in &mut self.local_map {
            for p in &mut scan.points {
                *p = c.apply(*p);
            }
            for n in &mut scan.normals {
                let v = c.rotation * Vector3::new(n[0], n[1], n[2]);
                *n = [v.x, v.y, v.z];
            }
        }
    }

    /// Aligns a scan to the local map. Point-to-plane residuals
    /// r = n.(R p + t - m) with body-frame twist rows
    /// J = [(p x R'n)' (R'n)'], so lever arms stay bounded by sensor range
    /// and the spectrum of JtJ is scale-honest. Divergence (three
    /// consecutive error increases) or correspondence starvation marks the
    /// scan lost and degenerated; the best iterate is kept.
    pub fn track(&mut self, cloud: &PointCloud, cfg: &SlamConfig) -> Result<TrackOutcome> {
        if cloud.is_empty() {
            return Err(SlamError::InvalidInput("empty scan".into()));
        }
        let (map_points, map_normals): (Vec<[f64; 3]>, Vec<[f64; 3]>) = self
            .local_map
            .iter()
            .flat_map(|s| s.points.iter().copied().zip(s.normals.iter().copied()))
            .unzip();
        let tree = KdTree::build(&map_points);
        // constant-velocity prediction; an implausible velocity (e.g.
        // right after a lost scan) falls back to the previous pose
        let velocity = self.prev_pose.inverse().compose(&self.pose);
        let velocity = if velocity.translation.norm() > 5.0 || velocity.rotation_angle() > 1.0 {
            RigidTransform::identity()
        } else {
            velocity
        };
        // extrapolate the heading rate (needed to stay in the convergence
        // basin through turns) but not roll/pitch rates: those carry no
        // real motion for a ground vehicle, and feeding their estimation
        // noise back through the prediction compounds it scan over scan
        let velocity = {
            let axis = nalgebra::Rotation3::from_matrix_unchecked(velocity.rotation).scaled_axis();
            let yaw_only = nalgebra::Rotation3::from_scaled_axis(Vector3::new(0.0, 0.0, axis.z));
            RigidTransform {
                rotation: *yaw_only.matrix(),
                translation: velocity.translation,
            }
        };
        let stride = (cloud.len() / cfg.icp_sample.max(1)).max(1);
        let sample: Vec<[f64; 3]> = cloud.points.iter().step_by(stride).copied().collect();

        // multi-start: the constant-velocity start wins on sustained
        // motion, the held-pose start wins when the motion just changed
        // (e.g. entering a turn); keep whichever fit is better
        let predicted = self.pose.compose(&velocity);
        let run_a = icp_run(predicted, &sample, &tree, &map_points, &map_normals, cfg);
        let run = if velocity.translation.norm() > 1e-9 || velocity.rotation_angle() > 1e-9 {
            let run_b = icp_run(self.pose, &sample, &tree, &map_points, &map_normals, cfg);
            if (run_b.lost, run_b.best_err) < (run_a.lost, run_a.best_err) {
                run_b
            } else {
                run_a
            }
        } else {
            run_a
        };
        let IcpRun {
            t,
            best,
            best_err,
            lost,
            h,
            count,
        } = run;
        let lambda_min = if count > 0 {
            let eig = (h / count as f64).symmetric_eigen();
            eig.eigenvalues
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        } else {
            0.0
        };
        let pose = if lost { best } else { t };
        let degenerated = lost || lambda_min < cfg.lambda_thresh;
        // a lost scan restarts from zero velocity and re-seeds the local
        // map at the best pose found, so tracking resumes scan-to-scan in a
        // (possibly drifted) frame instead of staying frozen against a
        // stale map
        self.prev_pose = if lost { pose } else { self.pose };
        self.pose = pose;
        self.lambda_min = lambda_min;
        if lost {
            self.local_map.clear();
        }
        self.insert_scan(cloud, &pose, cfg);
        Ok(TrackOutcome {
            pose,
            degenerated,
            lambda_min,
            lost,
            final_error: best_err,
        })
    }
}

/// Result of one gated, annealed point-to-plane descent from a single
/// starting pose.
struct IcpRun {
    t: RigidTransform,
    best: RigidTransform,
    best_err: f64,
    lost: bool,
    h: nalgebra::Matrix6<f64>,
    count: usize,
}

fn icp_run(
    start: RigidTransform,
    sample: &[[f64; 3]],
    tree: &KdTree,
    map_points: &[[f64; 3]],
    map_normals: &[[f64; 3]],
    cfg: &SlamConfig,
) -> IcpRun {
    let mut t = start;
    let mut best = t;
    let mut best_err = f64::INFINITY;
    let mut prev_err = f64::INFINITY;
    let mut increases = 0usize;
    let mut lost = false;
    let mut h = nalgebra::Matrix6::<f64>::zeros();
    let mut count = 0usize;
    for iter in 0..cfg.icp_iterations {
        // anneal the correspondence gate so late iterations stop
        // listening to far-away surfaces, and damp large residuals
        // (Huber) so freshly visible structure cannot drag the pose
        let gate = (cfg.icp_max_corr / (1.0 + iter as f64)).max(0.5);
        let huber = 0.3;
        h.fill(0.0);
        let mut g = Vector6::<f64>::zeros();
        let mut err = 0.0;
        count = 0;
        for &p in sample {
            let q = t.apply(p);
            let nn = tree.knn(q, 1);
            let Some(&(mi, d)) = nn.first() else { continue };
            if d > gate {
                continue;
            }
            let m = map_points[mi];
            let n = map_normals[mi];
            let nv = Vector3::new(n[0], n[1], n[2]);
            let r = nv.dot(&Vector3::new(q[0] - m[0], q[1] - m[1], q[2] - m[2]));
            let w = (huber / r.abs().max(huber)).sqrt();
            let nb = t.rotation.transpose() * nv;
            let row = Vector6::new(
                p[1] * nb.z - p[2] * nb.y,
                p[2] * nb.x - p[0] * nb.z,
                p[0] * nb.y - p[1] * nb.x,
                nb.x,
                nb.y,
                nb.z,
            ) * w;
            h += row * row.transpose();
            g += row * (w * r);
            err += (w * r) * (w * r);
            count += 1;
        }
        if count < 20 {
            log::warn!("tracking starved: {count} correspondences");
            lost = true;
            break;
        }
        err /= count as f64;
        if err < best_err {
            best_err = err;
            best = t;
        }
        // error terms are only comparable once the annealed gate has
        // settled at its floor
        let gate_settled = gate <= 0.5 + 1e-12;
        if gate_settled && err > prev_err * 1.05 + 1e-4 {
            increases += 1;
            if increases >= 3 {
                log::warn!("tracking diverged after 3 error increases");
                lost = true;
                break;
            }
        } else {
            increases = 0;
        }
        prev_err = err;
        let damped = h + nalgebra::Matrix6::identity() * 1e-9;
        let Some(mut delta) = damped.lu().solve(&(-g)) else {
            lost = true;
            break;
        };
        if !delta.iter().all(|v| v.is_finite()) {
            log::warn!("tracking solve produced a non-finite step");
            lost = true;
            break;
        }
        // solution remapping: drop the step components that live in
        // poorly constrained eigendirections of the normal matrix, so
        // the motion prediction is kept along degenerate directions
        // instead of letting the solver slide freely there
        let eig = (h / count as f64).symmetric_eigen();
        let mut kept = Vector6::<f64>::zeros();
        for i in 0..6 {
            if eig.eigenvalues[i] >= cfg.lambda_thresh {
                let v = eig.eigenvectors.column(i);
                kept += v * v.dot(&delta);
            }
        }
        delta = kept;
        // trust region: a near-singular normal matrix can still solve
        // to an absurd step along its null direction
        let rot = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
        let trans = (delta[3] * delta[3] + delta[4] * delta[4] + delta[5] * delta[5]).sqrt();
        let scale = (0.5 / rot.max(1e-12)).min(2.0 / trans.max(1e-12)).min(1.0);
        delta *= scale;
        t = t.compose(&se3_exp([
            delta[0], delta[1], delta[2], delta[3], delta[4], delta[5],
        ]));
        if delta.norm() < 1e-10 {
            break;
        }
    }
    IcpRun {
        t,
        best,
        best_err,
        lost,
        h,
        count,
    }
}

// ── keyframe selection ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyframeDecision {
    pub select: bool,
    /// A keyframe is degenerated if any pose involved since the previous
    /// keyframe was degenerated.
    pub degenerated: bool,
    pub rule: KeyframeRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeRule {
    None,
    Distance,
    /// First degenerated scan after nondegenerated ones.
    EnterDegeneracy,
    /// First nondegenerated scan after a degenerated one that was not
    /// itself selected.
    ExitDegeneracy,
    /// Periodic keyframe inside a continuous degenerate stretch.
    PeriodicDegenerate,
}

/// Stateful keyframe policy: the distance rule plus the three
/// degeneracy-driven rules.
#[derive(Debug, Default)]
pub struct KeyframeSelector {
    last_kf_pos: Option<[f64; 3]>,
    prev_degenerated: Option<bool>,
    prev_selected: bool,
    /// Timestamp of the last keyframe inside the current degenerate
    /// stretch, if any.
    degen_mark: Option<f64>,
    seen_degenerate_since_kf: bool,
}

impl KeyframeSelector {
    pub fn new() -> KeyframeSelector {
        KeyframeSelector::default()
    }

    pub fn decide(
        &mut self,
        timestamp: f64,
        pose: &RigidTransform,
        degenerated: bool,
        cfg: &SlamConfig,
    ) -> KeyframeDecision {
        let pos = [pose.translation.x, pose.translation.y, pose.translation.z];
        let rule = if degenerated && self.prev_degenerated == Some(false) {
            KeyframeRule::EnterDegeneracy
        } else if !degenerated && self.prev_degenerated == Some(true) && !self.prev_selected {
            KeyframeRule::ExitDegeneracy
        } else if degenerated
            && self.prev_degenerated == Some(true)
            && self
                .degen_mark
                .map_or(false, |m| timestamp - m >= cfg.degenerate_period)
        {
            KeyframeRule::PeriodicDegenerate
        } else {
            let moved = match self.last_kf_pos {
                None => true,
                Some(last) => {
                    let d = crate::geometry::dist(pos, last);
                    d > cfg.keyframe_distance
                }
            };
            if moved {
                KeyframeRule::Distance
            } else {
                KeyframeRule::None
            }
        };
        let select = rule != KeyframeRule::None;
        let category = degenerated || self.seen_degenerate_since_kf;
        if select {
            self.last_kf_pos = Some(pos);
            self.seen_degenerate_since_kf = false;
        } else {
            self.seen_degenerate_since_kf |= degenerated;
        }
        if degenerated {
            if self.prev_degenerated != Some(true) {
                self.degen_mark = Some(timestamp);
            } else if select {
                self.degen_mark = Some(timestamp);
            }
        } else {
            self.degen_mark = None;
        }
        self.prev_degenerated = Some(degenerated);
        self.prev_selected = select;
        KeyframeDecision {
            select,
            degenerated: category,
            rule,
        }
    }
}

// ── keyframes and the pose graph ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub id: u64,
    pub timestamp: f64,
    pub cloud: PointCloud,
    pub pose: RigidTransform,
    pub descriptor: Vec<f64>,
    pub degenerated: bool,
    /// Index of this keyframe's node in the pose graph.
    pub node: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    Loop,
    Relocalization,
}

#[derive(Debug, Clone)]
pub struct PoseGraphEdge {
    pub from: usize,
    pub to: usize,
    /// Measured relative transform T_from^-1 T_to.
    pub relative: RigidTransform,
    pub kind: EdgeKind,
    pub weight: f64,
    /// Solver reliability, present on loop and relocalization edges.
    pub reliability: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub poses: Vec<RigidTransform>,
    pub edges: Vec<PoseGraphEdge>,
}

#[derive(Debug, Clone)]
pub struct PgoReport {
    /// Residual after each accepted step, starting with the initial value.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Twist of a transform; unlike the strict geometric log this recovers the
/// rotation axis through the quaternion, so it has no pi singularity.
fn pg_log(t: &RigidTransform) -> Twist {
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
        t.rotation,
    ));
    let w = q.scaled_axis();
    let th = w.norm();
    let wx = Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0);
    let jinv = if th < 1e-12 {
        Matrix3::identity() - wx * 0.5
    } else {
        let half = th / 2.0;
        let cot = half / half.tan();
        Matrix3::identity() - wx * 0.5 + wx * wx * ((1.0 - cot) / (th * th))
    };
    let v = jinv * t.translation;
    [w.x, w.y, w.z, v.x, v.y, v.z]
}

impl PoseGraph {
    pub fn new() -> PoseGraph {
        PoseGraph::default()
    }

    pub fn add_node(&mut self, pose: RigidTransform) -> usize {
        self.poses.push(pose);
        self.poses.len() - 1
    }

    pub fn add_edge(&mut self, edge: PoseGraphEdge) -> Result<()> {
        if edge.from >= self.poses.len() || edge.to >= self.poses.len() || edge.from == edge.to {
            return Err(SlamError::InvalidInput(format!(
                "edge {} -> {}",
                edge.from, edge.to
            )));
        }
        self.edges.push(edge);
        Ok(())
    }

    fn edge_residual(poses: &[RigidTransform], e: &PoseGraphEdge) -> Twist {
        let t = e
            .relative
            .inverse()
            .compose(&poses[e.from].inverse())
            .compose(&poses[e.to]);
        pg_log(&t)
    }

    /// Weighted total squared residual over all edges.
    pub fn residual(&self) -> f64 {
        self.residual_of(&self.poses)
    }

    fn residual_of(&self, poses: &[RigidTransform]) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = Self::edge_residual(poses, e);
                e.weight * r.iter().map(|v| v * v).sum::<f64>()
            })
            .sum()
    }

    /// Damped Gauss-Newton over the node poses with the first node
    /// anchored. Jacobians are central differences of the edge residual in
    /// the right-perturbation parametrization T exp(delta). Steps are only
    /// accepted when the total residual does not increase; remaining
    /// iterations without an acceptable step stop the solve with the best
    /// iterate and converged = false.
    pub fn optimize(&mut self, max_iters: usize) -> PgoReport {
        let n = self.poses.len();
        let mut residuals = vec![self.residual()];
        if n <= 1 || self.edges.is_empty() {
            return PgoReport {
                residuals,
                converged: true,
            };
        }
        let vars = 6 * (n - 1); // node 0 anchored
        let mut lambda = 1e-6;
        let mut converged = false;
        let eps = 1e-6;
        for _ in 0..max_iters {
            let current = *residuals.last().unwrap();
            let mut h = DMatrix::<f64>::zeros(vars, vars);
            let mut grad = DVector::<f64>::zeros(vars);
            for e in &self.edges {
                let r0 = Self::edge_residual(&self.poses, e);
                // 6x12 jacobian: columns for (from, to) perturbations
                let mut jac = [[0.0f64; 12]; 6];
                for (slot, node) in [(0usize, e.from), (1, e.to)] {
                    if node == 0 {
                        continue;
                    }
                    for k in 0..6 {
                        let mut dx = [0.0; 6];
                        dx[k] = eps;
                        let saved = self.poses[node];
                        let mut poses = self.poses.clone();
                        poses[node] = saved.compose(&se3_exp(dx));
                        let rp = Self::edge_residual(&poses, e);
                        dx[k] = -eps;
                        poses[node] = saved.compose(&se3_exp(dx));
                        let rm = Self::edge_residual(&poses, e);
                        for row in 0..6 {
                            jac[row][6 * slot + k] = (rp[row] - rm[row]) / (2.0 * eps);
                        }
                    }
                }
                let cols: Vec<(usize, usize)> = [(0usize, e.from), (1, e.to)]
                    .iter()
                    .filter(|&&(_, node)| node != 0)
                    .flat_map(|&(slot, node)| {
                        (0..6).map(move |k| (6 * slot + k, 6 * (node - 1) + k))
                    })
                    .collect();
                for &(jc, hc) in &cols {
                    for row in 0..6 {
                        grad[hc] += e.weight * jac[row][jc] * r0[row];
                    }
                    for &(jc2, hc2) in &cols {
                        let mut acc = 0.0;
                        for row in 0..6 {
                            acc += jac[row][jc] * jac[row][jc2];
                        }
                        h[(hc, hc2)] += e.weight * acc;
                    }
                }
            }
            let mut accepted = false;
            for _ in 0..10 {
                let mut damped = h.clone();
                for i in 0..vars {
                    damped[(i, i)] += lambda;
                }
                let Some(delta) = damped.lu().solve(&(-&grad)) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut candidate = self.poses.clone();
                for (node, pose) in candidate.iter_mut().enumerate().skip(1) {
                    let base = 6 * (node - 1);
                    let dx = [
                        delta[base],
                        delta[base + 1],
                        delta[base + 2],
                        delta[base + 3],
                        delta[base + 4],
                        delta[base + 5],
                    ];
                    *pose = pose.compose(&se3_exp(dx));
                }
                let next = self.residual_of(&candidate);
                if next <= current {
                    self.poses = candidate;
                    residuals.push(next);
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                log::warn!("pose-graph optimization stalled at residual {current:.3e}");
                break;
            }
            let next = *residuals.last().unwrap();
            if current - next < 1e-12 * current.max(1.0) {
                converged = true;
                break;
            }
        }
        PgoReport {
            residuals,
            converged,
        }
    }
}

// ── relocalization and loop closing ─────────────────────────────────────

/// Mean assignment weight over the dense correspondences of a pair — the
/// reliability score gating relocalization and annotating loop edges.
pub fn registration_reliability(out: &crate::pipeline::PairOutput) -> f64 {
    if out.dense_pairs.is_empty() {
        return 0.0;
    }
    out.dense_pairs.iter().map(|p| p.weight).sum::<f64>() / out.dense_pairs.len() as f64
}

#[derive(Debug, Clone)]
pub struct RelocOutcome {
    pub candidate: u64,
    /// T_candidate^-1 T_keyframe: maps keyframe-frame points into the
    /// candidate frame.
    pub relative: RigidTransform,
    pub reliability: f64,
    /// True when the descriptor-retrieval fallback produced the result.
    pub fallback: bool,
}

fn attempt_registration(
    model: &Model,
    kf: &KeyframeRecord,
    cand: &KeyframeRecord,
    rho_r: f64,
) -> Option<(RigidTransform, f64)> {
    match model.register(&kf.cloud, &cand.cloud, Solver::Lgr, kf.id) {
        Ok((result, out)) => {
            let reliability = registration_reliability(&out);
            if reliability > rho_r {
                Some((result.transform, reliability))
            } else {
                log::info!("registration reliability {reliability:.4} <= {rho_r:.4}, rejected");
                None
            }
        }
        Err(e) => {
            log::warn!(
                "registration of keyframe {} against {} failed: {e}",
                kf.id,
                cand.id
            );
            None
        }
    }
}

/// Re-estimates the pose of a degenerated keyframe against the most recent
/// nondegenerated keyframe; when that fails, one descriptor-retrieval
/// fallback gated at rho_s is attempted. Success requires the registration
/// reliability to strictly exceed rho_r. The caller relabels the keyframe
/// and inserts the relocalization edge.
pub fn relocalize(
    kf: &KeyframeRecord,
    keyframes: &[KeyframeRecord],
    db: &DescriptorDb,
    model: &Model,
    cfg: &SlamConfig,
) -> Result<RelocOutcome> {
    let primary = keyframes
        .iter()
        .rev()
        .find(|k| !k.degenerated && k.id != kf.id)
        .ok_or_else(|| SlamError::InvalidInput("no nondegenerated keyframe in database".into()))?;
    if let Some((relative, reliability)) = attempt_registration(model, kf, primary, cfg.rho_r) {
        return Ok(RelocOutcome {
            candidate: primary.id,
            relative,
            reliability,
            fallback: false,
        });
    }
    // fallback: nearest descriptor below the similarity gate
    let (ranked, _) = db.query(&kf.descriptor, 1, |id| id != kf.id && id != primary.id)?;
    if let Some(&(cand_id, d)) = ranked.first() {
        if d < cfg.rho_s {
            let cand = keyframes.iter().find(|k| k.id == cand_id).ok_or_else(|| {
                SlamError::InvalidInput(format!("descriptor id {cand_id} has no keyframe"))
            })?;
            if let Some((relative, reliability)) = attempt_registration(model, kf, cand, cfg.rho_r)
            {
                return Ok(RelocOutcome {
                    candidate: cand_id,
                    relative,
                    reliability,
                    fallback: true,
                });
            }
        }
    }
    Err(SlamError::RelocalizationFailed(format!(
        "keyframe {} stays degenerated",
        kf.id
    )))
}

#[derive(Debug, Clone)]
pub struct LoopEdge {
    pub candidate: u64,
    /// T_candidate^-1 T_keyframe.
    pub relative: RigidTransform,
    pub descriptor_distance: f64,
    pub reliability: f64,
}

/// Rank-1 descriptor query outside the exclusion window, gated strictly at
/// rho_s, then LGR registration. Registration failure rejects the
/// candidate (no false loops); absence of candidates is not an error.
pub fn detect_and_close_loop(
    kf: &KeyframeRecord,
    keyframes: &[KeyframeRecord],
    db: &DescriptorDb,
    model: &Model,
    cfg: &SlamConfig,
) -> Result<Option<LoopEdge>> {
    let window = cfg.exclusion_window;
    if db.is_empty() || kf.id <= window {
        return Ok(None);
    }
    let (ranked, _) = db.query(&kf.descriptor, 1, |id| id + window < kf.id)?;
    let Some(&(cand_id, d)) = ranked.first() else {
        return Ok(None);
    };
    if d >= cfg.rho_s {
        return Ok(None);
    }
    let cand = keyframes.iter().find(|k| k.id == cand_id).ok_or_else(|| {
        SlamError::InvalidInput(format!("descriptor id {cand_id} has no keyframe"))
    })?;
    match model.register(&kf.cloud, &cand.cloud, Solver::Lgr, kf.id) {
        Ok((result, out)) => Ok(Some(LoopEdge {
            candidate: cand_id,
            relative: result.transform,
            descriptor_distance: d,
            reliability: registration_reliability(&out),
        })),
        Err(e) => {
            log::warn!(
                "loop candidate {cand_id} for keyframe {} rejected: {e}",
                kf.id
            );
            Ok(None)
        }
    }
}

/// rho_r recipe: 5th percentile of reliability scores from known-good
/// registrations.
pub fn calibrate_rho_r(reliabilities: &[f64]) -> Result<f64> {
    percentile(reliabilities, 0.05)
}

/// rho_s recipe: 95th percentile of positive-pair descriptor distances.
pub fn calibrate_rho_s(distances: &[f64]) -> Result<f64> {
    percentile(distances, 0.95)
}

fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(SlamError::InvalidInput(
            "percentile of an empty sample".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    Ok(sorted[idx])
}

// ── full runs ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct SlamOptions {
    pub relocalization: bool,
    pub loop_closing: bool,
}

#[derive(Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SlamEvent {
    Keyframe {
        id: u64,
        timestamp: f64,
        degenerated: bool,
        rule: KeyframeRule,
    },
    Degeneracy {
        timestamp: f64,
        lambda_min: f64,
    },
    TrackingLost {
        timestamp: f64,
    },
    Relocalization {
        keyframe: u64,
        candidate: u64,
        reliability: f64,
        fallback: bool,
        success: bool,
    },
    LoopClosure {
        keyframe: u64,
        candidate: u64,
        distance: f64,
        reliability: f64,
    },
}

/// One line of JSON per event.
pub fn event_log_lines(events: &[SlamEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&serde_json::to_string(e).expect("events are serializable"));
        s.push('\n');
    }
    s
}

#[derive(Debug)]
pub struct SlamOutput {
    /// Raw tracker pose per scan.
    pub trajectory: Vec<(f64, RigidTransform)>,
    pub keyframes: Vec<KeyframeRecord>,
    pub graph: PoseGraph,
    pub events: Vec<SlamEvent>,
}

impl SlamOutput {
    /// Keyframe trajectory with graph-optimized poses.
    pub fn keyframe_trajectory(&self) -> Vec<(f64, RigidTransform)> {
        self.keyframes
            .iter()
            .map(|k| (k.timestamp, self.graph.poses[k.node]))
            .collect()
    }
}

/// Sequential deterministic run of the three workers over an ordered scan
/// stream. Relocalization and loop-closing jobs queue per keyframe and are
/// drained at their configured cadences; every accepted loop or
/// relocalization edge triggers a batch pose-graph optimization whose
/// correction is fed back into the tracker.
pub fn run(
    model: &Model,
    scans: &[PointCloud],
    timestamps: &[f64],
    cfg: &SlamConfig,
    opts: SlamOptions,
) -> Result<SlamOutput> {
    if scans.is_empty() || scans.len() != timestamps.len() {
        return Err(SlamError::InvalidInput(format!(
            "{} scans against {} timestamps",
            scans.len(),
            timestamps.len()
        )));
    }
    let mut tracker = TrackerState::new(&scans[0], cfg)?;
    let mut selector = KeyframeSelector::new();
    let mut graph = PoseGraph::new();
    let mut keyframes: Vec<KeyframeRecord> = Vec::new();
    let mut db: Option<DescriptorDb> = None;
    let mut events = Vec::new();
    let mut trajectory = Vec::new();
    let mut pending_reloc: VecDeque<usize> = VecDeque::new();
    let mut pending_loop: VecDeque<usize> = VecDeque::new();
    let mut next_reloc = timestamps[0];
    let mut next_loop = timestamps[0];

    for (k, (scan, &stamp)) in scans.iter().zip(timestamps).enumerate() {
        let (pose, degenerated, lambda_min) = if k == 0 {
            (RigidTransform::identity(), false, f64::INFINITY)
        } else {
            let out = tracker.track(scan, cfg)?;
            if out.lost {
                events.push(SlamEvent::TrackingLost { timestamp: stamp });
            }
            if out.degenerated {
                events.push(SlamEvent::Degeneracy {
                    timestamp: stamp,
                    lambda_min: out.lambda_min,
                });
            }
            (out.pose, out.degenerated, out.lambda_min)
        };
        let _ = lambda_min;
        trajectory.push((stamp, pose));

        let decision = selector.decide(stamp, &pose, degenerated, cfg);
        if decision.select {
            let id = keyframes.len() as u64;
            let descriptor = describe_cloud(model, scan)?;
            let node = graph.add_node(pose);
            if let Some(prev) = keyframes.last() {
                let relative = graph.poses[prev.node].inverse().compose(&pose);
                graph.add_edge(PoseGraphEdge {
                    from: prev.node,
                    to: node,
                    relative,
                    kind: EdgeKind::Odometry,
                    weight: cfg.weight_odometry,
                    reliability: None,
                })?;
            }
            let db = db.get_or_insert_with(|| DescriptorDb::new(descriptor.len()));
            db.insert(id, descriptor.clone())?;
            keyframes.push(KeyframeRecord {
                id,
                timestamp: stamp,
                cloud: scan.clone(),
                pose,
                descriptor,
                degenerated: decision.degenerated,
                node,
            });
            events.push(SlamEvent::Keyframe {
                id,
                timestamp: stamp,
                degenerated: decision.degenerated,
                rule: decision.rule,
            });
            let idx = keyframes.len() - 1;
            if opts.relocalization && decision.degenerated {
                pending_reloc.push_back(idx);
            }
            if opts.loop_closing {
                pending_loop.push_back(idx);
            }
        }

        // drain worker queues at their cadences
        while opts.relocalization && stamp >= next_reloc {
            next_reloc += 1.0 / cfg.reloc_hz;
            let Some(idx) = pending_reloc.pop_front() else {
                continue;
            };
            let db_ref = db.as_ref().expect("keyframes imply a database");
            match relocalize(&keyframes[idx], &keyframes, db_ref, model, cfg) {
                Ok(outcome) => {
                    let cand_node = keyframes
                        .iter()
                        .find(|c| c.id == outcome.candidate)
                        .unwrap()
                        .node;
                    let kf_node = keyframes[idx].node;
                    events.push(SlamEvent::Relocalization {
                        keyframe: keyframes[idx].id,
                        candidate: outcome.candidate,
                        reliability: outcome.reliability,
                        fallback: outcome.fallback,
                        success: true,
                    });
                    keyframes[idx].degenerated = false;
                    graph.add_edge(PoseGraphEdge {
                        from: cand_node,
                        to: kf_node,
                        relative: outcome.relative,
                        kind: EdgeKind::Relocalization,
                        weight: cfg.weight_relocalization,
                        reliability: Some(outcome.reliability),
                    })?;
                    optimize_and_correct(&mut graph, &mut keyframes, &mut tracker, cfg);
                }
                Err(SlamError::RelocalizationFailed(_)) => {
                    events.push(SlamEvent::Relocalization {
                        keyframe: keyframes[idx].id,
                        candidate: u64::MAX,
                        reliability: 0.0,
                        fallback: true,
                        success: false,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        while opts.loop_closing && stamp >= next_loop {
            next_loop += 1.0 / cfg.loop_hz;
            let Some(idx) = pending_loop.pop_front() else {
                continue;
            };
            let db_ref = db.as_ref().expect("keyframes imply a database");
            if let Some(edge) =
                detect_and_close_loop(&keyframes[idx], &keyframes, db_ref, model, cfg)?
            {
                let cand_node = keyframes
                    .iter()
                    .find(|c| c.id == edge.candidate)
                    .unwrap()
                    .node;
                events.push(SlamEvent::LoopClosure {
                    keyframe: keyframes[idx].id,
                    candidate: edge.candidate,
                    distance: edge.descriptor_distance,
                    reliability: edge.reliability,
                });
                graph.add_edge(PoseGraphEdge {
                    from: cand_node,
                    to: keyframes[idx].node,
                    relative: edge.relative,
                    kind: EdgeKind::Loop,
                    weight: cfg.weight_loop,
                    reliability: Some(edge.reliability),
                })?;
                optimize_and_correct(&mut graph, &mut keyframes, &mut tracker, cfg);
            }
        }
    }
    Ok(SlamOutput {
        trajectory,
        keyframes,
        graph,
        events,
    })
}

fn describe_cloud(model: &Model, cloud: &PointCloud) -> Result<Vec<f64>> {
    let mut g = crate::compute::Graph::new();
    let mut binding = crate::compute::Binding::with_filter(|_| false);
    let id = model.describe(&mut g, &mut binding, cloud)?;
    Ok(g.values(id).to_vec())
}

/// Batch PGO, then re-anchor keyframe poses and the live tracker on the
/// optimized estimate of the latest keyframe.
fn optimize_and_correct(
    graph: &mut PoseGraph,
    keyframes: &mut [KeyframeRecord],
    tracker: &mut TrackerState,
    cfg: &SlamConfig,
) {
    let last = keyframes.last().expect("edges imply keyframes");
    let before = graph.poses[last.node];
    let report = graph.optimize(cfg.pgo_iterations);
    if !report.converged {
        log::warn!("pose-graph optimization did not converge; keeping best iterate");
    }
    let after = graph.poses[last.node];
    let correction = after.compose(&before.inverse());
    tracker.apply_correction(&correction);
    for kf in keyframes.iter_mut() {
        kf.pose = graph.poses[kf.node];
    }
}

// ── evaluation ──────────────────────────────────────────────────────────

/// Flags keyframes whose relative motion error against ground truth
/// exceeds the threshold (1 m in the reference protocol). The first pose
/// is never flagged.
pub fn gt_degeneracy_flags(
    est: &[RigidTransform],
    gt: &[RigidTransform],
    threshold: f64,
) -> Result<Vec<bool>> {
    if est.len() != gt.len() {
        return Err(SlamError::InvalidInput(format!(
            "{} est poses vs {} gt",
            est.len(),
            gt.len()
        )));
    }
    let mut flags = vec![false; est.len()];
    for k in 1..est.len() {
        let rel_est = est[k - 1].inverse().compose(&est[k]);
        let rel_gt = gt[k - 1].inverse().compose(&gt[k]);
        let err = rel_gt.inverse().compose(&rel_est);
        flags[k] = err.translation.norm() > threshold;
    }
    Ok(flags)
}

#[derive(Debug, Clone)]
pub struct ApeReport {
    pub errors: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub rmse: f64,
}

/// Absolute position error after a single rigid alignment of the
/// trajectory origins. Trajectories associate by timestamp; any estimate
/// without a ground-truth stamp within `tolerance` is an association
/// error.
pub fn ape(
    est: &[(f64, RigidTransform)],
    gt: &[(f64, RigidTransform)],
    tolerance: f64,
) -> Result<ApeReport> {
    if est.is_empty() || gt.is_empty() {
        return Err(SlamError::InvalidInput("empty trajectory".into()));
    }
    let mut pairs = Vec::with_capacity(est.len());
    for &(stamp, ref pose) in est {
        let nearest = gt
            .iter()
            .min_by(|a, b| (a.0 - stamp).abs().total_cmp(&(b.0 - stamp).abs()))
            .expect("gt nonempty");
        if (nearest.0 - stamp).abs() > tolerance {
            return Err(SlamError::Association(format!(
                "estimate at t={stamp} has no ground truth within {tolerance}"
            )));
        }
        pairs.push((*pose, nearest.1));
    }
    let align = pairs[0].1.compose(&pairs[0].0.inverse());
    let mut errors: Vec<f64> = pairs
        .iter()
        .map(|(e, g)| {
            let aligned = align.compose(e);
            (aligned.translation - g.translation).norm()
        })
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    let max = errors.iter().cloned().fold(0.0, f64::max);
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    errors.shrink_to_fit();
    Ok(ApeReport {
        errors,
        mean,
        median,
        max,
        rmse,
    })
}

// ── trajectory formats ──────────────────────────────────────────────────

/// `timestamp tx ty tz qx qy qz qw`, one pose per line.
pub fn tum_lines(traj: &[(f64, RigidTransform)]) -> String {
    let mut s = String::new();
    for (stamp, pose) in traj {
        let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(
            pose.rotation,
        ));
        let t = pose.translation;
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            stamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        ));
    }
    s
}

pub fn parse_tum(s: &str) -> Result<Vec<(f64, RigidTransform)>> {
    let mut traj = Vec::new();
    for (lineno, line) in s.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| SlamError::Format(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(SlamError::Format(format!(
                "line {}: {} fields, want 8",
                lineno + 1,
                vals.len()
            )));
        }
        let q =
            UnitQuaternion::from_quaternion(Quaternion::new(vals[7], vals[4], vals[5], vals[6]));
        let pose = RigidTransform::new(
            *q.to_rotation_matrix().matrix(),
            Vector3::new(vals[1], vals[2], vals[3]),
        )?;
        traj.push((vals[0], pose));
    }
    Ok(traj)
}

/// KITTI pose format: 12 row-major values of the top 3x4 of the pose
/// matrix per line.
pub fn kitti_pose_lines(traj: &[RigidTransform]) -> String {
    let mut s = String::new();
    for pose in traj {
        let r = pose.rotation;
        let t = pose.translation;
        let row: Vec<String> = (0..3)
            .flat_map(|i| {
                [r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]]
                    .into_iter()
                    .map(|v| format!("{v}"))
                    .collect::<Vec<_>>()
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_kitti_poses(s: &str) -> Result<Vec<RigidTransform>> {
    let mut traj = Vec::new();
    for (lineno, line) in s.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| SlamError::Format(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(SlamError::Format(format!(
                "line {}: {} fields, want 12",
                lineno + 1,
                vals.len()
            )));
        }
        let rotation = Matrix3::new(
            vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
        );
        let translation = Vector3::new(vals[3], vals[7], vals[11]);
        traj.push(RigidTransform::new(rotation, translation)?);
    }
    Ok(traj)
}

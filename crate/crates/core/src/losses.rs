//! Training losses: keypoint detection, rotary boundary penalty, retrieval
//! triplet, and the sparse/dense gap losses, plus an Adam optimizer.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::compute::{Binding, ComputeError, Graph, ParamStore, TensorId};
use crate::geometry::{dist, RigidTransform};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("ground-truth construction: {0}")]
    GroundTruth(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// y = x R^T + t as graph ops (x is [n x 3], the transform is constant).
pub fn transform_rows(g: &mut Graph, x: TensorId, t: &RigidTransform) -> Result<TensorId> {
    let r = t.rotation;
    // out[i][j] = sum_k x[i][k] * R[j][k]
    let w: Vec<f64> = (0..3)
        .flat_map(|k| (0..3).map(move |j| r[(j, k)]))
        .collect();
    let w = g.constant(w, &[3, 3])?;
    let y = g.matmul(x, w)?;
    let neg_t = g.constant(
        vec![-t.translation[0], -t.translation[1], -t.translation[2]],
        &[3],
    )?;
    Ok(g.sub_row_vec(y, neg_t)?)
}

/// Pick one element of a matrix as a [1 x 1] tensor.
fn elem(g: &mut Graph, x: TensorId, flat: usize) -> Result<TensorId> {
    let n = g.values(x).len();
    let col = g.reshape(x, &[n, 1])?;
    Ok(g.gather_rows(col, &[flat])?)
}

/// Mean over rows of `a` of the squared distance to the nearest row of `b`.
/// The nearest index is selected from current values; the distance stays
/// differentiable through both point sets. The mean keeps the loss scale
/// independent of the proposal count so no single term swamps the rest.
fn nn_sq_dist_mean(g: &mut Graph, a: TensorId, b: TensorId) -> Result<TensorId> {
    let (m, n) = (g.shape(a)[0], g.shape(b)[0]);
    let av: Vec<f64> = g.values(a).to_vec();
    let bv: Vec<f64> = g.values(b).to_vec();
    let mut idx = Vec::with_capacity(m);
    for i in 0..m {
        let p = [av[i * 3], av[i * 3 + 1], av[i * 3 + 2]];
        let best = (0..n)
            .min_by(|&x, &y| {
                let dx = dist(p, [bv[x * 3], bv[x * 3 + 1], bv[x * 3 + 2]]);
                let dy = dist(p, [bv[y * 3], bv[y * 3 + 1], bv[y * 3 + 2]]);
                dx.partial_cmp(&dy).unwrap().then(x.cmp(&y))
            })
            .unwrap();
        idx.push(best);
    }
    let nearest = g.gather_rows(b, &idx)?;
    let d = g.sub(a, nearest)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    Ok(g.scale(s, 1.0 / m as f64)?)
}

/// Keypoint detection losses: symmetric nearest-neighbor squared distances
/// between the ground-truth-aligned proposal sets, and between each
/// proposal set and its own raw cloud.
pub fn keypoint_loss(
    g: &mut Graph,
    proposals_a: TensorId,
    proposals_b: TensorId,
    raw_a: &[[f64; 3]],
    raw_b: &[[f64; 3]],
    t_gt: &RigidTransform,
) -> Result<(TensorId, TensorId)> {
    if g.shape(proposals_a)[0] == 0
        || g.shape(proposals_b)[0] == 0
        || raw_a.is_empty()
        || raw_b.is_empty()
    {
        return Err(LossError::InvalidInput(
            "empty proposal or raw point set".into(),
        ));
    }
    let aligned_a = transform_rows(g, proposals_a, t_gt)?;
    let ab = nn_sq_dist_mean(g, aligned_a, proposals_b)?;
    let ba = nn_sq_dist_mean(g, proposals_b, aligned_a)?;
    let l_s1 = g.add(ab, ba)?;

    let raw_a_t = g.constant(raw_a.iter().flatten().cloned().collect(), &[raw_a.len(), 3])?;
    let raw_b_t = g.constant(raw_b.iter().flatten().cloned().collect(), &[raw_b.len(), 3])?;
    let a_raw = nn_sq_dist_mean(g, proposals_a, raw_a_t)?;
    let b_raw = nn_sq_dist_mean(g, proposals_b, raw_b_t)?;
    let l_s2 = g.add(a_raw, b_raw)?;
    Ok((l_s1, l_s2))
}

/// Mean hinge of |theta| above pi across all given rotary tensors.
pub fn boundary_penalty(g: &mut Graph, thetas: &[TensorId]) -> Result<TensorId> {
    let total: usize = thetas.iter().map(|&t| g.values(t).len()).sum();
    if total == 0 {
        return Ok(g.scalar(0.0)?);
    }
    let mut acc: Option<TensorId> = None;
    for &t in thetas {
        let pos = g.relu(t)?;
        let negated = g.scale(t, -1.0)?;
        let neg = g.relu(negated)?;
        let abs = g.add(pos, neg)?;
        let over = g.add_const(abs, -std::f64::consts::PI)?;
        let hinge = g.relu(over)?;
        let s = g.sum(hinge)?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / total as f64)?)
}

/// Euclidean distance between two row vectors as a [1] tensor (epsilon
/// inside the square root keeps the gradient finite at zero distance).
fn euclid(g: &mut Graph, a: TensorId, b: TensorId) -> Result<TensorId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq)?;
    let s = g.add_const(s, 1e-12)?;
    Ok(g.sqrt(s)?)
}

/// Retrieval triplet loss: N_p (alpha + max_p d(q, p) - mean_n d(q, n)),
/// hinged at zero.
pub fn triplet_loss(
    g: &mut Graph,
    v_q: TensorId,
    v_pos: &[TensorId],
    v_neg: &[TensorId],
    alpha: f64,
) -> Result<TensorId> {
    if v_pos.is_empty() || v_neg.is_empty() {
        return Err(LossError::InvalidInput(
            "need at least one positive and one negative".into(),
        ));
    }
    let mut max_p = euclid(g, v_q, v_pos[0])?;
    for &p in &v_pos[1..] {
        let d = euclid(g, v_q, p)?;
        max_p = g.max_pair(max_p, d)?;
    }
    let mut sum_n = euclid(g, v_q, v_neg[0])?;
    for &n in &v_neg[1..] {
        let d = euclid(g, v_q, n)?;
        sum_n = g.add(sum_n, d)?;
    }
    let mean_n = g.scale(sum_n, 1.0 / v_neg.len() as f64)?;
    let gap = g.sub(max_p, mean_n)?;
    let inner = g.add_const(gap, alpha)?;
    let scaled = g.scale(inner, v_pos.len() as f64)?;
    Ok(g.relu(scaled)?)
}

/// Ground truth for a gap loss over a dustbin-augmented assignment:
/// positive entries, negative entries, everything else excluded.
#[derive(Debug, Clone)]
pub struct GapGroundTruth {
    pub rows: usize,
    pub cols: usize,
    pub pos: Vec<bool>,
    pub neg: Vec<bool>,
}

impl GapGroundTruth {
    fn at(&self, i: usize, j: usize) -> usize {
        i * self.cols + j
    }
}

/// Sparse ground truth from a patch-overlap matrix: patch pairs with at
/// least `threshold` overlap are positive, the rest negative; matchless
/// rows/columns are assigned to the dustbin.
pub fn build_sparse_gt(
    overlap: &[f64],
    m: usize,
    n: usize,
    threshold: f64,
) -> Result<GapGroundTruth> {
    if overlap.len() != m * n {
        return Err(LossError::InvalidInput(format!(
            "{m}x{n} vs {} overlaps",
            overlap.len()
        )));
    }
    let (rm, rn) = (m + 1, n + 1);
    let mut gt = GapGroundTruth {
        rows: rm,
        cols: rn,
        pos: vec![false; rm * rn],
        neg: vec![false; rm * rn],
    };
    for i in 0..m {
        for j in 0..n {
            let k = gt.at(i, j);
            if overlap[i * n + j] >= threshold {
                gt.pos[k] = true;
            } else {
                gt.neg[k] = true;
            }
        }
    }
    for i in 0..m {
        let matched = (0..n).any(|j| gt.pos[gt.at(i, j)]);
        let k = gt.at(i, n);
        if matched {
            gt.neg[k] = true;
        } else {
            gt.pos[k] = true;
        }
    }
    for j in 0..n {
        let matched = (0..m).any(|i| gt.pos[gt.at(i, j)]);
        let k = gt.at(m, j);
        if matched {
            gt.neg[k] = true;
        } else {
            gt.pos[k] = true;
        }
    }
    Ok(gt)
}

/// Dense ground truth for one patch pair: point pairs are positive below
/// `tau` (after ground-truth alignment), negative above `2 tau`, excluded
/// in between; matchless rows/columns fall to the dustbin.
pub fn build_dense_gt(
    patch_a: &[[f64; 3]],
    patch_b: &[[f64; 3]],
    t_gt: &RigidTransform,
    tau: f64,
) -> Result<GapGroundTruth> {
    let (m, n) = (patch_a.len(), patch_b.len());
    if m == 0 || n == 0 {
        return Err(LossError::InvalidInput("empty patch".into()));
    }
    let (rm, rn) = (m + 1, n + 1);
    let mut gt = GapGroundTruth {
        rows: rm,
        cols: rn,
        pos: vec![false; rm * rn],
        neg: vec![false; rm * rn],
    };
    for (i, &p) in patch_a.iter().enumerate() {
        for (j, &q) in patch_b.iter().enumerate() {
            let d = dist(t_gt.apply(p), q);
            let k = gt.at(i, j);
            if d < tau {
                gt.pos[k] = true;
            } else if d > 2.0 * tau {
                gt.neg[k] = true;
            }
        }
    }
    for i in 0..m {
        let matched = (0..n).any(|j| gt.pos[gt.at(i, j)]);
        let k = gt.at(i, n);
        if matched {
            gt.neg[k] = true;
        } else {
            gt.pos[k] = true;
        }
    }
    for j in 0..n {
        let matched = (0..m).any(|i| gt.pos[gt.at(i, j)]);
        let k = gt.at(m, j);
        if matched {
            gt.neg[k] = true;
        } else {
            gt.pos[k] = true;
        }
    }
    Ok(gt)
}

/// Bidirectional log-hinge gap loss on a dustbin-augmented assignment:
/// per interior row, log(1 + sum over negatives of hinge(eta + c_neg -
/// hardest true match)), averaged over rows; same over interior columns.
pub fn gap_loss(g: &mut Graph, c: TensorId, gt: &GapGroundTruth, eta: f64) -> Result<TensorId> {
    let shape = g.shape(c).to_vec();
    if shape != [gt.rows, gt.cols] {
        return Err(LossError::InvalidInput(format!(
            "assignment {shape:?} vs ground truth {}x{}",
            gt.rows, gt.cols
        )));
    }
    let (rm, rn) = (gt.rows, gt.cols);
    let (m, n) = (rm - 1, rn - 1);
    let cv: Vec<f64> = g.values(c).to_vec();
    let flat = g.reshape(c, &[rm * rn, 1])?;

    let line_term = |g: &mut Graph, cells: Vec<usize>| -> Result<Option<TensorId>> {
        let pos: Vec<usize> = cells.iter().cloned().filter(|&k| gt.pos[k]).collect();
        let negs: Vec<usize> = cells.iter().cloned().filter(|&k| gt.neg[k]).collect();
        if pos.is_empty() {
            return Err(LossError::GroundTruth(
                "line with no true match and no dustbin label".into(),
            ));
        }
        if negs.is_empty() {
            return Ok(None);
        }
        let hardest = pos
            .iter()
            .cloned()
            .max_by(|&a, &b| cv[a].partial_cmp(&cv[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        let r = elem(g, flat, hardest)?;
        let neg_vals = g.gather_rows(flat, &negs)?;
        let ones = g.constant(vec![1.0; negs.len()], &[negs.len(), 1])?;
        let r_rep = g.matmul(ones, r)?;
        let diff = g.sub(neg_vals, r_rep)?;
        let shifted = g.add_const(diff, eta)?;
        let hinge = g.relu(shifted)?;
        let s = g.sum(hinge)?;
        let s1 = g.add_const(s, 1.0)?;
        Ok(Some(g.ln(s1)?))
    };

    let mut acc = g.scalar(0.0)?;
    for i in 0..m {
        if let Some(t) = line_term(g, (0..rn).map(|j| i * rn + j).collect())? {
            let t = g.scale(t, 1.0 / m as f64)?;
            acc = g.add(acc, t)?;
        }
    }
    for j in 0..n {
        if let Some(t) = line_term(g, (0..rm).map(|i| i * rn + j).collect())? {
            let t = g.scale(t, 1.0 / n as f64)?;
            acc = g.add(acc, t)?;
        }
    }
    Ok(acc)
}

/// Sparse keypoint-matching gap loss.
pub fn sparse_gap_loss(
    g: &mut Graph,
    c: TensorId,
    gt: &GapGroundTruth,
    eta: f64,
) -> Result<TensorId> {
    gap_loss(g, c, gt, eta)
}

/// Dense matching loss: the per-patch gap losses averaged as
/// sum / (2 * number of matched patches).
pub fn dense_gap_loss(
    g: &mut Graph,
    patches: &[(TensorId, GapGroundTruth)],
    eta: f64,
) -> Result<TensorId> {
    if patches.is_empty() {
        return Err(LossError::InvalidInput("no matched patches".into()));
    }
    let mut acc = g.scalar(0.0)?;
    for (z, gt) in patches {
        let t = gap_loss(g, *z, gt, eta)?;
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / (2.0 * patches.len() as f64))?)
}

/// Adam with bias correction; state is keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Read gradients of every trainable bound parameter off the graph.
    pub fn collect_grads(g: &Graph, binding: &Binding) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, id) in binding.bound() {
            if let Some(grad) = g.grad(*id) {
                out.insert(name.clone(), grad.to_vec());
            }
        }
        out
    }

    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let values = store
                .get_mut(name)
                .ok_or_else(|| LossError::InvalidInput(format!("unknown parameter {name}")))?;
            if values.len() != grad.len() {
                return Err(LossError::InvalidInput(format!(
                    "gradient size mismatch for {name}"
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate after `epoch` epochs: base times 0.95 every 4 epochs.
pub fn lr_at_epoch(base: f64, epoch: usize) -> f64 {
    base * 0.95_f64.powi((epoch / 4) as i32)
}

// ── two-stage toy training ──────────────────────────────────────────────

use crate::harness::{Course, ScenePair};
use crate::pipeline::{Model, PairOutput, PipelineError};
use crate::retrieval;

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean total loss per epoch.
    pub curve: Vec<f64>,
    pub first_loss: f64,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in self.curve.iter().enumerate() {
            s.push_str(&format!("{e},{l}\n"));
        }
        s
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Sinkhorn iterations during training.
    pub sinkhorn_iters: usize,
    /// Gap-loss margin.
    pub eta: f64,
    /// Dense positive/negative band edge, meters.
    pub tau: f64,
    /// Patch-overlap threshold for sparse ground truth.
    pub overlap_threshold: f64,
    /// Triplet margin (stage 2).
    pub margin: f64,
    /// Positives / negatives per anchor and anchors per step (stage 2).
    pub n_p: usize,
    pub n_n: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            base_lr: 1e-4,
            sinkhorn_iters: 5,
            eta: 0.5,
            tau: 0.45,
            overlap_threshold: 0.1,
            margin: 0.5,
            n_p: 6,
            n_n: 6,
            batch: 6,
            seed: 0,
        }
    }
}

/// Per-patch overlap ratios between the two keypoint patch sets, measured
/// on the grouped dense points after ground-truth alignment.
fn patch_overlap_matrix(out: &PairOutput, t_gt: &RigidTransform, radius: f64) -> Vec<f64> {
    let (m, n) = (out.keypoints_a.len(), out.keypoints_b.len());
    let mut overlap = vec![0.0; m * n];
    let aligned_a: Vec<[f64; 3]> = out.dense_points_a.iter().map(|&p| t_gt.apply(p)).collect();
    for j in 0..n {
        let members_b = &out.grouping_b.members[j];
        if members_b.is_empty() {
            continue;
        }
        let pts_b: Vec<[f64; 3]> = members_b.iter().map(|&k| out.dense_points_b[k]).collect();
        let tree = crate::geometry::KdTree::build(&pts_b);
        for i in 0..m {
            let members_a = &out.grouping_a.members[i];
            if members_a.is_empty() {
                continue;
            }
            let hits = members_a
                .iter()
                .filter(|&&k| {
                    tree.knn(aligned_a[k], 1)
                        .first()
                        .is_some_and(|&(_, d)| d < radius)
                })
                .count();
            overlap[i * n + j] = hits as f64 / members_a.len() as f64;
        }
    }
    overlap
}

/// The stage-1 training objective on one pair: keypoint, boundary, sparse
/// gap, and dense gap losses, uniformly weighted.
pub fn stage1_loss(
    g: &mut Graph,
    out: &PairOutput,
    pair: &ScenePair,
    cfg: &TrainConfig,
) -> Result<TensorId> {
    let (prop_a, prop_b) = match (&out.proposals_a, &out.proposals_b) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(LossError::InvalidInput(
                "stage 1 requires keypoint voting".into(),
            ))
        }
    };
    let (l_s1, l_s2) = keypoint_loss(
        g,
        prop_a.proposals,
        prop_b.proposals,
        &pair.cloud_a.points,
        &pair.cloud_b.points,
        &pair.t_gt,
    )?;
    let l_p = boundary_penalty(g, &[out.theta_a, out.theta_b])?;
    let overlap = patch_overlap_matrix(out, &pair.t_gt, cfg.tau);
    let gt_sparse = build_sparse_gt(
        &overlap,
        out.keypoints_a.len(),
        out.keypoints_b.len(),
        cfg.overlap_threshold,
    )?;
    let l_c = sparse_gap_loss(g, out.sparse_assignment, &gt_sparse, cfg.eta)?;
    let mut dense = Vec::new();
    for asn in &out.assignments {
        let pts_a: Vec<[f64; 3]> = asn.rows.iter().map(|&k| out.dense_points_a[k]).collect();
        let pts_b: Vec<[f64; 3]> = asn.cols.iter().map(|&k| out.dense_points_b[k]).collect();
        dense.push((asn.z, build_dense_gt(&pts_a, &pts_b, &pair.t_gt, cfg.tau)?));
    }
    let l_f = dense_gap_loss(g, &dense, cfg.eta)?;
    let s = g.add(l_s1, l_s2)?;
    let s = g.add(s, l_p)?;
    let s = g.add(s, l_c)?;
    Ok(g.add(s, l_f)?)
}

fn pipeline_err(e: PipelineError) -> LossError {
    LossError::InvalidInput(e.to_string())
}

/// Stage 1: batch-size-1 Adam training of the registration path on scene
/// pairs. Aborts with a diagnostic on a non-finite loss.
pub fn train_stage1(
    model: &mut Model,
    pairs: &[ScenePair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(LossError::InvalidInput("no training pairs".into()));
    }
    let mut train_model_cfg = model.cfg.clone();
    train_model_cfg.sinkhorn_iters = cfg.sinkhorn_iters;
    let mut opt = Adam::new(cfg.base_lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = lr_at_epoch(cfg.base_lr, epoch);
        let mut total = 0.0;
        for (k, pair) in pairs.iter().enumerate() {
            let mut g = Graph::new();
            let mut binding = Binding::new();
            let view = Model {
                cfg: train_model_cfg.clone(),
                store: std::mem::take(&mut model.store),
            };
            let fwd = view.forward_pair(&mut g, &mut binding, &pair.cloud_a, &pair.cloud_b);
            model.store = view.store;
            let out = fwd.map_err(pipeline_err)?;
            let loss = stage1_loss(&mut g, &out, pair, cfg)?;
            let value = g.values(loss)[0];
            if !value.is_finite() {
                return Err(LossError::InvalidInput(format!(
                    "non-finite loss at epoch {epoch}, pair {k}: {value}"
                )));
            }
            total += value;
            g.backward(loss)?;
            let grads = Adam::collect_grads(&g, &binding);
            opt.apply(&mut model.store, &grads)?;
        }
        curve.push(total / pairs.len() as f64);
    }
    Ok(TrainReport {
        first_loss: curve[0],
        final_loss: *curve.last().unwrap(),
        curve,
    })
}

/// Pose-distance triplet labels for a course: positives within
/// `pos_radius`, negatives beyond `neg_radius`, band excluded.
pub fn course_triplet_labels(
    course: &Course,
    pos_radius: f64,
    neg_radius: f64,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let n = course.poses.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = (course.poses[i].translation - course.poses[j].translation).norm();
            if d < pos_radius {
                pos.push(j);
            } else if d > neg_radius {
                neg.push(j);
            }
        }
        out.push((pos, neg));
    }
    out
}

/// Stage 2: linear probe of the retrieval head with the semi-online
/// scheme — positives and negatives use pre-extracted encoder features,
/// the anchor is re-encoded online with yaw augmentation. Everything
/// outside the retrieval head stays frozen (bit-verified).
pub fn train_stage2(
    model: &mut Model,
    course: &Course,
    labels: &[(Vec<usize>, Vec<usize>)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    use rand::Rng;
    use rand::SeedableRng;
    let n = course.scans.len();
    if labels.len() != n || n == 0 {
        return Err(LossError::InvalidInput(
            "labels must cover every scan".into(),
        ));
    }
    let frozen_before = snapshot_non_head(&model.store);

    // offline pre-extraction of encoder features
    let mut precomputed: Vec<(Vec<usize>, Vec<f64>)> = Vec::with_capacity(n);
    for scan in &course.scans {
        let mut g = Graph::new();
        let mut binding = Binding::with_filter(|_| false);
        let pyr = crate::backbone::encode(
            &mut g,
            &model.store,
            &mut binding,
            scan,
            &model.cfg.backbone,
        )
        .map_err(|e| LossError::InvalidInput(e.to_string()))?;
        let feats = pyr.coarsest().feats;
        precomputed.push((g.shape(feats).to_vec(), g.values(feats).to_vec()));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.base_lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = lr_at_epoch(cfg.base_lr, epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut pending: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut in_batch = 0usize;
        for anchor in 0..n {
            let (pos, neg) = &labels[anchor];
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let mut binding = Binding::with_filter(retrieval::is_head_param);
            // online anchor with yaw augmentation
            let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
            let t = RigidTransform::from_axis_angle(
                nalgebra::Vector3::z(),
                yaw,
                nalgebra::Vector3::zeros(),
            );
            let rotated = course.scans[anchor].transformed(&t);
            let v_q = {
                let pyr = crate::backbone::encode(
                    &mut g,
                    &model.store,
                    &mut binding,
                    &rotated,
                    &model.cfg.backbone,
                )
                .map_err(|e| LossError::InvalidInput(e.to_string()))?;
                retrieval::describe(&mut g, &model.store, &mut binding, pyr.coarsest().feats)
                    .map_err(|e| LossError::InvalidInput(e.to_string()))?
            };
            let head = |g: &mut Graph, binding: &mut Binding, idx: usize| -> Result<TensorId> {
                let (shape, values) = &precomputed[idx];
                let feats = g.constant(values.clone(), shape)?;
                retrieval::describe(g, &model.store, binding, feats)
                    .map_err(|e| LossError::InvalidInput(e.to_string()))
            };
            let mut v_pos = Vec::new();
            for &j in pos.iter().take(cfg.n_p) {
                v_pos.push(head(&mut g, &mut binding, j)?);
            }
            let mut v_neg = Vec::new();
            for &j in neg.iter().take(cfg.n_n) {
                v_neg.push(head(&mut g, &mut binding, j)?);
            }
            let loss = triplet_loss(&mut g, v_q, &v_pos, &v_neg, cfg.margin)?;
            let value = g.values(loss)[0];
            if !value.is_finite() {
                return Err(LossError::InvalidInput(format!(
                    "non-finite loss at epoch {epoch}, anchor {anchor}"
                )));
            }
            total += value;
            count += 1;
            g.backward(loss)?;
            for (name, grad) in Adam::collect_grads(&g, &binding) {
                let slot = pending.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
                for (s, v) in slot.iter_mut().zip(&grad) {
                    *s += v / cfg.batch as f64;
                }
            }
            in_batch += 1;
            if in_batch == cfg.batch {
                opt.apply(&mut model.store, &pending)?;
                pending.clear();
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            for v in pending.values_mut() {
                for x in v.iter_mut() {
                    *x *= cfg.batch as f64 / in_batch as f64;
                }
            }
            opt.apply(&mut model.store, &pending)?;
            pending.clear();
        }
        if count == 0 {
            return Err(LossError::InvalidInput(
                "no anchor has both positives and negatives".into(),
            ));
        }
        curve.push(total / count as f64);
    }

    let frozen_after = snapshot_non_head(&model.store);
    if frozen_before != frozen_after {
        return Err(LossError::InvalidInput(
            "frozen parameters changed during stage 2".into(),
        ));
    }
    Ok(TrainReport {
        first_loss: curve[0],
        final_loss: *curve.last().unwrap(),
        curve,
    })
}

fn snapshot_non_head(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    let mut names: Vec<&str> = store
        .names()
        .filter(|n| !retrieval::is_head_param(n))
        .collect();
    names.sort_unstable();
    names
        .into_iter()
        .map(|n| {
            let (_, v) = store.get(n).unwrap();
            (n.to_string(), v.iter().map(|x| x.to_bits()).collect())
        })
        .collect()
}

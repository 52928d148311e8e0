//! Offset voting: shift uniform keypoints toward salient structure, cluster
//! the shifted proposals into centroids, and aggregate descriptors at the
//! resulting centers.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{build_links, KernelLayout};
use crate::compute::{Binding, ComputeError, Graph, ParamStore, TensorId};
use crate::geometry::KdTree;

#[derive(Debug, Error)]
pub enum VoteError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate keypoints: every center is neighborless")]
    DegenerateKeypoints,
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
}

pub type Result<T> = std::result::Result<T, VoteError>;

#[derive(Debug, Clone, serde::Serialize)]
pub struct VoteConfig {
    /// Offset clamp radius, meters.
    pub r_vote: f64,
    /// Centroid-prediction neighbor range, meters.
    pub centroid_d: f64,
    /// Descriptor-aggregation radius as a multiple of `centroid_d`.
    pub r_agg_factor: f64,
    /// Kernel points for descriptor aggregation.
    pub kernel_points: usize,
    /// Output descriptor width.
    pub desc_dim: usize,
}

impl Default for VoteConfig {
    fn default() -> Self {
        VoteConfig {
            r_vote: 4.8,
            centroid_d: 2.4,
            r_agg_factor: 2.0,
            kernel_points: 15,
            desc_dim: 256,
        }
    }
}

/// Shifted keypoints with their differentiable offsets.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub keypoints: Vec<[f64; 3]>,
    /// Offset tensor, [m x 3].
    pub offsets: TensorId,
    /// Proposal positions = keypoints + offsets, [m x 3].
    pub proposals: TensorId,
    /// Numeric proposal positions (same values as the tensor).
    pub positions: Vec<[f64; 3]>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect()
}

/// Register the vote MLP and aggregation parameters. `feat_dim` is the
/// enhanced-feature width fed to the MLP.
pub fn init_params(store: &mut ParamStore, cfg: &VoteConfig, feat_dim: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = feat_dim;
    let h = (d / 2).max(1);
    let std1 = (2.0 / d as f64).sqrt();
    store.insert("vote.mlp1.w", vec![d, d], gaussian(&mut rng, d * d, std1));
    store.insert("vote.mlp1.b", vec![d], vec![0.0; d]);
    store.insert("vote.mlp2.w", vec![d, h], gaussian(&mut rng, d * h, std1));
    store.insert("vote.mlp2.b", vec![h], vec![0.0; h]);
    store.insert("vote.out.w", vec![h, 3], vec![0.0; h * 3]);
    store.insert("vote.out.b", vec![3], vec![0.0; 3]);
    let rows = cfg.kernel_points * d;
    let std2 = (2.0 / rows as f64).sqrt();
    store.insert(
        "vote.agg.w",
        vec![rows, cfg.desc_dim],
        gaussian(&mut rng, rows * cfg.desc_dim, std2),
    );
}

/// Predict per-keypoint offsets from enhanced features and return shifted
/// proposals. Offsets are squashed per coordinate so every row norm stays
/// within `r_vote`.
pub fn vote_offsets(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    feats: TensorId,
    keypoints: &[[f64; 3]],
    cfg: &VoteConfig,
) -> Result<ProposalSet> {
    let m = keypoints.len();
    if m == 0 || g.shape(feats)[0] != m {
        return Err(VoteError::InvalidInput(format!(
            "{} keypoints vs {} feature rows",
            m,
            g.shape(feats)[0]
        )));
    }
    let p = |g: &mut Graph, b: &mut Binding, n: &str| b.param(g, store, &format!("vote.{n}"));
    let (w1, b1) = (p(g, binding, "mlp1.w")?, p(g, binding, "mlp1.b")?);
    let (w2, b2) = (p(g, binding, "mlp2.w")?, p(g, binding, "mlp2.b")?);
    let (wo, bo) = (p(g, binding, "out.w")?, p(g, binding, "out.b")?);
    let h = g.linear(feats, w1, b1)?;
    let h = g.relu(h)?;
    let h = g.linear(h, w2, b2)?;
    let h = g.relu(h)?;
    let raw = g.linear(h, wo, bo)?;
    let t = g.tanh(raw)?;
    // per-coordinate bound r_vote/sqrt(3) caps the row norm at r_vote
    let offsets = g.scale(t, cfg.r_vote / 3.0f64.sqrt())?;
    let flat: Vec<f64> = keypoints.iter().flat_map(|p| p.iter().copied()).collect();
    let base = g.constant(flat, &[m, 3])?;
    let proposals = g.add(base, offsets)?;
    let pv = g.values(proposals);
    let positions = (0..m)
        .map(|i| [pv[i * 3], pv[i * 3 + 1], pv[i * 3 + 2]])
        .collect();
    Ok(ProposalSet {
        keypoints: keypoints.to_vec(),
        offsets,
        proposals,
        positions,
    })
}

/// Greedy centroid prediction. Proposals are scanned in index order; each
/// unlabeled proposal gathers the unlabeled proposals within `d`, their
/// mean becomes a center, and all of them are labeled. Restricting the
/// gather to unlabeled proposals keeps every proposal contributing to
/// exactly one center.
///
/// Returns the centers and, per center, its member proposal indices.
pub fn predict_centroids(
    positions: &[[f64; 3]],
    d: f64,
) -> Result<(Vec<[f64; 3]>, Vec<Vec<usize>>)> {
    if d <= 0.0 || !d.is_finite() {
        return Err(VoteError::InvalidInput(format!("search range {d}")));
    }
    let n = positions.len();
    let tree = KdTree::build(positions);
    let mut labeled = vec![false; n];
    let mut centers = Vec::new();
    let mut members = Vec::new();
    for i in 0..n {
        if labeled[i] {
            continue;
        }
        let neigh: Vec<usize> = tree
            .radius(positions[i], d)
            .into_iter()
            .filter(|&j| !labeled[j])
            .collect();
        let mut mean = [0.0; 3];
        for &j in &neigh {
            labeled[j] = true;
            for k in 0..3 {
                mean[k] += positions[j][k];
            }
        }
        let m = neigh.len() as f64;
        centers.push([mean[0] / m, mean[1] / m, mean[2] / m]);
        members.push(neigh);
    }
    Ok((centers, members))
}

/// Aggregate a descriptor per center by kernel-point convolution over the
/// keypoint features within `r_agg = r_agg_factor * centroid_d`. Centers
/// with no neighbors in range are dropped (logged); if every center is
/// dropped the keypoint set is degenerate.
pub fn aggregate_descriptors(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    centers: &[[f64; 3]],
    keypoint_positions: &[[f64; 3]],
    keypoint_feats: TensorId,
    cfg: &VoteConfig,
) -> Result<(Vec<[f64; 3]>, TensorId)> {
    let r_agg = cfg.r_agg_factor * cfg.centroid_d;
    let layout = KernelLayout::new(cfg.kernel_points, r_agg)?;
    let tree = KdTree::build(keypoint_positions);
    let all_links = build_links(centers, keypoint_positions, &tree, &layout);
    let mut kept = Vec::new();
    let mut links = Vec::new();
    for (i, ls) in all_links.into_iter().enumerate() {
        if ls.is_empty() {
            log::warn!(
                "dropping neighborless keypoint center {} at {:?}",
                i,
                centers[i]
            );
            continue;
        }
        kept.push(centers[i]);
        links.push(ls);
    }
    if kept.is_empty() {
        return Err(VoteError::DegenerateKeypoints);
    }
    let w = binding.param(g, store, "vote.agg.w")?;
    let h = g.kpconv(keypoint_feats, w, Rc::new(links), layout.num_kernels())?;
    Ok((kept, h))
}

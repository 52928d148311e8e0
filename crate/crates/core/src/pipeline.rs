//! End-to-end model wiring: encoder pyramid, rotary feature enhancement,
//! vote-based keypoint detection, sparse/dense matching, pose solving, and
//! the global description path.

use thiserror::Error;

use crate::backbone::{self, BackboneConfig, BackboneError, Pyramid};
use crate::compute::{Binding, ComputeError, Graph, ParamStore, TensorId};
use crate::geometry::PointCloud;
use crate::matching::{self, DensePair, MatchError, PatchAssignment, PatchGrouping, SparsePair};
use crate::registration::{self, Correspondence, RegistrationError, RegistrationResult};
use crate::retrieval::{self, RetrievalConfig, RetrievalError};
use crate::roformer::{self, RoformerConfig, RoformerError};
use crate::votes::{self, ProposalSet, VoteConfig, VoteError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Roformer(#[from] RoformerError),
    #[error(transparent)]
    Votes(#[from] VoteError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Matching(#[from] MatchError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, serde::Serialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub roformer: RoformerConfig,
    pub votes: VoteConfig,
    pub retrieval: RetrievalConfig,
    /// Detect keypoints by voting; when off, the coarsest-level points and
    /// their enhanced features stand in directly.
    pub use_vote: bool,
    /// Sinkhorn iterations (5 for training, 100 for inference).
    pub sinkhorn_iters: usize,
    /// Sparse matches kept from the assignment.
    pub n_c: usize,
    /// Per-patch dense point cap.
    pub patch_cap: usize,
    /// LGR inlier acceptance radius, meters.
    pub tau_a: f64,
    /// LGR refinement rounds.
    pub n_r: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let dim = backbone.coarse_dim();
        ModelConfig {
            backbone,
            roformer: RoformerConfig {
                dim,
                ..Default::default()
            },
            votes: VoteConfig::default(),
            retrieval: RetrievalConfig {
                feat_dim: dim,
                ..Default::default()
            },
            use_vote: true,
            sinkhorn_iters: 100,
            n_c: 64,
            patch_cap: 64,
            tau_a: 0.6,
            n_r: 5,
        }
    }
}

impl ModelConfig {
    /// Small widths for desk-scale training and tests.
    pub fn toy() -> Self {
        let backbone = BackboneConfig {
            base_cell: 0.6,
            widths: vec![4, 6, 8, 8],
            kernel_points: 5,
            sigma_factor: 1.5,
            dense_dim: 6,
            min_coarse_points: 4,
        };
        ModelConfig {
            roformer: RoformerConfig {
                dim: 8,
                rounds: 1,
                scale_logits: true,
            },
            votes: VoteConfig {
                kernel_points: 5,
                desc_dim: 8,
                ..Default::default()
            },
            retrieval: RetrievalConfig {
                clusters: 4,
                out_dim: 16,
                feat_dim: 8,
            },
            backbone,
            use_vote: true,
            sinkhorn_iters: 5,
            n_c: 48,
            patch_cap: 16,
            tau_a: 0.6,
            n_r: 5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.roformer.dim != self.backbone.coarse_dim() {
            return Err(PipelineError::InvalidConfig(format!(
                "attention width {} must equal the coarsest encoder width {}",
                self.roformer.dim,
                self.backbone.coarse_dim()
            )));
        }
        if self.retrieval.feat_dim != self.backbone.coarse_dim() {
            return Err(PipelineError::InvalidConfig(
                "retrieval feature width must match the encoder".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// Everything the forward pass produces for one cloud pair.
#[derive(Debug)]
pub struct PairOutput {
    pub keypoints_a: Vec<[f64; 3]>,
    pub keypoints_b: Vec<[f64; 3]>,
    pub desc_a: TensorId,
    pub desc_b: TensorId,
    pub theta_a: TensorId,
    pub theta_b: TensorId,
    pub proposals_a: Option<ProposalSet>,
    pub proposals_b: Option<ProposalSet>,
    /// Dustbin-augmented sparse assignment.
    pub sparse_assignment: TensorId,
    pub sparse_pairs: Vec<SparsePair>,
    pub dense_points_a: Vec<[f64; 3]>,
    pub dense_points_b: Vec<[f64; 3]>,
    pub dense_feats_a: TensorId,
    pub dense_feats_b: TensorId,
    pub grouping_a: PatchGrouping,
    pub grouping_b: PatchGrouping,
    pub dense_pairs: Vec<DensePair>,
    pub assignments: Vec<PatchAssignment>,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        backbone::init_params(&mut store, &cfg.backbone, seed);
        roformer::init_params(&mut store, &cfg.roformer, seed.wrapping_add(1));
        votes::init_params(
            &mut store,
            &cfg.votes,
            cfg.backbone.coarse_dim(),
            seed.wrapping_add(2),
        );
        retrieval::init_params(&mut store, &cfg.retrieval, seed.wrapping_add(3));
        store.insert("match.alpha_coarse", vec![1], vec![0.5]);
        store.insert("match.alpha_fine", vec![1], vec![0.5]);
        Ok(Model { cfg, store })
    }

    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Model> {
        cfg.validate()?;
        Ok(Model { cfg, store })
    }

    /// Keypoints and their matching descriptors for one side: voted
    /// centers with aggregated descriptors, or the coarse points directly
    /// when voting is disabled.
    fn detect(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        pyr: &Pyramid,
        enhanced: TensorId,
    ) -> Result<(Vec<[f64; 3]>, TensorId, Option<ProposalSet>)> {
        if !self.cfg.use_vote {
            return Ok((pyr.coarsest().points.clone(), enhanced, None));
        }
        let prop = votes::vote_offsets(
            g,
            &self.store,
            binding,
            enhanced,
            &pyr.coarsest().points,
            &self.cfg.votes,
        )?;
        let (centers, _) = votes::predict_centroids(&prop.positions, self.cfg.votes.centroid_d)?;
        let (kept, desc) = votes::aggregate_descriptors(
            g,
            &self.store,
            binding,
            &centers,
            &prop.positions,
            enhanced,
            &self.cfg.votes,
        )?;
        Ok((kept, desc, Some(prop)))
    }

    /// Full sparse-to-dense forward pass over a cloud pair.
    pub fn forward_pair(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        cloud_a: &PointCloud,
        cloud_b: &PointCloud,
    ) -> Result<PairOutput> {
        let pyr_a = backbone::encode(g, &self.store, binding, cloud_a, &self.cfg.backbone)?;
        let pyr_b = backbone::encode(g, &self.store, binding, cloud_b, &self.cfg.backbone)?;
        let enhanced = roformer::enhance(
            g,
            &self.store,
            binding,
            &pyr_a.coarsest().points,
            pyr_a.coarsest().feats,
            &pyr_b.coarsest().points,
            pyr_b.coarsest().feats,
            &self.cfg.roformer,
        )?;
        let (keypoints_a, desc_a, proposals_a) =
            self.detect(g, binding, &pyr_a, enhanced.feats_a)?;
        let (keypoints_b, desc_b, proposals_b) =
            self.detect(g, binding, &pyr_b, enhanced.feats_b)?;

        let dense_feats_a = backbone::decode(
            g,
            &self.store,
            binding,
            &pyr_a,
            enhanced.feats_a,
            &self.cfg.backbone,
        )?;
        let dense_feats_b = backbone::decode(
            g,
            &self.store,
            binding,
            &pyr_b,
            enhanced.feats_b,
            &self.cfg.backbone,
        )?;
        let dense_points_a = pyr_a.levels[0].points.clone();
        let dense_points_b = pyr_b.levels[0].points.clone();

        let scores = matching::score_matrix(g, desc_a, desc_b)?;
        let alpha_c = binding.param(g, &self.store, "match.alpha_coarse")?;
        let sparse_assignment = matching::sinkhorn(g, scores, alpha_c, self.cfg.sinkhorn_iters)?;
        let (sparse_pairs, _short) = matching::topk_sparse(
            g.values(sparse_assignment),
            keypoints_a.len() + 1,
            keypoints_b.len() + 1,
            self.cfg.n_c,
        )?;

        let grouping_a = matching::group_patches(&dense_points_a, &keypoints_a)?;
        let grouping_b = matching::group_patches(&dense_points_b, &keypoints_b)?;
        let alpha_f = binding.param(g, &self.store, "match.alpha_fine")?;
        let (dense_pairs, assignments) = matching::dense_match(
            g,
            &sparse_pairs,
            &grouping_a,
            &grouping_b,
            &dense_points_a,
            &dense_points_b,
            &keypoints_a,
            &keypoints_b,
            dense_feats_a,
            dense_feats_b,
            alpha_f,
            self.cfg.sinkhorn_iters,
            self.cfg.patch_cap,
        )?;

        Ok(PairOutput {
            keypoints_a,
            keypoints_b,
            desc_a,
            desc_b,
            theta_a: enhanced.theta_a,
            theta_b: enhanced.theta_b,
            proposals_a,
            proposals_b,
            sparse_assignment,
            sparse_pairs,
            dense_points_a,
            dense_points_b,
            dense_feats_a,
            dense_feats_b,
            grouping_a,
            grouping_b,
            dense_pairs,
            assignments,
        })
    }

    /// Global descriptor of one cloud: encoder coarsest features through
    /// the retrieval head. Only those two blocks are touched.
    pub fn describe(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        cloud: &PointCloud,
    ) -> Result<TensorId> {
        let pyr = backbone::encode(g, &self.store, binding, cloud, &self.cfg.backbone)?;
        Ok(retrieval::describe(
            g,
            &self.store,
            binding,
            pyr.coarsest().feats,
        )?)
    }

    /// Inference-only registration of a cloud pair.
    pub fn register(
        &self,
        cloud_a: &PointCloud,
        cloud_b: &PointCloud,
        solver: Solver,
        seed: u64,
    ) -> Result<(RegistrationResult, PairOutput)> {
        let mut g = Graph::new();
        let mut binding = Binding::with_filter(|_| false);
        let out = self.forward_pair(&mut g, &mut binding, cloud_a, cloud_b)?;
        let corr = correspondences(&out);
        let result = match solver {
            Solver::Lgr => registration::lgr(&corr, self.cfg.tau_a, self.cfg.n_r)?,
            Solver::Ransac(iterations) => {
                registration::ransac_estimate(&corr, iterations, self.cfg.tau_a, seed)?
            }
        };
        Ok((result, out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Lgr,
    Ransac(usize),
}

/// Dense pairs as weighted position correspondences for the solvers.
pub fn correspondences(out: &PairOutput) -> Vec<Correspondence> {
    out.dense_pairs
        .iter()
        .map(|p| Correspondence {
            a: out.dense_points_a[p.a],
            b: out.dense_points_b[p.b],
            weight: p.weight,
            patch: p.patch,
        })
        .collect()
}

/// Correspondence CSV: `patch_id,idxA,idxB,weight,xA,yA,zA,xB,yB,zB`.
pub fn correspondences_csv(out: &PairOutput) -> String {
    let mut s = String::from("patch_id,idxA,idxB,weight,xA,yA,zA,xB,yB,zB\n");
    for p in &out.dense_pairs {
        let a = out.dense_points_a[p.a];
        let b = out.dense_points_b[p.b];
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.patch, p.a, p.b, p.weight, a[0], a[1], a[2], b[0], b[1], b[2]
        ));
    }
    s
}

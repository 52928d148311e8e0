//! Hierarchical kernel-point-convolution encoder/decoder.
//!
//! The encoder grid-subsamples a scan into a pyramid of levels and runs one
//! kernel-point convolution per level, producing coarse keypoint features
//! at the top. The decoder walks back down with nearest-parent upsampling
//! and skip connections, yielding dense per-point features at the finest
//! subsampled level.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::{Binding, ComputeError, Graph, KpLink, ParamStore, TensorId};
use crate::geometry::{dist, grid_subsample, GeometryError, KdTree, PointCloud};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("insufficient structure: coarsest level has {got} points, need at least {need}")]
    InsufficientStructure { got: usize, need: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Fixed kernel-point arrangement: one point at the origin plus the rest on
/// a Fibonacci sphere of radius `sigma`, with linear influence
/// h(u) = max(0, 1 - u/sigma).
#[derive(Debug, Clone)]
pub struct KernelLayout {
    pub offsets: Vec<[f64; 3]>,
    pub sigma: f64,
}

impl KernelLayout {
    pub fn new(k: usize, sigma: f64) -> Result<KernelLayout> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(BackboneError::InvalidConfig(format!("sigma {sigma}")));
        }
        if k == 0 {
            return Err(BackboneError::InvalidConfig("zero kernel points".into()));
        }
        let mut offsets = vec![[0.0; 3]];
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        let m = k - 1;
        for i in 0..m {
            // evenly spread latitudes, golden-angle longitudes
            let z = if m == 1 {
                0.0
            } else {
                1.0 - 2.0 * (i as f64 + 0.5) / m as f64
            };
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            offsets.push([sigma * r * phi.cos(), sigma * r * phi.sin(), sigma * z]);
        }
        Ok(KernelLayout { offsets, sigma })
    }

    pub fn influence(&self, u: f64) -> f64 {
        (1.0 - u / self.sigma).max(0.0)
    }

    pub fn num_kernels(&self) -> usize {
        self.offsets.len()
    }
}

/// Build the sparse link table for a kernel-point convolution: for every
/// output point, every input neighbor within `sigma`, and every kernel
/// point with non-zero influence on that neighbor.
pub fn build_links(
    out_points: &[[f64; 3]],
    in_points: &[[f64; 3]],
    in_tree: &KdTree,
    layout: &KernelLayout,
) -> Vec<Vec<KpLink>> {
    let mut links = Vec::with_capacity(out_points.len());
    for p in out_points {
        let mut ls = Vec::new();
        for j in in_tree.radius(*p, layout.sigma) {
            let q = in_points[j];
            let rel = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
            for (k, o) in layout.offsets.iter().enumerate() {
                let u = dist(rel, *o);
                let h = layout.influence(u);
                if h > 0.0 {
                    ls.push(KpLink {
                        src: j as u32,
                        kernel: k as u16,
                        h,
                    });
                }
            }
        }
        links.push(ls);
    }
    links
}

/// One pyramid level: subsampled points and their per-point features.
#[derive(Debug, Clone)]
pub struct FeatureLevel {
    pub points: Vec<[f64; 3]>,
    pub feats: TensorId,
    pub cell: f64,
}

/// The full encoder output: levels ordered finest-first, with the nearest
/// parent map between adjacent levels (`parents[l][i]` is the index of
/// level-l point i's cell at level l+1).
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<FeatureLevel>,
    pub parents: Vec<Vec<usize>>,
    pub raw_to_finest: Vec<usize>,
}

impl Pyramid {
    pub fn coarsest(&self) -> &FeatureLevel {
        self.levels.last().expect("pyramid has at least one level")
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BackboneConfig {
    /// Subsampling cell of the finest level, meters; level l uses 2^l times this.
    pub base_cell: f64,
    /// Output feature width per level, finest first.
    pub widths: Vec<usize>,
    pub kernel_points: usize,
    /// Influence radius as a multiple of the level cell.
    pub sigma_factor: f64,
    /// Width of the dense decoded features.
    pub dense_dim: usize,
    /// Minimum point count at the coarsest level.
    pub min_coarse_points: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            base_cell: 0.3,
            widths: vec![32, 64, 128, 256],
            kernel_points: 15,
            sigma_factor: 1.5,
            dense_dim: 32,
            min_coarse_points: 4,
        }
    }
}

impl BackboneConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn cell(&self, level: usize) -> f64 {
        self.base_cell * (1u64 << level) as f64
    }

    pub fn sigma(&self, level: usize) -> f64 {
        self.sigma_factor * self.cell(level)
    }

    pub fn coarse_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller; good enough for initialization
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
        })
        .collect()
}

/// Register freshly initialized encoder/decoder parameters in the store.
pub fn init_params(store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.kernel_points;
    let mut din = 1usize;
    for (l, &w) in cfg.widths.iter().enumerate() {
        let rows = k * din;
        let std = (2.0 / rows as f64).sqrt();
        store.insert(
            &format!("backbone.level{}.w", l + 1),
            vec![rows, w],
            gaussian(&mut rng, rows * w, std),
        );
        din = w;
    }
    // decoder: one fusion layer per step from level l+1 down to level l
    for l in (1..cfg.levels()).rev() {
        let skip = cfg.widths[l - 1];
        let up = if l == cfg.levels() - 1 {
            cfg.coarse_dim()
        } else {
            cfg.widths[l]
        };
        let input = up + skip;
        let out = if l == 1 {
            cfg.dense_dim
        } else {
            cfg.widths[l - 1]
        };
        let std = (2.0 / input as f64).sqrt();
        store.insert(
            &format!("backbone.decode.level{}.w", l),
            vec![input, out],
            gaussian(&mut rng, input * out, std),
        );
        store.insert(
            &format!("backbone.decode.level{}.b", l),
            vec![out],
            vec![0.0; out],
        );
    }
}

/// Run the encoder: subsample into levels and convolve level by level.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    cloud: &PointCloud,
    cfg: &BackboneConfig,
) -> Result<Pyramid> {
    if cloud.is_empty() {
        return Err(BackboneError::InvalidConfig("empty cloud".into()));
    }
    // level point sets: level l+1 subsamples level l's points
    let mut level_points: Vec<Vec<[f64; 3]>> = Vec::with_capacity(cfg.levels());
    let mut parents: Vec<Vec<usize>> = Vec::new();
    let (p1, raw_to_finest) = grid_subsample(&cloud.points, cfg.cell(0))?;
    level_points.push(p1);
    for l in 1..cfg.levels() {
        let (pl, assign) = grid_subsample(&level_points[l - 1], cfg.cell(l))?;
        parents.push(assign);
        level_points.push(pl);
    }
    let coarse_n = level_points.last().unwrap().len();
    if coarse_n < cfg.min_coarse_points {
        return Err(BackboneError::InsufficientStructure {
            got: coarse_n,
            need: cfg.min_coarse_points,
        });
    }

    // unit input features; geometry enters through the kernel influences
    let n1 = level_points[0].len();
    let mut feats = g.constant(vec![1.0; n1], &[n1, 1])?;
    let mut levels = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        let layout = KernelLayout::new(cfg.kernel_points, cfg.sigma(l))?;
        let in_pts = if l == 0 {
            &level_points[0]
        } else {
            &level_points[l - 1]
        };
        let tree = KdTree::build(in_pts);
        let links = Rc::new(build_links(&level_points[l], in_pts, &tree, &layout));
        let w = binding.param(g, store, &format!("backbone.level{}.w", l + 1))?;
        let conv = g.kpconv(feats, w, links, layout.num_kernels())?;
        let normed = g.norm_rows(conv, 1e-6)?;
        feats = g.relu(normed)?;
        levels.push(FeatureLevel {
            points: level_points[l].clone(),
            feats,
            cell: cfg.cell(l),
        });
    }
    Ok(Pyramid {
        levels,
        parents,
        raw_to_finest,
    })
}

/// Run the decoder: upsample `enhanced` (coarsest-level rows) back to the
/// finest level, fusing skip features at each step.
pub fn decode(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    pyr: &Pyramid,
    enhanced: TensorId,
    _cfg: &BackboneConfig,
) -> Result<TensorId> {
    let coarse_n = pyr.coarsest().points.len();
    if g.shape(enhanced)[0] != coarse_n {
        return Err(BackboneError::InvalidConfig(format!(
            "enhanced rows {} vs coarsest level {}",
            g.shape(enhanced)[0],
            coarse_n
        )));
    }
    if pyr.levels.len() == 1 {
        // degenerate pyramid: decode is the identity on the enhanced features
        return Ok(enhanced);
    }
    let mut x = enhanced;
    for l in (1..pyr.levels.len()).rev() {
        let up = g.gather_rows(x, &pyr.parents[l - 1])?;
        let fused = g.hstack(up, pyr.levels[l - 1].feats)?;
        let w = binding.param(g, store, &format!("backbone.decode.level{}.w", l))?;
        let b = binding.param(g, store, &format!("backbone.decode.level{}.b", l))?;
        let lin = g.linear(fused, w, b)?;
        x = g.relu(lin)?;
    }
    Ok(x)
}

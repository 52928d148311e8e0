//! Rotary-position transformer blocks mixing features across a cloud pair.
//!
//! Positions are mapped to per-channel-pair rotation angles through a
//! learned linear map with no bias, so angle differences depend only on
//! relative positions. Self-attention rotates queries and keys by those
//! angles before the dot product; cross-attention between the two clouds is
//! plain (non-rotary) attention. The two clouds share block parameters.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::{Binding, ComputeError, Graph, ParamStore, TensorId};

#[derive(Debug, Error)]
pub enum RoformerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

pub type Result<T> = std::result::Result<T, RoformerError>;

#[derive(Debug, Clone, serde::Serialize)]
pub struct RoformerConfig {
    /// Feature width; must be even for the pairwise rotations.
    pub dim: usize,
    /// Number of interleaved self/cross rounds.
    pub rounds: usize,
    /// Scale attention logits by 1/sqrt(dim).
    pub scale_logits: bool,
}

impl Default for RoformerConfig {
    fn default() -> Self {
        RoformerConfig {
            dim: 256,
            rounds: 3,
            scale_logits: true,
        }
    }
}

/// Enhanced features for a pair, with the rotation angles kept around for
/// the training-time boundary penalty.
#[derive(Debug, Clone, Copy)]
pub struct Enhanced {
    pub feats_a: TensorId,
    pub feats_b: TensorId,
    pub theta_a: TensorId,
    pub theta_b: TensorId,
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

/// Register rotary-map and per-round block parameters.
pub fn init_params(store: &mut ParamStore, cfg: &RoformerConfig, seed: u64) {
    let d = cfg.dim;
    assert!(d % 2 == 0, "feature width must be even");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.insert(
        "roformer.rotary.W",
        vec![3, d / 2],
        gaussian(&mut rng, 3 * d / 2, 0.5),
    );
    let std = (1.0 / d as f64).sqrt();
    for b in 0..cfg.rounds {
        for kind in ["self", "cross"] {
            let p = format!("roformer.block{b}.{kind}");
            for name in ["wq", "wk", "wv", "wo"] {
                store.insert(
                    &format!("{p}.{name}"),
                    vec![d, d],
                    gaussian(&mut rng, d * d, std),
                );
                store.insert(
                    &format!("{p}.{}", name.replace('w', "b")),
                    vec![d],
                    vec![0.0; d],
                );
            }
            store.insert(
                &format!("{p}.ffn1.w"),
                vec![d, 2 * d],
                gaussian(&mut rng, d * 2 * d, std),
            );
            store.insert(&format!("{p}.ffn1.b"), vec![2 * d], vec![0.0; 2 * d]);
            store.insert(
                &format!("{p}.ffn2.w"),
                vec![2 * d, d],
                gaussian(&mut rng, 2 * d * d, std),
            );
            store.insert(&format!("{p}.ffn2.b"), vec![d], vec![0.0; d]);
        }
    }
}

/// theta = positions . W_rot, shape [n x d/2]. No bias, so the origin maps
/// to zero angles and theta differences are linear in position differences.
pub fn rotary_theta(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    positions: &[[f64; 3]],
) -> Result<TensorId> {
    let n = positions.len();
    let flat: Vec<f64> = positions.iter().flat_map(|p| p.iter().copied()).collect();
    let pos = g.constant(flat, &[n, 3])?;
    let w = binding.param(g, store, "roformer.rotary.W")?;
    Ok(g.matmul(pos, w)?)
}

fn attention(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    prefix: &str,
    feats_q: TensorId,
    feats_s: TensorId,
    rotary: Option<(TensorId, TensorId)>,
    cfg: &RoformerConfig,
) -> Result<TensorId> {
    let p = |g: &mut Graph, b: &mut Binding, n: &str| b.param(g, store, &format!("{prefix}.{n}"));
    let xq = g.norm_rows(feats_q, 1e-6)?;
    let xs = if feats_s == feats_q {
        xq
    } else {
        g.norm_rows(feats_s, 1e-6)?
    };
    let (wq, bq) = (p(g, binding, "wq")?, p(g, binding, "bq")?);
    let (wk, bk) = (p(g, binding, "wk")?, p(g, binding, "bk")?);
    let (wv, bv) = (p(g, binding, "wv")?, p(g, binding, "bv")?);
    let (wo, bo) = (p(g, binding, "wo")?, p(g, binding, "bo")?);
    let mut q = g.linear(xq, wq, bq)?;
    let mut k = g.linear(xs, wk, bk)?;
    let v = g.linear(xs, wv, bv)?;
    if let Some((theta_q, theta_s)) = rotary {
        q = g.rotary_apply(theta_q, q)?;
        k = g.rotary_apply(theta_s, k)?;
    }
    let kt = g.transpose(k)?;
    let mut logits = g.matmul(q, kt)?;
    if cfg.scale_logits {
        logits = g.scale(logits, 1.0 / (cfg.dim as f64).sqrt())?;
    }
    let a = g.softmax_rows(logits)?;
    let mix = g.matmul(a, v)?;
    let o = g.linear(mix, wo, bo)?;
    let y = g.add(feats_q, o)?;
    // position-wise feed-forward, pre-normalized, residual
    let yn = g.norm_rows(y, 1e-6)?;
    let (f1w, f1b) = (p(g, binding, "ffn1.w")?, p(g, binding, "ffn1.b")?);
    let (f2w, f2b) = (p(g, binding, "ffn2.w")?, p(g, binding, "ffn2.b")?);
    let h = g.linear(yn, f1w, f1b)?;
    let h = g.relu(h)?;
    let f = g.linear(h, f2w, f2b)?;
    Ok(g.add(y, f)?)
}

/// Rotary self-attention over one cloud's features.
pub fn rotary_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    block: usize,
    feats: TensorId,
    theta: TensorId,
    cfg: &RoformerConfig,
) -> Result<TensorId> {
    attention(
        g,
        store,
        binding,
        &format!("roformer.block{block}.self"),
        feats,
        feats,
        Some((theta, theta)),
        cfg,
    )
}

/// Plain cross-attention from the query cloud into the source cloud.
pub fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    block: usize,
    feats_q: TensorId,
    feats_s: TensorId,
    cfg: &RoformerConfig,
) -> Result<TensorId> {
    attention(
        g,
        store,
        binding,
        &format!("roformer.block{block}.cross"),
        feats_q,
        feats_s,
        None,
        cfg,
    )
}

/// Interleave self- and cross-attention across the pair for `cfg.rounds`
/// rounds. Both clouds run through the same parameters, and each round's
/// cross passes read the same post-self features, so swapping the argument
/// order swaps the outputs exactly.
pub fn enhance(
    g: &mut Graph,
    store: &ParamStore,
    binding: &mut Binding,
    positions_a: &[[f64; 3]],
    feats_a: TensorId,
    positions_b: &[[f64; 3]],
    feats_b: TensorId,
    cfg: &RoformerConfig,
) -> Result<Enhanced> {
    if cfg.rounds == 0 {
        return Err(RoformerError::InvalidConfig(
            "rounds must be at least 1".into(),
        ));
    }
    if g.shape(feats_a)[1] != cfg.dim || g.shape(feats_b)[1] != cfg.dim {
        return Err(RoformerError::InvalidConfig(format!(
            "feature width {} / {} vs configured {}",
            g.shape(feats_a)[1],
            g.shape(feats_b)[1],
            cfg.dim
        )));
    }
    let theta_a = rotary_theta(g, store, binding, positions_a)?;
    let theta_b = rotary_theta(g, store, binding, positions_b)?;
    let (mut fa, mut fb) = (feats_a, feats_b);
    for b in 0..cfg.rounds {
        fa = rotary_self_attention(g, store, binding, b, fa, theta_a, cfg)?;
        fb = rotary_self_attention(g, store, binding, b, fb, theta_b, cfg)?;
        let fa2 = cross_attention(g, store, binding, b, fa, fb, cfg)?;
        let fb2 = cross_attention(g, store, binding, b, fb, fa, cfg)?;
        fa = fa2;
        fb = fb2;
    }
    Ok(Enhanced {
        feats_a: fa,
        feats_b: fb,
        theta_a,
        theta_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::finite_diff_check;

    fn toy_config() -> RoformerConfig {
        RoformerConfig {
            dim: 8,
            rounds: 2,
            scale_logits: true,
        }
    }

    fn setup(seed: u64) -> (ParamStore, RoformerConfig) {
        let cfg = toy_config();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, seed);
        (store, cfg)
    }

    fn random_positions(seed: u64, n: usize) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                ]
            })
            .collect()
    }

    fn randvec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn theta_of_origin_is_zero() {
        let (store, _) = setup(1);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let th = rotary_theta(&mut g, &store, &mut b, &[[0.0; 3]]).unwrap();
        assert!(g.values(th).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn theta_differences_are_linear_in_position_differences() {
        let (store, _) = setup(2);
        let pos = random_positions(3, 6);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let th = rotary_theta(&mut g, &store, &mut b, &pos).unwrap();
        let half = g.shape(th)[1];
        let tv = g.values(th).to_vec();
        for i in 0..6 {
            for j in 0..6 {
                let rel = [
                    pos[j][0] - pos[i][0],
                    pos[j][1] - pos[i][1],
                    pos[j][2] - pos[i][2],
                ];
                let mut g2 = Graph::new();
                let mut b2 = Binding::new();
                let tr = rotary_theta(&mut g2, &store, &mut b2, &[rel]).unwrap();
                for c in 0..half {
                    let diff = tv[j * half + c] - tv[i * half + c];
                    assert!((diff - g2.values(tr)[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rotation_application_identities() {
        // zero angles: identity
        let mut g = Graph::new();
        let th = g.constant(vec![0.0; 2], &[1, 2]).unwrap();
        let x = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let y = g.rotary_apply(th, x).unwrap();
        assert_eq!(g.values(y), g.values(x));
        // quarter turn in 2D
        let mut g = Graph::new();
        let th = g
            .constant(vec![std::f64::consts::FRAC_PI_2], &[1, 1])
            .unwrap();
        let x = g.constant(vec![1.0, 0.0], &[1, 2]).unwrap();
        let y = g.rotary_apply(th, x).unwrap();
        assert!((g.values(y)[0]).abs() < 1e-15 && (g.values(y)[1] - 1.0).abs() < 1e-15);
        // inverse roundtrip and norm preservation
        let tv = randvec(5, 3);
        let xv = randvec(6, 6);
        let mut g = Graph::new();
        let th = g.constant(tv.clone(), &[1, 3]).unwrap();
        let nth = g
            .constant(tv.iter().map(|v| -v).collect(), &[1, 3])
            .unwrap();
        let x = g.constant(xv.clone(), &[1, 6]).unwrap();
        let y = g.rotary_apply(th, x).unwrap();
        let back = g.rotary_apply(nth, y).unwrap();
        for (a, b) in g.values(back).iter().zip(&xv) {
            assert!((a - b).abs() < 1e-12);
        }
        let nx: f64 = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny: f64 = g.values(y).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nx - ny).abs() < 1e-12);
    }

    #[test]
    fn relative_rotation_identity() {
        // R(ti)^T R(tj) v == R(tj - ti) v
        let ti = randvec(7, 3);
        let tj = randvec(8, 3);
        let xv = randvec(9, 6);
        let mut g = Graph::new();
        let x = g.constant(xv, &[1, 6]).unwrap();
        let tjn = g.constant(tj.clone(), &[1, 3]).unwrap();
        let tin = g
            .constant(ti.iter().map(|v| -v).collect(), &[1, 3])
            .unwrap();
        let rj = g.rotary_apply(tjn, x).unwrap();
        let lhs = g.rotary_apply(tin, rj).unwrap();
        let rel = g
            .constant(tj.iter().zip(&ti).map(|(a, b)| a - b).collect(), &[1, 3])
            .unwrap();
        let rhs = g.rotary_apply(rel, x).unwrap();
        for (a, b) in g.values(lhs).iter().zip(g.values(rhs)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Attention logits for the self-attention path, recomputed directly for
    /// comparison purposes.
    fn self_logits(
        store: &ParamStore,
        cfg: &RoformerConfig,
        pos: &[[f64; 3]],
        fv: &[f64],
    ) -> Vec<f64> {
        let n = pos.len();
        let d = cfg.dim;
        let mut g = Graph::new();
        let mut b = Binding::new();
        let feats = g.constant(fv.to_vec(), &[n, d]).unwrap();
        let theta = rotary_theta(&mut g, &store.clone(), &mut b, pos).unwrap();
        let xn = g.norm_rows(feats, 1e-6).unwrap();
        let wq = b.param(&mut g, store, "roformer.block0.self.wq").unwrap();
        let bq = b.param(&mut g, store, "roformer.block0.self.bq").unwrap();
        let wk = b.param(&mut g, store, "roformer.block0.self.wk").unwrap();
        let bk = b.param(&mut g, store, "roformer.block0.self.bk").unwrap();
        let q = g.linear(xn, wq, bq).unwrap();
        let k = g.linear(xn, wk, bk).unwrap();
        let qr = g.rotary_apply(theta, q).unwrap();
        let kr = g.rotary_apply(theta, k).unwrap();
        let kt = g.transpose(kr).unwrap();
        let logits = g.matmul(qr, kt).unwrap();
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt()).unwrap();
        g.values(logits).to_vec()
    }

    #[test]
    fn self_attention_logits_are_translation_invariant() {
        let (store, cfg) = setup(10);
        let pos = random_positions(11, 5);
        let fv = randvec(12, 5 * cfg.dim);
        let l1 = self_logits(&store, &cfg, &pos, &fv);
        let shifted: Vec<[f64; 3]> = pos
            .iter()
            .map(|p| [p[0] + 2.7, p[1] - 8.1, p[2] + 0.4])
            .collect();
        let l2 = self_logits(&store, &cfg, &shifted, &fv);
        for (a, b) in l1.iter().zip(&l2) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn coincident_positions_reduce_to_vanilla_attention() {
        let (store, cfg) = setup(13);
        let pos = vec![[1.0, -2.0, 0.5]; 4];
        let fv = randvec(14, 4 * cfg.dim);
        let rotary = self_logits(&store, &cfg, &pos, &fv);
        // vanilla: same computation without the rotations (theta differences
        // vanish, so results must agree despite the shared absolute angle)
        let n = 4;
        let d = cfg.dim;
        let mut g = Graph::new();
        let mut b = Binding::new();
        let feats = g.constant(fv.clone(), &[n, d]).unwrap();
        let xn = g.norm_rows(feats, 1e-6).unwrap();
        let wq = b.param(&mut g, &store, "roformer.block0.self.wq").unwrap();
        let bq = b.param(&mut g, &store, "roformer.block0.self.bq").unwrap();
        let wk = b.param(&mut g, &store, "roformer.block0.self.wk").unwrap();
        let bk = b.param(&mut g, &store, "roformer.block0.self.bk").unwrap();
        let q = g.linear(xn, wq, bq).unwrap();
        let k = g.linear(xn, wk, bk).unwrap();
        let kt = g.transpose(k).unwrap();
        let logits = g.matmul(q, kt).unwrap();
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt()).unwrap();
        for (a, b) in rotary.iter().zip(g.values(logits)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_logits_match_explicit_rotation_matrix() {
        // n=2 oracle: materialize the full d x d block-diagonal rotation
        // matrices and compare (R_i q_i) . (R_j k_j) against the kernel
        let (store, cfg) = setup(15);
        let pos = random_positions(16, 2);
        let fv = randvec(17, 2 * cfg.dim);
        let got = self_logits(&store, &cfg, &pos, &fv);

        let n = 2;
        let d = cfg.dim;
        let half = d / 2;
        let mut g = Graph::new();
        let mut b = Binding::new();
        let feats = g.constant(fv.clone(), &[n, d]).unwrap();
        let theta = rotary_theta(&mut g, &store, &mut b, &pos).unwrap();
        let tv = g.values(theta).to_vec();
        let xn = g.norm_rows(feats, 1e-6).unwrap();
        let wq = b.param(&mut g, &store, "roformer.block0.self.wq").unwrap();
        let bq = b.param(&mut g, &store, "roformer.block0.self.bq").unwrap();
        let wk = b.param(&mut g, &store, "roformer.block0.self.wk").unwrap();
        let bk = b.param(&mut g, &store, "roformer.block0.self.bk").unwrap();
        let q = g.linear(xn, wq, bq).unwrap();
        let k = g.linear(xn, wk, bk).unwrap();
        let qv = g.values(q).to_vec();
        let kv = g.values(k).to_vec();
        let rot = |row: usize, x: &[f64]| -> Vec<f64> {
            let mut m = vec![0.0; d * d];
            for c in 0..half {
                let (s, co) = tv[row * half + c].sin_cos();
                m[(2 * c) * d + 2 * c] = co;
                m[(2 * c) * d + 2 * c + 1] = -s;
                m[(2 * c + 1) * d + 2 * c] = s;
                m[(2 * c + 1) * d + 2 * c + 1] = co;
            }
            (0..d)
                .map(|r| (0..d).map(|c| m[r * d + c] * x[c]).sum())
                .collect()
        };
        for i in 0..n {
            for j in 0..n {
                let rq = rot(i, &qv[i * d..(i + 1) * d]);
                let rk = rot(j, &kv[j * d..(j + 1) * d]);
                let want: f64 =
                    rq.iter().zip(&rk).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                assert!(
                    (got[i * n + j] - want).abs() < 1e-10,
                    "{} vs {}",
                    got[i * n + j],
                    want
                );
            }
        }
    }

    #[test]
    fn cross_attention_single_source_point() {
        let (store, cfg) = setup(18);
        let d = cfg.dim;
        let mut g = Graph::new();
        let mut b = Binding::new();
        let fq = g.constant(randvec(19, 3 * d), &[3, d]).unwrap();
        let fs = g.constant(randvec(20, d), &[1, d]).unwrap();
        let out = cross_attention(&mut g, &store, &mut b, 0, fq, fs, &cfg).unwrap();
        // with one source point the attention mix equals that point's value
        // row for every query; verify via a second pass with two copies of
        // the source point, which must give the identical result
        let fs2v: Vec<f64> = g.values(fs).iter().chain(g.values(fs)).copied().collect();
        let fs2 = g.constant(fs2v, &[2, d]).unwrap();
        let out2 = cross_attention(&mut g, &store, &mut b, 0, fq, fs2, &cfg).unwrap();
        for (a, b) in g.values(out).iter().zip(g.values(out2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_zero_source_adds_nothing() {
        // zero-initialized biases mean a zero source contributes exactly the
        // feed-forward of the residual input
        let (store, cfg) = setup(21);
        let d = cfg.dim;
        let mut g = Graph::new();
        let mut b = Binding::new();
        let fqv = randvec(22, 2 * d);
        let fq = g.constant(fqv.clone(), &[2, d]).unwrap();
        let fs = g.constant(vec![0.0; 3 * d], &[3, d]).unwrap();
        let out = cross_attention(&mut g, &store, &mut b, 0, fq, fs, &cfg).unwrap();
        // replicate: y = fq (attention output is zero), out = y + ffn(norm(y))
        let y = fq;
        let yn = g.norm_rows(y, 1e-6).unwrap();
        let f1w = b
            .param(&mut g, &store, "roformer.block0.cross.ffn1.w")
            .unwrap();
        let f1b = b
            .param(&mut g, &store, "roformer.block0.cross.ffn1.b")
            .unwrap();
        let f2w = b
            .param(&mut g, &store, "roformer.block0.cross.ffn2.w")
            .unwrap();
        let f2b = b
            .param(&mut g, &store, "roformer.block0.cross.ffn2.b")
            .unwrap();
        let h = g.linear(yn, f1w, f1b).unwrap();
        let h = g.relu(h).unwrap();
        let f = g.linear(h, f2w, f2b).unwrap();
        let want = g.add(y, f).unwrap();
        for (a, b) in g.values(out).iter().zip(g.values(want)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_matches_direct_formula() {
        let (store, cfg) = setup(23);
        let d = cfg.dim;
        let mut g = Graph::new();
        let mut b = Binding::new();
        let fqv = randvec(24, 3 * d);
        let fsv = randvec(25, 4 * d);
        let fq = g.constant(fqv.clone(), &[3, d]).unwrap();
        let fs = g.constant(fsv.clone(), &[4, d]).unwrap();
        let out = cross_attention(&mut g, &store, &mut b, 0, fq, fs, &cfg).unwrap();

        // independent oracle: softmax(QK^T/sqrt(d)) V through plain slices
        let get = |n: &str| store.get(n).unwrap().1.to_vec();
        let norm = |x: &[f64], rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for i in 0..rows {
                let row = &x[i * d..(i + 1) * d];
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let s = (var + 1e-6).sqrt();
                for c in 0..d {
                    out[i * d + c] = (row[c] - mu) / s;
                }
            }
            out
        };
        let lin = |x: &[f64], rows: usize, w: &[f64], bias: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            for i in 0..rows {
                for c in 0..d {
                    let mut acc = bias[c];
                    for a in 0..d {
                        acc += x[i * d + a] * w[a * d + c];
                    }
                    out[i * d + c] = acc;
                }
            }
            out
        };
        let xq = norm(&fqv, 3);
        let xs = norm(&fsv, 4);
        let p = "roformer.block0.cross";
        let q = lin(&xq, 3, &get(&format!("{p}.wq")), &get(&format!("{p}.bq")));
        let k = lin(&xs, 4, &get(&format!("{p}.wk")), &get(&format!("{p}.bk")));
        let v = lin(&xs, 4, &get(&format!("{p}.wv")), &get(&format!("{p}.bv")));
        let mut mix = vec![0.0; 3 * d];
        for i in 0..3 {
            let mut logit = vec![0.0; 4];
            for j in 0..4 {
                logit[j] =
                    (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt();
            }
            let mx = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let den: f64 = logit.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..4 {
                let a = (logit[j] - mx).exp() / den;
                for c in 0..d {
                    mix[i * d + c] += a * v[j * d + c];
                }
            }
        }
        let o = lin(&mix, 3, &get(&format!("{p}.wo")), &get(&format!("{p}.bo")));
        let y: Vec<f64> = fqv.iter().zip(&o).map(|(a, b)| a + b).collect();
        let yn = norm(&y, 3);
        // ffn widths differ, inline it
        let f1w = get(&format!("{p}.ffn1.w"));
        let f1b = get(&format!("{p}.ffn1.b"));
        let f2w = get(&format!("{p}.ffn2.w"));
        let f2b = get(&format!("{p}.ffn2.b"));
        let mut want = y.clone();
        for i in 0..3 {
            let mut h = vec![0.0; 2 * d];
            for c in 0..2 * d {
                let mut acc = f1b[c];
                for a in 0..d {
                    acc += yn[i * d + a] * f1w[a * 2 * d + c];
                }
                h[c] = acc.max(0.0);
            }
            for c in 0..d {
                let mut acc = f2b[c];
                for a in 0..2 * d {
                    acc += h[a] * f2w[a * d + c];
                }
                want[i * d + c] += acc;
            }
        }
        for (a, b) in g.values(out).iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn enhance_swapping_inputs_swaps_outputs() {
        let (store, cfg) = setup(26);
        let pa = random_positions(27, 5);
        let pb = random_positions(28, 7);
        let fav = randvec(29, 5 * cfg.dim);
        let fbv = randvec(30, 7 * cfg.dim);
        let run = |first_a: bool| {
            let mut g = Graph::new();
            let mut b = Binding::new();
            let fa = g.constant(fav.clone(), &[5, cfg.dim]).unwrap();
            let fb = g.constant(fbv.clone(), &[7, cfg.dim]).unwrap();
            let e = if first_a {
                enhance(&mut g, &store, &mut b, &pa, fa, &pb, fb, &cfg).unwrap()
            } else {
                enhance(&mut g, &store, &mut b, &pb, fb, &pa, fa, &cfg).unwrap()
            };
            (g.values(e.feats_a).to_vec(), g.values(e.feats_b).to_vec())
        };
        let (a1, b1) = run(true);
        let (b2, a2) = run(false);
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn enhance_preserves_feature_width() {
        let (store, cfg) = setup(31);
        let mut g = Graph::new();
        let mut b = Binding::new();
        let fa = g.constant(randvec(32, 4 * cfg.dim), &[4, cfg.dim]).unwrap();
        let fb = g.constant(randvec(33, 6 * cfg.dim), &[6, cfg.dim]).unwrap();
        let e = enhance(
            &mut g,
            &store,
            &mut b,
            &random_positions(34, 4),
            fa,
            &random_positions(35, 6),
            fb,
            &cfg,
        )
        .unwrap();
        assert_eq!(g.shape(e.feats_a), &[4, cfg.dim]);
        assert_eq!(g.shape(e.feats_b), &[6, cfg.dim]);
    }

    #[test]
    fn enhance_gradient_matches_finite_differences() {
        let (store, cfg) = setup(36);
        let pa = random_positions(37, 3);
        let pb = random_positions(38, 4);
        let fa0 = randvec(39, 3 * cfg.dim);
        let fbv = randvec(40, 4 * cfg.dim);
        let oracle_err = |e: RoformerError| ComputeError::Oracle(e.to_string());
        let err = finite_diff_check(
            |g, fa| {
                let mut b = Binding::with_filter(|_| false);
                let fb = g.constant(fbv.clone(), &[4, cfg.dim])?;
                let e = enhance(g, &store, &mut b, &pa, fa, &pb, fb, &cfg).map_err(oracle_err)?;
                let pa2 = g.mul(e.feats_a, e.feats_a)?;
                let pb2 = g.mul(e.feats_b, e.feats_b)?;
                let sa = g.sum(pa2)?;
                let sb = g.sum(pb2)?;
                let t = g.add(sa, sb)?;
                g.tanh(t)
            },
            &fa0,
            &[3, cfg.dim],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}

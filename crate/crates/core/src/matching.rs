//! Sparse-to-dense correspondence search: optimal-transport keypoint
//! matching with a dustbin, point-to-node patch grouping, and per-patch
//! dense assignment by row/column maxima.

use thiserror::Error;

use crate::compute::{ComputeError, Graph, TensorId};
use crate::geometry::dist;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no matches: every patch pair emptied into the dustbin")]
    NoMatches,
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

pub type Result<T> = std::result::Result<T, MatchError>;

/// A sparse keypoint correspondence (indices into the two keypoint sets)
/// with its assignment score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePair {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

/// A dense point correspondence with its soft-assignment weight and the
/// sparse pair it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensePair {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
    pub patch: usize,
}

/// Point-to-node partition of dense points over keypoints.
#[derive(Debug, Clone)]
pub struct PatchGrouping {
    /// Per keypoint, the member dense-point indices in ascending order.
    pub members: Vec<Vec<usize>>,
    /// Per dense point, its keypoint index.
    pub point_to_patch: Vec<usize>,
}

/// The per-patch-pair soft assignment retained for training losses.
#[derive(Debug, Clone)]
pub struct PatchAssignment {
    /// Index into the sparse pair list.
    pub pair_index: usize,
    /// Dense-point indices of the rows (cloud A) and columns (cloud B).
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    /// Log-domain assignment including the dustbin line, [(m+1) x (n+1)].
    pub z: TensorId,
}

/// C = Ha Hb^T / sqrt(d_c).
pub fn score_matrix(g: &mut Graph, ha: TensorId, hb: TensorId) -> Result<TensorId> {
    let d = g.shape(ha)[1];
    if g.shape(hb)[1] != d {
        return Err(MatchError::InvalidInput(format!(
            "feature widths {} vs {}",
            d,
            g.shape(hb)[1]
        )));
    }
    let hbt = g.transpose(hb)?;
    let c = g.matmul(ha, hbt)?;
    Ok(g.scale(c, 1.0 / (d as f64).sqrt())?)
}

/// Dustbin-augmented Sinkhorn normalization in the log domain: append the
/// dustbin row/column filled with `alpha`, then alternate row and column
/// log-sum-exp subtraction for `t` iterations. Returns the augmented
/// log-domain assignment.
pub fn sinkhorn(g: &mut Graph, scores: TensorId, alpha: TensorId, t: usize) -> Result<TensorId> {
    if t == 0 {
        return Err(MatchError::InvalidInput(
            "at least one iteration required".into(),
        ));
    }
    let mut c = g.pad_dustbin(scores, alpha)?;
    for _ in 0..t {
        let row_lse = g.log_sum_exp_rows(c)?;
        c = g.sub_col_vec(c, row_lse)?;
        let ct = g.transpose(c)?;
        let col_lse = g.log_sum_exp_rows(ct)?;
        let ct = g.sub_col_vec(ct, col_lse)?;
        c = g.transpose(ct)?;
    }
    Ok(c)
}

/// The `n_c` largest interior (non-dustbin) entries of the augmented
/// assignment, ties broken by (row, col) order. The boolean is true when
/// fewer interior entries than requested exist.
pub fn topk_sparse(
    z: &[f64],
    rows: usize,
    cols: usize,
    n_c: usize,
) -> Result<(Vec<SparsePair>, bool)> {
    if n_c == 0 {
        return Err(MatchError::InvalidInput("n_c must be at least 1".into()));
    }
    if z.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(MatchError::InvalidInput(format!(
            "{rows}x{cols} vs {} values",
            z.len()
        )));
    }
    let (ir, ic) = (rows - 1, cols - 1);
    let mut entries: Vec<SparsePair> = Vec::with_capacity(ir * ic);
    for i in 0..ir {
        for j in 0..ic {
            entries.push(SparsePair {
                a: i,
                b: j,
                score: z[i * cols + j],
            });
        }
    }
    entries.sort_by(|x, y| {
        y.score
            .partial_cmp(&x.score)
            .unwrap()
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
    let flagged = entries.len() < n_c;
    entries.truncate(n_c);
    Ok((entries, flagged))
}

/// Assign every dense point to its nearest keypoint (ties toward the lower
/// keypoint id). Empty patches are permitted.
pub fn group_patches(points: &[[f64; 3]], keypoints: &[[f64; 3]]) -> Result<PatchGrouping> {
    if keypoints.is_empty() {
        return Err(MatchError::InvalidInput("no keypoints".into()));
    }
    let mut members = vec![Vec::new(); keypoints.len()];
    let mut point_to_patch = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, s) in keypoints.iter().enumerate() {
            let d = dist(*p, *s);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        members[best].push(i);
        point_to_patch.push(best);
    }
    Ok(PatchGrouping {
        members,
        point_to_patch,
    })
}

/// Truncate a patch to its `cap` members closest to the keypoint (distance
/// ties toward the lower point index).
fn capped_members(
    members: &[usize],
    points: &[[f64; 3]],
    keypoint: [f64; 3],
    cap: usize,
) -> Vec<usize> {
    if members.len() <= cap {
        return members.to_vec();
    }
    let mut ranked: Vec<usize> = members.to_vec();
    ranked.sort_by(|&a, &b| {
        dist(points[a], keypoint)
            .partial_cmp(&dist(points[b], keypoint))
            .unwrap()
            .then(a.cmp(&b))
    });
    ranked.truncate(cap);
    ranked.sort_unstable();
    ranked
}

/// Per matched patch pair, run dustbin-augmented Sinkhorn on the dense
/// feature similarities and keep the row-wise and column-wise maxima that
/// do not land in the dustbin. Duplicated (a, b) pairs keep the larger
/// weight. Also returns the per-patch assignments for training.
#[allow(clippy::too_many_arguments)]
pub fn dense_match(
    g: &mut Graph,
    sparse: &[SparsePair],
    grouping_a: &PatchGrouping,
    grouping_b: &PatchGrouping,
    points_a: &[[f64; 3]],
    points_b: &[[f64; 3]],
    keypoints_a: &[[f64; 3]],
    keypoints_b: &[[f64; 3]],
    feats_a: TensorId,
    feats_b: TensorId,
    alpha: TensorId,
    t: usize,
    patch_cap: usize,
) -> Result<(Vec<DensePair>, Vec<PatchAssignment>)> {
    let mut pairs: Vec<DensePair> = Vec::new();
    let mut assignments = Vec::new();
    for (pi, sp) in sparse.iter().enumerate() {
        let rows = capped_members(
            &grouping_a.members[sp.a],
            points_a,
            keypoints_a[sp.a],
            patch_cap,
        );
        let cols = capped_members(
            &grouping_b.members[sp.b],
            points_b,
            keypoints_b[sp.b],
            patch_cap,
        );
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let fa = g.gather_rows(feats_a, &rows)?;
        let fb = g.gather_rows(feats_b, &cols)?;
        let o = score_matrix(g, fa, fb)?;
        let z = sinkhorn(g, o, alpha, t)?;
        let (m, n) = (rows.len(), cols.len());
        let zv = g.values(z);
        let width = n + 1;
        // row-wise maxima over interior rows (dustbin column included)
        for r in 0..m {
            let row = &zv[r * width..r * width + width];
            let mut best = 0usize;
            for c in 1..width {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best < n {
                pairs.push(DensePair {
                    a: rows[r],
                    b: cols[best],
                    weight: row[best].exp(),
                    patch: pi,
                });
            }
        }
        // column-wise maxima over interior columns (dustbin row included)
        for c in 0..n {
            let mut best = 0usize;
            for r in 1..=m {
                if zv[r * width + c] > zv[best * width + c] {
                    best = r;
                }
            }
            if best < m {
                pairs.push(DensePair {
                    a: rows[best],
                    b: cols[c],
                    weight: zv[best * width + c].exp(),
                    patch: pi,
                });
            }
        }
        assignments.push(PatchAssignment {
            pair_index: pi,
            rows,
            cols,
            z,
        });
    }
    // merge duplicates keeping the larger weight, deterministic order
    pairs.sort_by(|x, y| {
        (x.a, x.b, x.patch)
            .cmp(&(y.a, y.b, y.patch))
            .then(y.weight.partial_cmp(&x.weight).unwrap())
    });
    pairs.dedup_by(|b, a| a.a == b.a && a.b == b.b && a.patch == b.patch);
    if pairs.is_empty() {
        return Err(MatchError::NoMatches);
    }
    Ok((pairs, assignments))
}

/// Max interior row/column log-sum-exp residual of an augmented assignment
/// (how far the interior lines are from stochasticity).
pub fn interior_residual(z: &[f64], rows: usize, cols: usize) -> f64 {
    let lse = |vals: Vec<f64>| -> f64 {
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };
    let mut worst = 0.0f64;
    for i in 0..rows - 1 {
        let row: Vec<f64> = (0..cols).map(|j| z[i * cols + j]).collect();
        worst = worst.max(lse(row).abs());
    }
    for j in 0..cols - 1 {
        let col: Vec<f64> = (0..rows).map(|i| z[i * cols + j]).collect();
        worst = worst.max(lse(col).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randvec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn score_matrix_zero_and_direct_loop() {
        let mut g = Graph::new();
        let ha = g.constant(randvec(1, 12), &[3, 4]).unwrap();
        let zero = g.constant(vec![0.0; 8], &[2, 4]).unwrap();
        let c = score_matrix(&mut g, ha, zero).unwrap();
        assert!(g.values(c).iter().all(|&v| v == 0.0));

        let hbv = randvec(2, 16);
        let hav = g.values(ha).to_vec();
        let hb = g.constant(hbv.clone(), &[4, 4]).unwrap();
        let c = score_matrix(&mut g, ha, hb).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..4).map(|a| hav[i * 4 + a] * hbv[j * 4 + a]).sum::<f64>() / 2.0;
                assert!((g.values(c)[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_matrix_transpose_symmetry() {
        let mut g = Graph::new();
        let ha = g.constant(randvec(3, 12), &[3, 4]).unwrap();
        let hb = g.constant(randvec(4, 20), &[5, 4]).unwrap();
        let cab = score_matrix(&mut g, ha, hb).unwrap();
        let cba = score_matrix(&mut g, hb, ha).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(
                    g.values(cab)[i * 5 + j].to_bits(),
                    g.values(cba)[j * 3 + i].to_bits()
                );
            }
        }
    }

    #[test]
    fn sinkhorn_dominant_interior_entry_takes_the_mass() {
        let mut g = Graph::new();
        let s = g.constant(vec![20.0], &[1, 1]).unwrap();
        let a = g.constant(vec![0.0], &[1]).unwrap();
        let z50 = sinkhorn(&mut g, s, a, 50).unwrap();
        let m50 = g.values(z50)[0].exp();
        let z500 = sinkhorn(&mut g, s, a, 500).unwrap();
        let m500 = g.values(z500)[0].exp();
        assert!(m50 > 0.98, "interior mass {m50}");
        assert!(m500 > m50 && m500 > 0.999, "interior mass {m50} -> {m500}");
    }

    #[test]
    fn sinkhorn_is_permutation_equivariant() {
        let mut g = Graph::new();
        let sv = randvec(5, 12);
        let s = g.constant(sv.clone(), &[3, 4]).unwrap();
        let alpha = g.constant(vec![0.3], &[1]).unwrap();
        let z = sinkhorn(&mut g, s, alpha, 10).unwrap();
        // permute rows (2, 0, 1) of the input
        let perm = [2usize, 0, 1];
        let pv: Vec<f64> = perm
            .iter()
            .flat_map(|&r| sv[r * 4..(r + 1) * 4].to_vec())
            .collect();
        let sp = g.constant(pv, &[3, 4]).unwrap();
        let zp = sinkhorn(&mut g, sp, alpha, 10).unwrap();
        for (out_r, &in_r) in perm.iter().enumerate() {
            for c in 0..5 {
                assert_eq!(
                    g.values(zp)[out_r * 5 + c].to_bits(),
                    g.values(z)[in_r * 5 + c].to_bits()
                );
            }
        }
        // dustbin row stays in place
        for c in 0..5 {
            assert_eq!(
                g.values(zp)[3 * 5 + c].to_bits(),
                g.values(z)[3 * 5 + c].to_bits()
            );
        }
    }

    /// Independent transcription: dense matrices, explicit exp/log cycles.
    fn sinkhorn_oracle(scores: &[f64], m: usize, n: usize, alpha: f64, t: usize) -> Vec<f64> {
        let (rm, rn) = (m + 1, n + 1);
        let mut c = vec![alpha; rm * rn];
        for i in 0..m {
            for j in 0..n {
                c[i * rn + j] = scores[i * n + j];
            }
        }
        for _ in 0..t {
            for i in 0..rm {
                let mx = (0..rn)
                    .map(|j| c[i * rn + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = mx
                    + (0..rn)
                        .map(|j| (c[i * rn + j] - mx).exp())
                        .sum::<f64>()
                        .ln();
                for j in 0..rn {
                    c[i * rn + j] -= lse;
                }
            }
            for j in 0..rn {
                let mx = (0..rm)
                    .map(|i| c[i * rn + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = mx
                    + (0..rm)
                        .map(|i| (c[i * rn + j] - mx).exp())
                        .sum::<f64>()
                        .ln();
                for i in 0..rm {
                    c[i * rn + j] -= lse;
                }
            }
        }
        c
    }

    #[test]
    fn sinkhorn_matches_independent_transcription() {
        let sv = randvec(6, 20);
        let mut g = Graph::new();
        let s = g.constant(sv.clone(), &[4, 5]).unwrap();
        let alpha = g.constant(vec![-0.7], &[1]).unwrap();
        let z = sinkhorn(&mut g, s, alpha, 20).unwrap();
        let want = sinkhorn_oracle(&sv, 4, 5, -0.7, 20);
        for (a, b) in g.values(z).iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn sinkhorn_interior_residual_shrinks_with_iterations() {
        let sv = randvec(7, 64);
        let mut res = Vec::new();
        for t in [1, 5, 20, 100] {
            let mut g = Graph::new();
            let s = g.constant(sv.clone(), &[8, 8]).unwrap();
            let alpha = g.constant(vec![0.1], &[1]).unwrap();
            let z = sinkhorn(&mut g, s, alpha, t).unwrap();
            res.push(interior_residual(g.values(z), 9, 9));
        }
        assert!(
            res[1] <= res[0] && res[2] <= res[1] && res[3] <= res[2],
            "{res:?}"
        );
        assert!(res[3] <= 1e-6, "T=100 residual {}", res[3]);
    }

    #[test]
    fn sinkhorn_gradients_match_finite_differences() {
        let sv = randvec(8, 6);
        let err = crate::compute::finite_diff_check(
            |g, s| {
                let alpha = g.leaf(vec![0.2], &[1], false)?;
                let z =
                    sinkhorn(g, s, alpha, 5).map_err(|e| ComputeError::Oracle(e.to_string()))?;
                let e = g.exp(z)?;
                let w = g.mul(e, e)?;
                g.sum(w)
            },
            &sv,
            &[2, 3],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "wrt scores err = {err}");
        let sv2 = sv.clone();
        let err = crate::compute::finite_diff_check(
            |g, alpha| {
                let s = g.constant(sv2.clone(), &[2, 3])?;
                let a = g.reshape(alpha, &[1])?;
                let z = sinkhorn(g, s, a, 5).map_err(|e| ComputeError::Oracle(e.to_string()))?;
                let e = g.exp(z)?;
                let w = g.mul(e, e)?;
                g.sum(w)
            },
            &[0.2],
            &[1],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "wrt alpha err = {err}");
    }

    #[test]
    fn topk_dominant_uniform_and_fewer_cases() {
        // single dominant interior entry
        let z = vec![0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (top, flagged) = topk_sparse(&z, 3, 3, 1).unwrap();
        assert!(!flagged);
        assert_eq!(
            top,
            vec![SparsePair {
                a: 0,
                b: 1,
                score: 5.0
            }]
        );
        // uniform: lexicographic tie-break
        let z = vec![1.0; 9];
        let (top, _) = topk_sparse(&z, 3, 3, 3).unwrap();
        assert_eq!(
            top.iter().map(|p| (p.a, p.b)).collect::<Vec<_>>(),
            vec![(0, 0), (0, 1), (1, 0)]
        );
        // fewer interior entries than requested
        let (top, flagged) = topk_sparse(&z, 3, 3, 10).unwrap();
        assert!(flagged);
        assert_eq!(top.len(), 4);
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let z = randvec(9, 49);
        let (got, _) = topk_sparse(&z, 7, 7, 8).unwrap();
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                all.push((z[i * 7 + j], i, j));
            }
        }
        all.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        for (g, w) in got.iter().zip(all.iter().take(8)) {
            assert_eq!((g.a, g.b), (w.1, w.2));
        }
    }

    #[test]
    fn grouping_single_keypoint_and_tie_rule() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let grouping = group_patches(&pts, &[[5.0, 0.0, 0.0]]).unwrap();
        assert_eq!(grouping.members[0], vec![0, 1]);
        // equidistant point between keypoints 0 and 1 goes to 0
        let grouping = group_patches(&[[0.5, 0.0, 0.0]], &[[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(grouping.point_to_patch, vec![0]);
    }

    #[test]
    fn grouping_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                ]
            })
            .collect();
        let kps: Vec<[f64; 3]> = (0..20)
            .map(|_| {
                [
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                ]
            })
            .collect();
        let grouping = group_patches(&pts, &kps).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let want = (0..20)
                .min_by(|&a, &b| dist(*p, kps[a]).partial_cmp(&dist(*p, kps[b])).unwrap())
                .unwrap();
            assert_eq!(grouping.point_to_patch[i], want);
        }
    }

    fn one_hot_feats(g: &mut Graph, rows: &[usize], dim: usize, n: usize, scale: f64) -> TensorId {
        let mut v = vec![0.0; n * dim];
        for (i, &r) in rows.iter().enumerate() {
            v[i * dim + r % dim] = scale;
        }
        g.constant(v, &[n, dim]).unwrap()
    }

    #[test]
    fn dense_match_identical_points_dedupe() {
        let mut g = Graph::new();
        let pa = vec![[0.0; 3]];
        let pb = vec![[0.0; 3]];
        let ka = vec![[0.0; 3]];
        let kb = vec![[0.0; 3]];
        let ga = group_patches(&pa, &ka).unwrap();
        let gb = group_patches(&pb, &kb).unwrap();
        let fa = one_hot_feats(&mut g, &[0], 4, 1, 10.0);
        let fb = one_hot_feats(&mut g, &[0], 4, 1, 10.0);
        let alpha = g.constant(vec![0.0], &[1]).unwrap();
        let sparse = vec![SparsePair {
            a: 0,
            b: 0,
            score: 1.0,
        }];
        let (pairs, assigns) = dense_match(
            &mut g, &sparse, &ga, &gb, &pa, &pb, &ka, &kb, fa, fb, alpha, 30, 64,
        )
        .unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].a, pairs[0].b), (0, 0));
        assert!(pairs[0].weight > 0.0 && pairs[0].weight <= 1.0);
        assert_eq!(assigns.len(), 1);
    }

    #[test]
    fn dense_match_dustbin_swallows_weak_rows() {
        // two A points, one B point; A point 1 has no feature affinity so
        // its row max falls into the dustbin
        let mut g = Graph::new();
        let pa = vec![[0.0; 3], [0.5, 0.0, 0.0]];
        let pb = vec![[0.0; 3]];
        let ka = vec![[0.0; 3]];
        let kb = vec![[0.0; 3]];
        let ga = group_patches(&pa, &ka).unwrap();
        let gb = group_patches(&pb, &kb).unwrap();
        let fav = vec![10.0, 0.0, -30.0, 0.0];
        let fa = g.constant(fav, &[2, 2]).unwrap();
        let fb = g.constant(vec![10.0, 0.0], &[1, 2]).unwrap();
        let alpha = g.constant(vec![0.0], &[1]).unwrap();
        let sparse = vec![SparsePair {
            a: 0,
            b: 0,
            score: 1.0,
        }];
        let (pairs, _) = dense_match(
            &mut g, &sparse, &ga, &gb, &pa, &pb, &ka, &kb, fa, fb, alpha, 30, 64,
        )
        .unwrap();
        assert!(pairs.iter().all(|p| p.a == 0), "{pairs:?}");
    }

    #[test]
    fn dense_match_agrees_with_enumerated_union_rule() {
        // two patches on each side with random features; enumerate the
        // row/column-max union directly from the assignment tensors
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pa: Vec<[f64; 3]> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
        let pb: Vec<[f64; 3]> = (0..6).map(|i| [i as f64 + 0.1, 0.0, 0.0]).collect();
        let ka = vec![[1.0, 0.0, 0.0], [4.0, 0.0, 0.0]];
        let kb = vec![[1.1, 0.0, 0.0], [4.1, 0.0, 0.0]];
        let ga = group_patches(&pa, &ka).unwrap();
        let gb = group_patches(&pb, &kb).unwrap();
        let mut g = Graph::new();
        let fa = g
            .constant(
                (0..6 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                &[6, 3],
            )
            .unwrap();
        let fb = g
            .constant(
                (0..6 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                &[6, 3],
            )
            .unwrap();
        let alpha = g.constant(vec![0.1], &[1]).unwrap();
        let sparse = vec![
            SparsePair {
                a: 0,
                b: 0,
                score: 1.0,
            },
            SparsePair {
                a: 1,
                b: 1,
                score: 0.9,
            },
        ];
        let (pairs, assigns) = dense_match(
            &mut g, &sparse, &ga, &gb, &pa, &pb, &ka, &kb, fa, fb, alpha, 30, 64,
        )
        .unwrap();
        let mut want: Vec<DensePair> = Vec::new();
        for asn in &assigns {
            let (m, n) = (asn.rows.len(), asn.cols.len());
            let zv = g.values(asn.z);
            let w = n + 1;
            for r in 0..m {
                let best = (0..=n)
                    .max_by(|&a, &b| zv[r * w + a].partial_cmp(&zv[r * w + b]).unwrap())
                    .unwrap();
                if best < n {
                    want.push(DensePair {
                        a: asn.rows[r],
                        b: asn.cols[best],
                        weight: zv[r * w + best].exp(),
                        patch: asn.pair_index,
                    });
                }
            }
            for c in 0..n {
                let best = (0..=m)
                    .max_by(|&a, &b| zv[a * w + c].partial_cmp(&zv[b * w + c]).unwrap())
                    .unwrap();
                if best < m {
                    want.push(DensePair {
                        a: asn.rows[best],
                        b: asn.cols[c],
                        weight: zv[best * w + c].exp(),
                        patch: asn.pair_index,
                    });
                }
            }
        }
        want.sort_by(|x, y| {
            (x.a, x.b, x.patch)
                .cmp(&(y.a, y.b, y.patch))
                .then(y.weight.partial_cmp(&x.weight).unwrap())
        });
        want.dedup_by(|b, a| a.a == b.a && a.b == b.b && a.patch == b.patch);
        assert_eq!(pairs.len(), want.len());
        for (p, q) in pairs.iter().zip(&want) {
            assert_eq!((p.a, p.b, p.patch), (q.a, q.b, q.patch));
            assert!((p.weight - q.weight).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_match_respects_patch_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pa: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let pb = pa.clone();
        let ka = vec![[0.0; 3]];
        let kb = vec![[0.0; 3]];
        let ga = group_patches(&pa, &ka).unwrap();
        let gb = group_patches(&pb, &kb).unwrap();
        let mut g = Graph::new();
        let fa = g
            .constant(
                (0..10 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[10, 2],
            )
            .unwrap();
        let fb = g
            .constant(
                (0..10 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                &[10, 2],
            )
            .unwrap();
        let alpha = g.constant(vec![0.0], &[1]).unwrap();
        let sparse = vec![SparsePair {
            a: 0,
            b: 0,
            score: 1.0,
        }];
        let (_, assigns) = dense_match(
            &mut g, &sparse, &ga, &gb, &pa, &pb, &ka, &kb, fa, fb, alpha, 10, 4,
        )
        .unwrap();
        assert_eq!(assigns[0].rows, vec![0, 1, 2, 3]);
        assert_eq!(assigns[0].cols, vec![0, 1, 2, 3]);
    }
}

//! Pose solvers — weighted SVD, local-to-global registration (LGR), a
//! RANSAC baseline — and the registration / match-quality metric suites.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{dist, GeometryError, KdTree, RigidTransform};
use crate::matching::PatchGrouping;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("registration failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, RegistrationError>;

/// A weighted dense point correspondence carrying the patch it came from.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub weight: f64,
    pub patch: usize,
}

/// Where the winning hypothesis came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Direct,
    Patch(usize),
    RansacTrial(usize),
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inliers: usize,
    pub provenance: Provenance,
    pub solver: &'static str,
    pub seconds: f64,
}

/// Point- and patch-level correspondence quality ratios. `None` marks an
/// undefined ratio (zero denominator), never silently zero.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MatchQualityReport {
    pub ir: Option<f64>,
    pub mr: Option<f64>,
    pub hr: Option<f64>,
    pub pir: Option<f64>,
    pub pmr: Option<f64>,
    pub phr: Option<f64>,
}

/// Closed-form weighted rigid alignment: weighted centroids, weighted
/// cross-covariance, SVD with determinant correction.
pub fn weighted_svd(pairs: &[Correspondence]) -> Result<RigidTransform> {
    if pairs.len() < 3 {
        return Err(RegistrationError::InvalidInput(format!(
            "{} pairs, need at least 3",
            pairs.len()
        )));
    }
    if pairs
        .iter()
        .any(|p| p.weight < 0.0 || !p.weight.is_finite())
    {
        return Err(RegistrationError::InvalidInput(
            "weights must be finite and non-negative".into(),
        ));
    }
    let wsum: f64 = pairs.iter().map(|p| p.weight).sum();
    if wsum <= 0.0 {
        return Err(RegistrationError::InvalidInput(
            "total weight must be positive".into(),
        ));
    }
    let mut ca = Vector3::zeros();
    let mut cb = Vector3::zeros();
    for p in pairs {
        ca += p.weight * Vector3::from(p.a);
        cb += p.weight * Vector3::from(p.b);
    }
    ca /= wsum;
    cb /= wsum;
    let mut h = Matrix3::zeros();
    for p in pairs {
        h += p.weight * (Vector3::from(p.a) - ca) * (Vector3::from(p.b) - cb).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1e-12) {
        return Err(RegistrationError::DegenerateGeometry(format!(
            "cross-covariance nearly rank-deficient (singular values {:?})",
            sv.as_slice()
        )));
    }
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = vt.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let mut v = vt.transpose();
        v.set_column(2, &(-v.column(2)));
        r = v * u.transpose();
    }
    let t = cb - r * ca;
    Ok(RigidTransform::new(r, t)?)
}

fn residual(t: &RigidTransform, c: &Correspondence) -> f64 {
    dist(t.apply(c.a), c.b)
}

fn count_inliers(t: &RigidTransform, corr: &[Correspondence], tau_a: f64) -> usize {
    corr.iter().filter(|c| residual(t, c) < tau_a).count()
}

/// Run `n_r` rounds of re-solving on the current inlier set, keeping the
/// transform whenever a round would decrease the inlier count.
fn refine(
    mut best: RigidTransform,
    mut inliers: usize,
    corr: &[Correspondence],
    tau_a: f64,
    n_r: usize,
) -> (RigidTransform, usize) {
    for round in 0..n_r {
        let subset: Vec<Correspondence> = corr
            .iter()
            .filter(|c| residual(&best, c) < tau_a)
            .cloned()
            .collect();
        if subset.len() < 3 {
            break;
        }
        let Ok(t) = weighted_svd(&subset) else { break };
        let count = count_inliers(&t, corr, tau_a);
        if count < inliers {
            log::warn!("refinement divergence at round {round}: {count} < {inliers} inliers");
            break;
        }
        best = t;
        inliers = count;
    }
    (best, inliers)
}

/// Local-to-global registration: a weighted-SVD hypothesis per patch,
/// selection by inlier count over all correspondences at radius `tau_a`
/// (ties toward the lower patch id), then `n_r` refinement rounds.
pub fn lgr(corr: &[Correspondence], tau_a: f64, n_r: usize) -> Result<RegistrationResult> {
    let start = Instant::now();
    let mut patches: BTreeMap<usize, Vec<Correspondence>> = BTreeMap::new();
    for c in corr {
        patches.entry(c.patch).or_default().push(*c);
    }
    let mut best: Option<(usize, usize, RigidTransform)> = None; // (inliers, patch, T)
    let mut skipped = Vec::new();
    for (&patch, members) in &patches {
        if members.len() < 3 {
            skipped.push((patch, "fewer than 3 pairs".to_string()));
            continue;
        }
        match weighted_svd(members) {
            Ok(t) => {
                let inl = count_inliers(&t, corr, tau_a);
                let better = match &best {
                    None => true,
                    Some((bi, bp, _)) => inl > *bi || (inl == *bi && patch < *bp),
                };
                if better {
                    best = Some((inl, patch, t));
                }
            }
            Err(e) => skipped.push((patch, e.to_string())),
        }
    }
    let Some((inliers, patch, t)) = best else {
        return Err(RegistrationError::Failed(format!(
            "no solvable patch hypothesis; skipped: {skipped:?}"
        )));
    };
    let (t, inliers) = refine(t, inliers, corr, tau_a, n_r);
    Ok(RegistrationResult {
        transform: t,
        inliers,
        provenance: Provenance::Patch(patch),
        solver: "lgr",
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Classic hypothesize-and-verify with 3-point samples and a seeded RNG;
/// the best inlier set gets a final weighted re-fit.
pub fn ransac_estimate(
    corr: &[Correspondence],
    iterations: usize,
    tau_a: f64,
    seed: u64,
) -> Result<RegistrationResult> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let start = Instant::now();
    if corr.len() < 3 {
        return Err(RegistrationError::InvalidInput(format!(
            "{} pairs, need at least 3",
            corr.len()
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, usize, RigidTransform)> = None; // (inliers, trial, T)
    for trial in 0..iterations {
        let idx = sample(&mut rng, corr.len(), 3);
        let triple: Vec<Correspondence> = idx
            .iter()
            .map(|i| Correspondence {
                weight: 1.0,
                ..corr[i]
            })
            .collect();
        let Ok(t) = weighted_svd(&triple) else {
            continue;
        };
        let inl = count_inliers(&t, corr, tau_a);
        let better = match &best {
            None => true,
            Some((bi, _, _)) => inl > *bi,
        };
        if better {
            best = Some((inl, trial, t));
        }
    }
    let Some((inliers, trial, t)) = best else {
        return Err(RegistrationError::Failed(
            "no valid hypothesis (all samples degenerate)".into(),
        ));
    };
    if inliers < 3 {
        return Err(RegistrationError::Failed(format!(
            "best hypothesis has only {inliers} inliers"
        )));
    }
    // weighted re-fit on the best inlier set, then the same refinement
    let subset: Vec<Correspondence> = corr
        .iter()
        .filter(|c| residual(&t, c) < tau_a)
        .cloned()
        .collect();
    let (t, inliers) = match weighted_svd(&subset) {
        Ok(refit) => {
            let count = count_inliers(&refit, corr, tau_a);
            if count >= inliers {
                (refit, count)
            } else {
                (t, inliers)
            }
        }
        Err(_) => (t, inliers),
    };
    Ok(RegistrationResult {
        transform: t,
        inliers,
        provenance: Provenance::RansacTrial(trial),
        solver: "ransac",
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MetricThresholds {
    /// Rotation error bound in radians for the recall flag.
    pub rre: f64,
    /// Translation error bound in meters for the recall flag.
    pub rte: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            rre: 5.0_f64.to_radians(),
            rte: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct RegistrationMetrics {
    /// Translation error in meters.
    pub rte: f64,
    /// Geodesic rotation error in radians.
    pub rre: f64,
    /// Absolute yaw error in radians, wrapped to [0, pi].
    pub rye: f64,
    /// Whether both errors fall under the recall thresholds.
    pub recalled: bool,
}

pub fn registration_metrics(
    est: &RigidTransform,
    gt: &RigidTransform,
    thresholds: MetricThresholds,
) -> RegistrationMetrics {
    let rte = (est.translation - gt.translation).norm();
    let rel = gt.rotation.transpose() * est.rotation;
    // geodesic angle arccos((trace - 1) / 2), evaluated through the unit
    // quaternion for accuracy near zero
    let rre = nalgebra::UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(rel),
    )
    .angle();
    let (yaw_e, _, _) = est.euler_zyx();
    let (yaw_g, _, _) = gt.euler_zyx();
    let d = (yaw_e - yaw_g).rem_euclid(2.0 * std::f64::consts::PI);
    let rye = d.min(2.0 * std::f64::consts::PI - d);
    RegistrationMetrics {
        rte,
        rre,
        rye,
        recalled: rre < thresholds.rre && rte < thresholds.rte,
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Point- and patch-level match quality against the ground-truth
/// transform. A true point match is a pair within `tau_ir` after applying
/// the ground truth; a true patch match is a patch pair containing at
/// least one true point match.
pub fn match_quality(
    dense: &[(usize, usize)],
    sparse: &[(usize, usize)],
    points_a: &[[f64; 3]],
    points_b: &[[f64; 3]],
    grouping_a: &PatchGrouping,
    grouping_b: &PatchGrouping,
    t_gt: &RigidTransform,
    tau_ir: f64,
) -> MatchQualityReport {
    use std::collections::BTreeSet;
    let tree_b = KdTree::build(points_b);
    let mut true_pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (i, p) in points_a.iter().enumerate() {
        for j in tree_b.radius(t_gt.apply(*p), tau_ir) {
            if dist(t_gt.apply(*p), points_b[j]) < tau_ir {
                true_pairs.insert((i, j));
            }
        }
    }
    let predicted: BTreeSet<(usize, usize)> = dense.iter().cloned().collect();
    let ir = ratio(
        predicted.iter().filter(|p| true_pairs.contains(p)).count(),
        predicted.len(),
    );
    let mr = ratio(
        true_pairs.iter().filter(|p| predicted.contains(p)).count(),
        true_pairs.len(),
    );

    let true_a: BTreeSet<usize> = true_pairs.iter().map(|&(i, _)| i).collect();
    let true_b: BTreeSet<usize> = true_pairs.iter().map(|&(_, j)| j).collect();
    let pred_a: BTreeSet<usize> = predicted.iter().map(|&(i, _)| i).collect();
    let pred_b: BTreeSet<usize> = predicted.iter().map(|&(_, j)| j).collect();
    let hits = true_a.intersection(&pred_a).count() + true_b.intersection(&pred_b).count();
    let hr = ratio(hits, true_a.len() + true_b.len());

    let true_patches: BTreeSet<(usize, usize)> = true_pairs
        .iter()
        .map(|&(i, j)| (grouping_a.point_to_patch[i], grouping_b.point_to_patch[j]))
        .collect();
    let pred_patches: BTreeSet<(usize, usize)> = sparse.iter().cloned().collect();
    let pir = ratio(
        pred_patches
            .iter()
            .filter(|p| true_patches.contains(p))
            .count(),
        pred_patches.len(),
    );
    let pmr = ratio(
        true_patches
            .iter()
            .filter(|p| pred_patches.contains(p))
            .count(),
        true_patches.len(),
    );
    let tp_a: BTreeSet<usize> = true_patches.iter().map(|&(i, _)| i).collect();
    let tp_b: BTreeSet<usize> = true_patches.iter().map(|&(_, j)| j).collect();
    let pp_a: BTreeSet<usize> = pred_patches.iter().map(|&(i, _)| i).collect();
    let pp_b: BTreeSet<usize> = pred_patches.iter().map(|&(_, j)| j).collect();
    let phits = tp_a.intersection(&pp_a).count() + tp_b.intersection(&pp_b).count();
    let phr = ratio(phits, tp_a.len() + tp_b.len());

    MatchQualityReport {
        ir,
        mr,
        hr,
        pir,
        pmr,
        phr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                    rng.gen_range(-extent..extent),
                ]
            })
            .collect()
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        RigidTransform::from_axis_angle(
            axis,
            rng.gen_range(-3.0..3.0),
            Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ),
        )
    }

    fn exact_pairs(cloud: &[[f64; 3]], t: &RigidTransform, patch: usize) -> Vec<Correspondence> {
        cloud
            .iter()
            .map(|&p| Correspondence {
                a: p,
                b: t.apply(p),
                weight: 1.0,
                patch,
            })
            .collect()
    }

    #[test]
    fn svd_identity_on_aligned_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cloud = random_cloud(&mut rng, 20, 5.0);
        let pairs: Vec<Correspondence> = cloud
            .iter()
            .map(|&p| Correspondence {
                a: p,
                b: p,
                weight: 1.0,
                patch: 0,
            })
            .collect();
        let t = weighted_svd(&pairs).unwrap();
        assert!(t.rotation_angle() < 1e-10);
        assert!(t.translation.norm() < 1e-10);
    }

    #[test]
    fn svd_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let cloud = random_cloud(&mut rng, 50, 10.0);
            let gt = random_transform(&mut rng);
            let est = weighted_svd(&exact_pairs(&cloud, &gt, 0)).unwrap();
            let m = registration_metrics(&est, &gt, MetricThresholds::default());
            assert!(m.rre < 1e-8, "rre {}", m.rre);
            assert!(m.rte < 1e-8, "rte {}", m.rte);
        }
    }

    #[test]
    fn svd_zero_weight_outlier_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 30, 5.0);
        let gt = random_transform(&mut rng);
        let clean = exact_pairs(&cloud, &gt, 0);
        let mut poisoned = clean.clone();
        poisoned.push(Correspondence {
            a: [100.0, 0.0, 0.0],
            b: [-40.0, 7.0, 3.0],
            weight: 0.0,
            patch: 0,
        });
        let t0 = weighted_svd(&clean).unwrap();
        let t1 = weighted_svd(&poisoned).unwrap();
        assert!((t0.rotation - t1.rotation).norm() < 1e-12);
        assert!((t0.translation - t1.translation).norm() < 1e-12);
    }

    #[test]
    fn svd_rejects_collinear_geometry() {
        let pairs: Vec<Correspondence> = (0..5)
            .map(|i| Correspondence {
                a: [i as f64, 0.0, 0.0],
                b: [0.0, i as f64, 0.0],
                weight: 1.0,
                patch: 0,
            })
            .collect();
        assert!(matches!(
            weighted_svd(&pairs),
            Err(RegistrationError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn svd_rotation_always_proper_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(3..40);
            let pairs: Vec<Correspondence> = (0..n)
                .map(|_| Correspondence {
                    a: [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ],
                    b: [
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                        rng.gen_range(-5.0..5.0),
                    ],
                    weight: rng.gen_range(0.01..1.0),
                    patch: 0,
                })
                .collect();
            if let Ok(t) = weighted_svd(&pairs) {
                let r = t.rotation;
                assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
                assert!((r.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lgr_single_patch_equals_weighted_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 20, 8.0);
        let gt = random_transform(&mut rng);
        let pairs = exact_pairs(&cloud, &gt, 0);
        let direct = weighted_svd(&pairs).unwrap();
        let result = lgr(&pairs, 0.6, 5).unwrap();
        assert_eq!(result.provenance, Provenance::Patch(0));
        assert!((direct.rotation - result.transform.rotation).norm() < 1e-9);
        assert!((direct.translation - result.transform.translation).norm() < 1e-9);
        assert_eq!(result.inliers, pairs.len());
    }

    #[test]
    fn lgr_picks_the_clean_patch_over_a_poisoned_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 20, 8.0);
        let gt = random_transform(&mut rng);
        let mut pairs = exact_pairs(&cloud, &gt, 1);
        for _ in 0..20 {
            pairs.push(Correspondence {
                a: [
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-8.0..8.0),
                ],
                b: [
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-8.0..8.0),
                ],
                weight: 1.0,
                patch: 0,
            });
        }
        let result = lgr(&pairs, 0.6, 5).unwrap();
        assert_eq!(result.provenance, Provenance::Patch(1));
        let m = registration_metrics(&result.transform, &gt, MetricThresholds::default());
        assert!(m.rre < 1e-6 && m.rte < 1e-6);
    }

    #[test]
    fn lgr_fails_without_a_solvable_patch() {
        let pairs: Vec<Correspondence> = (0..4)
            .map(|i| Correspondence {
                a: [i as f64, 0.0, 0.0],
                b: [i as f64, 1.0, 0.0],
                weight: 1.0,
                patch: 0,
            })
            .collect();
        assert!(matches!(
            lgr(&pairs, 0.6, 5),
            Err(RegistrationError::Failed(_))
        ));
    }

    #[test]
    fn lgr_survives_forty_percent_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let gt = random_transform(&mut rng);
            // 40% inliers arriving the way bad patch matches produce them:
            // 4 of 10 patches are correct matches (clean dense pairs), the
            // other 6 are wrong patch matches (wholly wrong pairs)
            let mut clean: Vec<usize> = (0..10).collect();
            for i in (1..10).rev() {
                clean.swap(i, rng.gen_range(0..=i));
            }
            clean.truncate(4);
            let mut pairs = Vec::new();
            for patch in 0..10 {
                for _ in 0..10 {
                    let p = [
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-20.0..20.0),
                        rng.gen_range(-20.0..20.0),
                    ];
                    if clean.contains(&patch) {
                        pairs.push(Correspondence {
                            a: p,
                            b: gt.apply(p),
                            weight: 1.0,
                            patch,
                        });
                    } else {
                        pairs.push(Correspondence {
                            a: p,
                            b: [
                                rng.gen_range(-20.0..20.0),
                                rng.gen_range(-20.0..20.0),
                                rng.gen_range(-20.0..20.0),
                            ],
                            weight: 1.0,
                            patch,
                        });
                    }
                }
            }
            let result = lgr(&pairs, 0.6, 5).unwrap();
            let m = registration_metrics(&result.transform, &gt, MetricThresholds::default());
            assert!(m.rre < 0.5_f64.to_radians(), "rre {}", m.rre.to_degrees());
            assert!(m.rte < 0.1, "rte {}", m.rte);
        }
    }

    #[test]
    fn ransac_recovers_exact_pairs_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 30, 10.0);
        let gt = random_transform(&mut rng);
        let pairs = exact_pairs(&cloud, &gt, 0);
        let r1 = ransac_estimate(&pairs, 100, 0.6, 42).unwrap();
        let r2 = ransac_estimate(&pairs, 100, 0.6, 42).unwrap();
        let m = registration_metrics(&r1.transform, &gt, MetricThresholds::default());
        assert!(m.rre < 1e-6 && m.rte < 1e-6);
        assert_eq!(r1.inliers, pairs.len());
        assert_eq!(r1.transform.rotation, r2.transform.rotation);
        assert_eq!(r1.transform.translation, r2.transform.translation);
        assert_eq!(r1.provenance, r2.provenance);
    }

    #[test]
    fn ransac_fails_on_all_collinear_samples() {
        let pairs: Vec<Correspondence> = (0..6)
            .map(|i| Correspondence {
                a: [i as f64, 0.0, 0.0],
                b: [0.0, i as f64, 0.0],
                weight: 1.0,
                patch: 0,
            })
            .collect();
        assert!(matches!(
            ransac_estimate(&pairs, 50, 0.6, 1),
            Err(RegistrationError::Failed(_))
        ));
    }

    #[test]
    fn solvers_agree_on_outlier_free_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 40, 10.0);
        let gt = random_transform(&mut rng);
        let mut pairs = Vec::new();
        for (i, &p) in cloud.iter().enumerate() {
            pairs.push(Correspondence {
                a: p,
                b: gt.apply(p),
                weight: 1.0,
                patch: i % 4,
            });
        }
        let svd = weighted_svd(&pairs).unwrap();
        let l = lgr(&pairs, 0.6, 5).unwrap();
        let r = ransac_estimate(&pairs, 200, 0.6, 9).unwrap();
        for est in [&svd, &l.transform, &r.transform] {
            let m = registration_metrics(est, &gt, MetricThresholds::default());
            assert!(m.rre < 1e-6 && m.rte < 1e-6);
        }
    }

    #[test]
    fn metrics_identity_and_pure_yaw() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_transform(&mut rng);
        let m = registration_metrics(&gt, &gt, MetricThresholds::default());
        assert_eq!(m.rte, 0.0);
        assert!(m.rre < 1e-9 && m.rye < 1e-9);
        assert!(m.recalled);

        let yaw =
            RigidTransform::from_axis_angle(Vector3::z(), 10.0_f64.to_radians(), Vector3::zeros());
        let id = RigidTransform::from_axis_angle(Vector3::z(), 0.0, Vector3::zeros());
        let m = registration_metrics(&yaw, &id, MetricThresholds::default());
        assert!((m.rre.to_degrees() - 10.0).abs() < 1e-9);
        assert!((m.rye.to_degrees() - 10.0).abs() < 1e-9);
        assert!(!m.recalled);
    }

    #[test]
    fn match_quality_exact_pairs_give_unit_ir() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pa = random_cloud(&mut rng, 20, 5.0);
        let gt = random_transform(&mut rng);
        let pb: Vec<[f64; 3]> = pa.iter().map(|&p| gt.apply(p)).collect();
        let ga = crate::matching::group_patches(&pa, &[[0.0; 3]]).unwrap();
        let gb = crate::matching::group_patches(&pb, &[[0.0; 3]]).unwrap();
        let dense: Vec<(usize, usize)> = (0..20).map(|i| (i, i)).collect();
        let report = match_quality(&dense, &[(0, 0)], &pa, &pb, &ga, &gb, &gt, 0.6);
        assert_eq!(report.ir, Some(1.0));
        assert_eq!(report.pir, Some(1.0));
        assert_eq!(report.pmr, Some(1.0));
    }

    #[test]
    fn match_quality_matches_hand_enumeration() {
        // A: 10 points on a line, spaced 2 m; B = A (identity GT). With
        // tau 0.6 the only true point matches are (i, i). Two patches per
        // side split at x = 10.
        let pa: Vec<[f64; 3]> = (0..10).map(|i| [2.0 * i as f64, 0.0, 0.0]).collect();
        let pb = pa.clone();
        let keys = vec![[4.0, 0.0, 0.0], [14.0, 0.0, 0.0]];
        let ga = crate::matching::group_patches(&pa, &keys).unwrap();
        let gb = crate::matching::group_patches(&pb, &keys).unwrap();
        let gt = RigidTransform::from_axis_angle(Vector3::z(), 0.0, Vector3::zeros());
        // predictions: 4 correct pairs, 2 wrong pairs; one patch pair
        // correct, one wrong
        let dense = vec![(0, 0), (1, 1), (2, 2), (8, 8), (3, 7), (4, 9)];
        let sparse = vec![(0, 0), (0, 1)];
        let report = match_quality(&dense, &sparse, &pa, &pb, &ga, &gb, &gt, 0.6);
        // IR: 4 of 6 predictions correct
        assert_eq!(report.ir, Some(4.0 / 6.0));
        // MR: 10 true matches, 4 found
        assert_eq!(report.mr, Some(4.0 / 10.0));
        // HR: true points = all 10 on each side; hit A points {0,1,2,3,4,8},
        // hit B points {0,1,2,7,8,9} -> 12 of 20
        assert_eq!(report.hr, Some(12.0 / 20.0));
        // true patch pairs: (0,0) and (1,1); predicted (0,0) correct,
        // (0,1) wrong
        assert_eq!(report.pir, Some(1.0 / 2.0));
        assert_eq!(report.pmr, Some(1.0 / 2.0));
        // patch hits: A side {0} of {0,1}, B side {0,1} of {0,1} -> 3 of 4
        assert_eq!(report.phr, Some(3.0 / 4.0));
    }

    #[test]
    fn match_quality_flags_undefined_ratios() {
        let pa = vec![[0.0; 3]];
        let pb = vec![[100.0, 0.0, 0.0]];
        let ga = crate::matching::group_patches(&pa, &[[0.0; 3]]).unwrap();
        let gb = crate::matching::group_patches(&pb, &[[100.0, 0.0, 0.0]]).unwrap();
        let gt = RigidTransform::from_axis_angle(Vector3::z(), 0.0, Vector3::zeros());
        let report = match_quality(&[], &[], &pa, &pb, &ga, &gb, &gt, 0.6);
        assert_eq!(report.ir, None);
        assert_eq!(report.mr, None);
        assert_eq!(report.hr, None);
        assert_eq!(report.pir, None);
        assert_eq!(report.pmr, None);
        assert_eq!(report.phr, None);
    }

    #[test]
    fn refinement_keeps_inlier_count_non_decreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = random_transform(&mut rng);
        let mut pairs = Vec::new();
        for _ in 0..60 {
            let p = [
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
                rng.gen_range(-15.0..15.0),
            ];
            let noise = [
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            ];
            let q = gt.apply(p);
            pairs.push(Correspondence {
                a: p,
                b: [q[0] + noise[0], q[1] + noise[1], q[2] + noise[2]],
                weight: 1.0,
                patch: 0,
            });
        }
        let coarse = lgr(&pairs, 0.6, 0).unwrap();
        let refined = lgr(&pairs, 0.6, 5).unwrap();
        assert!(refined.inliers >= coarse.inliers);
    }
}

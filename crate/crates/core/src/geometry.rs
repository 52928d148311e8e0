//! Point clouds, rigid transforms, spatial search, and SE(3) helpers.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// A LiDAR scan: positions in meters, optionally one intensity per point.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensities: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            intensities: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(*p)).collect(),
            intensities: self.intensities.clone(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.points.len().max(1) as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Proper rigid motion x -> R x + t with validated rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub const ROTATION_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from parts, rejecting matrices that are not proper rotations
    /// (orthonormal with determinant +1).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let rtr = rotation.transpose() * rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev > 1e-6 {
            return Err(GeometryError::InvalidRotation(format!(
                "R^T R deviates from I by {dev:e}"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidRotation(format!("det = {det}")));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        RigidTransform {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [v.x, v.y, v.z]
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let tr = self.rotation.trace();
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Yaw-pitch-roll (ZYX) Euler angles in radians.
    pub fn euler_zyx(&self) -> (f64, f64, f64) {
        let r = Rotation3::from_matrix_unchecked(self.rotation);
        let (roll, pitch, yaw) = r.euler_angles();
        (yaw, pitch, roll)
    }
}

/// se(3) tangent vector, ordered (wx, wy, wz, tx, ty, tz).
pub type Twist = [f64; 6];

fn skew(w: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Exponential map se(3) -> SE(3).
pub fn se3_exp(xi: Twist) -> RigidTransform {
    let w = Vector3::new(xi[0], xi[1], xi[2]);
    let v = Vector3::new(xi[3], xi[4], xi[5]);
    let th = w.norm();
    let wx = skew(w);
    let (rotation, jac) = if th < 1e-12 {
        (Matrix3::identity() + wx, Matrix3::identity() + wx * 0.5)
    } else {
        let a = th.sin() / th;
        let b = (1.0 - th.cos()) / (th * th);
        let c = (1.0 - a) / (th * th);
        let rot = Matrix3::identity() + wx * a + wx * wx * b;
        let j = Matrix3::identity() + wx * b + wx * wx * c;
        (rot, j)
    };
    RigidTransform {
        rotation,
        translation: jac * v,
    }
}

/// Logarithm map SE(3) -> se(3). Errors within 1e-6 of the pi rotation
/// singularity, where the axis is not recoverable from the skew part.
pub fn se3_log(t: &RigidTransform) -> Result<Twist> {
    let th = t.rotation_angle();
    if (std::f64::consts::PI - th).abs() < 1e-6 {
        return Err(GeometryError::InvalidInput(
            "rotation angle at the pi singularity".into(),
        ));
    }
    let w = if th < 1e-12 {
        let r = &t.rotation;
        Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        ) * 0.5
    } else {
        let r = &t.rotation;
        let f = th / (2.0 * th.sin());
        Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        ) * f
    };
    let wx = skew(w);
    let jinv = if th < 1e-12 {
        Matrix3::identity() - wx * 0.5
    } else {
        let half = th / 2.0;
        let cot = half / half.tan();
        Matrix3::identity() - wx * 0.5 + wx * wx * ((1.0 - cot) / (th * th))
    };
    let v = jinv * t.translation;
    Ok([w.x, w.y, w.z, v.x, v.y, v.z])
}

// ── kd-tree ─────────────────────────────────────────────────────────────

/// Static 3-d tree over a point set. Query results are deterministic:
/// `radius` returns indices in ascending order (bound inclusive), `knn`
/// breaks distance ties by lower index.
#[derive(Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    // median-split recursion over `order`; per node: split plane, child
    // slots (usize::MAX marks a leaf), and the order range it covers
    order: Vec<u32>,
    splits: Vec<(usize, f64)>,
    children: Vec<(usize, usize)>,
    bounds: Vec<(usize, usize)>,
}

const KD_LEAF: usize = 16;

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> KdTree {
        let n = points.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            order: Vec::new(),
            splits: Vec::new(),
            children: Vec::new(),
            bounds: Vec::new(),
        };
        tree.new_node();
        tree.build_rec(0, &mut order, 0, n);
        tree.order = order;
        tree
    }

    fn new_node(&mut self) -> usize {
        self.splits.push((usize::MAX, 0.0));
        self.children.push((usize::MAX, usize::MAX));
        self.bounds.push((0, 0));
        self.splits.len() - 1
    }

    fn build_rec(&mut self, node: usize, order: &mut [u32], lo: usize, hi: usize) {
        self.bounds[node] = (lo, hi);
        if hi - lo <= KD_LEAF {
            return;
        }
        // split on the widest axis at the median
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &order[lo..hi] {
            let p = self.points[i as usize];
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (max[a] - min[a]).partial_cmp(&(max[b] - min[b])).unwrap())
            .unwrap();
        let mid = lo + (hi - lo) / 2;
        let pts = &self.points;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a as usize][axis]
                .partial_cmp(&pts[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let thresh = self.points[order[mid] as usize][axis];
        self.splits[node] = (axis, thresh);
        let left = self.new_node();
        let right = self.new_node();
        self.children[node] = (left, right);
        self.build_rec(left, order, lo, mid);
        self.build_rec(right, order, mid, hi);
    }

    /// All indices with distance <= r from `q`, ascending by index.
    pub fn radius(&self, q: [f64; 3], r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_rec(0, q, r, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node: usize, q: [f64; 3], r: f64, out: &mut Vec<usize>) {
        let (axis, thresh) = self.splits[node];
        if axis == usize::MAX {
            let (lo, hi) = self.bounds[node];
            for &i in &self.order[lo..hi] {
                if dist(self.points[i as usize], q) <= r {
                    out.push(i as usize);
                }
            }
            return;
        }
        let (left, right) = self.child_nodes(node);
        let d = q[axis] - thresh;
        if d <= r {
            self.radius_rec(left, q, r, out);
        }
        if -d <= r {
            self.radius_rec(right, q, r, out);
        }
    }

    /// K nearest neighbors to `q` as (index, distance), nearest first;
    /// distance ties break toward the lower index.
    pub fn knn(&self, q: [f64; 3], k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(0, q, k, &mut heap);
        heap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        heap.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn knn_rec(&self, node: usize, q: [f64; 3], k: usize, heap: &mut Vec<(f64, usize)>) {
        let worst = |h: &Vec<(f64, usize)>| {
            h.iter()
                .cloned()
                .fold((f64::NEG_INFINITY, 0), |a, b| if b > a { b } else { a })
        };
        let (axis, thresh) = self.splits[node];
        if axis == usize::MAX {
            let (lo, hi) = self.bounds[node];
            for &i in &self.order[lo..hi] {
                let d = dist(self.points[i as usize], q);
                if heap.len() < k {
                    heap.push((d, i as usize));
                } else {
                    let w = worst(heap);
                    if (d, i as usize) < w {
                        let pos = heap.iter().position(|&x| x == w).unwrap();
                        heap[pos] = (d, i as usize);
                    }
                }
            }
            return;
        }
        let (left, right) = self.child_nodes(node);
        let d = q[axis] - thresh;
        let (near, far) = if d <= 0.0 {
            (left, right)
        } else {
            (right, left)
        };
        self.knn_rec(near, q, k, heap);
        if heap.len() < k || d.abs() <= worst(heap).0 {
            self.knn_rec(far, q, k, heap);
        }
    }

    fn child_nodes(&self, node: usize) -> (usize, usize) {
        self.children[node]
    }
}

/// Voxel-grid subsampling: points are bucketed into `cell`-sized cubes and
/// replaced by per-cell centroids. Output order follows the lexicographic
/// order of voxel coordinates, so it is independent of input order.
///
/// Returns the centroids and, for each input point, the index of its cell's
/// centroid in the output.
pub fn grid_subsample(points: &[[f64; 3]], cell: f64) -> Result<(Vec<[f64; 3]>, Vec<usize>)> {
    if cell <= 0.0 || !cell.is_finite() {
        return Err(GeometryError::InvalidInput(format!("cell size {cell}")));
    }
    let mut cells: BTreeMap<[i64; 3], ([f64; 3], usize)> = BTreeMap::new();
    let key = |p: &[f64; 3]| -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    };
    for p in points {
        let e = cells.entry(key(p)).or_insert(([0.0; 3], 0));
        for k in 0..3 {
            e.0[k] += p[k];
        }
        e.1 += 1;
    }
    let mut centroids = Vec::with_capacity(cells.len());
    let mut slot: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    for (k, (sum, n)) in &cells {
        slot.insert(*k, centroids.len());
        let n = *n as f64;
        centroids.push([sum[0] / n, sum[1] / n, sum[2] / n]);
    }
    let assign = points.iter().map(|p| slot[&key(p)]).collect();
    Ok((centroids, assign))
}

/// Fraction of points in `a` that have a neighbor in `b` within `eps`,
/// after mapping `a` through `t_ab` (the transform taking a's frame to b's).
pub fn overlap_ratio(a: &PointCloud, b: &PointCloud, t_ab: &RigidTransform, eps: f64) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let tree = KdTree::build(&b.points);
    let mut hits = 0usize;
    for p in &a.points {
        let q = t_ab.apply(*p);
        if let Some(&(_, d)) = tree.knn(q, 1).first() {
            if d <= eps {
                hits += 1;
            }
        }
    }
    hits as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_points(seed: u64, n: usize, extent: f64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
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

    fn random_transform(seed: u64) -> RigidTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0f64),
        );
        let angle = rng.gen_range(-3.0..3.0);
        let t = Vector3::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0f64),
        );
        RigidTransform::from_axis_angle(axis, angle, t)
    }

    #[test]
    fn transform_rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        // reflection: orthonormal but det = -1
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn compose_then_inverse_is_identity() {
        let a = random_transform(1);
        let b = random_transform(2);
        let c = a.compose(&b);
        let id = c.compose(&c.inverse());
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn se3_exp_log_roundtrip() {
        let cases: [Twist; 4] = [
            [0.0, 0.0, 0.0, 1.0, -2.0, 3.0],
            [0.1, -0.2, 0.3, 0.5, 0.0, -1.0],
            [1.5, 0.0, 0.0, 0.0, 2.0, 0.0],
            [0.0, 0.0, 3.0, 1.0, 1.0, 1.0],
        ];
        for xi in cases {
            let t = se3_exp(xi);
            let back = se3_log(&t).unwrap();
            for k in 0..6 {
                assert!((xi[k] - back[k]).abs() < 1e-9, "{xi:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn se3_log_flags_pi_singularity() {
        let t =
            RigidTransform::from_axis_angle(Vector3::x(), std::f64::consts::PI, Vector3::zeros());
        assert!(se3_log(&t).is_err());
    }

    #[test]
    fn rotation_angle_known_case() {
        let t = RigidTransform::from_axis_angle(Vector3::z(), 0.7, Vector3::zeros());
        assert!((t.rotation_angle() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn kdtree_radius_matches_brute_force() {
        let pts = random_points(3, 500, 10.0);
        let tree = KdTree::build(&pts);
        let queries = random_points(4, 20, 10.0);
        for q in queries {
            for r in [0.5, 2.0, 6.0] {
                let got = tree.radius(q, r);
                let want: Vec<usize> = (0..pts.len()).filter(|&i| dist(pts[i], q) <= r).collect();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn kdtree_radius_bound_is_inclusive() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.radius([0.0, 0.0, 0.0], 1.0), vec![0, 1]);
    }

    #[test]
    fn kdtree_knn_matches_brute_force() {
        let pts = random_points(5, 300, 8.0);
        let tree = KdTree::build(&pts);
        for q in random_points(6, 15, 8.0) {
            for k in [1, 4, 17] {
                let got = tree.knn(q, k);
                let mut want: Vec<(usize, f64)> = pts
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, dist(*p, q)))
                    .collect();
                want.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                want.truncate(k);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert_eq!(g.0, w.0);
                    assert!((g.1 - w.1).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn kdtree_knn_more_than_n() {
        let pts = random_points(7, 5, 1.0);
        let tree = KdTree::build(&pts);
        assert_eq!(tree.knn([0.0; 3], 10).len(), 5);
    }

    #[test]
    fn grid_subsample_collapses_coincident_points() {
        let pts = vec![[0.1, 0.1, 0.1]; 10];
        let (cent, assign) = grid_subsample(&pts, 1.0).unwrap();
        assert_eq!(cent.len(), 1);
        assert!(assign.iter().all(|&a| a == 0));
        for k in 0..3 {
            assert!((cent[0][k] - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_subsample_output_independent_of_input_order() {
        let mut pts = random_points(8, 200, 5.0);
        let (c1, _) = grid_subsample(&pts, 0.7).unwrap();
        pts.reverse();
        let (c2, _) = grid_subsample(&pts, 0.7).unwrap();
        assert_eq!(c1.len(), c2.len());
        for (a, b) in c1.iter().zip(&c2) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_subsample_centroids_lie_in_their_cell() {
        let pts = random_points(9, 300, 10.0);
        let cell = 1.3;
        let (cent, assign) = grid_subsample(&pts, cell).unwrap();
        for (p, &a) in pts.iter().zip(&assign) {
            let c = cent[a];
            for k in 0..3 {
                assert_eq!((p[k] / cell).floor(), (c[k] / cell).floor());
            }
        }
    }

    #[test]
    fn overlap_ratio_identity_is_one() {
        let pts = random_points(10, 100, 5.0);
        let c = PointCloud::new(pts);
        let r = overlap_ratio(&c, &c, &RigidTransform::identity(), 0.5);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn overlap_ratio_disjoint_is_zero() {
        let a = PointCloud::new(random_points(11, 50, 2.0));
        let mut bpts = random_points(12, 50, 2.0);
        for p in &mut bpts {
            p[0] += 100.0;
        }
        let b = PointCloud::new(bpts);
        assert_eq!(overlap_ratio(&a, &b, &RigidTransform::identity(), 0.5), 0.0);
    }

    #[test]
    fn overlap_ratio_under_true_transform() {
        let a = PointCloud::new(random_points(13, 200, 5.0));
        let t = random_transform(14);
        let b = a.transformed(&t);
        assert_eq!(overlap_ratio(&a, &b, &t, 1e-6), 1.0);
    }

    proptest! {
        #[test]
        fn prop_rigid_preserves_distances(seed in 0u64..1000, i in 0usize..20, j in 0usize..20) {
            let pts = random_points(seed, 20, 10.0);
            let t = random_transform(seed + 1);
            let d0 = dist(pts[i], pts[j]);
            let d1 = dist(t.apply(pts[i]), t.apply(pts[j]));
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn prop_exp_log_roundtrip(wx in -1.5f64..1.5, wy in -1.5f64..1.5, wz in -1.5f64..1.5,
                                  tx in -10.0f64..10.0, ty in -10.0f64..10.0, tz in -10.0f64..10.0) {
            let xi = [wx, wy, wz, tx, ty, tz];
            let t = se3_exp(xi);
            let back = se3_log(&t).unwrap();
            for k in 0..6 {
                prop_assert!((xi[k] - back[k]).abs() < 1e-8);
            }
        }

        #[test]
        fn prop_kdtree_radius_exact(seed in 0u64..200, r in 0.1f64..5.0) {
            let pts = random_points(seed, 120, 6.0);
            let tree = KdTree::build(&pts);
            let q = pts[0];
            let got = tree.radius(q, r);
            let want: Vec<usize> = (0..pts.len()).filter(|&i| dist(pts[i], q) <= r).collect();
            prop_assert_eq!(got, want);
        }
    }
}

//! Data plumbing: KITTI-format ingestion, synthetic scene and trajectory
//! generation with true-match oracles, corrupted-correspondence ladders,
//! and the key-value experiment config format.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{PointCloud, RigidTransform};
use crate::registration::Correspondence;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("format error: {0}")]
    Format(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "LOOPKIT_DATA_ROOT";

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

// ── KITTI binary format ─────────────────────────────────────────────────

/// Read a KITTI velodyne `.bin` scan: little-endian f32 records of
/// (x, y, z, intensity), 16 bytes per point.
pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    let data = std::fs::read(path)?;
    if data.len() % 16 != 0 {
        return Err(HarnessError::Format(format!(
            "{} is {} bytes, not a multiple of 16 (trailing {} bytes)",
            path.display(),
            data.len(),
            data.len() % 16
        )));
    }
    let n = data.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensities = Vec::with_capacity(n);
    for i in 0..n {
        let f = |k: usize| {
            f32::from_le_bytes(data[i * 16 + 4 * k..i * 16 + 4 * k + 4].try_into().unwrap())
        };
        points.push([f(0) as f64, f(1) as f64, f(2) as f64]);
        intensities.push(f(3) as f64);
    }
    Ok(PointCloud {
        points,
        intensities: Some(intensities),
    })
}

pub fn write_kitti_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        for k in 0..3 {
            buf.extend_from_slice(&(p[k] as f32).to_le_bytes());
        }
        let intensity = cloud.intensities.as_ref().map_or(0.0, |v| v[i]);
        buf.extend_from_slice(&(intensity as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

// ── synthetic scenes ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    UrbanBlocks,
    Corridor,
    LoopCourse,
}

impl std::str::FromStr for SceneKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<SceneKind> {
        match s {
            "urban-blocks" | "urban" => Ok(SceneKind::UrbanBlocks),
            "corridor" => Ok(SceneKind::Corridor),
            "loop-course" | "loop" => Ok(SceneKind::LoopCourse),
            other => Err(HarnessError::Config(format!("unknown scene kind {other}"))),
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SceneKind::UrbanBlocks => "urban-blocks",
            SceneKind::Corridor => "corridor",
            SceneKind::LoopCourse => "loop-course",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub kind: SceneKind,
    /// World surface sample count before visibility culling.
    pub world_points: usize,
    /// Per-point Gaussian noise, meters.
    pub noise_sigma: f64,
    /// Azimuth sector removed from every scan, degrees.
    pub fov_cut_deg: f64,
    /// Sensor range limit, meters.
    pub max_range: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(kind: SceneKind, seed: u64) -> SceneSpec {
        SceneSpec {
            kind,
            world_points: 6000,
            noise_sigma: 0.02,
            fov_cut_deg: 0.0,
            max_range: 35.0,
            seed,
        }
    }
}

/// The static world surface: sampled structure points.
#[derive(Debug, Clone)]
pub struct World {
    pub points: Vec<[f64; 3]>,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

/// Sample points on the four vertical walls of an axis-aligned box.
fn sample_walls(
    rng: &mut ChaCha8Rng,
    out: &mut Vec<[f64; 3]>,
    x0: f64,
    y0: f64,
    w: f64,
    l: f64,
    h: f64,
    n: usize,
) {
    for _ in 0..n {
        let side = rng.gen_range(0..4);
        let u = rng.gen_range(0.0..1.0);
        let z = rng.gen_range(0.0..h);
        let (x, y) = match side {
            0 => (x0 + u * w, y0),
            1 => (x0 + u * w, y0 + l),
            2 => (x0, y0 + u * l),
            _ => (x0 + w, y0 + u * l),
        };
        out.push([x, y, z]);
    }
}

/// Every world carries a sampled ground plane besides its vertical
/// structure, so a 6-DoF scan tracker is constrained in z, roll and pitch
/// everywhere and degeneracy is a property of the horizontal layout alone.
pub fn generate_world(spec: &SceneSpec) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(spec.world_points);
    let ground = spec.world_points / 5;
    match spec.kind {
        SceneKind::UrbanBlocks => {
            // a 5x5 grid of buildings with jittered footprints
            let per = (spec.world_points - ground) / 25;
            for gx in 0..5 {
                for gy in 0..5 {
                    let x0 = gx as f64 * 22.0 + rng.gen_range(0.0..4.0);
                    let y0 = gy as f64 * 22.0 + rng.gen_range(0.0..4.0);
                    let w = rng.gen_range(6.0..12.0);
                    let l = rng.gen_range(6.0..12.0);
                    let h = rng.gen_range(3.0..8.0);
                    sample_walls(&mut rng, &mut points, x0, y0, w, l, h, per);
                }
            }
            for _ in 0..ground {
                points.push([rng.gen_range(0.0..115.0), rng.gen_range(0.0..115.0), 0.0]);
            }
        }
        SceneKind::Corridor => {
            // two parallel walls along x: self-similar along the axis
            let per = (spec.world_points - ground) / 2;
            for _ in 0..per {
                points.push([rng.gen_range(0.0..160.0), 0.0, rng.gen_range(0.0..4.0)]);
            }
            for _ in 0..per {
                points.push([rng.gen_range(0.0..160.0), 8.0, rng.gen_range(0.0..4.0)]);
            }
            for _ in 0..ground {
                points.push([rng.gen_range(0.0..160.0), rng.gen_range(0.0..8.0), 0.0]);
            }
        }
        SceneKind::LoopCourse => {
            // a square loop of side 100: buildings line the bottom, right,
            // and left legs at lateral offsets keeping >= 5 m of street
            // clear; the top leg is a featureless corridor. Corner regions
            // stay free of structure so the course can round them.
            let budget = spec.world_points - ground;
            let corridor = budget / 5;
            let per = (budget - corridor) / 34;
            // one building outside each corner so the turns stay fully
            // constrained; footprints keep 5 m of clearance to the street
            for (x0, y0) in [
                (105.0, -14.0),
                (105.0, 106.0),
                (-14.0, 106.0),
                (-14.0, -14.0),
            ] {
                let w = rng.gen_range(5.0..9.0);
                let l = rng.gen_range(5.0..9.0);
                let h = rng.gen_range(3.0..7.0);
                sample_walls(&mut rng, &mut points, x0, y0, w, l, h, per);
            }
            for i in 0..5 {
                let along = 13.0 + i as f64 * 18.0;
                for offset in [-14.0, 8.0] {
                    for (x0, y0) in [(along, offset), (100.0 + offset, along), (offset, along)] {
                        let w = rng.gen_range(5.0..9.0);
                        let l = rng.gen_range(5.0..9.0);
                        let h = rng.gen_range(3.0..7.0);
                        sample_walls(&mut rng, &mut points, x0, y0, w, l, h, per);
                    }
                }
            }
            // corridor walls stop short of the corner arcs
            for _ in 0..corridor / 2 {
                points.push([rng.gen_range(8.0..92.0), 96.0, rng.gen_range(0.0..4.0)]);
            }
            for _ in 0..corridor / 2 {
                points.push([rng.gen_range(8.0..92.0), 104.0, rng.gen_range(0.0..4.0)]);
            }
            // ground strips underneath the four legs of the loop
            for _ in 0..ground {
                let along = rng.gen_range(-10.0..110.0);
                let lat: f64 = rng.gen_range(-6.0..6.0);
                let p = match rng.gen_range(0..4) {
                    0 => [along, lat, 0.0],
                    1 => [100.0 + lat, along, 0.0],
                    2 => [along, 100.0 + lat.clamp(-3.5, 3.5), 0.0],
                    _ => [lat, along, 0.0],
                };
                points.push(p);
            }
        }
    }
    World { points }
}

/// One simulated scan: world points within range and field of view of the
/// sensor pose, expressed in the sensor frame with additive noise. Returns
/// the cloud and the world index of every scan point.
pub fn sample_scan(
    world: &World,
    pose: &RigidTransform,
    spec: &SceneSpec,
    scan_seed: u64,
) -> (PointCloud, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ scan_seed.wrapping_mul(0x9e3779b97f4a7c15));
    let inv = pose.inverse();
    let keep_azimuth = 360.0 - spec.fov_cut_deg;
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for (i, &p) in world.points.iter().enumerate() {
        let q = inv.apply(p);
        let range = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
        if range > spec.max_range {
            continue;
        }
        let azimuth = q[1].atan2(q[0]).to_degrees();
        // the removed sector is centered on the rear (+-180 deg)
        if azimuth.abs() > keep_azimuth / 2.0 {
            continue;
        }
        points.push([
            q[0] + gaussian(&mut rng, spec.noise_sigma),
            q[1] + gaussian(&mut rng, spec.noise_sigma),
            q[2] + gaussian(&mut rng, spec.noise_sigma),
        ]);
        ids.push(i);
    }
    (PointCloud::new(points), ids)
}

/// A scan pair with ground truth and a true-match oracle.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub cloud_a: PointCloud,
    pub cloud_b: PointCloud,
    /// Maps a-frame points into the b frame.
    pub t_gt: RigidTransform,
    /// Index pairs sampling the same world point.
    pub true_matches: Vec<(usize, usize)>,
    /// Measured overlap (fraction of a's points visible in b).
    pub overlap: f64,
}

fn pose_at(world_center: [f64; 2], baseline: f64, yaw: f64, dir: f64) -> RigidTransform {
    let t = Vector3::new(
        world_center[0] + baseline * dir.cos(),
        world_center[1] + baseline * dir.sin(),
        1.2,
    );
    RigidTransform::from_axis_angle(Vector3::z(), yaw, t)
}

fn make_pair(
    world: &World,
    spec: &SceneSpec,
    pose_a: &RigidTransform,
    pose_b: &RigidTransform,
) -> ScenePair {
    let (cloud_a, ids_a) = sample_scan(world, pose_a, spec, 1);
    let (cloud_b, ids_b) = sample_scan(world, pose_b, spec, 2);
    let t_gt = pose_b.inverse().compose(pose_a);
    let pos_b: BTreeMap<usize, usize> = ids_b.iter().enumerate().map(|(j, &w)| (w, j)).collect();
    let mut true_matches = Vec::new();
    for (i, w) in ids_a.iter().enumerate() {
        if let Some(&j) = pos_b.get(w) {
            true_matches.push((i, j));
        }
    }
    let overlap = if cloud_a.is_empty() {
        0.0
    } else {
        true_matches.len() as f64 / cloud_a.len() as f64
    };
    ScenePair {
        cloud_a,
        cloud_b,
        t_gt,
        true_matches,
        overlap,
    }
}

/// Generate a scan pair whose overlap lands within `tolerance` of the
/// target by searching over the sensor baseline. The relative pose
/// carries a yaw of `yaw_magnitude` radians.
pub fn generate_scene_pair(
    spec: &SceneSpec,
    yaw_magnitude: f64,
    overlap_target: f64,
    tolerance: f64,
) -> Result<ScenePair> {
    if !(0.0..=1.0).contains(&overlap_target) || overlap_target <= 0.0 {
        return Err(HarnessError::Generation(format!(
            "overlap target {overlap_target} outside (0, 1]"
        )));
    }
    let world = generate_world(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(101));
    let center = match spec.kind {
        SceneKind::UrbanBlocks => [55.0, 55.0],
        SceneKind::Corridor => [80.0, 4.0],
        SceneKind::LoopCourse => [50.0, 0.0],
    };
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let yaw_a = rng.gen_range(0.0..std::f64::consts::TAU);
    let pose_a = pose_at(center, 0.0, yaw_a, dir);
    if overlap_target >= 0.999 {
        return Ok(make_pair(&world, spec, &pose_a, &pose_a));
    }
    let (mut lo, mut hi) = (0.0, spec.max_range * 1.5);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let pose_b = pose_at(center, mid, yaw_a + yaw_magnitude, dir);
        let pair = make_pair(&world, spec, &pose_a, &pose_b);
        if (pair.overlap - overlap_target).abs() <= tolerance && !pair.true_matches.is_empty() {
            return Ok(pair);
        }
        if pair.overlap > overlap_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(HarnessError::Generation(format!(
        "could not reach overlap {overlap_target} +- {tolerance} for seed {}",
        spec.seed
    )))
}

/// Oracle correspondences straight from the true-match labels (weights 1,
/// patches assigned round-robin over `n_patches`).
pub fn oracle_correspondences(pair: &ScenePair, n_patches: usize) -> Vec<Correspondence> {
    pair.true_matches
        .iter()
        .enumerate()
        .map(|(k, &(i, j))| Correspondence {
            a: pair.cloud_a.points[i],
            b: pair.cloud_b.points[j],
            weight: 1.0,
            patch: k % n_patches,
        })
        .collect()
}

/// Corrupt oracle correspondences to a controlled inlier ratio the way
/// bad patch matches produce outliers: a fraction of patches keeps its
/// true pairs, the rest get uniformly resampled targets.
pub fn corrupted_correspondences(
    pair: &ScenePair,
    n_patches: usize,
    inlier_ratio: f64,
    seed: u64,
) -> Vec<Correspondence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean_count = (inlier_ratio * n_patches as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_patches).collect();
    for i in (1..n_patches).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let clean: Vec<usize> = order.into_iter().take(clean_count).collect();
    let nb = pair.cloud_b.len();
    oracle_correspondences(pair, n_patches)
        .into_iter()
        .map(|mut c| {
            if !clean.contains(&c.patch) {
                c.b = pair.cloud_b.points[rng.gen_range(0..nb)];
            }
            c
        })
        .collect()
}

// ── trajectories ────────────────────────────────────────────────────────

/// A simulated drive: per-scan world poses and sensor-frame scans.
#[derive(Debug, Clone)]
pub struct Course {
    pub poses: Vec<RigidTransform>,
    pub scans: Vec<PointCloud>,
    pub world: World,
}

/// Sample a closed loop (or a straight corridor run) at roughly `spacing`
/// meters between scans.
pub fn generate_course(spec: &SceneSpec, n_scans: usize, spacing: f64) -> Result<Course> {
    if n_scans == 0 {
        return Err(HarnessError::Generation("need at least one scan".into()));
    }
    let world = generate_world(spec);
    let mut poses = Vec::with_capacity(n_scans);
    for k in 0..n_scans {
        let s = k as f64 * spacing;
        let (x, y, yaw) = match spec.kind {
            SceneKind::Corridor => (s.min(155.0), 4.0, 0.0),
            SceneKind::UrbanBlocks => {
                // a straight diagonal street run
                (
                    5.0 + s * 0.707,
                    5.0 + s * 0.707,
                    std::f64::consts::FRAC_PI_4,
                )
            }
            SceneKind::LoopCourse => {
                // square loop of side 100 traversed counterclockwise:
                // bottom rightward, right side up, top leftward (through
                // the corridor), left side down. Corners are rounded with
                // radius-8 arcs so heading changes continuously and a
                // constant-velocity tracker can follow the turn.
                let side = 100.0;
                let radius = 8.0;
                let straight = side - 2.0 * radius;
                let arc = std::f64::consts::FRAC_PI_2 * radius;
                let lap = s % (4.0 * (straight + arc));
                let leg = (lap / (straight + arc)) as usize;
                let u = lap - leg as f64 * (straight + arc);
                // leg-local pose: straight run then the quarter arc
                let (lx, ly, lyaw) = if u < straight {
                    (radius + u, 0.0, 0.0)
                } else {
                    let ang = (u - straight) / radius;
                    (
                        side - radius + radius * (ang - std::f64::consts::FRAC_PI_2).cos(),
                        radius + radius * (ang - std::f64::consts::FRAC_PI_2).sin(),
                        ang,
                    )
                };
                // rotate the leg into place around the square's center
                let base = leg as f64 * std::f64::consts::FRAC_PI_2;
                let (c, sn) = (base.cos(), base.sin());
                let (cx, cy) = (side / 2.0, side / 2.0);
                (
                    cx + c * (lx - cx) - sn * (ly - cy),
                    cy + sn * (lx - cx) + c * (ly - cy),
                    base + lyaw,
                )
            }
        };
        poses.push(RigidTransform::from_axis_angle(
            Vector3::z(),
            yaw,
            Vector3::new(x, y, 1.2),
        ));
    }
    let scans = poses
        .iter()
        .enumerate()
        .map(|(k, pose)| sample_scan(&world, pose, spec, 1000 + k as u64).0)
        .collect();
    Ok(Course {
        poses,
        scans,
        world,
    })
}

// ── key-value config files ──────────────────────────────────────────────

/// A flat `key = value` config file (one pair per line, `#` comments).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(HarnessError::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn from_file(path: &Path) -> Result<KvConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| HarnessError::Config(format!("{key}: {v:?} is not a number")))
            })
            .transpose()
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| HarnessError::Config(format!("{key}: {v:?} is not an integer")))
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

//! Command-line front end: synthetic registration and retrieval runs, the
//! SLAM harness, toy training, artifact re-evaluation, and a selftest of
//! the numerical oracles.
//!
//! Exit codes: 0 success, 2 validation failure, 3 registration or
//! relocalization failure, 64 usage error. All metric output is a single
//! deterministic JSON document on stdout (timings go to stderr), and every
//! result embeds the effective config and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use loopkit_core::compute::ParamStore;
use loopkit_core::harness::{
    generate_course, generate_scene_pair, read_kitti_bin, KvConfig, SceneKind, SceneSpec,
};
use loopkit_core::losses::{course_triplet_labels, train_stage1, train_stage2, TrainConfig};
use loopkit_core::pipeline::{correspondences_csv, Model, ModelConfig, Solver};
use loopkit_core::registration::{match_quality, registration_metrics, MetricThresholds};
use loopkit_core::retrieval::{auc, recall_at_1, DescriptorDb};
use loopkit_core::slam::{self, SlamConfig, SlamOptions};

const EXIT_VALIDATION: i32 = 2;
const EXIT_REGISTRATION: i32 = 3;
const EXIT_USAGE: i32 = 64;

#[derive(Parser)]
#[command(name = "loopkit", version, about = "LiDAR loop closing and relocalization pipeline")]
struct Cli {
    /// Key-value config file overriding pipeline and SLAM parameters.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Register a point-cloud pair and print metrics JSON.
    Register(RegisterArgs),
    /// Build a descriptor database over a course and score retrieval.
    Retrieve(RetrieveArgs),
    /// Run the tracking/relocalization/loop-closing harness on a course.
    SlamRun(SlamRunArgs),
    /// Two-stage toy training on synthetic data.
    TrainToy(TrainToyArgs),
    /// Recompute metric suites from exported artifacts.
    Eval(EvalArgs),
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverArg {
    Lgr,
    Ransac,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args)]
struct RegisterArgs {
    /// Scene generator: urban-blocks, corridor, or loop-course.
    #[arg(long, default_value = "urban-blocks")]
    scene: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SolverArg::Lgr)]
    solver: SolverArg,
    #[arg(long, default_value_t = 5000)]
    ransac_iters: usize,
    /// Overlap target for the generated pair.
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    /// Yaw magnitude of the hidden transform, radians.
    #[arg(long, default_value_t = 0.5)]
    yaw: f64,
    /// Register these KITTI .bin files instead of a generated pair.
    #[arg(long, requires = "cloud_b")]
    cloud_a: Option<PathBuf>,
    #[arg(long, requires = "cloud_a")]
    cloud_b: Option<PathBuf>,
    /// Trained parameter container; defaults to seeded initialization.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Write the dense correspondences as CSV.
    #[arg(long)]
    csv_out: Option<PathBuf>,
    /// Append the result JSON line to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long, default_value = "loop-course")]
    course: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 90)]
    scans: usize,
    #[arg(long, default_value_t = 5.0)]
    spacing: f64,
    /// Positive pairs lie within this many meters.
    #[arg(long, default_value_t = 6.0)]
    pos_radius: f64,
    /// Queries skip this many temporal neighbors on each side.
    #[arg(long, default_value_t = 5)]
    neighbor_skip: usize,
    #[arg(long)]
    params: Option<PathBuf>,
    /// Save the descriptor database here.
    #[arg(long)]
    db_out: Option<PathBuf>,
}

#[derive(Args)]
struct SlamRunArgs {
    #[arg(long, default_value = "loop-course")]
    course: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 120)]
    scans: usize,
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    /// Seconds between scans.
    #[arg(long, default_value_t = 0.5)]
    dt: f64,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    reloc: Switch,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    loops: Switch,
    #[arg(long)]
    params: Option<PathBuf>,
    /// Estimated keyframe trajectory, TUM format.
    #[arg(long)]
    traj_out: Option<PathBuf>,
    /// Ground-truth trajectory, TUM format.
    #[arg(long)]
    gt_out: Option<PathBuf>,
    /// Estimated keyframe poses, KITTI 12-value format.
    #[arg(long)]
    kitti_out: Option<PathBuf>,
    /// JSON-lines event log.
    #[arg(long)]
    events_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainToyArgs {
    /// 1, 2, or all.
    #[arg(long, default_value = "all")]
    stage: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stage-1 scene pairs.
    #[arg(long, default_value_t = 16)]
    pairs: usize,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    /// Stage-2 course length.
    #[arg(long, default_value_t = 40)]
    scans: usize,
    #[arg(long, default_value_t = 5.0)]
    spacing: f64,
    /// Warm-start parameters (required for stage 2 alone).
    #[arg(long)]
    params_in: Option<PathBuf>,
    #[arg(long)]
    params_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory in TUM format; evaluated against --gt-traj.
    #[arg(long, requires = "gt_traj")]
    traj: Option<PathBuf>,
    #[arg(long, requires = "traj")]
    gt_traj: Option<PathBuf>,
    /// Timestamp association tolerance, seconds.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    /// JSON-lines result file to aggregate (mean rte/rre, recall).
    #[arg(long)]
    results: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("{e}");
            std::process::exit(EXIT_USAGE);
        }
    };
    std::process::exit(run(cli));
}

fn run(cli: Cli) -> i32 {
    let kv = match cli.config.as_deref().map(KvConfig::from_file).transpose() {
        Ok(kv) => kv.unwrap_or_default(),
        Err(e) => {
            eprintln!("config: {e}");
            return EXIT_VALIDATION;
        }
    };
    let result = match cli.cmd {
        Cmd::Register(args) => cmd_register(args, &kv),
        Cmd::Retrieve(args) => cmd_retrieve(args, &kv),
        Cmd::SlamRun(args) => cmd_slam_run(args, &kv),
        Cmd::TrainToy(args) => cmd_train_toy(args, &kv),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Selftest => cmd_selftest(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_VALIDATION
        }
    }
}

/// Applies `pipeline.*` config-file keys onto the model config.
fn model_config(kv: &KvConfig) -> anyhow::Result<ModelConfig> {
    let mut cfg = ModelConfig::toy();
    if let Some(v) = kv.get_u64("pipeline.sinkhorn_iters")? {
        cfg.sinkhorn_iters = v as usize;
    }
    if let Some(v) = kv.get_u64("pipeline.n_c")? {
        cfg.n_c = v as usize;
    }
    if let Some(v) = kv.get_u64("pipeline.patch_cap")? {
        cfg.patch_cap = v as usize;
    }
    if let Some(v) = kv.get_f64("pipeline.tau_a")? {
        cfg.tau_a = v;
    }
    if let Some(v) = kv.get_u64("pipeline.n_r")? {
        cfg.n_r = v as usize;
    }
    if let Some(v) = kv.get("pipeline.use_vote") {
        cfg.use_vote = v.parse().map_err(|_| anyhow!("pipeline.use_vote: {v:?} is not a bool"))?;
    }
    Ok(cfg)
}

/// Applies `slam.*` config-file keys onto the SLAM config.
fn slam_config(kv: &KvConfig) -> anyhow::Result<SlamConfig> {
    let mut cfg = SlamConfig::default();
    let fields: [(&str, &mut f64); 8] = [
        ("slam.lambda_thresh", &mut cfg.lambda_thresh),
        ("slam.keyframe_distance", &mut cfg.keyframe_distance),
        ("slam.degenerate_period", &mut cfg.degenerate_period),
        ("slam.rho_r", &mut cfg.rho_r),
        ("slam.rho_s", &mut cfg.rho_s),
        ("slam.icp_max_corr", &mut cfg.icp_max_corr),
        ("slam.reloc_hz", &mut cfg.reloc_hz),
        ("slam.loop_hz", &mut cfg.loop_hz),
    ];
    for (key, field) in fields {
        if let Some(v) = kv.get_f64(key)? {
            *field = v;
        }
    }
    if let Some(v) = kv.get_u64("slam.exclusion_window")? {
        cfg.exclusion_window = v;
    }
    if let Some(v) = kv.get_u64("slam.local_map_scans")? {
        cfg.local_map_scans = v as usize;
    }
    Ok(cfg)
}

fn scene_spec(kind: &str, seed: u64, kv: &KvConfig) -> anyhow::Result<SceneSpec> {
    let kind: SceneKind = kind.parse().map_err(|e| anyhow!("{e}"))?;
    let mut spec = SceneSpec::new(kind, seed);
    if let Some(v) = kv.get_u64("scene.world_points")? {
        spec.world_points = v as usize;
    }
    if let Some(v) = kv.get_f64("scene.noise_sigma")? {
        spec.noise_sigma = v;
    }
    if let Some(v) = kv.get_f64("scene.fov_cut_deg")? {
        spec.fov_cut_deg = v;
    }
    if let Some(v) = kv.get_f64("scene.max_range")? {
        spec.max_range = v;
    }
    Ok(spec)
}

fn load_model(params: Option<&Path>, cfg: ModelConfig, seed: u64) -> anyhow::Result<Model> {
    match params {
        Some(path) => {
            let store = ParamStore::load(path).with_context(|| format!("loading {}", path.display()))?;
            Ok(Model::from_store(cfg, store)?)
        }
        None => Ok(Model::init(cfg, seed)?),
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_register(args: RegisterArgs, kv: &KvConfig) -> anyhow::Result<i32> {
    let cfg = model_config(kv)?;
    let model = load_model(args.params.as_deref(), cfg.clone(), args.seed)?;
    let solver = match args.solver {
        SolverArg::Lgr => Solver::Lgr,
        SolverArg::Ransac => Solver::Ransac(args.ransac_iters),
    };
    let spec = scene_spec(&args.scene, args.seed, kv)?;
    let (cloud_a, cloud_b, gt) = match (&args.cloud_a, &args.cloud_b) {
        (Some(a), Some(b)) => (read_kitti_bin(a)?, read_kitti_bin(b)?, None),
        _ => {
            let pair = generate_scene_pair(&spec, args.yaw, args.overlap, 0.05)?;
            (pair.cloud_a, pair.cloud_b, Some(pair.t_gt))
        }
    };
    let started = Instant::now();
    let outcome = model.register(&cloud_a, &cloud_b, solver, args.seed);
    eprintln!("registration took {:.3} s", started.elapsed().as_secs_f64());
    let (result, out) = match outcome {
        Ok(v) => v,
        Err(e) => {
            eprintln!("registration failed: {e}");
            return Ok(EXIT_REGISTRATION);
        }
    };
    if let Some(path) = &args.csv_out {
        write_file(path, &correspondences_csv(&out))?;
    }
    let mut doc = json!({
        "task": "register",
        "scene": args.scene,
        "seed": args.seed,
        "solver": result.solver,
        "config": cfg,
        "correspondences": out.dense_pairs.len(),
        "inliers": result.inliers,
    });
    let mut recalled = true;
    if let Some(t_gt) = gt {
        let metrics = registration_metrics(&result.transform, &t_gt, MetricThresholds::default());
        let dense: Vec<(usize, usize)> = out.dense_pairs.iter().map(|p| (p.a, p.b)).collect();
        let sparse: Vec<(usize, usize)> = out.sparse_pairs.iter().map(|p| (p.a, p.b)).collect();
        let quality = match_quality(
            &dense,
            &sparse,
            &out.dense_points_a,
            &out.dense_points_b,
            &out.grouping_a,
            &out.grouping_b,
            &t_gt,
            cfg.tau_a,
        );
        recalled = metrics.recalled;
        doc["metrics"] = serde_json::to_value(metrics)?;
        doc["match_quality"] = serde_json::to_value(quality)?;
    }
    let line = serde_json::to_string(&doc)?;
    println!("{line}");
    if let Some(path) = &args.out {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{line}")?;
    }
    Ok(if recalled { 0 } else { EXIT_REGISTRATION })
}

fn cmd_retrieve(args: RetrieveArgs, kv: &KvConfig) -> anyhow::Result<i32> {
    let cfg = model_config(kv)?;
    let model = load_model(args.params.as_deref(), cfg.clone(), args.seed)?;
    let spec = scene_spec(&args.course, args.seed, kv)?;
    let course = generate_course(&spec, args.scans, args.spacing)?;
    let started = Instant::now();
    let mut db = None;
    let mut descriptors = Vec::with_capacity(course.scans.len());
    for (k, scan) in course.scans.iter().enumerate() {
        let mut g = loopkit_core::Graph::new();
        let mut binding = loopkit_core::compute::Binding::with_filter(|_| false);
        let id = model.describe(&mut g, &mut binding, scan)?;
        let d = g.values(id).to_vec();
        db.get_or_insert_with(|| DescriptorDb::new(d.len())).insert(k as u64, d.clone())?;
        descriptors.push(d);
    }
    let db = db.ok_or_else(|| anyhow!("course produced no scans"))?;
    eprintln!("described {} scans in {:.3} s", course.scans.len(), started.elapsed().as_secs_f64());

    let is_positive = |i: usize, j: usize| {
        let a = course.poses[i].translation;
        let b = course.poses[j].translation;
        (a - b).norm() < args.pos_radius
    };
    let mut ranked = Vec::new();
    let mut scored = Vec::new();
    for i in 0..course.scans.len() {
        let keep = |j: u64| {
            let j = j as usize;
            j != i && j.abs_diff(i) > args.neighbor_skip
        };
        let candidates: Vec<usize> = (0..course.scans.len()).filter(|&j| keep(j as u64)).collect();
        if !candidates.iter().any(|&j| is_positive(i, j)) {
            continue;
        }
        let (hits, _) = db.query(&descriptors[i], candidates.len(), keep)?;
        ranked.push(hits.iter().map(|&(j, _)| is_positive(i, j as usize)).collect::<Vec<bool>>());
        for &(j, d) in &hits {
            scored.push((-d, is_positive(i, j as usize)));
        }
    }
    if ranked.is_empty() {
        bail!("no query had a positive candidate; grow the course or pos radius");
    }
    let doc = json!({
        "task": "retrieve",
        "course": args.course,
        "seed": args.seed,
        "scans": args.scans,
        "spacing": args.spacing,
        "pos_radius": args.pos_radius,
        "config": cfg,
        "queries": ranked.len(),
        "recall_at_1": recall_at_1(&ranked)?,
        "auc": auc(&scored)?,
    });
    println!("{}", serde_json::to_string(&doc)?);
    if let Some(path) = &args.db_out {
        db.save(path)?;
    }
    Ok(0)
}

fn cmd_slam_run(args: SlamRunArgs, kv: &KvConfig) -> anyhow::Result<i32> {
    let cfg = model_config(kv)?;
    let slam_cfg = slam_config(kv)?;
    let model = load_model(args.params.as_deref(), cfg.clone(), args.seed)?;
    let spec = scene_spec(&args.course, args.seed, kv)?;
    let course = generate_course(&spec, args.scans, args.spacing)?;
    let timestamps: Vec<f64> = (0..course.scans.len()).map(|k| k as f64 * args.dt).collect();
    let opts = SlamOptions { relocalization: args.reloc.is_on(), loop_closing: args.loops.is_on() };
    let started = Instant::now();
    let output = match slam::run(&model, &course.scans, &timestamps, &slam_cfg, opts) {
        Ok(v) => v,
        Err(e @ slam::SlamError::RelocalizationFailed(_)) => {
            eprintln!("{e}");
            return Ok(EXIT_REGISTRATION);
        }
        Err(e) => return Err(e.into()),
    };
    eprintln!("slam run took {:.3} s", started.elapsed().as_secs_f64());

    let gt: Vec<(f64, loopkit_core::RigidTransform)> =
        timestamps.iter().copied().zip(course.poses.iter().copied()).collect();
    let est = output.keyframe_trajectory();
    let report = slam::ape(&est, &gt, args.dt / 2.0)?;
    let loops = output.graph.edges.iter().filter(|e| e.kind == slam::EdgeKind::Loop).count();
    let relocs =
        output.graph.edges.iter().filter(|e| e.kind == slam::EdgeKind::Relocalization).count();
    let degenerated = output.keyframes.iter().filter(|k| k.degenerated).count();
    let doc = json!({
        "task": "slam-run",
        "course": args.course,
        "seed": args.seed,
        "scans": args.scans,
        "spacing": args.spacing,
        "reloc": opts.relocalization,
        "loops": opts.loop_closing,
        "config": cfg,
        "slam_config": slam_cfg,
        "keyframes": output.keyframes.len(),
        "degenerated_keyframes": degenerated,
        "loop_edges": loops,
        "relocalization_edges": relocs,
        "ape": {
            "mean": report.mean,
            "median": report.median,
            "max": report.max,
            "rmse": report.rmse,
        },
    });
    println!("{}", serde_json::to_string(&doc)?);
    if let Some(path) = &args.traj_out {
        write_file(path, &slam::tum_lines(&est))?;
    }
    if let Some(path) = &args.gt_out {
        write_file(path, &slam::tum_lines(&gt))?;
    }
    if let Some(path) = &args.kitti_out {
        let poses: Vec<_> = est.iter().map(|&(_, p)| p).collect();
        write_file(path, &slam::kitti_pose_lines(&poses))?;
    }
    if let Some(path) = &args.events_out {
        write_file(path, &slam::event_log_lines(&output.events))?;
    }
    Ok(0)
}

fn cmd_train_toy(args: TrainToyArgs, kv: &KvConfig) -> anyhow::Result<i32> {
    let cfg = model_config(kv)?;
    let mut model = load_model(args.params_in.as_deref(), cfg.clone(), args.seed)?;
    let train_cfg = TrainConfig { epochs: args.epochs, seed: args.seed, ..TrainConfig::default() };
    let mut doc = json!({
        "task": "train-toy",
        "stage": args.stage,
        "seed": args.seed,
        "epochs": args.epochs,
        "config": cfg,
        "train_config": train_cfg,
    });
    let run_stage1 = args.stage == "1" || args.stage == "all";
    let run_stage2 = args.stage == "2" || args.stage == "all";
    if !run_stage1 && !run_stage2 {
        bail!("--stage must be 1, 2, or all");
    }
    if run_stage1 {
        let started = Instant::now();
        let mut pairs = Vec::with_capacity(args.pairs);
        for k in 0..args.pairs {
            let spec = scene_spec("urban-blocks", args.seed + 1000 + k as u64, kv)?;
            let overlap = 0.4 + 0.5 * (k as f64 / args.pairs.max(1) as f64);
            pairs.push(generate_scene_pair(&spec, 0.4, overlap, 0.08)?);
        }
        let report = train_stage1(&mut model, &pairs, &train_cfg)?;
        eprintln!("stage 1 took {:.1} s", started.elapsed().as_secs_f64());
        doc["stage1"] = json!({
            "pairs": args.pairs,
            "first_loss": report.first_loss,
            "final_loss": report.final_loss,
            "curve": report.curve,
        });
    }
    if run_stage2 {
        let started = Instant::now();
        let spec = scene_spec("loop-course", args.seed + 2000, kv)?;
        let course = generate_course(&spec, args.scans, args.spacing)?;
        let labels = course_triplet_labels(&course, 12.0, 30.0);
        let report = train_stage2(&mut model, &course, &labels, &train_cfg)?;
        eprintln!("stage 2 took {:.1} s", started.elapsed().as_secs_f64());
        doc["stage2"] = json!({
            "scans": args.scans,
            "first_loss": report.first_loss,
            "final_loss": report.final_loss,
            "curve": report.curve,
        });
    }
    println!("{}", serde_json::to_string(&doc)?);
    if let Some(path) = &args.params_out {
        model.store.save(path)?;
    }
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<i32> {
    if let (Some(est_path), Some(gt_path)) = (&args.traj, &args.gt_traj) {
        let est = slam::parse_tum(&std::fs::read_to_string(est_path)?)?;
        let gt = slam::parse_tum(&std::fs::read_to_string(gt_path)?)?;
        let report = slam::ape(&est, &gt, args.tolerance)?;
        let doc = json!({
            "task": "eval",
            "poses": report.errors.len(),
            "ape": {
                "mean": report.mean,
                "median": report.median,
                "max": report.max,
                "rmse": report.rmse,
            },
        });
        println!("{}", serde_json::to_string(&doc)?);
        return Ok(0);
    }
    if let Some(path) = &args.results {
        let text = std::fs::read_to_string(path)?;
        let mut rte = Vec::new();
        let mut rre = Vec::new();
        let mut recalled = 0usize;
        let mut total = 0usize;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let Some(m) = v.get("metrics") else { continue };
            total += 1;
            rte.push(m["rte"].as_f64().ok_or_else(|| anyhow!("metrics.rte missing"))?);
            rre.push(m["rre"].as_f64().ok_or_else(|| anyhow!("metrics.rre missing"))?);
            if m["recalled"].as_bool() == Some(true) {
                recalled += 1;
            }
        }
        if total == 0 {
            bail!("no metric records in {}", path.display());
        }
        let doc = json!({
            "task": "eval",
            "records": total,
            "mean_rte": rte.iter().sum::<f64>() / total as f64,
            "mean_rre": rre.iter().sum::<f64>() / total as f64,
            "registration_recall": recalled as f64 / total as f64,
        });
        println!("{}", serde_json::to_string(&doc)?);
        return Ok(0);
    }
    bail!("eval needs either --traj/--gt-traj or --results");
}

fn cmd_selftest() -> anyhow::Result<i32> {
    use loopkit_core::Graph;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{} {}", if ok { "ok  " } else { "FAIL" }, name);
        if !ok {
            failures += 1;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // doubly stochastic convergence of the assignment solver
    {
        let mut g = Graph::new();
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let scores = g.leaf(vals, &[8, 8], false)?;
        let alpha = g.leaf(vec![0.3], &[1], false)?;
        let z = loopkit_core::matching::sinkhorn(&mut g, scores, alpha, 100)?;
        let residual = loopkit_core::matching::interior_residual(g.values(z), 9, 9);
        check("sinkhorn interior residual <= 1e-6", residual <= 1e-6);
    }

    // rotary application preserves norms (block orthogonality)
    {
        let mut g = Graph::new();
        let feats: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let theta: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = g.leaf(feats.clone(), &[4, 8], false)?;
        let th = g.leaf(theta, &[4, 4], false)?;
        let y = g.rotary_apply(th, x)?;
        let before: f64 = feats.iter().map(|v| v * v).sum();
        let after: f64 = g.values(y).iter().map(|v| v * v).sum();
        check("rotary rotation preserves feature norms", (before - after).abs() < 1e-9);
    }

    // closed-form alignment recovers a random transform
    {
        let t = loopkit_core::RigidTransform::from_axis_angle(
            Vector3::new(0.3, -0.2, 0.9).normalize(),
            0.7,
            Vector3::new(1.0, -2.0, 0.5),
        );
        let pts: Vec<[f64; 3]> = (0..30)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
            .collect();
        let corr: Vec<loopkit_core::registration::Correspondence> = pts
            .iter()
            .map(|&p| loopkit_core::registration::Correspondence {
                a: p,
                b: t.apply(p),
                weight: 1.0,
                patch: 0,
            })
            .collect();
        let est = loopkit_core::registration::weighted_svd(&corr)?;
        let m = registration_metrics(&est, &t, MetricThresholds::default());
        check("weighted svd recovers a noise-free transform", m.rre < 1e-9 && m.rte < 1e-9);
    }

    // autodiff agrees with central finite differences
    {
        let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = loopkit_core::compute::finite_diff_check(
            |g, x| {
                let h = g.tanh(x)?;
                let s = g.softmax_rows(h)?;
                g.sum(s)
            },
            &x0,
            &[3, 4],
            1e-5,
        )?;
        check("finite-difference gradient agreement", err < 1e-4);
    }

    // scene generation is deterministic
    {
        let spec = SceneSpec::new(SceneKind::UrbanBlocks, 7);
        let a = generate_scene_pair(&spec, 0.3, 0.5, 0.05)?;
        let b = generate_scene_pair(&spec, 0.3, 0.5, 0.05)?;
        check(
            "scene pair generation is bit-deterministic",
            a.cloud_a.points == b.cloud_a.points && a.cloud_b.points == b.cloud_b.points,
        );
    }

    if failures > 0 {
        eprintln!("{failures} selftest check(s) failed");
        return Ok(EXIT_VALIDATION);
    }
    Ok(0)
}

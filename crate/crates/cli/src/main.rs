//! `dslam`: simulate sequences, run the pipeline, evaluate and ablate.
//!
//! Exit codes: 0 success, 2 config or parse error, 3 I/O error, 4 pipeline
//! failure, 5 trajectory association failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use dslam_core::eval::{
    self, depth_metrics, matched_poses, read_tum, AlignMode, EvalError, RpeResult, ASSOC_TOL_S,
};
use dslam_core::pipeline::{
    config_hash, run_sequence, KeyframeDiagnostics, Pipeline, PipelineConfig, PipelineError, TrajectoryEstimate, ABLATIONS,
};
use dslam_core::provider::{FileProvider, FrameId, ProviderError, SequenceProvider};
use dslam_core::raster::{Raster, RasterKind};
use dslam_core::sim::{SceneSpec, SimError, SyntheticScene};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dslam", version, about = "Dynamic-scene SLAM backend experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence directory with ground truth.
    Simulate {
        /// Scene spec (JSON); defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the pipeline over a sequence directory.
    Run {
        #[arg(long)]
        seq: PathBuf,
        /// Trajectory output (TUM). Diagnostics are written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_mask: bool,
        #[arg(long)]
        no_prior: bool,
        /// Constant prior weight instead of the uncertainty-derived one.
        #[arg(long, value_name = "F")]
        fixed_weight: Option<f64>,
        /// Pipeline config (JSON); defaults apply to omitted fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the scale-aligned keyframe depth maps.
        #[arg(long)]
        depth_out: Option<PathBuf>,
    },
    /// Score an estimate against ground truth.
    Eval {
        /// TUM trajectory, or a depth directory in depth mode.
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long, value_enum, default_value_t = Align::Sim3)]
        align: Align,
        /// Depth mode: skip the per-sequence median scale.
        #[arg(long)]
        no_scale: bool,
    },
    /// Run ablation rows (a) to (e) and write a CSV table.
    Ablate {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pipeline seeds; the table reports the per-row median.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Ate,
    Rpe,
    Depth,
}

#[derive(Clone, Copy, ValueEnum)]
enum Align {
    Sim3,
    Se3,
    None,
}

impl From<Align> for AlignMode {
    fn from(a: Align) -> Self {
        match a {
            Align::Sim3 => AlignMode::Sim3,
            Align::Se3 => AlignMode::Se3,
            Align::None => AlignMode::None,
        }
    }
}

struct Failure {
    code: u8,
    msg: String,
}

type CliResult<T> = Result<T, Failure>;

fn fail(code: u8, msg: impl std::fmt::Display) -> Failure {
    Failure { code, msg: msg.to_string() }
}

const CONFIG: u8 = 2;
const IO: u8 = 3;
const PIPELINE: u8 = 4;
const ASSOCIATION: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out, seed } => simulate(config.as_deref(), &out, seed),
        Command::Run { seq, out, no_mask, no_prior, fixed_weight, config, depth_out } => {
            pipeline_config(config.as_deref(), no_mask, no_prior, fixed_weight)
                .and_then(|cfg| run(&seq, &out, cfg, depth_out.as_deref()))
        }
        Command::Eval { est, gt, mode, align, no_scale } => evaluate(&est, &gt, mode, align.into(), no_scale),
        Command::Ablate { seq, out, seeds, config } => {
            pipeline_config(config.as_deref(), false, false, None).and_then(|cfg| ablate(&seq, &out, &seeds, cfg))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dslam: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// Strict JSON config: unknown keys are rejected by the target type.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| fail(IO, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fail(CONFIG, format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| fail(IO, format!("{}: {e}", path.display())))
}

fn io_fail(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| fail(IO, format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    scene: &'a SceneSpec,
    seed: u64,
    /// Artifact paths relative to the manifest's directory.
    sequence: &'a str,
    ground_truth: &'a str,
    config_hash: String,
}

fn simulate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut spec: SceneSpec = load_config(config)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let scene = SyntheticScene::new(spec.clone()).map_err(|e| fail(CONFIG, e))?;
    scene.export(out).map_err(|e| match e {
        SimError::Io(e) => fail(IO, format!("{}: {e}", out.display())),
        other => fail(CONFIG, other),
    })?;
    let manifest_path = out.join("manifest.json");
    write_json(
        &manifest_path,
        &SimulateManifest {
            scene: &spec,
            seed: spec.seed,
            sequence: ".",
            ground_truth: "gt_traj.tum",
            config_hash: config_hash(&spec),
        },
    )?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn pipeline_config(path: Option<&Path>, no_mask: bool, no_prior: bool, fixed_weight: Option<f64>) -> CliResult<PipelineConfig> {
    let mut cfg: PipelineConfig = load_config(path)?;
    cfg.use_mask &= !no_mask;
    if no_prior {
        // Uncertainty only weights the prior term.
        cfg.use_prior = false;
        cfg.use_uncertainty = false;
    }
    if let Some(w) = fixed_weight {
        cfg.use_uncertainty = false;
        cfg.fixed_weight = w;
    }
    cfg.validate().map_err(|e| fail(CONFIG, e))?;
    Ok(cfg)
}

fn open_sequence(seq: &Path) -> CliResult<FileProvider> {
    FileProvider::open(seq).map_err(|e| match e {
        ProviderError::Io { .. } | ProviderError::Raster { .. } => fail(IO, e),
        other => fail(CONFIG, other),
    })
}

/// `out` with `suffix` appended to its file stem, e.g. `run.tum` -> `run.scale.log`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

#[derive(Serialize)]
struct RunManifest<'a> {
    pipeline: &'a PipelineConfig,
    seed: u64,
    sequence: &'a Path,
    trajectory: &'a Path,
    diagnostics: PathBuf,
    config_hash: String,
}

fn run(seq: &Path, out: &Path, cfg: PipelineConfig, depth_out: Option<&Path>) -> CliResult<()> {
    let hash = cfg.hash();
    let mut p = Pipeline::new(open_sequence(seq)?, cfg.clone()).map_err(pipeline_failure)?;
    if let Some(dir) = depth_out {
        fs::create_dir_all(dir).map_err(io_fail(dir))?;
    }
    let mut error = None;
    for frame in 0..p.provider().frame_count() as FrameId {
        match p.process_frame(frame) {
            Ok(report) => {
                if let (Some(dir), Some(depth)) = (depth_out, report.aligned_depth) {
                    let path = dir.join(format!("{frame}.dpr"));
                    depth.save(&path, RasterKind::Depth).map_err(io_fail(&path))?;
                }
            }
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    // Written on failure too: the trajectory then covers the frames processed.
    p.trajectory().write_tum(out, &hash).map_err(io_fail(out))?;
    let diagnostics = write_diagnostics(out, p.diagnostics())?;
    if let Some(e) = error {
        return Err(pipeline_failure(e));
    }
    write_json(
        &sibling(out, ".manifest.json"),
        &RunManifest {
            pipeline: &cfg,
            seed: cfg.seed,
            sequence: seq,
            trajectory: out,
            diagnostics,
            config_hash: hash,
        },
    )
}

/// Keyframe, covariance and scale logs beside `out`; returns the keyframe log path.
fn write_diagnostics(out: &Path, diags: &[KeyframeDiagnostics]) -> CliResult<PathBuf> {
    let lines = |f: &dyn Fn(&KeyframeDiagnostics) -> String| diags.iter().map(|d| f(d) + "\n").collect::<String>();
    let logs: [(&str, String); 3] = [
        (".log", lines(&|d| d.line())),
        (".cov.log", lines(&|d| format!("{} {} {}", d.frame_id, d.sigma_med, d.w_f))),
        (".scale.log", lines(&|d| format!("{} {} {}", d.frame_id, d.s_star, d.scale_inliers))),
    ];
    for (suffix, text) in &logs {
        let path = sibling(out, suffix);
        fs::write(&path, text).map_err(io_fail(&path))?;
    }
    Ok(sibling(out, ".log"))
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(_) => fail(CONFIG, e),
        other => fail(PIPELINE, other),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Io { .. } => fail(IO, e),
        EvalError::Parse { .. } => fail(CONFIG, e),
        EvalError::TooFewMatches(_) | EvalError::LengthMismatch(..) => fail(ASSOCIATION, e),
        other => fail(PIPELINE, other),
    }
}

fn trajectory_scores(est: &Path, gt: &Path, align: AlignMode) -> CliResult<(f64, RpeResult)> {
    let est = read_tum(est).map_err(eval_failure)?;
    let gt = read_tum(gt).map_err(eval_failure)?;
    let (e, g) = matched_poses(&est, &gt, ASSOC_TOL_S).map_err(eval_failure)?;
    let ate = eval::ate_rmse(&e, &g, align).map_err(eval_failure)?;
    let rpe = eval::rpe(&e, &g, align).map_err(eval_failure)?;
    Ok((ate, rpe))
}

/// Depth rasters `<frame>.dpr` present in `est`, each paired with the file of
/// the same name in `gt`.
fn depth_pairs(est: &Path, gt: &Path) -> CliResult<Vec<(Raster, Raster)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(est)
        .map_err(io_fail(est))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dpr"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| {
            let name = p.file_name().expect("listed file");
            let load = |path: &Path| {
                Raster::load(path, RasterKind::Depth).map_err(|e| fail(CONFIG, format!("{}: {e}", path.display())))
            };
            Ok((load(p)?, load(&gt.join(name))?))
        })
        .collect()
}

fn evaluate(est: &Path, gt: &Path, mode: EvalMode, align: AlignMode, no_scale: bool) -> CliResult<()> {
    match mode {
        EvalMode::Ate => {
            let (ate, _) = trajectory_scores(est, gt, align)?;
            println!("ate_rmse={ate:.9}");
        }
        EvalMode::Rpe => {
            let (_, rpe) = trajectory_scores(est, gt, align)?;
            println!("rte={:.9}", rpe.rte);
            println!("rre_deg={:.9}", rpe.rre_deg);
        }
        EvalMode::Depth => {
            let pairs = depth_pairs(est, gt)?;
            if pairs.is_empty() {
                return Err(fail(ASSOCIATION, format!("{}: no depth maps", est.display())));
            }
            let refs: Vec<(&Raster, &Raster)> = pairs.iter().map(|(a, b)| (a, b)).collect();
            let m = depth_metrics(&refs, !no_scale).map_err(|e| match e {
                EvalError::ShapeMismatch | EvalError::NoDepthOverlap => fail(ASSOCIATION, e),
                other => eval_failure(other),
            })?;
            println!("abs_rel={:.9}", m.abs_rel);
            println!("delta_125={:.9}", m.delta_125);
            println!("scale={:.9}", m.scale);
            println!("valid_pixels={}", m.valid_pixels);
        }
    }
    Ok(())
}

/// Worker threads from `DSLAM_THREADS`; unset or 0 means all cores.
fn thread_budget() -> usize {
    let auto = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("DSLAM_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) | None => auto,
        Some(n) => n,
    }
}

fn csv_number(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:.9}")
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| !x.is_nan());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ablate(seq: &Path, out: &Path, seeds: &[u64], base: PipelineConfig) -> CliResult<()> {
    open_sequence(seq)?;
    let gt = seq.join("gt_traj.tum");
    read_tum(&gt).map_err(eval_failure)?;
    fs::create_dir_all(out).map_err(io_fail(out))?;

    let jobs: Vec<(&str, u64)> = ABLATIONS.iter().flat_map(|row| seeds.iter().map(move |&s| (row.0, s))).collect();
    let results = Mutex::new(vec![[f64::NAN; 3]; jobs.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..thread_budget().min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(row, seed)) = jobs.get(i) else { break };
                let cfg = PipelineConfig { seed, ..base.clone() }.with_ablation(row).expect("known row");
                match ablation_run(seq, out, &gt, row, cfg) {
                    Ok(scores) => results.lock().expect("results lock")[i] = scores,
                    Err(f) => eprintln!("dslam: row {row} seed {seed}: {}", f.msg),
                }
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    if results.iter().all(|r| r[0].is_nan()) {
        return Err(fail(PIPELINE, "every ablation run failed"));
    }

    let mut csv = String::from("config,ate_rmse,rte,rre\n");
    for row in ABLATIONS.iter().map(|r| r.0) {
        let runs: Vec<&[f64; 3]> = jobs.iter().zip(&results).filter(|(j, _)| j.0 == row).map(|(_, r)| r).collect();
        let col = |k: usize| csv_number(median(runs.iter().map(|r| r[k]).collect()));
        csv.push_str(&format!("{row},{},{},{}\n", col(0), col(1), col(2)));
    }
    let path = out.join("ablation.csv");
    fs::write(&path, &csv).map_err(io_fail(&path))?;
    print!("{csv}");
    Ok(())
}

fn ablation_run(seq: &Path, out: &Path, gt: &Path, row: &str, cfg: PipelineConfig) -> CliResult<[f64; 3]> {
    let hash = cfg.hash();
    let seed = cfg.seed;
    let traj: TrajectoryEstimate = run_sequence(open_sequence(seq)?, cfg)
        .map(|p| p.trajectory())
        .map_err(|(e, _)| pipeline_failure(e))?;
    let path = out.join(format!("{row}_seed{seed}.tum"));
    traj.write_tum(&path, &hash).map_err(io_fail(&path))?;
    let (ate, rpe) = trajectory_scores(&path, gt, AlignMode::Sim3)?;
    Ok([ate, rpe.rte, rpe.rre_deg])
}

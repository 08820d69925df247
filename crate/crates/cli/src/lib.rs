//! Command-line front end: simulate scenes, run the pipeline, evaluate and
//! plot trajectories, and inspect run manifests.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use dynvo::depth::DepthMap;
use dynvo::evaluation::{
    format_trajectory, read_trajectory, umeyama_align, Alignment, Similarity, Trajectory, TrajectoryFormat,
};
use dynvo::flow::{downsample_flow, read_flo};
use dynvo::geometry::CameraIntrinsics;
use dynvo::pgm::encode_pgm8;
use dynvo::pipeline::{
    gt_step_lengths, gt_trajectory, run_sequence, BackendSet, FlowInput, FlowProvider, SimulatedFlow,
};
use dynvo::simulator::{add_flow_noise, export_truth, generate_scene, read_depth_pgm, render_pair, Scene};
use serde::Serialize;

use config::Overrides;
use manifest::{FrameSummary, Outputs, RunManifest, Seeds, TraceLine};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dynvo", version, about = "Monocular visual odometry in dynamic scenes")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene into a ground-truth bundle
    Simulate {
        #[command(flatten)]
        cfg: Overrides,
        /// Bundle directory; must not exist or be empty
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Estimate a trajectory and write it with a manifest and traces
    Run {
        #[command(flatten)]
        cfg: Overrides,
        /// Read flow and depth from a bundle written by `simulate`
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Absolute trajectory error of an estimate against ground truth
    Eval {
        est: PathBuf,
        gt: PathBuf,
        /// tum or kitti
        #[arg(long, default_value = "tum")]
        format: TrajectoryFormat,
        /// none, rigid or similarity
        #[arg(long, default_value = "similarity")]
        align: Alignment,
        /// Print JSON instead of the table
        #[arg(long)]
        json: bool,
        /// Also write the JSON report here
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Overlay trajectories in a top-down SVG
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// One label per input, in order; defaults to file stems
        #[arg(long)]
        label: Vec<String>,
        #[arg(long, default_value = "tum")]
        format: TrajectoryFormat,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print the per-pair summary and per-iteration traces of a run
    Inspect { manifest: PathBuf },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<dynvo::Error> for CliError {
    fn from(e: dynvo::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: dynvo <simulate|run|eval|plot|inspect> [OPTIONS]\nRun `dynvo --help` for details.");
            EXIT_USAGE
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}

fn execute(command: Command, out: &mut dyn std::io::Write) -> CliResult<()> {
    match command {
        Command::Simulate { cfg, out: dir } => simulate(&cfg, &dir, out),
        Command::Run { cfg, bundle, out: dir } => run(&cfg, bundle.as_deref(), &dir, out),
        Command::Eval {
            est,
            gt,
            format,
            align,
            json,
            report,
        } => eval(&est, &gt, format, align, json, report.as_deref(), out),
        Command::Plot {
            inputs,
            label,
            format,
            out: path,
        } => plot(&inputs, &label, format, &path, out),
        Command::Inspect { manifest } => inspect(&manifest, out),
    }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn pair_dir(bundle: &Path, pair: usize) -> PathBuf {
    bundle.join("pairs").join(format!("{pair:04}"))
}

fn simulate(o: &Overrides, dir: &Path, out: &mut dyn std::io::Write) -> CliResult<()> {
    let (cfg, _) = o.resolve()?;
    if dir.exists() && std::fs::read_dir(dir).map_err(anyhow::Error::from)?.next().is_some() {
        return Err(CliError::Usage(format!("{} exists and is not empty", dir.display())));
    }
    let scene = generate_scene(cfg.seed, &cfg.scene)?;
    // build the bundle beside its destination, then move it into place
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent).map_err(anyhow::Error::from)?;
    let staging = tempfile::Builder::new()
        .prefix(".dynvo-bundle-")
        .tempdir_in(parent)
        .map_err(anyhow::Error::from)?;
    std::fs::write(
        staging.path().join("scene.json"),
        serde_json::to_string_pretty(&scene).map_err(anyhow::Error::from)?,
    )
    .map_err(anyhow::Error::from)?;
    std::fs::write(
        staging.path().join("ground_truth.txt"),
        format_trajectory(&gt_trajectory(&scene)?, cfg.format),
    )
    .map_err(anyhow::Error::from)?;
    for pair in 0..scene.frames() - 1 {
        export_truth(pair_dir(staging.path(), pair), &render_pair(&scene, pair)?)?;
    }
    if dir.exists() {
        std::fs::remove_dir(dir).map_err(anyhow::Error::from)?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, dir)
        .with_context(|| format!("moving bundle to {}", dir.display()))?;
    writeln!(
        out,
        "wrote {} frame pairs ({}x{}) to {}",
        scene.frames() - 1,
        scene.k.width,
        scene.k.height,
        dir.display()
    )
    .map_err(anyhow::Error::from)?;
    Ok(())
}

/// Flow and depth read from a bundle, noised and downsampled like
/// [`SimulatedFlow`].
struct BundleFlow {
    dir: PathBuf,
    factor: usize,
    noise_sigma: f64,
    noise_seed: u64,
}

impl FlowProvider for BundleFlow {
    fn flow(&self, pair: usize) -> dynvo::Result<FlowInput> {
        let d = pair_dir(&self.dir, pair);
        let flow = read_flo(d.join("flow.flo"))?;
        let flow = add_flow_noise(&flow, self.noise_sigma, self.noise_seed ^ pair as u64)?;
        let depth: DepthMap = read_depth_pgm(d.join("depth_t.pgm"))?;
        Ok(FlowInput {
            flow: downsample_flow(&flow, self.factor)?,
            depth: Some(depth.downsample(self.factor)?),
        })
    }
}

fn load_bundle_scene(bundle: &Path) -> anyhow::Result<Scene> {
    let path = bundle.join("scene.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(o: &Overrides, bundle: Option<&Path>, dir: &Path, out: &mut dyn std::io::Write) -> CliResult<()> {
    let (mut cfg, prior) = o.resolve()?;
    let bundle = bundle.map(Path::to_path_buf).or_else(|| prior.and_then(|m| m.bundle));
    let scene = match &bundle {
        Some(b) => {
            let scene = load_bundle_scene(b)?;
            cfg.scene = scene.config;
            scene
        }
        None => generate_scene(cfg.seed, &cfg.scene)?,
    };
    let mut sim = SimulatedFlow::new(scene, cfg.grid_factor)?;
    sim.noise_sigma = cfg.noise_sigma;
    sim.noise_seed = cfg.seed;
    sim.execution = cfg.pipeline.execution;
    let k: CameraIntrinsics = sim.intrinsics();
    let from_files = bundle.as_ref().map(|b| BundleFlow {
        dir: b.clone(),
        factor: cfg.grid_factor,
        noise_sigma: cfg.noise_sigma,
        noise_seed: cfg.seed,
    });
    let provider: &dyn FlowProvider = match &from_files {
        Some(f) => f,
        None => &sim,
    };
    let (seg, pose) = (cfg.pipeline.segmenter(), cfg.pipeline.pose());
    let backends = BackendSet {
        flow: provider,
        segmenter: &seg,
        pose: &pose,
    };
    let lengths = gt_step_lengths(&sim.scene);
    let result = run_sequence(sim.pairs(), &k, &backends, &cfg.pipeline, cfg.scale, Some(&lengths))?;

    let mut traces = String::new();
    let mut masks = Vec::new();
    for p in &result.pairs {
        let Some(r) = &p.result else { continue };
        for rec in &r.trace {
            let line = TraceLine {
                pair: p.pair,
                record: rec.clone(),
            };
            traces.push_str(&serde_json::to_string(&line).map_err(anyhow::Error::from)?);
            traces.push('\n');
        }
        let (w, h) = r.mask.dims();
        let name = format!("masks/pair_{:04}.pgm", p.pair);
        write_atomic(&dir.join(&name), &encode_pgm8(w, h, &r.mask.to_u8())?)?;
        masks.push(name);
    }
    let outputs = Outputs {
        trajectory: "trajectory.txt".into(),
        ground_truth: "ground_truth.txt".into(),
        traces: "traces.jsonl".into(),
        masks,
    };
    write_atomic(
        &dir.join(&outputs.trajectory),
        format_trajectory(&result.trajectory, cfg.format).as_bytes(),
    )?;
    write_atomic(
        &dir.join(&outputs.ground_truth),
        format_trajectory(&gt_trajectory(&sim.scene)?, cfg.format).as_bytes(),
    )?;
    write_atomic(&dir.join(&outputs.traces), traces.as_bytes())?;

    let frames: Vec<FrameSummary> = result.pairs.iter().map(FrameSummary::from_outcome).collect();
    let failed = frames.iter().filter(|f| f.error.is_some()).count();
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        seeds: Seeds {
            scene: sim.scene.seed,
            pipeline: cfg.pipeline.seed,
            noise: cfg.seed,
        },
        config: cfg,
        bundle,
        frames,
        outputs,
    };
    write_atomic(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(anyhow::Error::from)?.as_bytes(),
    )?;
    writeln!(
        out,
        "{} pairs, {} failed; trajectory written to {}",
        manifest.frames.len(),
        failed,
        dir.join(&manifest.outputs.trajectory).display()
    )
    .map_err(anyhow::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteReport {
    pub alignment: Alignment,
    pub poses: usize,
    pub scale: f64,
    pub ate_rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

pub fn ate_report(est: &Trajectory, gt: &Trajectory, alignment: Alignment) -> dynvo::Result<AteReport> {
    let sim = match alignment {
        Alignment::None => Similarity::identity(),
        Alignment::Rigid => umeyama_align(est, gt, false)?,
        Alignment::Similarity => umeyama_align(est, gt, true)?,
    };
    let aligned = est.transformed(&sim);
    let mut errors: Vec<f64> = aligned
        .positions()
        .iter()
        .zip(gt.positions())
        .map(|(a, b)| (a - b).norm())
        .collect();
    let n = errors.len() as f64;
    let ate_rmse = dynvo::evaluation::ate_rmse(est, gt, alignment)?;
    let mean = errors.iter().sum::<f64>() / n;
    errors.sort_by(f64::total_cmp);
    let mid = errors.len() / 2;
    let median = if errors.len() % 2 == 1 {
        errors[mid]
    } else {
        0.5 * (errors[mid - 1] + errors[mid])
    };
    Ok(AteReport {
        alignment,
        poses: errors.len(),
        scale: sim.scale,
        ate_rmse,
        mean,
        median,
        max: *errors.last().expect("non-empty trajectory"),
    })
}

fn report_table(r: &AteReport) -> String {
    let alignment = match r.alignment {
        Alignment::None => "none",
        Alignment::Rigid => "rigid",
        Alignment::Similarity => "similarity",
    };
    let rows = [
        ("alignment", alignment.to_string()),
        ("poses", r.poses.to_string()),
        ("scale", format!("{:.6}", r.scale)),
        ("ate_rmse", format!("{:.6}", r.ate_rmse)),
        ("mean", format!("{:.6}", r.mean)),
        ("median", format!("{:.6}", r.median)),
        ("max", format!("{:.6}", r.max)),
    ];
    let mut s = String::new();
    for (k, v) in rows {
        writeln!(s, "{k:<10} {v:>14}").expect("string write");
    }
    s
}

fn eval(
    est: &Path,
    gt: &Path,
    format: TrajectoryFormat,
    align: Alignment,
    json: bool,
    report: Option<&Path>,
    out: &mut dyn std::io::Write,
) -> CliResult<()> {
    let e = read_trajectory(est, format).with_context(|| format!("reading {}", est.display()))?;
    let g = read_trajectory(gt, format).with_context(|| format!("reading {}", gt.display()))?;
    let r = ate_report(&e, &g, align)?;
    let text = serde_json::to_string_pretty(&r).map_err(anyhow::Error::from)?;
    if let Some(path) = report {
        write_atomic(path, format!("{text}\n").as_bytes())?;
    }
    let shown = if json { format!("{text}\n") } else { report_table(&r) };
    out.write_all(shown.as_bytes()).map_err(anyhow::Error::from)?;
    Ok(())
}

fn plot(
    inputs: &[PathBuf],
    labels: &[String],
    format: TrajectoryFormat,
    path: &Path,
    out: &mut dyn std::io::Write,
) -> CliResult<()> {
    if labels.len() > inputs.len() {
        return Err(CliError::Usage(format!(
            "{} labels given for {} trajectories",
            labels.len(),
            inputs.len()
        )));
    }
    let trajs = inputs
        .iter()
        .map(|p| read_trajectory(p, format).with_context(|| format!("reading {}", p.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let names: Vec<String> = inputs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            labels.get(i).cloned().unwrap_or_else(|| {
                p.file_stem().map_or_else(|| format!("trajectory {i}"), |s| s.to_string_lossy().into_owned())
            })
        })
        .collect();
    let entries: Vec<(&str, &Trajectory)> = names.iter().map(String::as_str).zip(&trajs).collect();
    let svg = dynvo::plot::plot_svg(&entries)?;
    write_atomic(path, svg.as_bytes())?;
    writeln!(out, "wrote {}", path.display()).map_err(anyhow::Error::from)?;
    Ok(())
}

fn inspect(path: &Path, out: &mut dyn std::io::Write) -> CliResult<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut s = String::new();
    writeln!(
        s,
        "seed {} (scene {}, pipeline {}, noise {}), {} pairs",
        m.config.seed,
        m.seeds.scene,
        m.seeds.pipeline,
        m.seeds.noise,
        m.frames.len()
    )
    .expect("string write");
    writeln!(s, "{:>5} {:>9} {:>5} {:>8} {:>7}  status", "pair", "converged", "iters", "inliers", "mask%").expect("string write");
    for f in &m.frames {
        let status = match (&f.error, f.error_iteration) {
            (Some(e), Some(i)) => format!("failed at iteration {i}: {e}"),
            (Some(e), None) => format!("failed: {e}"),
            _ => "ok".into(),
        };
        writeln!(
            s,
            "{:>5} {:>9} {:>5} {:>8} {:>7.2}  {status}",
            f.pair,
            f.converged,
            f.iterations,
            f.inlier_count,
            100.0 * f.mask_fraction
        )
        .expect("string write");
    }

    let traces_path = base.join(&m.outputs.traces);
    let traces = std::fs::read_to_string(&traces_path).with_context(|| format!("reading {}", traces_path.display()))?;
    writeln!(s).expect("string write");
    writeln!(
        s,
        "{:>5} {:>5} {:>7} {:>7} {:>10} {:>10} {:>8} {:>8} {:>9}",
        "pair", "iter", "z_thr", "mask%", "dR(deg)", "dt(deg)", "inliers", "support", "sampson"
    )
    .expect("string write");
    let opt = |v: Option<f64>, deg: bool| match v {
        Some(x) if deg => format!("{:.4}", x.to_degrees()),
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    };
    for (i, line) in traces.lines().enumerate() {
        let t: TraceLine = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", traces_path.display(), i + 1))?;
        let r = &t.record;
        writeln!(
            s,
            "{:>5} {:>5} {:>7} {:>7.2} {:>10} {:>10} {:>8} {:>8} {:>9.4}",
            t.pair,
            r.iteration,
            opt(r.z_threshold, false),
            100.0 * r.mask_fraction,
            opt(r.delta_r, true),
            opt(r.delta_t, true),
            r.inlier_count,
            r.support_count,
            r.mean_sampson_px
        )
        .expect("string write");
    }
    out.write_all(s.as_bytes()).map_err(anyhow::Error::from)?;
    Ok(())
}

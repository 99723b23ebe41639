use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use epvr_core::descriptor::write_motion;
use epvr_core::eval::{format_report, generate_sequence, write_ground_truth, CameraModel, MotionKind, SequenceSpec};
use epvr_core::neural::{save_weights, PoseNetwork};
use epvr_core::pipeline::{
    build_predictor, run_benchmark, run_replay_files, BenchReport, FrameResult, PipelineConfig, PredictorKind,
    ReplayReport, StageLatency,
};
use epvr_core::refine::write_keypoints;
use epvr_net::{serve, ModelRegistry, PipelineFactory, ServerOptions};
use log::info;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "epvr", version, about = "Egocentric full-body pose estimation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the inference server.
    Serve(ServeArgs),
    /// Generate a synthetic motion, keypoint and ground-truth recording.
    Synth(SynthArgs),
    /// Replay a recording through the pipeline and report metrics.
    Replay(ReplayArgs),
    /// Measure pipeline throughput on a synthetic walk.
    Bench(BenchArgs),
    /// Write a randomly initialized weights file.
    InitWeights(InitWeightsArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    /// Model registry (TOML). Without it a single model named "default" is
    /// served from --config.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// static, walk, squat or kick.
    #[arg(long, default_value = "walk")]
    motion: MotionKind,
    /// Seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Hz.
    #[arg(long, default_value_t = 60.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keypoint position noise standard deviation, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Probability that a visible keypoint is reported unseen.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Pipeline selection shared by replay and bench.
#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stages to disable: keypoints, refine, fusion, filter, kpo.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// toy-neural, replay or heuristic.
    #[arg(long)]
    predictor: Option<PredictorKind>,
    /// Weights file for the toy-neural predictor.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(kind) = self.predictor {
            cfg.predictor.kind = kind;
        }
        if let Some(w) = &self.weights {
            cfg.predictor.weights = Some(w.clone());
        }
        for stage in &self.ablate {
            cfg.stages.ablate(stage.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    keypoints: Option<PathBuf>,
    /// Ground truth for metrics; also feeds the replay predictor.
    #[arg(long)]
    groundtruth: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Emit the report as JSON.
    #[arg(long)]
    json: bool,
    /// Write one JSON record per frame.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value_t = 10_000)]
    frames: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InitWeightsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pipeline configuration whose network shape to use.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EPVR_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(a) => cmd_serve(a),
        Command::Synth(a) => cmd_synth(a).map(|_| ExitCode::SUCCESS),
        Command::Replay(a) => cmd_replay(a).map(|_| ExitCode::SUCCESS),
        Command::Bench(a) => cmd_bench(a).map(|_| ExitCode::SUCCESS),
        Command::InitWeights(a) => cmd_init_weights(a).map(|_| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}

fn cmd_serve(args: ServeArgs) -> Result<ExitCode> {
    let factory: Arc<dyn PipelineFactory> = match (&args.models, &args.config) {
        (Some(path), _) => match ModelRegistry::load(path) {
            Ok(r) => Arc::new(r),
            Err(e) => {
                eprintln!("error: cannot load model registry {}: {e}", path.display());
                return Ok(ExitCode::from(2));
            }
        },
        (None, config) => {
            let cfg = match config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            let mut r = ModelRegistry::new();
            r.insert_config("default", cfg)?;
            Arc::new(r)
        }
    };
    let server = serve(args.addr.as_str(), factory.clone(), ServerOptions::default())?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)).context("installing signal handler")?;
    }
    println!("listening on {} with models: {}", server.local_addr(), factory.models().join(", "));
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    info!("shutting down");
    server.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SequenceSpec {
        kind: args.motion,
        duration: args.duration,
        rate: args.rate,
        seed: args.seed,
        keypoint_noise: args.noise,
        dropout: args.dropout,
    };
    let tree = epvr_core::KinematicTree::smpl22();
    let seq = generate_sequence(&spec, &tree, &CameraModel::default())?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut f = create(&args.out.join("motion.jsonl"))?;
    write_motion(&mut f, &seq.motion_frames())?;
    f.flush()?;
    let mut f = create(&args.out.join("keypoints.jsonl"))?;
    write_keypoints(&mut f, &seq.keypoint_frames())?;
    f.flush()?;
    let mut f = create(&args.out.join("groundtruth.jsonl"))?;
    write_ground_truth(&mut f, &seq.ground_truth())?;
    f.flush()?;
    println!("wrote {} frames to {}", seq.frames.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct FrameDump<'a> {
    t: f64,
    rot6d: Vec<[f64; 6]>,
    pos: Vec<[f64; 3]>,
    latency_us: &'a StageLatency,
}

fn dump_record(r: &FrameResult) -> String {
    let rec = FrameDump {
        t: r.timestamp,
        rot6d: r.pose.rotations().map(|x| x.0).collect(),
        pos: r.positions().iter().map(|p| [p.x, p.y, p.z]).collect(),
        latency_us: &r.latency,
    };
    serde_json::to_string(&rec).expect("record serializes")
}

fn latency_lines(l: &StageLatency) -> String {
    let mut s = String::new();
    for (name, v) in [
        ("descriptor", l.descriptor),
        ("refine", l.refine),
        ("predict", l.predict),
        ("kinematics", l.kinematics),
        ("filter", l.filter),
        ("kpo", l.kpo),
        ("total", l.total),
    ] {
        s.push_str(&format!("latency_us.{name} {v:.2}\n"));
    }
    s
}

fn replay_text(report: &ReplayReport) -> String {
    let mut s = format!("frames {}\nfps {:.2}\n", report.frames, report.fps);
    if let Some(m) = &report.metrics {
        s.push_str(&format_report(m));
    }
    s.push_str(&latency_lines(&report.mean_latency));
    s
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let mut cfg = args.pipeline.resolve()?;
    if cfg.predictor.kind == PredictorKind::Replay && cfg.predictor.poses.is_none() && args.groundtruth.is_none() {
        bail!("the replay predictor needs --groundtruth");
    }
    if let Some(gt) = &args.groundtruth {
        cfg.predictor.poses.get_or_insert_with(|| gt.clone());
    }
    let mut dump = args.dump.as_deref().map(create).transpose()?;
    let mut dump_err = None;
    let report = run_replay_files(&cfg, &args.motion, args.keypoints.as_deref(), args.groundtruth.as_deref(), |r| {
        if let Some(w) = dump.as_mut() {
            if let Err(e) = writeln!(w, "{}", dump_record(r)) {
                dump_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = dump_err {
        return Err(e).context("writing frame dump");
    }
    if let Some(mut w) = dump {
        w.flush()?;
    }
    let text = if args.json { serde_json::to_string_pretty(&report)? + "\n" } else { replay_text(&report) };
    match &args.report {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn bench_text(r: &BenchReport) -> String {
    format!("frames {}\nruns {}\nfps {:.1} ± {:.1}\n{}", r.frames, r.runs, r.fps_mean, r.fps_std, latency_lines(&r.mean_latency))
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let cfg = args.pipeline.resolve()?;
    let tree = Arc::new(cfg.load_skeleton()?);
    let predictor = if cfg.predictor.kind == PredictorKind::Replay && cfg.predictor.poses.is_none() {
        // Benchmark against the walk's own ground truth.
        let spec = SequenceSpec::new(MotionKind::Walk, args.frames as f64 / 60.0, 60.0, 0);
        let gt = generate_sequence(&spec, &tree, &CameraModel::default())?.ground_truth();
        build_predictor(&cfg.predictor, Some(&gt))?
    } else {
        build_predictor(&cfg.predictor, None)?
    };
    let report = run_benchmark(&cfg, tree, predictor.into(), args.frames, args.runs)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", bench_text(&report));
    }
    Ok(())
}

fn cmd_init_weights(args: InitWeightsArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let net = PoseNetwork::random(&cfg.predictor.network, args.seed)?;
    save_weights(&net, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

//! Command-line frontend: synthetic data generation, training, depth
//! prediction, the full pipeline, evaluation, optical flow and corner
//! detection.
//!
//! Exit codes: 0 success, 1 validation error (bad inputs, missing files,
//! malformed configs), 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use capslam::capsnet::{self, CapsNetConfig, CapsNetParams, StereoPair, TrainConfig};
use capslam::dataset::{self, load_sequence, write_synth_sequence};
use capslam::error::Error;
use capslam::flow::{lucas_kanade, write_flow_csv, FlowConfig};
use capslam::io;
use capslam::keypoints::{corner_response, detect_corners, DEFAULT_WINDOW_SIGMA};
use capslam::mapping::export_pointcloud;
use capslam::metrics::{ate_rmse, percent_correct_depth, DEFAULT_DEPTH_TAU};
use capslam::slam::{run_slam, SequenceData, SlamConfig};
use capslam::synth::{generate_synthetic, SynthSceneConfig};

#[derive(Parser)]
#[command(name = "capslam", about = "Monocular SLAM toolkit with capsule-network depth prediction", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic stereo sequence with exact ground truth.
    Synth(SynthArgs),
    /// Train the disparity network on a stereo sequence.
    Train(TrainArgs),
    /// Predict a depth map for one image from a checkpoint.
    PredictDepth(PredictArgs),
    /// Run the full pipeline over a sequence.
    RunSlam(RunSlamArgs),
    /// Evaluate a pipeline output directory against ground truth.
    Eval(EvalArgs),
    /// Track corners between two frames and write the flow as CSV.
    Flow(FlowArgs),
    /// Detect corners in an image and write them as CSV.
    Keypoints(KeypointsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene description JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the texture seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Sequence directory with left and right images.
    #[arg(long)]
    data: PathBuf,
    /// Training configuration JSON (network sizes plus optimizer settings).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV path (default: next to the checkpoint).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// 16-bit depth PNG output (5000 counts per meter).
    #[arg(long)]
    out: PathBuf,
    /// Optional 8-bit preview where darker means deeper.
    #[arg(long)]
    preview: Option<PathBuf>,
    /// Counts per meter in the output PNG.
    #[arg(long, default_value_t = io::DEPTH_PNG_SCALE)]
    depth_scale: f64,
    /// Stereo baseline (meters) of the rig the checkpoint was trained on.
    #[arg(long, default_value_t = 0.45)]
    baseline: f64,
    /// Focal length in pixels at the network input scale; defaults to the
    /// network input width.
    #[arg(long)]
    fx: Option<f64>,
}

#[derive(Args)]
struct RunSlamArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory: report.json, trajectory.txt, trajectory_raw.txt, map.ply.
    #[arg(long)]
    out: PathBuf,
    /// Percent-correct-depth tolerance.
    #[arg(long, default_value_t = DEFAULT_DEPTH_TAU)]
    tau: f64,
    /// Point-cloud subsampling stride.
    #[arg(long, default_value_t = 2)]
    stride: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Pipeline output directory (expects trajectory.txt).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth sequence directory (groundtruth.txt, optional depth/).
    #[arg(long)]
    gt: PathBuf,
    /// Relative depth tolerance.
    #[arg(long, default_value_t = DEFAULT_DEPTH_TAU)]
    tau: f64,
    /// Predicted depth directory to compare against gt depth (optional).
    #[arg(long)]
    pred_depth: Option<PathBuf>,
}

#[derive(Args)]
struct FlowArgs {
    #[arg(long)]
    prev: PathBuf,
    #[arg(long)]
    next: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KeypointsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    threshold: f64,
    #[arg(long, default_value_t = 5.0)]
    nms_radius: f64,
}

/// Training file: architecture plus the optimizer settings.
#[derive(Serialize, Deserialize)]
struct TrainFile {
    network: CapsNetConfig,
    #[serde(flatten)]
    train: TrainConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

/// 1 for validation problems the user can fix, 2 for runtime failures.
fn exit_class(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::MissingIntrinsics(_)
        | Error::MissingTimestamps(_)
        | Error::MissingImageFile(_)
        | Error::NonMonotonicTimestamps(_)
        | Error::Parse { .. }
        | Error::UnsupportedFormat(_)
        | Error::DimensionMismatch(_)
        | Error::Json(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::PredictDepth(args) => cmd_predict(args),
        Command::RunSlam(args) => cmd_run_slam(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Flow(args) => cmd_flow(args),
        Command::Keypoints(args) => cmd_keypoints(args),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingImageFile(path.to_path_buf()))?;
    Ok(serde_json::from_str(&text)?)
}

fn cmd_synth(args: SynthArgs) -> Result<(), Error> {
    let mut config: SynthSceneConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.texture_seed = seed;
    }
    let seq = generate_synthetic(&config)?;
    fs::create_dir_all(&args.out)?;
    write_synth_sequence(&args.out, &seq)?;
    println!(
        "wrote {} frames ({}x{}) to {}",
        seq.frames.len(),
        config.width,
        config.height,
        args.out.display()
    );
    Ok(())
}

/// Builds stereo training pairs from a sequence, downscaling to the network
/// input when the frames are an integer multiple of it.
fn stereo_pairs_for_network(
    data: &Path,
    net: &CapsNetConfig,
) -> Result<Vec<StereoPair>, Error> {
    let seq = load_sequence(data)?;
    let mut pairs = Vec::new();
    for i in 0..seq.frames.len() {
        let left = seq.load_image(i)?;
        let Some(right) = seq.load_right_image(i)? else {
            return Err(Error::InvalidConfig(format!(
                "frame {i} has no right-camera image; training needs stereo pairs"
            )));
        };
        if left.width() % net.input_width != 0
            || left.width() / net.input_width != left.height() / net.input_height
        {
            return Err(Error::InvalidConfig(format!(
                "frame {}x{} is not an integer multiple of the network input {}x{}",
                left.width(),
                left.height(),
                net.input_width,
                net.input_height
            )));
        }
        let factor = left.width() / net.input_width;
        let (left, right) = if factor == 1 {
            (left, right)
        } else {
            (left.downscale_box(factor)?, right.downscale_box(factor)?)
        };
        let scaled = seq.intrinsics.scaled(1.0 / factor as f64, 1.0 / factor as f64);
        pairs.push(StereoPair::new(left, right, scaled)?);
    }
    Ok(pairs)
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let file: TrainFile = read_json(&args.config)?;
    file.network.validate()?;
    let pairs = stereo_pairs_for_network(&args.data, &file.network)?;
    let params = CapsNetParams::init(file.network, file.train.seed)?;
    let outcome = capsnet::train(&pairs, params, &file.train)?;
    outcome.params.save(&args.out)?;
    let history_path = args
        .history
        .unwrap_or_else(|| args.out.with_extension("history.csv"));
    capsnet::write_history_csv(&history_path, &outcome.history)?;
    let last = outcome.history.last();
    println!(
        "trained {} steps on {} pairs; final loss {}; checkpoint {}",
        outcome.history.len(),
        pairs.len(),
        last.map_or("n/a".into(), |r| format!("{:.6}", r.loss)),
        args.out.display()
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), Error> {
    let params = CapsNetParams::load(&args.ckpt)?;
    let image = io::load_image(&args.image)?;
    let net = params.config();
    if image.width() % net.input_width != 0
        || image.width() / net.input_width != image.height() / net.input_height
    {
        return Err(Error::InvalidConfig(format!(
            "image {}x{} is not an integer multiple of the network input {}x{}",
            image.width(),
            image.height(),
            net.input_width,
            net.input_height
        )));
    }
    let factor = image.width() / net.input_width;
    let input = if factor == 1 { image } else { image.downscale_box(factor)? };
    let (dl, _) = params.predict_disparity(&input)?;

    // Disparity to metric depth needs the stereo rig; checkpoints carry
    // only the architecture, so the rig comes from flags.
    let fx = args.fx.unwrap_or(net.input_width as f64);
    let intr = capslam::CameraIntrinsics::new(
        fx,
        fx,
        (net.input_width as f64 - 1.0) / 2.0,
        (net.input_height as f64 - 1.0) / 2.0,
        Some(args.baseline),
    )?;
    let depth = dl.to_depth(&intr)?.upsample_nearest(factor)?;
    io::save_depth_png(&args.out, &depth, args.depth_scale)?;
    if let Some(preview) = &args.preview {
        io::save_depth_preview_png(preview, &depth)?;
    }
    println!(
        "wrote {}x{} depth map ({} valid pixels) to {}",
        depth.width(),
        depth.height(),
        depth.valid_count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_run_slam(args: RunSlamArgs) -> Result<(), Error> {
    let params = CapsNetParams::load(&args.ckpt)?;
    let seq = load_sequence(&args.data)?;
    let data = SequenceData::from_sequence(&seq)?;
    let config = SlamConfig { depth_tau: args.tau, ..SlamConfig::default() };
    let out = run_slam(&data, &params, &config)?;

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&out.report)?,
    )?;
    dataset::write_tum(&args.out.join("trajectory.txt"), &out.trajectory_filtered)?;
    dataset::write_tum(&args.out.join("trajectory_raw.txt"), &out.trajectory_raw)?;
    let count = export_pointcloud(
        &args.out.join("map.ply"),
        &out.graph,
        &data.intrinsics,
        args.stride,
    )?;
    println!(
        "{} frames, {} keyframes, {} tracking failures, {} map points -> {}",
        out.report.frames,
        out.report.keyframes,
        out.report.tracking_failures,
        count,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    ate_rmse: Option<f64>,
    percent_correct_depth: Option<f64>,
    associated_poses: usize,
    compared_depth_maps: usize,
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let gt_traj_path = args.gt.join("groundtruth.txt");
    if !gt_traj_path.exists() {
        return Err(Error::MissingImageFile(gt_traj_path));
    }
    let gt_traj = dataset::read_tum(&gt_traj_path)?;
    let pred_traj_path = args.pred.join("trajectory.txt");
    if !pred_traj_path.exists() {
        return Err(Error::MissingImageFile(pred_traj_path));
    }
    let pred_traj = dataset::read_tum(&pred_traj_path)?;
    let ate = ate_rmse(&pred_traj, &gt_traj).ok();
    let associated = pred_traj.len().min(gt_traj.len());

    // Depth comparison over matching file names, when provided.
    let mut pcd_sum = 0.0;
    let mut pcd_count = 0usize;
    if let Some(pred_depth_dir) = &args.pred_depth {
        let gt_depth_dir = args.gt.join("depth");
        if gt_depth_dir.is_dir() && pred_depth_dir.is_dir() {
            let mut names: Vec<PathBuf> = fs::read_dir(pred_depth_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            names.sort();
            for pred_path in names {
                let name = pred_path.file_name().expect("file entry");
                let gt_path = gt_depth_dir.join(name);
                if !gt_path.exists() {
                    continue;
                }
                let pred = io::load_depth_png(&pred_path, io::DEPTH_PNG_SCALE)?;
                let gt = io::load_depth_png(&gt_path, io::DEPTH_PNG_SCALE)?;
                if let Ok(pcd) = percent_correct_depth(&pred, &gt, args.tau) {
                    pcd_sum += pcd;
                    pcd_count += 1;
                }
            }
        }
    }

    let report = EvalReport {
        ate_rmse: ate,
        percent_correct_depth: (pcd_count > 0).then(|| pcd_sum / pcd_count as f64),
        associated_poses: associated,
        compared_depth_maps: pcd_count,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_flow(args: FlowArgs) -> Result<(), Error> {
    let prev = io::load_image(&args.prev)?;
    let next = io::load_image(&args.next)?;
    let scores = corner_response(&prev, DEFAULT_WINDOW_SIGMA)?;
    let keypoints = detect_corners(&scores, 1e-6, 5.0);
    let field = lucas_kanade(&prev, &next, &keypoints, &FlowConfig::default())?;
    write_flow_csv(&args.out, &field)?;
    let valid = field.iter().filter(|e| e.valid).count();
    println!("tracked {valid}/{} keypoints -> {}", field.len(), args.out.display());
    Ok(())
}

fn cmd_keypoints(args: KeypointsArgs) -> Result<(), Error> {
    let image = io::load_image(&args.input)?;
    let scores = corner_response(&image, DEFAULT_WINDOW_SIGMA)?;
    let keypoints = detect_corners(&scores, args.threshold, args.nms_radius);
    let mut out = String::from("u,v,score\n");
    for k in &keypoints {
        out.push_str(&format!("{},{},{}\n", k.u, k.v, k.score));
    }
    fs::write(&args.out, out)?;
    println!("{} keypoints -> {}", keypoints.len(), args.out.display());
    Ok(())
}

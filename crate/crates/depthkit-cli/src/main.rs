use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use depthkit::checkpoint::Checkpoint;
use depthkit::eval::{
    evaluate_constant_baseline, evaluate_depth, evaluate_trajectory, predict_trajectory,
};
use depthkit::geometry::Trajectory;
use depthkit::gradcheck::{self, DEFAULT_TOLERANCE};
use depthkit::imageio::{read_image, write_pfm, write_pgm};
use depthkit::synthdata::{render_sequence, Split};
use depthkit::train::{drift_lengths, Model, Phase, TrainConfig, TrainData, TrainHooks, Trainer};
use depthkit::{Error, Tensor};

#[derive(Parser)]
#[command(
    name = "depthkit",
    version,
    about = "Self-supervised depth and pose on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a disparity network (and a pose network in the pose phase).
    Train(TrainArgs),
    /// Depth metrics of a checkpoint on the eval split.
    EvalDepth(EvalDepthArgs),
    /// Trajectory drift of a pose checkpoint on the synthetic sequence.
    EvalPose(EvalPoseArgs),
    /// Disparity of a single image.
    Infer(InferArgs),
    /// Finite-difference check of the differentiable ops.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Base,
    FlipFinetune,
    Pose,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Phase {
        match p {
            PhaseArg::Base => Phase::Base,
            PhaseArg::FlipFinetune => Phase::FlipFinetune,
            PhaseArg::Pose => Phase::Pose,
        }
    }
}

/// Settings shared by every data-driven command.
#[derive(Args, Clone)]
struct Common {
    /// key=value file with data and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds both the synthetic data and the training run.
    #[arg(long)]
    seed: Option<u64>,
    /// Image size as HxW, e.g. 64x128.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "base")]
    phase: PhaseArg,
    #[arg(long)]
    epochs: Option<u64>,
    /// Stop after this many iterations instead of whole epochs.
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    /// Sub-pixel disparity heads; off uses resize-convolution heads.
    #[arg(long, value_enum)]
    subpixel: Option<Switch>,
    /// Starting weights (required for flip-finetune).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue a run from one of its checkpoints.
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    /// Also keep a checkpoint every this many epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalDepthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fuse predictions of the image and its mirror.
    #[arg(long, value_enum, default_value = "off")]
    flip_aug: Switch,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalPoseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required_unless_present = "trajectory")]
    checkpoint: Option<PathBuf>,
    /// Score this trajectory file instead of running a network.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM (P5) or PPM (P6) image at the model's resolution.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum, default_value = "off")]
    flip_aug: Switch,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Op name or "all".
    #[arg(long, default_value = "all")]
    op: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Also run an op with a deliberately wrong gradient rule.
    #[arg(long)]
    with_negative_control: bool,
    /// List the registered ops and exit.
    #[arg(long)]
    list: bool,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h
        .trim()
        .parse()
        .map_err(|_| format!("bad height in {s:?}"))?;
    let w = w
        .trim()
        .parse()
        .map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numerical(e.to_string()),
            Error::Io(_) | Error::Format(_) => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn config_for(common: &Common, phase: Phase) -> Result<TrainConfig, Error> {
    let mut config = TrainConfig::for_phase(phase, Default::default());
    if let Some(path) = &common.config {
        config.apply_text(&fs::read_to_string(path)?)?;
        config.phase = phase;
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
        config.data.seed = seed;
    }
    if let Some((h, w)) = common.resolution {
        config.data.height = h;
        config.data.width = w;
    }
    config.validate()?;
    Ok(config)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Outcome {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

/// Streams log lines to stdout and the log file; saves periodic checkpoints.
struct FileHooks {
    log: fs::File,
    out: PathBuf,
    every: u64,
    error: Option<std::io::Error>,
}

impl TrainHooks for FileHooks {
    fn line(&mut self, line: &str) {
        use std::io::Write;
        println!("{line}");
        if let Err(e) = writeln!(self.log, "{line}") {
            self.error.get_or_insert(e);
        }
    }

    fn epoch_end(&mut self, trainer: &Trainer, epoch: u64) -> depthkit::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        if self.every > 0 && (epoch + 1).is_multiple_of(self.every) {
            trainer
                .checkpoint()?
                .save(&self.out.join(format!("epoch-{:04}.sdpk", epoch + 1)))?;
        }
        Ok(())
    }
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let mut config = config_for(&args.common, args.phase.into())?;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    config.iterations = args.iterations.or(config.iterations);
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(b) = args.batch {
        config.batch = b;
    }
    if let Some(s) = args.subpixel {
        config.subpixel = s.on();
    }
    config.validate()?;

    let data = TrainData::render(&config)?;
    let mut trainer = match (&args.resume, &args.init) {
        (Some(path), _) => Trainer::resume(config.clone(), &Checkpoint::load(path)?, data)?,
        (None, Some(path)) => Trainer::new(config.clone(), Some(&Checkpoint::load(path)?), data)?,
        (None, None) => Trainer::new(config.clone(), None, data)?,
    };
    write_text(&args.out, "config.txt", &config.to_text())?;
    let log = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(args.out.join("train.log"))?;
    let mut hooks = FileHooks {
        log,
        out: args.out.clone(),
        every: args.checkpoint_every,
        error: None,
    };
    trainer.run(&mut hooks)?;
    if let Some(e) = hooks.error {
        return Err(e.into());
    }
    trainer
        .checkpoint()?
        .save(&args.out.join("checkpoint.sdpk"))?;
    Ok(())
}

fn cmd_eval_depth(args: EvalDepthArgs) -> Outcome {
    let config = config_for(&args.common, Phase::Base)?;
    let model = Model::from_checkpoint(&Checkpoint::load(&args.checkpoint)?)?;
    let samples = config.data.render_split(Split::Eval)?;
    let rig = config.data.rig()?;
    let flip = args.flip_aug.on().then_some(config.flip_fraction);
    let eval = evaluate_depth(&model.disparity, &samples, &rig, flip)?;
    let baseline = evaluate_constant_baseline(&samples, &rig)?;
    let mut report = eval.to_report();
    for line in baseline.metrics.to_report().lines() {
        report.push_str(&format!("baseline_{line}\n"));
    }
    print!("{report}");
    if let Some(dir) = &args.out {
        write_text(dir, "depth_metrics.txt", &report)?;
    }
    Ok(())
}

fn cmd_eval_pose(args: EvalPoseArgs) -> Outcome {
    let config = config_for(&args.common, Phase::Pose)?;
    let seq = render_sequence(&config.data.sequence()?)?;
    let predicted = match (&args.trajectory, &args.checkpoint) {
        (Some(path), _) => Trajectory::from_kitti_text(&fs::read_to_string(path)?)?,
        (None, Some(path)) => {
            let model = Model::from_checkpoint(&Checkpoint::load(path)?)?;
            let pose = model
                .pose
                .ok_or_else(|| Failure::Usage("checkpoint holds no pose network".into()))?;
            predict_trajectory(&pose, &seq.frames)?
        }
        (None, None) => return Err(Failure::Usage("need --checkpoint or --trajectory".into())),
    };
    if predicted.len() != seq.poses.len() {
        return Err(Failure::Usage(format!(
            "trajectory has {} poses, sequence has {}",
            predicted.len(),
            seq.poses.len()
        )));
    }
    let eval = evaluate_trajectory(predicted, &seq.poses, &drift_lengths(&seq.poses))?;
    let report = eval.to_report();
    print!("{report}");
    if let Some(dir) = &args.out {
        write_text(dir, "pose_metrics.txt", &report)?;
        write_text(dir, "predicted_poses.txt", &eval.predicted.to_kitti_text())?;
        write_text(dir, "gt_poses.txt", &seq.poses.to_kitti_text())?;
    }
    Ok(())
}

/// Map disparity to [0, 1] linearly over the network's output range, so
/// nearer surfaces are brighter.
fn inverse_depth_image(disparity: &Tensor, max_disparity: f32) -> Result<Tensor, Error> {
    let data = disparity
        .data()
        .iter()
        .map(|&d| (d / max_disparity).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(disparity.shape(), data)
}

fn cmd_infer(args: InferArgs) -> Outcome {
    let model = Model::from_checkpoint(&Checkpoint::load(&args.checkpoint)?)?;
    let image = read_image(&args.image)?;
    let cfg = model.disparity.config();
    let s = image.shape();
    if (s.h(), s.w()) != (cfg.height, cfg.width) {
        return Err(Failure::Usage(format!(
            "image is {}x{}, model expects {}x{}",
            s.h(),
            s.w(),
            cfg.height,
            cfg.width
        )));
    }
    let flip = args.flip_aug.on().then_some(0.05);
    let mut levels = model.disparity.predict(&image, flip)?.levels;
    let disparity = levels.swap_remove(0);
    fs::create_dir_all(&args.out)?;
    write_pfm(&args.out.join("disparity.pfm"), &disparity)?;
    let max = cfg.max_disparity_fraction * cfg.width as f32;
    write_pgm(
        &args.out.join("inverse_depth.pgm"),
        &inverse_depth_image(&disparity, max)?,
    )?;
    println!(
        "wrote {}x{} disparity to {}",
        s.h(),
        s.w(),
        args.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Outcome {
    if args.list {
        for name in gradcheck::case_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let mut reports = gradcheck::run(&args.op, args.seed, args.tolerance)?;
    if args.with_negative_control {
        reports.push(gradcheck::check_case(
            &gradcheck::negative_control(),
            args.seed,
            args.tolerance,
        )?);
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    for r in &reports {
        println!("{}", r.to_line());
    }
    if failed.is_empty() {
        println!("all {} ops passed", reports.len());
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::EvalDepth(a) => cmd_eval_depth(a),
        Command::EvalPose(a) => cmd_eval_pose(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind, msg) = match f {
                Failure::Usage(m) => (1, "usage error", m),
                Failure::Numerical(m) => (2, "numerical failure", m),
                Failure::Io(m) => (3, "i/o error", m),
            };
            eprintln!("depthkit: {kind}: {msg}");
            ExitCode::from(code)
        }
    }
}

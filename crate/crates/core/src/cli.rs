//! Command-line front end. Every run ends with `RESULT <verb> <ok|fail>`;
//! exit code 0 is success, 1 a usage/contract/parse error and 2 a failed
//! verification.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::blocks::{load_checkpoint, Network, MANIFEST_NAME};
use crate::data::{blob_sample, dump, gradient_magnitude, BlobConfig, BlobMode};
use crate::error::{Error, Result};
use crate::frames::{
    atom_mosaic, frame_bounds, load_frame, make_framelet_frame, make_gaussian_derivative_frame, make_naive_frame,
    make_pixel_frame, make_random_frame, save_frame, DerivativeSet, Frame,
};
use crate::io::{normalize_to_u8, unit_to_u8, write_pgm};
use crate::steering::{solve_steering, verify_equivariance, GroupAction, STEERABILITY_THRESHOLD};
use crate::tensor::Tensor;
use crate::train::{evaluate_network, metrics_csv, train_network, Optimizer, TrainConfig};
use crate::autodiff::GradCheck;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "STEERKIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "steerkit", version, about = "Steerable frames, steering operators and dynamic steerable blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or inspect filter frames.
    #[command(subcommand)]
    Frame(FrameCmd),
    /// Solve or verify steering operators of a frame file.
    #[command(subcommand)]
    Steer(SteerCmd),
    /// Finite-difference check of a network's gradients.
    Gradcheck(GradcheckArgs),
    /// Train on the synthetic blob task.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Evaluate a checkpoint on the blob task.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Figure-style exports.
    #[command(subcommand)]
    Export(ExportCmd),
    /// Inspect the synthetic data stream.
    #[command(subcommand)]
    Data(DataCmd),
}

#[derive(Subcommand, Debug)]
enum FrameCmd {
    Gen(FrameGenArgs),
    Check {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args, Debug)]
struct FrameGenArgs {
    /// pixel, gauss, framelet, naive or random
    #[arg(long)]
    family: String,
    #[arg(long, default_value_t = 3)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// Derivative set of Gaussian frames: per_axis or total
    #[arg(long, default_value = "per_axis")]
    set: String,
    /// Atom count of random frames
    #[arg(long, default_value_t = 9)]
    atoms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write an atom mosaic PGM
    #[arg(long)]
    mosaic: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum SteerCmd {
    Solve(SteerArgs),
    Verify(SteerArgs),
}

#[derive(Args, Debug)]
struct SteerArgs {
    #[arg(long)]
    frame: PathBuf,
    #[arg(long, default_value = "rotation")]
    group: String,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    angle: f64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = STEERABILITY_THRESHOLD)]
    tol: f64,
    /// Write the verification CSV here instead of stdout
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    spec: String,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length of the random test images
    #[arg(long, default_value_t = 6)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
}

#[derive(Subcommand, Debug)]
enum TrainCmd {
    Blobs(TrainArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "binary")]
    mode: String,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "DynResBlock[1]{order=1,pose=block}")]
    spec: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    eval_interval: usize,
    #[arg(long, default_value_t = 16)]
    eval_samples: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    Blobs(EvalArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory, or a training output directory holding one
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 32)]
    n: usize,
    /// Defaults to the training mode recorded next to the checkpoint
    #[arg(long)]
    mode: Option<String>,
    /// Master seed of the evaluation stream
    #[arg(long, default_value_t = 1_000_003)]
    seed: u64,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum ExportCmd {
    PoseMaps(ExportArgs),
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    /// Gaussian scale of the gradient-magnitude panel
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

#[derive(Subcommand, Debug)]
enum DataCmd {
    Dump(DumpArgs),
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long, default_value = "binary")]
    mode: String,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

/// What a command concluded, separate from hard errors.
enum Outcome {
    Ok,
    Failed,
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::Frame(FrameCmd::Gen(_)) => "frame-gen",
            Command::Frame(FrameCmd::Check { .. }) => "frame-check",
            Command::Steer(SteerCmd::Solve(_)) => "steer-solve",
            Command::Steer(SteerCmd::Verify(_)) => "steer-verify",
            Command::Gradcheck(_) => "gradcheck",
            Command::Train(_) => "train-blobs",
            Command::Eval(_) => "eval-blobs",
            Command::Export(_) => "export-pose-maps",
            Command::Data(_) => "data-dump",
        }
    }
}

/// Thread count requested through [`THREADS_ENV`] (default 1).
pub fn requested_threads() -> std::result::Result<usize, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got '{v}'")),
        },
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let help = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = write!(out, "{e}");
            if help {
                return 0;
            }
            let _ = writeln!(out, "RESULT usage fail");
            return 1;
        }
    };
    let verb = cli.command.verb();
    let threads = match requested_threads() {
        Ok(n) => n,
        Err(msg) => {
            let _ = writeln!(out, "error: {msg}\nRESULT {verb} fail");
            return 1;
        }
    };
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let (code, status) = match dispatch(cli.command, out) {
        Ok(Outcome::Ok) => (0, "ok"),
        Ok(Outcome::Failed) => (2, "fail"),
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            match e {
                Error::NotSteerable { .. } | Error::Divergence { .. } => (2, "fail"),
                _ => (1, "fail"),
            }
        }
    };
    let _ = writeln!(out, "RESULT {verb} {status}");
    code
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<Outcome> {
    match cmd {
        Command::Frame(FrameCmd::Gen(a)) => frame_gen(&a, out),
        Command::Frame(FrameCmd::Check { input }) => frame_check(&input, out),
        Command::Steer(SteerCmd::Solve(a)) => steer_solve(&a, out),
        Command::Steer(SteerCmd::Verify(a)) => steer_verify(&a, out),
        Command::Gradcheck(a) => gradcheck(&a, out),
        Command::Train(TrainCmd::Blobs(a)) => train_blobs(&a, out),
        Command::Eval(EvalCmd::Blobs(a)) => eval_blobs(&a, out),
        Command::Export(ExportCmd::PoseMaps(a)) => export_pose_maps(&a, out),
        Command::Data(DataCmd::Dump(a)) => {
            let mode: BlobMode = a.mode.parse()?;
            dump(&a.out, a.seed, a.count, mode, &BlobConfig::with_size(a.size, a.size))?;
            writeln!(out, "wrote {} {mode} samples to {}", a.count, a.out.display())?;
            Ok(Outcome::Ok)
        }
    }
}

fn build_frame(a: &FrameGenArgs) -> Result<Frame> {
    match a.family.to_ascii_lowercase().as_str() {
        "pixel" => make_pixel_frame(a.size),
        "gauss" | "gaussian" | "gaussian_derivative" => {
            let set: DerivativeSet = a.set.parse()?;
            make_gaussian_derivative_frame(a.size, a.sigma, a.order, set)
        }
        "framelet" => make_framelet_frame(a.size),
        "naive" => make_naive_frame(a.size, a.order),
        "random" => make_random_frame(a.size, a.atoms, a.seed),
        other => Err(Error::Config(format!("unknown frame family '{other}'"))),
    }
}

fn frame_gen(a: &FrameGenArgs, out: &mut dyn Write) -> Result<Outcome> {
    let frame = build_frame(a)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_frame(&frame, &a.out)?;
    if let Some(path) = &a.mosaic {
        let (w, h, pix) = atom_mosaic(&frame, 8);
        write_pgm(path, w, h, &pix)?;
    }
    writeln!(out, "family {}", frame.family())?;
    writeln!(out, "size {}", frame.size())?;
    writeln!(out, "M {}", frame.atom_count())?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(Outcome::Ok)
}

fn frame_check(path: &Path, out: &mut dyn Write) -> Result<Outcome> {
    let frame = load_frame(path)?;
    let info = frame_bounds(&frame);
    writeln!(out, "family {}", frame.family())?;
    writeln!(out, "M {}", frame.atom_count())?;
    writeln!(out, "rank {} of {}", info.rank, info.dimension)?;
    writeln!(out, "A {:.6e}", info.lower_bound)?;
    writeln!(out, "B {:.6e}", info.upper_bound)?;
    writeln!(out, "gram_condition {:.6e}", info.gram_condition)?;
    writeln!(out, "min_singular_value {:.6e}", info.min_singular_value)?;
    Ok(if info.lower_bound > 0.0 {
        Outcome::Ok
    } else {
        writeln!(out, "not a frame: lower bound is zero")?;
        Outcome::Failed
    })
}

fn steer_tau(a: &SteerArgs, action: GroupAction) -> Vec<f64> {
    match action {
        GroupAction::Rotation => vec![a.angle],
        GroupAction::Scaling => vec![a.scale],
        GroupAction::RotationScaling => vec![a.angle, a.scale],
    }
}

fn steer_solve(a: &SteerArgs, out: &mut dyn Write) -> Result<Outcome> {
    let frame = load_frame(&a.frame)?;
    let action: GroupAction = a.group.parse()?;
    let map = solve_steering(&frame, action, &steer_tau(a, action))?;
    for r in 0..map.matrix.nrows() {
        let row: Vec<String> = (0..map.matrix.ncols())
            .map(|c| format!("{:.6}", clean_zero(map.matrix[(r, c)])))
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    writeln!(out, "residual {:.6e}", map.residual)?;
    writeln!(out, "steerable {}", map.residual <= a.tol)?;
    Ok(Outcome::Ok)
}

/// Avoids printing `-0.000000`.
fn clean_zero(v: f64) -> f64 {
    if v.abs() < 5e-7 {
        0.0
    } else {
        v
    }
}

fn steer_verify(a: &SteerArgs, out: &mut dyn Write) -> Result<Outcome> {
    let frame = load_frame(&a.frame)?;
    let action: GroupAction = a.group.parse()?;
    let report = verify_equivariance(&frame, action, a.samples, a.tol)?;
    match &a.csv {
        Some(path) => fs::write(path, report.to_csv())?,
        None => write!(out, "{}", report.to_csv())?,
    }
    writeln!(out, "max_residual {:.6e}", report.max_residual)?;
    if let Some(d) = report.max_composition_defect {
        writeln!(out, "max_composition_defect {d:.6e}")?;
    }
    Ok(if report.passed() { Outcome::Ok } else { Outcome::Failed })
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<Outcome> {
    use rand::{Rng, SeedableRng};
    let mut net = Network::from_text(&a.spec, 1, a.seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(1));
    let shape = [a.batch.max(1), 1, a.size.max(3), a.size.max(3)];
    let x = Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0));
    // Alternating rows keep both classes present.
    let t = Tensor::from_fn(&shape, |i| ((i / shape[3]) % 2) as f64);
    let cfg = GradCheck {
        tolerance: a.tol,
        ..GradCheck::default()
    };
    let mut ok = true;
    for (label, train) in [("train", true), ("eval", false)] {
        if !train {
            // Fresh running stats make eval batch norm the identity, which
            // parks ReLU inputs exactly on the kink after a previous ReLU.
            net.absorb_batch_stats(&x)?;
        }
        let r = net.gradcheck(&x, &t, train, cfg)?;
        writeln!(
            out,
            "{label}: checked {} max_relative_error {:.3e} passed {}",
            r.checked, r.max_relative_error, r.passed
        )?;
        ok &= r.passed;
    }
    writeln!(out, "params {}", net.param_count())?;
    Ok(if ok { Outcome::Ok } else { Outcome::Failed })
}

fn train_blobs(a: &TrainArgs, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        optimizer: a.optimizer.parse::<Optimizer>()?,
        seed: a.seed,
        mode: a.mode.parse()?,
        spec: a.spec.clone(),
        eval_interval: a.eval_interval,
        eval_samples: a.eval_samples,
        height: a.size,
        width: a.size,
    };
    cfg.validate()?;
    let mut net = Network::from_text(&cfg.spec, 1, cfg.seed)?;
    writeln!(out, "params {}", net.param_count())?;
    let outcome = train_network(&mut net, &cfg, Some(&a.out), |row| {
        let _ = writeln!(
            out,
            "step {} loss {:.6} pixel_f {:.4} ods {:.4} ois {:.4}",
            row.step, row.loss, row.pixel_f, row.ods, row.ois
        );
    });
    let outcome = outcome?;
    debug_assert_eq!(fs::read_to_string(a.out.join("metrics.csv")).ok(), Some(metrics_csv(&outcome.rows)));
    let r = &outcome.final_eval;
    writeln!(out, "pixel_f {:.4}", r.pixel_f)?;
    writeln!(out, "ods {:.4}", r.ods)?;
    writeln!(out, "ois {:.4}", r.ois)?;
    Ok(Outcome::Ok)
}

/// Accepts a checkpoint directory or a training directory containing
/// `checkpoint/`; also returns the training config when one is found.
fn resolve_checkpoint(path: &Path) -> Result<(PathBuf, Option<TrainConfig>)> {
    let ckpt = if path.join(MANIFEST_NAME).exists() {
        path.to_path_buf()
    } else if path.join("checkpoint").join(MANIFEST_NAME).exists() {
        path.join("checkpoint")
    } else {
        return Err(Error::Config(format!("no checkpoint found at {}", path.display())));
    };
    let config = ckpt
        .parent()
        .map(|p| p.join("config.txt"))
        .filter(|p| p.exists())
        .map(|p| fs::read_to_string(p).map_err(Error::from).and_then(|s| s.parse::<TrainConfig>()))
        .transpose()?;
    Ok((ckpt, config))
}

fn task_setup(
    cfg: &Option<TrainConfig>,
    mode: &Option<String>,
    size: Option<usize>,
) -> Result<(BlobMode, BlobConfig)> {
    let mode = match (mode, cfg) {
        (Some(m), _) => m.parse()?,
        (None, Some(c)) => c.mode,
        (None, None) => BlobMode::Binary,
    };
    let blob = match (size, cfg) {
        (Some(s), _) => BlobConfig::with_size(s, s),
        (None, Some(c)) => c.blob_config(),
        (None, None) => BlobConfig::default(),
    };
    Ok((mode, blob))
}

fn eval_blobs(a: &EvalArgs, out: &mut dyn Write) -> Result<Outcome> {
    let (ckpt, cfg) = resolve_checkpoint(&a.ckpt)?;
    let net = load_checkpoint(&ckpt)?;
    let (mode, blob) = task_setup(&cfg, &a.mode, a.size)?;
    let r = evaluate_network(&net, a.seed, a.n, mode, &blob)?;
    writeln!(out, "mode {mode}")?;
    writeln!(out, "images {}", r.images)?;
    writeln!(out, "pixel_f {:.4}", r.pixel_f)?;
    writeln!(out, "ods {:.4} (threshold {:.4})", r.ods, r.ods_threshold)?;
    writeln!(out, "ois {:.4}", r.ois)?;
    Ok(Outcome::Ok)
}

/// Panel file names in display order.
pub const POSE_MAP_PANELS: [&str; 5] = [
    "1_input.pgm",
    "2_gradient_magnitude.pgm",
    "3_prediction.pgm",
    "4_pose.pgm",
    "5_target.pgm",
];

fn export_pose_maps(a: &ExportArgs, out: &mut dyn Write) -> Result<Outcome> {
    let (ckpt, cfg) = resolve_checkpoint(&a.ckpt)?;
    let net = load_checkpoint(&ckpt)?;
    let (mode, blob) = task_setup(&cfg, &a.mode, a.size)?;
    let sample = blob_sample(a.seed, 0, mode, &blob)?;
    let (h, w) = (blob.height, blob.width);
    let x = Tensor::new(vec![1, 1, h, w], sample.image.data().to_vec())?;
    let grad = gradient_magnitude(&sample.image, a.sigma)?;
    let pred = net.predict(&x)?;
    let poses = net.pose_fields(&x)?;
    let (pose_name, pose) = poses
        .first()
        .ok_or_else(|| Error::Config("network has no dynamic block, so there is no pose map".into()))?;
    // First pose parameter (the rotation for rotation-steered blocks).
    let pose0 = &pose.data()[..h * w];
    fs::create_dir_all(&a.out)?;
    let mut sidecar = String::from("panel,normalization,min,max\n");
    let unit = |name: &str, values: &[f64], sidecar: &mut String| -> Result<()> {
        write_pgm(&a.out.join(name), w, h, &unit_to_u8(values))?;
        sidecar.push_str(&format!("{name},unit,0,1\n"));
        Ok(())
    };
    let minmax = |name: &str, values: &[f64], sidecar: &mut String| -> Result<()> {
        let (bytes, lo, hi) = normalize_to_u8(values);
        write_pgm(&a.out.join(name), w, h, &bytes)?;
        sidecar.push_str(&format!("{name},minmax,{lo:.6e},{hi:.6e}\n"));
        Ok(())
    };
    unit(POSE_MAP_PANELS[0], sample.image.data(), &mut sidecar)?;
    minmax(POSE_MAP_PANELS[1], grad.data(), &mut sidecar)?;
    unit(POSE_MAP_PANELS[2], pred.data(), &mut sidecar)?;
    minmax(POSE_MAP_PANELS[3], pose0, &mut sidecar)?;
    unit(POSE_MAP_PANELS[4], sample.target.data(), &mut sidecar)?;
    sidecar.push_str(&format!("# pose source {pose_name} channel 0; mode {mode}; seed {}\n", a.seed));
    fs::write(a.out.join("normalization.csv"), sidecar)?;
    writeln!(out, "wrote {} panels to {}", POSE_MAP_PANELS.len(), a.out.display())?;
    Ok(Outcome::Ok)
}

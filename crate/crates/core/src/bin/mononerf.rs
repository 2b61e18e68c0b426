use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use mononerf::body::Pose;
use mononerf::exec::Parallelism;
use mononerf::geometry::load_cameras;
use mononerf::harness::select::select_evenly;
use mononerf::harness::{
    self, selftest, Capture, Criterion, EvalSpec, Mode, Motion, SceneConfig, Split, TrainConfig,
};
use mononerf::math::Vec3;

#[derive(Parser)]
#[command(
    name = "mononerf",
    version,
    about = "Articulated-body radiance fields from monocular video"
)]
struct Cli {
    /// Run ray shards and grid sweeps on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic capture to a directory of sequences.
    Generate(GenerateArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Render one image from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on a capture and print a PSNR/SSIM table.
    Eval(EvalArgs),
    /// Run the built-in invariant and oracle checks.
    Selftest,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output capture directory.
    #[arg(long)]
    out: PathBuf,
    /// Scene file (TOML); flags below override its keys.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    motion: Option<MotionArg>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    /// Image width and height.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    supersample: Option<usize>,
    /// Hold out every n-th frame (0 keeps all frames for training).
    #[arg(long)]
    heldout_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MotionArg {
    Static,
    Wave,
    Turn,
    WaveTurn,
    Walk,
}

impl From<MotionArg> for Motion {
    fn from(m: MotionArg) -> Self {
        match m {
            MotionArg::Static => Motion::Static,
            MotionArg::Wave => Motion::Wave,
            MotionArg::Turn => Motion::Turn,
            MotionArg::WaveTurn => Motion::WaveTurn,
            MotionArg::Walk => Motion::Walk,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mvt,
    Mot,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mvt => Mode::Mvt,
            ModeArg::Mot => Mode::Mot,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Evenly,
    VertexDistance,
}

impl From<SelectionArg> for Criterion {
    fn from(s: SelectionArg) -> Self {
        match s {
            SelectionArg::Evenly => Criterion::Evenly,
            SelectionArg::VertexDistance => Criterion::VertexDistance,
        }
    }
}

/// Every flag overrides the config key of the same name.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    inputs: Option<usize>,
    #[arg(long)]
    selection: Option<SelectionArg>,
    #[arg(long)]
    rays_per_batch: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bbox_dilation: Option<usize>,
    #[arg(long)]
    log_window: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Capture directory; repeat for several.
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

impl TrainOverrides {
    fn apply(self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { cfg.$f = v.into(); } )*};
        }
        set!(
            mode,
            inputs,
            selection,
            rays_per_batch,
            iterations,
            learning_rate,
            voxel_size,
            threshold,
            bbox_dilation,
            log_window,
            checkpoint_every
        );
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if !self.data.is_empty() {
            cfg.data = self.data;
        }
        if let Some(o) = self.output {
            cfg.output = Some(o);
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (TOML mirroring TrainConfig).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Capture or sequence directory holding the input video.
    #[arg(long)]
    data: PathBuf,
    /// Which view of the capture is the monocular input video.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Explicit input frame indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<usize>,
    /// Number of evenly spaced input frames when --inputs is not given.
    #[arg(long, default_value_t = 8)]
    input_count: usize,
    /// Target pose file (TOML, same fields as a manifest frame).
    #[arg(long, conflicts_with = "pose_frame")]
    pose: Option<PathBuf>,
    /// Use the pose of this frame of the input video.
    #[arg(long)]
    pose_frame: Option<usize>,
    /// Camera file; the record at --camera-index is used.
    #[arg(long, conflicts_with = "camera_view")]
    camera: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    camera_index: usize,
    /// Use the camera of this view of the capture.
    #[arg(long)]
    camera_view: Option<usize>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write the voxelized density as JSON.
    #[arg(long)]
    density: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// mot scores held-out frames of the input video, mvt scores the other views.
    #[arg(long, value_enum, default_value_t = ModeArg::Mot)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long)]
    max_targets: Option<usize>,
    /// Override the checkpoint's input frame count.
    #[arg(long)]
    inputs: Option<usize>,
    /// Write the rows as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    #[serde(default)]
    time_index: usize,
    root_translation: [f64; 3],
    joint_rotations: Vec<[f64; 3]>,
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut scene = match &args.scene {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| p.display().to_string())?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SceneConfig::default(),
    };
    if let Some(v) = args.seed {
        scene.seed = v;
    }
    if let Some(v) = args.name {
        scene.name = v;
    }
    if let Some(v) = args.motion {
        scene.motion = v.into();
    }
    if let Some(v) = args.frames {
        scene.frames = v;
    }
    if let Some(v) = args.views {
        scene.views = v;
    }
    if let Some(v) = args.size {
        scene.width = v;
        scene.height = v;
    }
    if let Some(v) = args.supersample {
        scene.supersample = v;
    }
    if let Some(v) = args.heldout_every {
        scene.heldout_every = v;
    }
    let capture = harness::generate_capture(&scene)?;
    harness::save_capture(&capture, &args.out)?;
    fs::write(args.out.join("scene.toml"), toml::to_string(&scene)?)?;
    log::info!(
        "wrote {} views x {} frames to {}",
        scene.views,
        scene.frames,
        args.out.display()
    );
    Ok(())
}

fn load_captures(paths: &[PathBuf]) -> Result<Vec<Capture>> {
    if paths.is_empty() {
        bail!("no training data: set `data` in the config or pass --data");
    }
    paths
        .iter()
        .map(|p| harness::load_capture(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    let output = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("model.ckpt"));
    cfg.output = Some(output.clone());
    let captures = load_captures(&cfg.data)?;
    log::info!(
        "training {:?} for {} iterations on {} captures",
        cfg.mode,
        cfg.iterations,
        captures.len()
    );
    let out = harness::train(&cfg, &captures, &mut |p| {
        if let Some(m) = p.window_mean {
            log::info!("iteration {:>6}  window loss {m:.6}", p.iteration + 1);
        }
    })?;
    let curve_path = output.with_extension("loss.json");
    fs::write(&curve_path, serde_json::to_string_pretty(&out.curve)?)?;
    for c in &out.checkpoints {
        println!("{}", c.display());
    }
    Ok(())
}

fn render(args: RenderArgs, par: Parallelism) -> Result<()> {
    let (model, store, _) = harness::load_checkpoint(&args.checkpoint)?;
    let capture = harness::load_capture(&args.data)?;
    let seq = capture
        .views
        .get(args.view)
        .with_context(|| format!("capture has no view {}", args.view))?;
    let inputs = if args.inputs.is_empty() {
        select_evenly(&seq.indices(Split::Train), args.input_count)
    } else {
        args.inputs.clone()
    };
    if let Some(&bad) = inputs.iter().find(|&&i| i >= seq.len()) {
        bail!("input frame {bad} out of range ({} frames)", seq.len());
    }
    let pose = match (&args.pose, args.pose_frame) {
        (Some(p), _) => {
            let f: PoseFile = toml::from_str(&fs::read_to_string(p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            Pose {
                joint_rotations: f
                    .joint_rotations
                    .into_iter()
                    .map(Vec3::from_array)
                    .collect(),
                root_translation: Vec3::from_array(f.root_translation),
                time_index: f.time_index,
            }
        }
        (None, Some(i)) => seq
            .frames
            .get(i)
            .with_context(|| format!("no frame {i}"))?
            .pose
            .clone(),
        (None, None) => bail!("give --pose or --pose-frame"),
    };
    let camera = match (&args.camera, args.camera_view) {
        (Some(p), _) => {
            let records = load_cameras(p)?;
            records
                .get(args.camera_index)
                .with_context(|| format!("{} has no record {}", p.display(), args.camera_index))?
                .camera()?
        }
        (None, Some(v)) => capture
            .views
            .get(v)
            .with_context(|| format!("capture has no view {v}"))?
            .frames[0]
            .camera
            .clone(),
        (None, None) => seq.frames[0].camera.clone(),
    };
    let (img, density, evaluated) = harness::render_target(
        &model,
        &store,
        &capture,
        args.view,
        &inputs,
        &pose,
        &camera,
        args.density.is_some(),
        par,
    )?;
    img.save_png(&args.out)
        .with_context(|| args.out.display().to_string())?;
    if let (Some(path), Some(d)) = (&args.density, density) {
        fs::write(path, serde_json::to_string(&d)?)?;
    }
    log::info!("{} network evaluations", evaluated);
    Ok(())
}

fn eval(args: EvalArgs, par: Parallelism) -> Result<()> {
    let (model, store, extra) = harness::load_checkpoint(&args.checkpoint)?;
    let mut cfg: TrainConfig = match extra.get("train") {
        Some(t) => serde_json::from_value(t.clone()).context("checkpoint training config")?,
        None => TrainConfig::default(),
    };
    if let Some(t) = args.inputs {
        cfg.inputs = t;
    }
    let capture = harness::load_capture(&args.data)?;
    let mut spec = match args.mode {
        ModeArg::Mot => EvalSpec::monocular(),
        ModeArg::Mvt => EvalSpec::novel_view(usize::MAX),
    };
    spec.input_view = args.view;
    if let Some(m) = args.max_targets {
        spec.max_targets = m;
    }
    let report = harness::evaluate(&model, &store, &capture, &cfg, &spec, par)?;
    if report.rows.is_empty() {
        bail!("no evaluation targets (no held-out frames for mot, or a single view for mvt)");
    }
    print!("{}", report.table());
    if let Some(p) = &args.json {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn run_selftest() -> Result<bool> {
    let checks = selftest::run();
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let par = if cli.sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    };
    let result = match cli.command {
        Command::Generate(a) => {
            if fs::read_dir(&a.out)
                .map(|mut d| d.next().is_some())
                .unwrap_or(false)
            {
                log::warn!(
                    "{} is not empty; files will be overwritten",
                    a.out.display()
                );
            }
            generate(a).map(|_| true)
        }
        Command::Train(a) => train(a).map(|_| true),
        Command::Render(a) => render(a, par).map(|_| true),
        Command::Eval(a) => eval(a, par).map(|_| true),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

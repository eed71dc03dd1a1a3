//! Command-line front end: render, relight, optimize, eval and make-toy.

mod dataset;
mod metrics;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use scatter_avatar::articulation::Pose;
use scatter_avatar::camera::Camera;
use scatter_avatar::io::{read_envmap, read_json, write_pfm, write_png, PngEncoding, PoseFile};
use scatter_avatar::model::Model;
use scatter_avatar::optim::{load_checkpoint, IterationLog, Trainer};
use scatter_avatar::parallel::with_threads;
use scatter_avatar::render::{render_image, Mode, Posed, RenderConfig};
use scatter_avatar::scene::{load_frames, Scene};
use scatter_avatar::shading::Light;
use scatter_avatar::{Error, Result};

pub use dataset::{make_toy, ToyDataset};
pub use metrics::{evaluate_dirs, MetricRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const LOG_FILE: &str = "log.csv";

#[derive(Debug, Parser)]
#[command(name = "scatter-avatar", version, about = "Render, relight and fit articulated SDF avatars")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "SCATTER_AVATAR_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one or more output modes.
    Render(RenderArgs),
    /// Render under a new environment map, direct light only.
    Relight(RelightArgs),
    /// Fit the scene's fields to a set of frames.
    Optimize(OptimizeArgs),
    /// Compare predicted and reference images.
    Eval(EvalArgs),
    /// Write the synthetic capsule-figure dataset.
    MakeToy(MakeToyArgs),
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    /// Scene JSON file.
    #[arg(long)]
    pub scene: PathBuf,
    /// Checkpoint directory whose parameters replace the scene's.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pose file overriding the scene's pose.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    /// Camera file overriding the scene's camera.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Render every view of a frame directory instead of a single camera.
    #[arg(long, conflicts_with_all = ["pose", "camera"])]
    pub frames: Option<PathBuf>,
    /// Sampling seed overriding the scene's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `<mode>.pfm`, `<mode>.png` and `alpha.pfm`.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    /// Comma-separated: rf, pbr, albedo, normal, roughness, avmap, relight.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_mode)]
    pub mode: Vec<Mode>,
}

#[derive(Debug, Args)]
pub struct RelightArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    /// Equirectangular PFM.
    #[arg(long)]
    pub envmap: PathBuf,
    /// Radiance multiplier applied to the map.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Scene JSON file.
    #[arg(long)]
    pub scene: PathBuf,
    /// Frame directory overriding the scene's.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Directory for checkpoints, the loss log and diagnostics.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Iteration count overriding the scene's.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Training seed overriding the scene's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many steps of this invocation, keeping the schedule.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of `albedo_<id>`, `normal_<id>` and optional `alpha_<id>` images.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of `albedo_<id>`, `normal_<id>` and optional `mask_<id>` images.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory of `mask_<id>` images overriding the reference masks.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Compare albedo without per-channel scale alignment.
    #[arg(long)]
    pub no_align: bool,
}

#[derive(Debug, Args)]
pub struct MakeToyArgs {
    /// Dataset directory.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Number of camera views.
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

pub(crate) fn usage(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Schema { .. } | Error::InvalidInput(_) | Error::Format { .. } | Error::Image(_) => EXIT_USAGE,
        Error::MissingInput { .. } => EXIT_MISSING,
        Error::Numeric(_) | Error::DegenerateGradient(_) => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_FAILURE,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    with_threads(cli.threads, || match &cli.command {
        Command::Render(a) => cmd_render(a),
        Command::Relight(a) => cmd_relight(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::MakeToy(a) => make_toy(&a.out, a.views, a.size).map(|_| ()),
    })?
}

pub(crate) struct View {
    pub(crate) pose: Pose,
    pub(crate) camera: Camera,
    pub(crate) suffix: String,
}

fn load_view_scene(v: &ViewArgs) -> Result<Scene> {
    let mut scene = Scene::load(&v.scene)?;
    if let Some(dir) = &v.checkpoint {
        load_checkpoint(dir, &mut scene.model)?;
    }
    if let Some(seed) = v.seed {
        scene.config.render.seed = seed;
    }
    Ok(scene)
}

fn views(scene: &Scene, v: &ViewArgs) -> Result<Vec<View>> {
    if let Some(dir) = &v.frames {
        return Ok(load_frames(dir)?
            .into_iter()
            .enumerate()
            .map(|(i, f)| View {
                pose: f.pose,
                camera: f.camera,
                suffix: format!("_{i:03}"),
            })
            .collect());
    }
    let pose = match &v.pose {
        Some(p) => read_json::<PoseFile>(p)?.to_pose()?,
        None => scene.pose.clone(),
    };
    pose.check(&scene.model.skeleton)?;
    let camera = match &v.camera {
        Some(c) => read_json::<Camera>(c)?,
        None => scene
            .camera
            .clone()
            .ok_or_else(|| usage("--camera", "the scene has no camera; pass --camera"))?,
    };
    camera.validate()?;
    Ok(vec![View {
        pose,
        camera,
        suffix: String::new(),
    }])
}

fn encoding(mode: Mode) -> PngEncoding {
    match mode {
        Mode::Rf | Mode::Pbr | Mode::Relight => PngEncoding::Display,
        Mode::Normal => PngEncoding::Signed,
        Mode::Albedo | Mode::Roughness | Mode::Avmap => PngEncoding::Linear,
    }
}

/// Writes `<mode><suffix>.pfm`, a PNG preview and `alpha<suffix>.pfm` per view.
pub(crate) fn render_to(model: &Model, cfg: &RenderConfig, views: &[View], modes: &[Mode], out: &Path) -> Result<()> {
    create_dir(out)?;
    for (i, view) in views.iter().enumerate() {
        let occupancy = if cfg.occupancy {
            model.build_occupancy(&view.pose, i, cfg.occupancy_res, cfg.bbox_padding)
        } else {
            None
        };
        let posed = Posed::new(model, &view.pose, occupancy.as_ref(), cfg.bbox_padding);
        for &mode in modes {
            let r = render_image(&posed, &view.camera, cfg, mode)?;
            let stem = format!("{mode}{}", view.suffix);
            write_pfm(&out.join(format!("{stem}.pfm")), &r.image)?;
            write_png(&out.join(format!("{stem}.png")), &r.image, Some(&r.alpha), encoding(mode))?;
            write_pfm(&out.join(format!("alpha{}.pfm", view.suffix)), &r.alpha)?;
        }
    }
    Ok(())
}

pub fn cmd_render(a: &RenderArgs) -> Result<()> {
    let scene = load_view_scene(&a.view)?;
    let views = views(&scene, &a.view)?;
    render_to(&scene.model, &scene.config.render, &views, &a.mode, &a.view.out)
}

pub fn cmd_relight(a: &RelightArgs) -> Result<()> {
    if !(a.scale.is_finite() && a.scale >= 0.0) {
        return Err(usage("--scale", "must be finite and nonnegative"));
    }
    let mut scene = load_view_scene(&a.view)?;
    scene.model.light = Light::Map(read_envmap(&a.envmap)?.scaled(a.scale)?);
    let views = views(&scene, &a.view)?;
    render_to(&scene.model, &scene.config.render, &views, &[Mode::Relight], &a.view.out)
}

pub fn cmd_optimize(a: &OptimizeArgs) -> Result<()> {
    let mut scene = Scene::load(&a.scene)?;
    let mut cfg = scene.config.train.clone();
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dir = a
        .frames
        .clone()
        .or_else(|| scene.frames_dir())
        .ok_or_else(|| usage("scene.frames", "no frame directory; set it in the scene or pass --frames"))?;
    let frames = load_frames(&dir)?;
    let render = scene.config.render.clone();
    let mut trainer = match &a.resume {
        Some(ck) => {
            let (layout, state) = load_checkpoint(ck, &mut scene.model)?;
            Trainer::resume(scene.model, frames, render, cfg, layout, state)?
        }
        None => Trainer::new(scene.model, frames, render, cfg)?,
    };
    create_dir(&a.out)?;
    trainer.set_dump_dir(&a.out);
    let log_path = a.out.join(LOG_FILE);
    let mut log = format!("{}\n", IterationLog::CSV_HEADER);
    let write_log = |log: &str| fs::write(&log_path, log).map_err(|e| io_err(&log_path, e));
    let every = trainer.config().checkpoint_every;
    let mut steps = 0;
    while !trainer.done() && a.max_steps.is_none_or(|m| steps < m) {
        let entry = match trainer.step() {
            Ok(entry) => entry,
            Err(e) => {
                write_log(&log)?;
                return Err(e);
            }
        };
        steps += 1;
        log.push_str(&entry.csv_row());
        log.push('\n');
        if every > 0 && trainer.state().iteration % every == 0 {
            trainer.save(&a.out)?;
            write_log(&log)?;
        }
    }
    write_log(&log)?;
    trainer.save(&a.out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let rows = evaluate_dirs(&a.pred, &a.gt, a.masks.as_deref(), !a.no_align)?;
    let csv = metrics::to_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, csv).map_err(|e| io_err(p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

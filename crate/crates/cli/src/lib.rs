//! Subcommands of the `msgfield` binary.
//!
//! Each `cmd_*` function takes parsed arguments plus the merged [`Config`]
//! and returns a JSON summary that the binary prints on stdout. Errors carry
//! the process exit code through [`exit_code`].

pub mod config;
pub mod presets;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use msgfield::io;
use msgfield::manipulate::{run_manipulation, ManipulationReport};
use msgfield::motion::{fit, pose_scene, sample_frames};
use msgfield::projection::{occluding_primitives, select_views};
use msgfield::semantics::{distill, query, QueryResult};
use msgfield::synth::generate;
use msgfield::{
    Channels, Error, ErrorKind, GraspProvider, MotionField, MotionMode, Outcome, Overrides, Rasterizer, Scene,
    SemanticTable, SimWorld,
};
use serde_json::{json, Value};

pub use config::Config;
pub use presets::Preset;

/// Exit status for a manipulation run that ended without success.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DOMAIN: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Input => EXIT_INPUT,
        ErrorKind::Domain => EXIT_DOMAIN,
    }
}

#[derive(Debug, Parser)]
#[command(name = "msgfield", version, about = "Gaussian splat scenes: render, label, track and manipulate")]
pub struct Cli {
    /// TOML (by extension) or JSON file overriding default settings.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render every camera to image files.
    Render(RenderArgs),
    /// Label primitives from multi-view masks and build the semantic table.
    Distill(DistillArgs),
    /// Select the primitives that best match a text feature.
    Query(QueryArgs),
    /// Fit a motion field to an observed video and write its trajectory.
    Track(TrackArgs),
    /// List primitives occluding an object in each camera.
    Occlusion(OcclusionArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Run the simulated perceive-approach-grasp loop.
    Manipulate(ManipulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Channel {
    Color,
    Opacity,
    Depth,
    Label,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "color")]
    pub channels: Vec<Channel>,
    /// Use the untiled reference renderer.
    #[arg(long)]
    pub naive: bool,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out_scene: PathBuf,
    #[arg(long)]
    pub out_table: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    /// Text feature file.
    #[arg(long)]
    pub text: PathBuf,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fail with a domain error when the best relevancy is below this.
    #[arg(long)]
    pub min_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Rigid,
    Nonrigid,
}

impl From<Mode> for MotionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Rigid => MotionMode::Rigid,
            Mode::Nonrigid => MotionMode::Nonrigid,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    /// Dataset directory holding `frames/NNNN/<camera>.ppm` and
    /// `<camera>.mask.pgm`.
    #[arg(long)]
    pub observations: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Trajectory output (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Track the primitives carrying this label.
    #[arg(long, conflicts_with_all = ["indices", "table"])]
    pub label: Option<u32>,
    /// Track these primitive indices.
    #[arg(long, value_delimiter = ',', conflicts_with = "table")]
    pub indices: Option<Vec<usize>>,
    /// Track the result of a query against this table (needs `--text`).
    #[arg(long, requires = "text")]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Number of frames to use; defaults to all observed frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the posed scene of every fitted timestep here.
    #[arg(long)]
    pub posed_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OcclusionArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub label: u32,
    #[arg(long)]
    pub padding: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Spec file (TOML or JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the seed given in the spec file or preset.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ManipulateArgs {
    /// Dataset directory with `scene.msgf`, `cameras.json` and
    /// `features.json`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Text feature file naming the target object.
    #[arg(long)]
    pub text: PathBuf,
    /// Operation word; `grasp` and `place` are implemented.
    #[arg(long)]
    pub operation: Option<String>,
    /// Scripted object motions.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Semantic table; built from the dataset features when absent.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Robot's belief scene; defaults to the dataset scene.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Write the event log (one JSON object per line) here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub max_ticks: Option<usize>,
}

/// What a finished command reports: a JSON summary and the exit status.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Value,
    pub exit: i32,
}

impl Report {
    fn ok(summary: Value) -> Self {
        Self { summary, exit: 0 }
    }
}

pub fn run(cli: &Cli) -> Result<Report, Error> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match &cli.command {
        Command::Render(a) => cmd_render(a, &cfg).map(Report::ok),
        Command::Distill(a) => cmd_distill(a, &cfg).map(Report::ok),
        Command::Query(a) => cmd_query(a).map(Report::ok),
        Command::Track(a) => cmd_track(a, &cfg).map(Report::ok),
        Command::Occlusion(a) => cmd_occlusion(a, &cfg).map(Report::ok),
        Command::Synth(a) => cmd_synth(a).map(Report::ok),
        Command::Manipulate(a) => cmd_manipulate_files(a, &cfg),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

pub fn cmd_render(a: &RenderArgs, cfg: &Config) -> Result<Value, Error> {
    let scene = io::load_scene(&a.scene)?;
    let cameras = io::load_cameras(&a.cameras)?;
    let channels = Channels {
        color: a.channels.contains(&Channel::Color),
        opacity: a.channels.contains(&Channel::Opacity),
        depth: a.channels.contains(&Channel::Depth),
        label: a.channels.contains(&Channel::Label),
    };
    create_dir(&a.out)?;
    let r = Rasterizer::new(cfg.render.clone());
    let mut files = Vec::new();
    let mut depth_scale = serde_json::Map::new();
    for cam in &cameras {
        let target = if a.naive {
            r.render_naive(&scene, cam, channels, &Overrides::default())?
        } else {
            r.render(&scene, cam, channels, &Overrides::default())?
        };
        let path = |suffix: &str| a.out.join(format!("{}.{suffix}", cam.id));
        if let Some(c) = &target.color {
            files.push(path("color.ppm"));
            io::save_rgb(c, files.last().unwrap())?;
        }
        if let Some(o) = &target.opacity {
            files.push(path("opacity.pgm"));
            io::save_gray(o, files.last().unwrap())?;
        }
        if let Some(d) = &target.depth {
            // stored as a fraction of the farthest rendered depth
            let max = d.data.iter().copied().fold(0.0, f64::max);
            let mut scaled = d.clone();
            if max > 0.0 {
                scaled.data.iter_mut().for_each(|v| *v /= max);
            }
            depth_scale.insert(cam.id.clone(), json!(max));
            files.push(path("depth.pgm"));
            io::save_gray(&scaled, files.last().unwrap())?;
        }
        if let Some(l) = &target.label {
            files.push(path("label.pgm"));
            io::save_labels(l, files.last().unwrap())?;
        }
    }
    info!("rendered {} cameras", cameras.len());
    Ok(json!({ "files": files, "depth_scale": depth_scale }))
}

pub fn cmd_distill(a: &DistillArgs, cfg: &Config) -> Result<Value, Error> {
    let scene = io::load_scene(&a.scene)?;
    let cameras = io::load_cameras(&a.cameras)?;
    let detections = io::load_detections(&a.detections)?;
    let features = io::load_features(&a.features)?;
    let start = Instant::now();
    let r = Rasterizer::new(cfg.render.clone());
    let (labeled, table, report) = distill(&r, &scene, &cameras, &detections, &features, &cfg.distill)?;
    let seconds = start.elapsed().as_secs_f64();
    io::save_scene(&labeled, &a.out_scene)?;
    io::save_table(&table, &a.out_table)?;
    info!("distilled {} labels in {seconds:.2}s", report.counts.len());
    Ok(json!({ "counts": report.counts, "conflicts": report.conflicts, "seconds": seconds }))
}

/// Query with an optional floor on the winning relevancy.
pub fn query_with_floor(scene: &Scene, table: &SemanticTable, text: &[f64], min: Option<f64>) -> Result<QueryResult, Error> {
    let res = query(scene, table, text)?;
    if let Some(min) = min {
        let best = res.scores.iter().find(|(l, _)| *l == res.label).map_or(f64::NAN, |s| s.1);
        if !(best >= min) {
            return Err(Error::Domain(format!("best relevancy {best} of label {} is below {min}", res.label)));
        }
    }
    Ok(res)
}

pub fn cmd_query(a: &QueryArgs) -> Result<Value, Error> {
    let scene = io::load_scene(&a.scene)?;
    let table = io::load_table(&a.table)?;
    let text = io::load_text_feature(&a.text)?;
    let res = query_with_floor(&scene, &table, &text, a.min_score)?;
    let value = serde_json::to_value(&res).expect("serialisable");
    if let Some(out) = &a.out {
        write_text(out, &format!("{}\n", serde_json::to_string_pretty(&value).expect("serialisable")))?;
    }
    Ok(value)
}

fn dynamic_set(a: &TrackArgs, scene: &Scene) -> Result<Vec<usize>, Error> {
    if let Some(label) = a.label {
        let idx = scene.indices_with_label(label);
        if idx.is_empty() {
            return Err(Error::EmptyObject(label));
        }
        return Ok(idx);
    }
    if let Some(idx) = &a.indices {
        if let Some(&bad) = idx.iter().find(|&&i| i >= scene.len()) {
            return Err(Error::Domain(format!("index {bad} out of range for {} primitives", scene.len())));
        }
        return Ok(idx.clone());
    }
    if let (Some(table), Some(text)) = (&a.table, &a.text) {
        let table = io::load_table(table)?;
        let text = io::load_text_feature(text)?;
        return Ok(query(scene, &table, &text)?.indices);
    }
    Ok(scene.dynamic_indices())
}

pub fn cmd_track(a: &TrackArgs, cfg: &Config) -> Result<Value, Error> {
    let scene = io::load_scene(&a.scene)?;
    let cameras = io::load_cameras(&a.cameras)?;
    let obs = io::load_observations(&a.observations, &cameras)?;
    let mut fit_cfg = cfg.fit.clone();
    fit_cfg.iterations = a.iterations.or(fit_cfg.iterations);
    fit_cfg.stride = a.stride.unwrap_or(fit_cfg.stride);
    fit_cfg.seed = a.seed.unwrap_or(fit_cfg.seed);
    fit_cfg.validate()?;
    let n = a.frames.unwrap_or(obs.frames.len());
    if n == 0 {
        return Err(Error::MissingObservation(format!("no frames under {}", a.observations.display())));
    }
    if n > obs.frames.len() {
        return Err(Error::MissingObservation(format!("requested {n} frames, found {}", obs.frames.len())));
    }
    let dynamic = dynamic_set(a, &scene)?;
    let mode = MotionMode::from(a.mode);
    let field = MotionField::new(&scene, mode, fit_cfg.num_bases, sample_frames(n, fit_cfg.stride), dynamic, fit_cfg.seed)?;
    let start = Instant::now();
    let r = Rasterizer::new(cfg.render.clone());
    let result = fit(&r, &scene, &cameras, &obs, field, &fit_cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    io::save_trajectory(&result.field, &result.frames, &a.out)?;
    if let Some(dir) = &a.posed_dir {
        create_dir(dir)?;
        for &t in &result.field.timesteps {
            io::save_scene(&pose_scene(&scene, &result.field, t)?, &dir.join(format!("{t:04}.msgf")))?;
        }
    }
    let frames: Vec<Value> = result
        .frames
        .iter()
        .map(|f| json!({ "t": f.t, "initial_loss": f.losses.first(), "final_loss": f.final_loss }))
        .collect();
    info!("tracked {} timesteps in {seconds:.2}s", result.field.timesteps.len());
    Ok(json!({
        "mode": mode,
        "dynamic": result.field.dynamic.len(),
        "timesteps": result.field.timesteps,
        "frames": frames,
        "seconds": seconds,
    }))
}

pub fn cmd_occlusion(a: &OcclusionArgs, cfg: &Config) -> Result<Value, Error> {
    let scene = io::load_scene(&a.scene)?;
    let cameras = io::load_cameras(&a.cameras)?;
    let padding = a.padding.unwrap_or(cfg.occlusion.padding);
    let views = cameras
        .iter()
        .map(|c| Ok(json!({ "camera": c.id, "occluders": occluding_primitives(&scene, a.label, c, padding)? })))
        .collect::<Result<Vec<_>, Error>>()?;
    let order: Vec<&str> = select_views(&scene, a.label, &cameras, padding)?
        .into_iter()
        .map(|(i, _)| cameras[i].id.as_str())
        .collect();
    Ok(json!({ "label": a.label, "views": views, "preferred": order }))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<Value, Error> {
    let mut spec = match (&a.spec, a.preset) {
        (Some(p), _) => io::load_synth_spec(p)?,
        (None, Some(preset)) => preset.spec(a.seed.unwrap_or(0)),
        (None, None) => return Err(Error::Spec("either a spec file or a preset is required".into())),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let out = generate(&spec)?;
    io::save_dataset(&spec, &out, &a.out)?;
    Ok(json!({
        "dir": a.out,
        "frames": spec.frames,
        "cameras": out.cameras.len(),
        "primitives": out.scene.len(),
        "moving_labels": out.moving_labels(&spec),
    }))
}

/// Runs the control loop on an already assembled world.
pub fn cmd_manipulate(
    world: &mut SimWorld,
    model: &Scene,
    table: &SemanticTable,
    text_feature: &[f64],
    provider: &dyn GraspProvider,
    cfg: &Config,
) -> Result<ManipulationReport, Error> {
    let mut m = cfg.manipulate.clone();
    m.fit = cfg.fit.clone();
    run_manipulation(&Rasterizer::new(cfg.render.clone()), world, model, table, text_feature, provider, &m)
}

/// Exit status for a finished manipulation run.
pub fn outcome_exit(outcome: &Outcome) -> i32 {
    match outcome {
        Outcome::Success { .. } => 0,
        Outcome::Failure { .. } => EXIT_FAILURE,
        Outcome::Unsupported { .. } => EXIT_DOMAIN,
    }
}

fn cmd_manipulate_files(a: &ManipulateArgs, cfg: &Config) -> Result<Report, Error> {
    let scene = io::load_scene(&a.dataset.join("scene.msgf"))?;
    let cameras = io::load_cameras(&a.dataset.join("cameras.json"))?;
    let table = match &a.table {
        Some(p) => io::load_table(p)?,
        None => {
            let f = io::load_features(&a.dataset.join("features.json"))?;
            SemanticTable::new(f.dim, f.objects, f.canon)?
        }
    };
    let text = io::load_text_feature(&a.text)?;
    let script = match &a.script {
        Some(p) => io::load_script(p)?,
        None => Vec::new(),
    };
    let model = match &a.model {
        Some(p) => io::load_scene(p)?,
        None => scene.clone(),
    };
    let mut cfg = cfg.clone();
    if let Some(op) = &a.operation {
        cfg.manipulate.operation = op.clone();
    }
    if let Some(t) = a.max_ticks {
        cfg.manipulate.max_ticks = t;
    }
    let mut world = SimWorld::new(scene, cameras, script, cfg.sim.home, cfg.sim.step)?;
    let report = cmd_manipulate(&mut world, &model, &table, &text, &cfg.grasp, &cfg)?;
    if let Some(p) = &a.log {
        write_text(p, &report.log_text())?;
    }
    match &report.outcome {
        Outcome::Failure { reason } => warn!("manipulation failed: {reason}"),
        Outcome::Unsupported { operation } => warn!("{}", Error::NotImplemented(operation.clone())),
        Outcome::Success { .. } => {}
    }
    Ok(Report {
        summary: json!({
            "outcome": report.outcome,
            "refits": report.refits,
            "ticks": world.clock,
            "events": report.events.len(),
        }),
        exit: outcome_exit(&report.outcome),
    })
}

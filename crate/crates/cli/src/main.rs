use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use forge_core::evalkit::{self, EvalCase, EvalReport, ReconstructSettings};
use forge_core::pifield::{checkpoint, extract_point_cloud, FieldEvaluator, FieldParams};
use forge_core::pointrender::render;
use forge_core::scenegeom::{Camera, ImageRgba, DEFAULT_ORTHO_SCALE};
use forge_core::surfaceext::{colorize, export_obj, extract_mesh};
use forge_core::synthgen::{input_camera, load_real_dir, load_real_sample, save_real_sample, Dataset, MANIFEST_FILE};
use forge_core::trainpipe::{metrics_csv, train_stage1, train_stage2, EpochMetrics, TrainingConfig};

const THREADS_ENV: &str = "IMPLICIT_FORGE_THREADS";
const RUN_CONFIG: &str = "run_config.json";

#[derive(Parser, Debug)]
#[command(
    name = "implicit-forge",
    version,
    about = "Single-view implicit reconstruction: data, training, meshes, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the procedural shape catalog into a training dataset.
    GenData(GenDataArgs),
    /// Supervised occupancy training with multi-view consistency.
    TrainStage1(TrainArgs),
    /// Self-supervised fine-tuning on masked images.
    TrainStage2(TrainArgs),
    /// Mesh and three fixed-view renders from one input image.
    Reconstruct(ReconstructArgs),
    /// Point-cloud renders of a reconstruction at chosen azimuths.
    RenderViews(RenderViewsArgs),
    /// Mask IoU and texture precision/recall over an evaluation set.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON training config; unspecified keys keep their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Config override, dotted keys reach nested tables (`splat.sigma_px=1.5`).
    #[arg(long = "set", value_name = "K=V")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Write input renders as image/mask pairs instead of the training layout.
    #[arg(long)]
    real: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory (stage 1) or directory of image/mask pairs (stage 2).
    /// Stage 1 generates its dataset from the config when omitted.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Starting checkpoint; required for stage 2.
    #[arg(long, value_name = "CHECKPOINT")]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InputArgs {
    #[arg(long, value_name = "CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PNG")]
    image: PathBuf,
    /// Foreground mask; without it the image's alpha channel is the mask.
    #[arg(long, value_name = "PNG")]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArgs,
}

#[derive(Args, Debug)]
struct RenderViewsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: InputArgs,
    /// Azimuths in degrees; defaults to 0, 90 and 180.
    #[arg(long = "azimuth", value_name = "DEG", allow_negative_numbers = true)]
    azimuths: Vec<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory or directory of image/mask pairs.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// `NAME=PATH` or `PATH` (named by file stem), repeatable. Without any,
    /// the ground truth is evaluated against itself.
    #[arg(long = "checkpoint", value_name = "[NAME=]PATH")]
    checkpoints: Vec<String>,
    /// Ground-truth view for dataset directories: 0, 90 or 180.
    #[arg(long, value_name = "DEG", default_value_t = 0)]
    view: u32,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    /// Bad flags, config or input files.
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

trait InputContext<T> {
    fn input(self, what: impl Display) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input(self, what: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into().context(what.to_string())))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    ExitCode::from(execute(std::env::args_os()))
}

/// Parses `args`, runs the command and reports failures on stderr. Returns the exit code.
fn execute<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn thread_limit(value: Option<&str>) -> CliResult<Option<usize>> {
    let Some(v) = value else { return Ok(None) };
    let n: usize = v.trim().parse().input(format!("{THREADS_ENV}={v:?} is not a thread count"))?;
    if n == 0 {
        return Err(Failure::Input(anyhow!("{THREADS_ENV} must be at least 1")));
    }
    Ok(Some(n))
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = thread_limit(std::env::var(THREADS_ENV).ok().as_deref())? {
        forge_core::par::limit_threads(n).input(THREADS_ENV)?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainStage1(a) => stage1(a),
        Command::TrainStage2(a) => stage2(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::RenderViews(a) => render_views(a),
        Command::Eval(a) => eval(a),
    }
}

/// Config file, then `--set` overrides in order, then `--seed`.
fn load_config(c: &Common) -> CliResult<TrainingConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainingConfig::load(p).input("reading config")?,
        None => TrainingConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Input(anyhow!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).input("applying --set")?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().input("invalid config")?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &TrainingConfig) -> CliResult {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(dir.join(RUN_CONFIG))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let manifest = cfg.manifest();
    eprintln!(
        "gen-data: {} shapes from catalog index {}, {}x{} px, seed {}",
        cfg.num_shapes, cfg.shape_offset, cfg.image_size, cfg.image_size, cfg.seed
    );
    let dataset = Dataset::generate(manifest)?;
    prepare_out(&a.common.out, &cfg)?;
    if a.real {
        for s in &dataset.samples {
            save_real_sample(&s.input, &a.common.out, &format!("{:03}", cfg.shape_offset + s.index))?;
        }
    } else {
        dataset.save(&a.common.out)?;
    }
    eprintln!("gen-data: wrote {} samples to {}", dataset.len(), a.common.out.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> CliResult<FieldParams> {
    checkpoint::load(path).input("reading checkpoint")
}

/// Rewrites the metrics CSV after every epoch and writes periodic checkpoints.
fn epoch_writer<'a>(
    out: &'a Path,
    stage: &'a str,
    every: usize,
    history: &'a mut Vec<EpochMetrics>,
) -> impl FnMut(&EpochMetrics, &FieldParams) -> forge_core::Result<()> + 'a {
    move |m, params| {
        eprintln!(
            "{stage} epoch {:>4}: loss_occ {:.6} loss_mv {:.6} total {:.6}",
            m.epoch, m.loss_occ, m.loss_mv, m.total
        );
        history.push(*m);
        let path = out.join("metrics.csv");
        fs::write(&path, metrics_csv(history)).map_err(|e| forge_core::Error::io(&path, e))?;
        if every > 0 && m.epoch % every == 0 {
            checkpoint::save(params, out.join(format!("{stage}_epoch{:04}.ckpt", m.epoch)))?;
        }
        Ok(())
    }
}

fn stage1(a: TrainArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let init = a.init.as_deref().map(load_checkpoint).transpose()?;
    let dataset = match &a.data {
        Some(dir) => Dataset::load(dir).input(format!("loading dataset {}", dir.display()))?,
        None => Dataset::generate(cfg.manifest())?,
    };
    eprintln!("{}", stage1_header(&cfg, &dataset, a.init.as_deref()));
    let out = &a.common.out;
    prepare_out(out, &cfg)?;
    let mut history = Vec::new();
    let result = train_stage1(&dataset, &cfg, init, epoch_writer(out, "stage1", cfg.checkpoint_every, &mut history))?;
    checkpoint::save(&result.params, out.join("stage1.ckpt"))?;
    eprintln!("stage1: {} steps, checkpoint {}", result.steps, out.join("stage1.ckpt").display());
    Ok(())
}

fn stage1_header(cfg: &TrainingConfig, dataset: &Dataset, init: Option<&Path>) -> String {
    format!(
        "stage1: epochs={} lr={} lambda_mv={} batch_size={} shapes={} image_size={} grid_res={} max_steps={} seed={} init={}",
        cfg.stage1_epochs,
        cfg.stage1_lr,
        cfg.lambda_mv,
        cfg.batch_size,
        dataset.len(),
        dataset.manifest.image_size,
        cfg.grid_res,
        cfg.max_steps.map_or("none".into(), |s| s.to_string()),
        cfg.seed,
        init.map_or("fresh".into(), |p| p.display().to_string()),
    )
}

fn stage2(a: TrainArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let Some(init_path) = &a.init else {
        return Err(Failure::Input(anyhow!(
            "train-stage2 fine-tunes an existing model: pass a stage-1 checkpoint with --init"
        )));
    };
    let Some(data) = &a.data else {
        return Err(Failure::Input(anyhow!("train-stage2 needs --data DIR with NAME.png + NAME_mask.png pairs")));
    };
    let init = load_checkpoint(init_path)?;
    let samples: Vec<ImageRgba> =
        load_real_dir(data).input(format!("loading {}", data.display()))?.into_iter().map(|(_, img)| img).collect();
    if samples.is_empty() {
        return Err(Failure::Input(anyhow!("no image/mask pairs in {}", data.display())));
    }
    eprintln!(
        "stage2: epochs={} lr={} samples={} mesh_res={} max_steps={} seed={} init={}",
        cfg.stage2_epochs,
        cfg.stage2_lr,
        samples.len(),
        cfg.mesh_res,
        cfg.max_steps.map_or("none".into(), |s| s.to_string()),
        cfg.seed,
        init_path.display(),
    );
    let out = &a.common.out;
    prepare_out(out, &cfg)?;
    let mut history = Vec::new();
    let result = train_stage2(init, &samples, &cfg, epoch_writer(out, "stage2", cfg.checkpoint_every, &mut history))?;
    if history.is_empty() {
        fs::write(out.join("metrics.csv"), metrics_csv(&[])).context("writing metrics.csv")?;
    }
    checkpoint::save(&result.params, out.join("stage2.ckpt"))?;
    eprintln!("stage2: {} steps, checkpoint {}", result.steps, out.join("stage2.ckpt").display());
    Ok(())
}

/// Loads the checkpoint and input image, and builds the field seen by the canonical camera.
fn load_field(input: &InputArgs) -> CliResult<(FieldEvaluator, ImageRgba)> {
    let params = load_checkpoint(&input.checkpoint)?;
    let image = match &input.mask {
        Some(mask) => load_real_sample(&input.image, mask),
        None => ImageRgba::load_png(&input.image),
    }
    .input("reading input image")?;
    if image.width() != image.height() {
        return Err(Failure::Input(anyhow!("input image must be square, got {}x{}", image.width(), image.height())));
    }
    if !image.mask().contains(&true) {
        eprintln!("warning: input image has no foreground pixels; the reconstruction will be empty or nearly so");
    }
    let camera = input_camera(image.width()).input("input image")?;
    let field = FieldEvaluator::new(&params, &image, &camera).input("input image")?;
    Ok((field, image))
}

fn render_cloud_views(
    field: &FieldEvaluator,
    image: &ImageRgba,
    cfg: &TrainingConfig,
    azimuths_deg: &[f64],
    out: &Path,
) -> CliResult {
    let settings = cfg.reconstruct_settings();
    let cloud = extract_point_cloud(field, settings.grid_res, settings.threshold)?;
    for &deg in azimuths_deg {
        let camera = Camera::for_azimuth(deg.to_radians(), image.width(), image.height(), DEFAULT_ORTHO_SCALE)?;
        render(&cloud, &camera, &settings.splat)?.image.save_png(out.join(format!("view{}.png", fmt_degrees(deg))))?;
    }
    Ok(())
}

fn fmt_degrees(deg: f64) -> String {
    if deg.fract() == 0.0 {
        format!("{deg:.0}")
    } else {
        deg.to_string()
    }
}

fn reconstruct(a: ReconstructArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let (field, image) = load_field(&a.input)?;
    let out = &a.common.out;
    prepare_out(out, &cfg)?;
    let mut mesh = extract_mesh(&field, cfg.mesh_res, cfg.threshold)?;
    colorize(&mut mesh, &field);
    if mesh.is_empty() {
        eprintln!("warning: no surface crosses occupancy {}; mesh.obj is empty", cfg.threshold);
    }
    export_obj(&mesh, out.join("mesh.obj"))?;
    render_cloud_views(&field, &image, &cfg, &[0.0, 90.0, 180.0], out)?;
    eprintln!(
        "reconstruct: {} vertices, {} faces at {}^3 -> {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        cfg.mesh_res,
        out.display()
    );
    Ok(())
}

fn render_views(a: RenderViewsArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let azimuths = if a.azimuths.is_empty() { vec![0.0, 90.0, 180.0] } else { a.azimuths.clone() };
    if let Some(bad) = azimuths.iter().find(|d| !d.is_finite()) {
        return Err(Failure::Input(anyhow!("azimuth {bad} is not finite")));
    }
    let (field, image) = load_field(&a.input)?;
    prepare_out(&a.common.out, &cfg)?;
    render_cloud_views(&field, &image, &cfg, &azimuths, &a.common.out)?;
    eprintln!("render-views: {} views -> {}", azimuths.len(), a.common.out.display());
    Ok(())
}

/// Evaluation cases from a dataset directory (ground truth at `view` degrees)
/// or from image/mask pairs (ground truth is the masked input itself).
fn load_eval_cases(dir: &Path, view: u32) -> CliResult<Vec<EvalCase>> {
    if !dir.is_dir() {
        return Err(Failure::Input(anyhow!("evaluation directory {} does not exist", dir.display())));
    }
    let slot = match view {
        0 => 0,
        90 => 1,
        180 => 2,
        _ => return Err(Failure::Input(anyhow!("--view must be 0, 90 or 180, got {view}"))),
    };
    let cases = if dir.join(MANIFEST_FILE).is_file() {
        let ds = Dataset::load(dir).input(format!("loading dataset {}", dir.display()))?;
        let size = ds.manifest.image_size;
        let input_camera = input_camera(size)?;
        let camera = Camera::for_azimuth(f64::from(view).to_radians(), size, size, DEFAULT_ORTHO_SCALE)?;
        ds.samples
            .into_iter()
            .map(|s| EvalCase { input: s.input, input_camera, camera, truth: s.views[slot].clone() })
            .collect::<Vec<_>>()
    } else {
        if view != 0 {
            return Err(Failure::Input(anyhow!("image/mask pairs only have ground truth for --view 0")));
        }
        load_real_dir(dir)
            .input(format!("loading {}", dir.display()))?
            .into_iter()
            .map(|(_, img)| -> CliResult<EvalCase> {
                if img.width() != img.height() {
                    return Err(Failure::Input(anyhow!("evaluation images must be square")));
                }
                let camera = input_camera(img.width())?;
                Ok(EvalCase { input: img.clone(), input_camera: camera, camera, truth: img })
            })
            .collect::<CliResult<Vec<_>>>()?
    };
    if cases.is_empty() {
        return Err(Failure::Input(anyhow!("no evaluation samples in {}", dir.display())));
    }
    Ok(cases)
}

fn parse_method(method: &str) -> (String, PathBuf) {
    match method.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(method);
            let name = path.file_stem().map_or_else(|| method.to_string(), |s| s.to_string_lossy().into_owned());
            (name, path)
        }
    }
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(&a.common)?;
    let cases = load_eval_cases(&a.data, a.view)?;
    let methods = a
        .checkpoints
        .iter()
        .map(|method| {
            let (name, path) = parse_method(method);
            Ok((name, load_checkpoint(&path)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    prepare_out(&a.common.out, &cfg)?;
    let settings: ReconstructSettings = cfg.reconstruct_settings();
    let mut reports = Vec::new();
    if methods.is_empty() {
        let per_sample = cases
            .iter()
            .map(|c| evalkit::compare(&c.truth, &c.truth, cfg.tau))
            .collect::<forge_core::Result<Vec<_>>>()?;
        reports.push(EvalReport::from_samples("ground-truth", per_sample)?);
    }
    for (name, params) in &methods {
        eprintln!("eval: {name} on {} samples", cases.len());
        reports.push(evalkit::evaluate(name, params, &cases, &settings, cfg.tau)?);
    }
    evalkit::write_csv(&reports, a.common.out.join("eval.csv"))?;
    for r in &reports {
        let path = a.common.out.join(format!("eval_{}_samples.csv", sanitize(&r.method)));
        fs::write(&path, evalkit::per_sample_csv(r)).with_context(|| format!("writing {}", path.display()))?;
    }
    print!("{}", evalkit::reports_table(&reports));
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

#[cfg(test)]
mod tests;

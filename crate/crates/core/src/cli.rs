//! Command-line front end. Exit codes: 0 success, 1 failure (including a
//! failed check), 2 usage or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, DatasetConfig, RunConfig};
use crate::finetune::{
    eval_scenes, evaluate, finetune_with, median_center_error, prepare_2d_targets, ToyDetector, TrainError,
};
use crate::geometry::project_box;
use crate::gradcheck::{run_grad_check, GradCheckConfig};
use crate::losses::{total_loss_grad_3d, CameraOutcome, CameraView, Prediction3D};
use crate::scenegen::{generate_dataset, manifest_path, read_dataset, write_dataset, Dataset, RigPreset, Scene, SceneError};
use crate::svg::scene_overlay;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::ParamsMismatch(_) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failure(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "bev2d", version, about = "Projected 2D supervision for a toy multi-camera 3D detector")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Project a scene's predictions into its cameras.
    Project(StageArgs),
    /// Print cost matrices and assignments for a scene.
    Match(StageArgs),
    /// Print the projected 2D loss for a scene.
    Loss(StageArgs),
    /// Audit analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Fine-tune the toy detector with projected 2D supervision.
    Finetune(FinetuneArgs),
    /// Score saved detector parameters on the evaluation slice.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Master seed; overrides `dataset.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Fraction of scenes with 3D labels.
    #[arg(long)]
    pub split: Option<f64>,
    /// Image size relative to the rig preset.
    #[arg(long)]
    pub image_scale: Option<f64>,
    /// Camera rig, `nuscenes` or `waymo`.
    #[arg(long, value_parser = parse_rig)]
    pub rig: Option<RigPreset>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_rig(s: &str) -> Result<RigPreset, String> {
    match s {
        "nuscenes" => Ok(RigPreset::Nuscenes),
        "waymo" => Ok(RigPreset::Waymo),
        _ => Err(format!("unknown rig {s:?}, expected nuscenes or waymo")),
    }
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Scene id, e.g. `scene_0003`.
    #[arg(long)]
    pub scene: String,
    /// Camera id, or `all`.
    #[arg(long, default_value = "all")]
    pub camera: String,
    /// Detector parameters; the perturbed initial detector when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the initial detector when no parameters are given.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Random configurations to audit.
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Seed of the configurations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale every analytic gradient by 1.1; the audit must then fail.
    #[arg(long, hide = true)]
    pub inject_bug: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for parameters, history, metrics and overlays.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `train.mix_ratio`: chance a fully labelled scene is visited with 3D labels.
    #[arg(long)]
    pub mix_ratio: Option<f64>,
    /// Overrides `train.seed`, also the initial detector's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.base_lr`.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Detector parameters JSON written by `finetune`.
    #[arg(long)]
    pub params: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command and returns what it prints on success.
pub fn run(command: Command) -> Result<String, CliError> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Project(a) => cmd_stage(&a, Stage::Project),
        Command::Match(a) => cmd_stage(&a, Stage::Match),
        Command::Loss(a) => cmd_stage(&a, Stage::Loss),
        Command::GradCheck(a) => cmd_grad_check(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !manifest_path(dir).is_file() {
        return Err(CliError::Usage(format!("{} is not a dataset directory", dir.display())));
    }
    read_dataset(dir).map_err(|e| CliError::Failure(e.to_string()))
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn cmd_gen(a: &GenArgs) -> Result<String, CliError> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    if let Some(n) = a.scenes {
        cfg.dataset.scenes = n;
    }
    if let Some(f) = a.split {
        cfg.dataset.full3d_fraction = f;
    }
    if let Some(s) = a.image_scale {
        cfg.scene.image_scale = s;
    }
    if let Some(r) = a.rig {
        cfg.scene.rig = r;
    }
    cfg.validate()?;
    let d = &cfg.dataset;
    let ds = generate_dataset(d.seed, d.scenes, d.full3d_fraction, &cfg.scene).map_err(|e| match e {
        SceneError::InvalidConfig(m) => CliError::Usage(m),
        other => CliError::Failure(other.to_string()),
    })?;
    let manifest = write_dataset(&ds, &a.out).map_err(|e| CliError::Failure(e.to_string()))?;
    let cam = &manifest.rig.cameras[0];
    let mut s = String::new();
    let _ = writeln!(s, "dataset   {}", a.out.display());
    let _ = writeln!(s, "version   {}", manifest.version);
    let _ = writeln!(s, "seed      {}", manifest.seed);
    let _ = writeln!(
        s,
        "scenes    {} (full3d {}, only2d {})",
        manifest.scene_count, manifest.split.full3d, manifest.split.only2d
    );
    let _ = writeln!(
        s,
        "rig       {} {} cameras {}x{}",
        format!("{:?}", manifest.rig.preset).to_lowercase(),
        manifest.rig.cameras.len(),
        cam.width,
        cam.height
    );
    let boxes: usize = ds.scenes.iter().map(|s| s.simulation_gt().len()).sum();
    let _ = writeln!(s, "boxes     {boxes}");
    let _ = writeln!(s, "files     {}", manifest.files.len() + 1);
    let _ = writeln!(s, "manifest  sha256 {}", sha256_file(&manifest_path(&a.out))?);
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Project,
    Match,
    Loss,
}

fn load_params(path: &Path, ds: &Dataset) -> Result<ToyDetector, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let det: ToyDetector = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: not a parameter file: {e}", path.display())))?;
    det.check_dataset(ds)?;
    Ok(det)
}

fn select_cameras(scene: &Scene, camera: &str) -> Result<Vec<usize>, CliError> {
    if camera == "all" {
        return Ok((0..scene.cameras.len()).collect());
    }
    scene
        .cameras
        .iter()
        .position(|c| c.id == camera)
        .map(|i| vec![i])
        .ok_or_else(|| {
            let ids: Vec<&str> = scene.cameras.iter().map(|c| c.id.as_str()).collect();
            CliError::Usage(format!("no camera {camera:?}; expected all or one of {}", ids.join(", ")))
        })
}

fn cmd_stage(a: &StageArgs, stage: Stage) -> Result<String, CliError> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.validate()?;
    let ds = load_dataset(&a.dataset)?;
    let si = ds
        .scenes
        .iter()
        .position(|s| s.id == a.scene)
        .ok_or_else(|| CliError::Usage(format!("no scene {:?} in {}", a.scene, a.dataset.display())))?;
    let scene = &ds.scenes[si];
    let cams = select_cameras(scene, &a.camera)?;
    let det = match &a.params {
        Some(p) => load_params(p, &ds)?,
        None => ToyDetector::from_dataset(&ds, &cfg.noise, a.seed.unwrap_or(cfg.train.seed))?,
    };
    let boxes = &det.scenes[si].boxes;
    let preds: Vec<Prediction3D> = boxes
        .iter()
        .map(|b| Prediction3D {
            bbox: b.bbox,
            logits: b.logits.clone(),
        })
        .collect();
    let targets = prepare_2d_targets(scene);
    let pipeline = cfg.train.pipeline();
    let names = ds.class_names();
    let class_name = |c: usize| names.get(c).map_or("background", |s| s.as_str());

    let mut s = String::new();
    let mode = format!("{:?}", scene.label_mode).to_lowercase();
    let _ = writeln!(s, "scene {} ({mode}), {} predictions", scene.id, boxes.len());
    let mut total = crate::losses::LossBreakdown::default();
    for &ci in &cams {
        let cam = &scene.cameras[ci];
        let _ = writeln!(s, "\ncamera {} {}x{}", cam.id, cam.width, cam.height);
        if stage == Stage::Project {
            for (i, b) in boxes.iter().enumerate() {
                let out = b.output();
                match project_box(cam, &b.bbox) {
                    Ok(p) => {
                        let _ = writeln!(
                            s,
                            "  pred {i:>3} {:<20} score {:.4}  x {:>10.4} y {:>10.4} w {:>10.4} h {:>10.4} depth {:>8.4}",
                            class_name(out.class_id),
                            out.score,
                            p.x,
                            p.y,
                            p.w,
                            p.h,
                            p.depth
                        );
                    }
                    Err(_) => {
                        let _ = writeln!(s, "  pred {i:>3} not visible");
                    }
                }
            }
            continue;
        }
        let view = CameraView {
            camera: cam,
            annotations: targets[ci].clone(),
        };
        let g = total_loss_grad_3d(&preds, std::slice::from_ref(&view), &pipeline)
            .map_err(|e| CliError::Failure(e.to_string()))?;
        let Some(outcome) = g.cameras.first() else {
            let _ = writeln!(s, "  no visible predictions");
            continue;
        };
        match stage {
            Stage::Match => write_match(&mut s, outcome, &view, &class_name),
            Stage::Loss => {
                write_loss(&mut s, outcome);
                total.accumulate(&outcome.breakdown);
            }
            Stage::Project => unreachable!(),
        }
    }
    if stage == Stage::Loss {
        let _ = writeln!(
            s,
            "\ntotal over cameras  l_cls {:.8}  l_reg {:.8}  l_iou {:.8}  total {:.8}",
            total.l_cls, total.l_reg, total.l_iou, total.total
        );
    }
    Ok(s)
}

fn write_match<'n>(s: &mut String, o: &CameraOutcome, view: &CameraView<'_>, class_name: &dyn Fn(usize) -> &'n str) {
    let _ = writeln!(s, "  annotations (depth from the depth map)");
    for (j, a) in view.annotations.iter().enumerate() {
        let b = &a.bbox;
        let _ = writeln!(
            s,
            "    gt {j:>3} {:<20} x {:>10.4} y {:>10.4} w {:>10.4} h {:>10.4} depth {:>8.4}",
            class_name(a.class_id),
            b.x,
            b.y,
            b.w,
            b.h,
            b.depth
        );
    }
    let _ = writeln!(s, "  rows are visible predictions {:?}", o.visible);
    match &o.costs {
        Some(c) => {
            let _ = writeln!(s, "  cost matrix {}x{}", c.rows(), c.cols());
            for i in 0..c.rows() {
                let row: Vec<String> = (0..c.cols()).map(|j| format!("{:>10.6}", c.get(i, j))).collect();
                let _ = writeln!(s, "    {:>3} {}", o.visible[i], row.join(" "));
            }
        }
        None => {
            let _ = writeln!(s, "  cost matrix empty (no annotations)");
        }
    }
    let _ = writeln!(s, "  assignment");
    for &(r, j) in &o.assignment.pairs {
        let _ = writeln!(s, "    pred {:>3} -> gt {j}", o.visible[r]);
    }
    let unmatched: Vec<usize> = o.assignment.unmatched_preds.iter().map(|&r| o.visible[r]).collect();
    let _ = writeln!(s, "    unmatched preds {unmatched:?}");
    let _ = writeln!(s, "    unmatched gts {:?}", o.assignment.unmatched_gts);
    let _ = writeln!(s, "    total cost {:.8}", o.assignment.total_cost);
}

fn write_loss(s: &mut String, o: &CameraOutcome) {
    let b = &o.breakdown;
    for c in &b.contributions {
        let gt = c.gt.map_or("background".to_string(), |g| format!("gt {g}"));
        let _ = writeln!(
            s,
            "  pred {:>3} {:<12} cls {:.8} reg {:.8} iou {:.8}",
            o.visible[c.pred], gt, c.cls, c.reg, c.iou
        );
    }
    let _ = writeln!(
        s,
        "  l_cls {:.8}  l_reg {:.8}  l_iou {:.8}  total {:.8}",
        b.l_cls, b.l_reg, b.l_iou, b.total
    );
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<String, CliError> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let cfg = GradCheckConfig {
        trials: a.trials,
        seed: a.seed,
        analytic_scale: if a.inject_bug { 1.1 } else { 1.0 },
        ..GradCheckConfig::default()
    };
    let r = run_grad_check(&cfg);
    let mut s = String::new();
    for t in &r.results {
        if let Some(why) = &t.excluded {
            let _ = writeln!(s, "trial {:>4} excluded: {why}", t.trial);
        }
    }
    for &f in &r.failures {
        let t = &r.results[f];
        let _ = writeln!(
            s,
            "trial {:>4} FAILED: rel err 3D {:.3e}, 2D {:.3e}",
            t.trial, t.rel_err_3d, t.rel_err_2d
        );
    }
    let _ = writeln!(s, "{}", r.summary());
    if r.passed {
        Ok(s)
    } else {
        print!("{s}");
        Err(CliError::Failure("gradient audit failed".into()))
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<String, CliError> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = a.mix_ratio {
        cfg.train.mix_ratio = m;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.base_lr = lr;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.dataset)?;
    // record the dataset actually used, not the file's generation tables
    cfg.dataset = DatasetConfig {
        seed: ds.manifest.seed,
        scenes: ds.manifest.scene_count,
        full3d_fraction: ds.manifest.split.full3d_fraction,
    };
    cfg.scene = ds.manifest.scene_config.clone();
    let overlays = a.out.join("overlays");
    fs::create_dir_all(&overlays).map_err(|e| io_failure(&overlays, e))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()).map_err(|e| io_failure(&a.out, e))?;

    let mut det = ToyDetector::from_dataset(&ds, &cfg.noise, cfg.train.seed)?;
    let initial = det.clone();
    write_json(&a.out.join("initial_params.json"), &initial)?;
    let history = finetune_with(&mut det, &ds, &cfg.train, &cfg.metrics, |_, row| {
        log::info!("history row {} written", row.epoch);
    })?;
    write_json(&a.out.join("params.json"), &det)?;
    let path = a.out.join("history.csv");
    fs::write(&path, history.to_csv()).map_err(|e| io_failure(&path, e))?;
    let (first, last) = (history.first(), history.last());
    let path = a.out.join("metrics.csv");
    fs::write(&path, last.report.to_csv()).map_err(|e| io_failure(&path, e))?;

    for (i, scene) in ds.scenes.iter().enumerate() {
        let before: Vec<_> = initial.scenes[i].boxes.iter().map(|b| b.bbox).collect();
        let after: Vec<_> = det.scenes[i].boxes.iter().map(|b| b.bbox).collect();
        let path = overlays.join(format!("{}.svg", scene.id));
        fs::write(&path, scene_overlay(scene, &before, &after)).map_err(|e| io_failure(&path, e))?;
    }

    let mut s = String::new();
    let eval = eval_scenes(&ds);
    let _ = writeln!(
        s,
        "fine-tuned {} scenes for {} epochs ({} steps, mix ratio {}), evaluated on {} scenes",
        ds.scenes.len(),
        cfg.train.epochs,
        det.steps,
        cfg.train.mix_ratio,
        eval.len()
    );
    let _ = writeln!(s, "{:<24}{:>10}{:>10}", "", "initial", "final");
    let _ = writeln!(s, "{:<24}{:>10.4}{:>10.4}", "mAP", first.report.map, last.report.map);
    let _ = writeln!(s, "{:<24}{:>10.4}{:>10.4}", "NDS", first.report.nds, last.report.nds);
    let _ = writeln!(s, "{:<24}{:>10.4}{:>10.4}", "mAOE", first.report.tp.aoe, last.report.tp.aoe);
    let _ = writeln!(
        s,
        "{:<24}{:>10.4}{:>10.4}",
        "median center error m", first.median_center_error, last.median_center_error
    );
    let _ = writeln!(s, "{:<24}{:>10.5}{:>10.5}", "2D loss", first.loss.total, last.loss.total);
    let report = format!(
        "{s}\ninitial evaluation\n{}\nfinal evaluation\n{}",
        first.report.to_text(),
        last.report.to_text()
    );
    let path = a.out.join("report.txt");
    fs::write(&path, report).map_err(|e| io_failure(&path, e))?;
    let _ = writeln!(s, "outputs in {}", a.out.display());
    Ok(s)
}

fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.validate()?;
    let ds = load_dataset(&a.dataset)?;
    let det = load_params(&a.params, &ds)?;
    let scenes = eval_scenes(&ds);
    let report = evaluate(&det, &ds, &scenes, &cfg.metrics);
    if let Some(path) = &a.csv {
        fs::write(path, report.to_csv()).map_err(|e| io_failure(path, e))?;
    }
    let mut s = format!("evaluated {} scenes\n", scenes.len());
    let _ = writeln!(s, "median center error {:.4} m", median_center_error(&det, &ds, &scenes));
    s.push_str(&report.to_text());
    Ok(s)
}

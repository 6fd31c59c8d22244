//! The `cop3d` command line: dataset generation, training, seed batteries,
//! ablation grids, error correlation, KITTI import/export and reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration or input error,
//! 3 runtime failure.

mod report;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use cop3d::eval::{
    ap40_csv, default_iou_threshold, mae_csv, match_detections_greedy, pearson_csv, pearson_matrix, EvalError,
    EvalReport, Frame, MatchedPair, ERROR_PAIRS,
};
use cop3d::geometry::project_box2d;
use cop3d::kitti_io::{self, KittiCalib, KittiError, KittiLabel};
use cop3d::synth::{ambiguity_report, read_dataset, write_dataset, Dataset, SynthError};
use cop3d::trainer::{
    ablation_csv, class_name, dataset_for, evaluate_model, loss_curve_csv, run_ablation_grid, run_seeds, scatter_csv,
    seeds_csv, ConfigError, Evaluation, ExperimentConfig, RunResult, TrainedModel, TrainerError,
};

pub use report::{report, ReportError};

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const DATASET_FILE: &str = "dataset.tsv";
pub const MODEL_FILE: &str = "model.bin";
pub const SEEDS_CSV: &str = "seeds.csv";

/// Error correlation reported for a full detector on real KITTI data,
/// shown for context only.
const REFERENCE_CORRELATION: f64 = 0.35;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) | CliError::Input { .. } => 2,
            CliError::Report(ReportError::MissingRun(_) | ReportError::Malformed { .. }) => 2,
            CliError::Trainer(TrainerError::Config(_)) => 2,
            CliError::Kitti(KittiError::Geometry(_)) => 3,
            CliError::Kitti(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cop3d", version, about = "Chain-of-prediction 3D attribute laboratory", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override a config value, e.g. `trainer.epochs=10`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    /// Seeds to run, replacing `trainer.seeds`.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Option<Vec<u64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its ambiguity statistics.
    Gen(Common),
    /// Train one model per seed, keeping checkpoints.
    Train(Common),
    /// Train at least two seeds and summarize their spread.
    Battery(Common),
    /// Run the component/subset/order ablation grid.
    Ablate(Common),
    /// Pearson correlation between attribute errors of a trained model.
    Correlate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Dataset file; regenerated from the checkpoint's config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate KITTI-format detections against KITTI-format ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory containing `label_2/` ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Directory containing `label_2/` detections with scores.
        #[arg(long)]
        det: PathBuf,
    },
    /// Write a dataset (and optionally a model's predictions) as KITTI files.
    ExportKitti {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint whose validation predictions go to `pred/label_2/`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = kitti_io::DEFAULT_PRECISION)]
        precision: usize,
    },
    /// Read a KITTI label directory into a flat CSV.
    ImportKitti {
        #[command(flatten)]
        common: Common,
        /// Directory containing `label_2/` and optionally `calib/`.
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Merge run directories into seed tables and plot data.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directories written by `train` or `battery`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn use_color() -> bool {
    std::env::var_os("COP3D_NO_COLOR").is_none() && std::io::stderr().is_terminal()
}

fn print_error(e: &CliError) {
    let mut msg = e.to_string();
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        let text = s.to_string();
        if !msg.contains(&text) {
            let _ = write!(msg, ": {text}");
        }
        source = s.source();
    }
    if use_color() {
        eprintln!("\x1b[1;31merror\x1b[0m: {msg}");
    } else {
        eprintln!("error: {msg}");
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            print_error(&e);
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(c) => gen(&c),
        Command::Train(c) => train(&c, true),
        Command::Battery(c) => train(&c, false),
        Command::Ablate(c) => ablate(&c),
        Command::Correlate { common, model, dataset } => correlate(&common, &model, dataset.as_deref()),
        Command::Eval { common, gt, det } => eval_kitti(&common, &gt, &det),
        Command::ExportKitti { common, dataset, model, precision } => {
            export_kitti(&common, dataset.as_deref(), model.as_deref(), precision)
        }
        Command::ImportKitti { common, input } => import_kitti(&common, &input),
        Command::Report { common, runs } => {
            let cfg = resolve(&common)?;
            prepare_out(&common.out, &cfg)?;
            report(&runs, &common.out)?;
            println!("merged {} run directories into {}", runs.len(), common.out.display());
            Ok(())
        }
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Input { path: path.into(), message: e.to_string() })
}

fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_input(path)?)
        .map_err(|_| CliError::Input { path: path.into(), message: "not valid UTF-8".into() })
}

pub(crate) fn write_out(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| CliError::Write { path: path.into(), source })
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Write { path: path.into(), source })
}

fn apply_flags(mut cfg: ExperimentConfig, c: &Common) -> Result<ExperimentConfig> {
    cfg.apply_overrides(&c.set)?;
    if let Some(seeds) = &c.seed_list {
        cfg.trainer.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config file (or defaults) with `--set` and `--seed-list` applied.
pub fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let base = match &c.config {
        Some(path) => ExperimentConfig::parse(&read_text(path)?).map_err(|e| CliError::Input {
            path: path.clone(),
            message: e.to_string(),
        })?,
        None => ExperimentConfig::default(),
    };
    apply_flags(base, c)
}

fn load_model(path: &Path, c: &Common) -> Result<TrainedModel> {
    if c.config.is_some() {
        return Err(CliError::Usage("--config cannot be combined with --model; the checkpoint carries its config".into()));
    }
    let mut trained = TrainedModel::from_bytes(&read_input(path)?)
        .map_err(|e| CliError::Input { path: path.into(), message: e.to_string() })?;
    trained.config = apply_flags(trained.config, c)?;
    Ok(trained)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(&read_text(path)?).map_err(|e| CliError::Input { path: path.into(), message: e.to_string() })
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    create_dir(out)?;
    write_out(&out.join(RESOLVED_CONFIG), cfg.to_text())
}

fn gen(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    prepare_out(&c.out, &cfg)?;
    let dataset = dataset_for(&cfg)?;
    write_out(&c.out.join(DATASET_FILE), write_dataset(&dataset))?;
    let amb = ambiguity_report(&dataset, &cfg.data.priors)?;
    let csv = format!(
        "statistic,value\nheight_inverse_depth_r,{:.6}\ncue_length_r,{}\ncue_width_r,{}\nambiguous,{}\n",
        amb.height_inverse_depth, cop3d::eval::fmt_opt(amb.cue_length), cop3d::eval::fmt_opt(amb.cue_width), amb.ambiguous
    );
    write_out(&c.out.join("ambiguity.csv"), &csv)?;
    println!(
        "{} train / {} val samples; 2D height vs 1/depth r = {:.4} ({})",
        dataset.train.len(),
        dataset.val.len(),
        amb.height_inverse_depth,
        if amb.ambiguous { "ambiguous" } else { "not ambiguous" }
    );
    Ok(())
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn scatter_name(a: cop3d::eval::ErrorKind, b: cop3d::eval::ErrorKind) -> String {
    format!("scatter_{}_{}.csv", a.name(), b.name())
}

/// `ap40.csv`, `mae_by_range.csv`, `pearson.csv` and the scatter files.
fn write_evaluation(dir: &Path, report: &EvalReport, pairs: &[MatchedPair]) -> Result<()> {
    write_out(&dir.join("ap40.csv"), ap40_csv(report))?;
    write_out(&dir.join("mae_by_range.csv"), mae_csv(report))?;
    write_out(&dir.join("pearson.csv"), pearson_csv(&report.pearson))?;
    for (a, b) in ERROR_PAIRS {
        write_out(&dir.join(scatter_name(a, b)), scatter_csv(pairs, a, b))?;
    }
    Ok(())
}

fn write_run(out: &Path, r: &RunResult, keep_model: bool) -> Result<()> {
    let dir = seed_dir(out, r.seed);
    create_dir(&dir)?;
    write_evaluation(&dir, r.report(), &r.evaluation.pairs)?;
    write_out(&dir.join("loss_curve.csv"), loss_curve_csv(r))?;
    if keep_model {
        write_out(&dir.join(MODEL_FILE), r.trained.to_bytes())?;
    }
    Ok(())
}

fn train(c: &Common, keep_models: bool) -> Result<()> {
    let cfg = resolve(c)?;
    if !keep_models && cfg.trainer.seeds.len() < 2 {
        return Err(ConfigError::Invalid(format!(
            "a battery needs at least two seeds, got {}",
            cfg.trainer.seeds.len()
        ))
        .into());
    }
    prepare_out(&c.out, &cfg)?;
    let dataset = dataset_for(&cfg)?;
    let runs = run_seeds(&cfg, &dataset, c.jobs as usize)?;
    for r in &runs {
        write_run(&c.out, r, keep_models)?;
    }
    let label = cfg.chain.label();
    write_out(&c.out.join(SEEDS_CSV), seeds_csv(&label, &runs))?;
    for r in &runs {
        println!(
            "{label} seed {}: depth MAE {} (best epoch {}, {:.1}s)",
            r.seed,
            cop3d::eval::fmt_opt(r.report().mae.overall(cop3d::eval::ErrorKind::Depth)),
            r.best_epoch,
            r.wall_clock.as_secs_f64()
        );
    }
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    prepare_out(&c.out, &cfg)?;
    let rows = run_ablation_grid(&cfg, c.jobs as usize)?;
    write_out(&c.out.join("ablation.csv"), ablation_csv(&rows))?;
    println!("{} grid cells written to {}", rows.len(), c.out.join("ablation.csv").display());
    Ok(())
}

fn model_evaluation(c: &Common, model: &Path, dataset: Option<&Path>) -> Result<(TrainedModel, Dataset, Evaluation)> {
    let trained = load_model(model, c)?;
    let data = match dataset {
        Some(p) => load_dataset(p)?,
        None => dataset_for(&trained.config)?,
    };
    let evaluation = evaluate_model(&trained, &data)?;
    Ok((trained, data, evaluation))
}

fn correlate(c: &Common, model: &Path, dataset: Option<&Path>) -> Result<()> {
    let (trained, _, evaluation) = model_evaluation(c, model, dataset)?;
    prepare_out(&c.out, &trained.config)?;
    let entries = pearson_matrix(&evaluation.pairs);
    write_out(&c.out.join("pearson.csv"), pearson_csv(&entries))?;
    for (a, b) in ERROR_PAIRS {
        write_out(&c.out.join(scatter_name(a, b)), scatter_csv(&evaluation.pairs, a, b))?;
    }
    println!(
        "# reference: r = {REFERENCE_CORRELATION} between attribute errors of a full detector on KITTI val (context only, not reproducible here)"
    );
    println!("pair,r,n");
    for e in &entries {
        println!("{}-{},{},{}", e.a.name(), e.b.name(), cop3d::eval::fmt_opt(e.r), e.n);
    }
    if entries.iter().any(|e| e.r.is_none()) {
        return Err(EvalError::DegenerateVariance.into());
    }
    Ok(())
}

fn eval_kitti(c: &Common, gt: &Path, det: &Path) -> Result<()> {
    let cfg = resolve(c)?;
    prepare_out(&c.out, &cfg)?;
    let gt_frames = kitti_io::import_kitti(gt)?;
    let det_frames = kitti_io::import_kitti(det)?;
    if let Some(extra) = det_frames.iter().find(|d| !gt_frames.iter().any(|g| g.id == d.id)) {
        return Err(CliError::Input {
            path: det.into(),
            message: format!("detections for frame {} have no ground truth", extra.id),
        });
    }
    let mut frames = Vec::with_capacity(gt_frames.len());
    let mut pairs = Vec::new();
    for g in &gt_frames {
        let (gts, gt_heights) = g.objects()?;
        let dets = match det_frames.iter().find(|d| d.id == g.id) {
            Some(d) => d.objects()?.0,
            None => Vec::new(),
        };
        for class in 0..cop3d::cop::NUM_CLASSES {
            let idx = |objs: &[cop3d::eval::Object3D]| -> Vec<usize> {
                (0..objs.len()).filter(|&i| objs[i].class == class).collect()
            };
            let (di, gi) = (idx(&dets), idx(&gts));
            let d: Vec<_> = di.iter().map(|&i| dets[i]).collect();
            let t: Vec<_> = gi.iter().map(|&i| gts[i]).collect();
            for (p, q) in match_detections_greedy(&d, &t, default_iou_threshold(class)).pairs {
                pairs.push(MatchedPair { pred: d[p].box3d, gt: t[q].box3d });
            }
        }
        frames.push(Frame { dets, gts, gt_heights });
    }
    let report = EvalReport::build(&frames, &pairs, &cfg.distance_edges);
    write_evaluation(&c.out, &report, &pairs)?;
    print!("{}", ap40_csv(&report));
    Ok(())
}

fn prediction_frames(dataset: &Dataset, evaluation: &Evaluation) -> Vec<(usize, Vec<KittiLabel>)> {
    let k = &dataset.scene.camera;
    dataset
        .val_scenes()
        .iter()
        .zip(&evaluation.frames)
        .map(|(scene, frame)| {
            let labels = frame
                .dets
                .iter()
                .filter_map(|d| {
                    let bbox = project_box2d(k, &d.box3d).ok()?;
                    Some(KittiLabel::from_box(d.class, &d.box3d, bbox, Some(d.score)))
                })
                .collect();
            (scene[0].scene_id, labels)
        })
        .collect()
}

fn export_kitti(c: &Common, dataset: Option<&Path>, model: Option<&Path>, precision: usize) -> Result<()> {
    match model {
        None => {
            let cfg = resolve(c)?;
            prepare_out(&c.out, &cfg)?;
            let data = match dataset {
                Some(p) => load_dataset(p)?,
                None => dataset_for(&cfg)?,
            };
            let ids = kitti_io::export_dataset_kitti(&data, &c.out, precision)?;
            println!("exported {} frames to {}", ids.len(), c.out.display());
        }
        Some(model) => {
            let (trained, data, evaluation) = model_evaluation(c, model, dataset)?;
            prepare_out(&c.out, &trained.config)?;
            let val_only = Dataset { scene: data.scene.clone(), train: Vec::new(), val: data.val.clone() };
            let ids = kitti_io::export_dataset_kitti(&val_only, &c.out, precision)?;
            let calib = KittiCalib::from_intrinsics(&data.scene.camera);
            let preds = prediction_frames(&data, &evaluation);
            kitti_io::write_frames(&preds, Some(&calib), &c.out.join("pred"), precision)?;
            println!("exported {} validation frames with predictions to {}", ids.len(), c.out.display());
        }
    }
    Ok(())
}

fn import_kitti(c: &Common, input: &Path) -> Result<()> {
    let cfg = resolve(c)?;
    prepare_out(&c.out, &cfg)?;
    let frames = kitti_io::import_kitti(input)?;
    let mut csv = String::from(
        "frame,type,truncated,occluded,alpha,u_min,v_min,u_max,v_max,h,w,l,x,y,z,rotation_y,score\n",
    );
    let mut known = 0;
    for f in &frames {
        for l in &f.labels {
            let b = &l.bbox;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                f.id,
                l.kind,
                l.truncated,
                l.occluded,
                l.alpha,
                b.u_min,
                b.v_min,
                b.u_max,
                b.v_max,
                l.dims.h,
                l.dims.w,
                l.dims.l,
                l.location[0],
                l.location[1],
                l.location[2],
                l.rotation_y,
                cop3d::eval::fmt_opt(l.score),
            );
            known += usize::from(l.class().is_some());
        }
    }
    write_out(&c.out.join("objects.csv"), &csv)?;
    let total: usize = frames.iter().map(|f| f.labels.len()).sum();
    println!(
        "{} frames, {total} labels ({known} of classes {})",
        frames.len(),
        (0..cop3d::cop::NUM_CLASSES).map(class_name).collect::<Vec<_>>().join("/")
    );
    Ok(())
}

//! Experiment engine: data preparation, training, evaluation, seed
//! batteries and ablation grids.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, Level, TrainMode};

use crate::cop::decode::CLASS_NAMES;
use crate::cop::{
    format_attributes, htl_stage_mask, AttributePrediction, ChainConfig, CopError, CopModel, Decoder, LossMask,
    ModelConfig, Variant,
};
use crate::eval::{fmt_opt, seed_stats, Difficulty, ErrorKind, EvalError, EvalReport, Frame, MatchedPair, Object3D};
use crate::geometry::{Box2D, Box3D};
use crate::matching::{build_cost_matrix, hungarian, loss_total, Assignment, GroundTruthObject, MatchingError};
use crate::micronet::optim::step_decay_lr;
use crate::micronet::{adamw_step, checkpoint, AdamWConfig, Matrix, MicronetError, OptimizerState, Rng};
use crate::synth::{group_by_scene, make_dataset, Dataset, ObservationSample, SceneConfig, SynthError, FEATURE_DIM};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] CopError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Net(#[from] MicronetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

/// Per-column affine input normalization fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let (n, d) = x.shape();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n as f64;
            }
        }
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let std = var.iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

pub fn ground_truth(s: &ObservationSample, scene: &SceneConfig) -> GroundTruthObject {
    let (w, h) = (scene.image_width, scene.image_height);
    GroundTruthObject {
        class: s.class,
        box2d: Box2D::new(s.box2d.u_min / w, s.box2d.v_min / h, s.box2d.u_max / w, s.box2d.v_max / h),
        center: [s.center2d[0] / w, s.center2d[1] / h],
        dims: s.box3d.dims,
        yaw: s.box3d.yaw,
        depth: s.box3d.center[2],
    }
}

/// Network inputs of one split. In set mode each scene contributes
/// `queries` rows, and `gts[i]` belongs to scene `i`.
#[derive(Debug, Clone)]
struct Split {
    x: Matrix,
    gts: Vec<Vec<GroundTruthObject>>,
    scenes: Vec<Vec<ObservationSample>>,
}

fn input_dim(cfg: &ExperimentConfig) -> usize {
    match cfg.trainer.mode {
        TrainMode::Single => FEATURE_DIM,
        TrainMode::Set => (FEATURE_DIM + 1) * cfg.data.scene.max_objects + cfg.trainer.queries,
    }
}

fn build_split(cfg: &ExperimentConfig, samples: &[ObservationSample], scene: &SceneConfig) -> Split {
    let scenes: Vec<Vec<ObservationSample>> =
        group_by_scene(samples).into_iter().map(|g| g.into_iter().cloned().collect()).collect();
    match cfg.trainer.mode {
        TrainMode::Single => {
            let data = samples.iter().flat_map(|s| s.features).collect();
            Split {
                x: Matrix::from_vec(samples.len(), FEATURE_DIM, data).expect("feature width"),
                gts: samples.iter().map(|s| vec![ground_truth(s, scene)]).collect(),
                scenes,
            }
        }
        TrainMode::Set => {
            let k = cfg.trainer.queries;
            let slots = cfg.data.scene.max_objects;
            let width = input_dim(cfg);
            let mut data = Vec::with_capacity(scenes.len() * k * width);
            for sc in &scenes {
                let mut scene_vec = vec![0.0; (FEATURE_DIM + 1) * slots];
                for (i, s) in sc.iter().take(slots).enumerate() {
                    let base = i * (FEATURE_DIM + 1);
                    scene_vec[base..base + FEATURE_DIM].copy_from_slice(&s.features);
                    scene_vec[base + FEATURE_DIM] = 1.0;
                }
                for q in 0..k {
                    data.extend_from_slice(&scene_vec);
                    data.extend((0..k).map(|j| if j == q { 1.0 } else { 0.0 }));
                }
            }
            Split {
                x: Matrix::from_vec(scenes.len() * k, width, data).expect("set input width"),
                gts: scenes.iter().map(|sc| sc.iter().map(|s| ground_truth(s, scene)).collect()).collect(),
                scenes,
            }
        }
    }
}

pub fn model_config(cfg: &ExperimentConfig) -> ModelConfig {
    ModelConfig {
        input_dim: input_dim(cfg),
        trunk_hidden: cfg.model.trunk_hidden,
        dropout: cfg.model.dropout,
        bias: cfg.model.bias,
        chain: cfg.chain.clone(),
        decoder: Decoder {
            prior_dims: config::prior_means(cfg),
            depth_scale: cfg.model.depth_scale,
        },
    }
}

/// A trained model together with what is needed to feed it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub model: CopModel,
    pub norm: Standardizer,
}

const CHECKPOINT_SPLIT: &str = "\n#-- end of config --\n";

impl TrainedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!("{}{CHECKPOINT_SPLIT}", self.config.to_text());
        let mut tensors: Vec<Matrix> = self
            .model
            .params()
            .iter()
            .zip(self.model.param_shapes())
            .map(|(p, (r, c))| Matrix::from_vec(r, c, p.to_vec()).expect("parameter shape"))
            .collect();
        tensors.push(Matrix::row_vector(&self.norm.mean));
        tensors.push(Matrix::row_vector(&self.norm.std));
        checkpoint::encode(&header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut tensors) = checkpoint::decode(bytes)?;
        let text = header
            .strip_suffix(CHECKPOINT_SPLIT)
            .ok_or_else(|| TrainerError::Checkpoint("missing config header".into()))?;
        let config = ExperimentConfig::parse(text)?;
        let mut model = CopModel::new(model_config(&config), &mut Rng::new(0))?;
        if tensors.len() != model.param_shapes().len() + 2 {
            return Err(TrainerError::Checkpoint(format!(
                "{} tensors, model needs {}",
                tensors.len(),
                model.param_shapes().len() + 2
            )));
        }
        let std = tensors.pop().expect("len checked").into_data();
        let mean = tensors.pop().expect("len checked").into_data();
        if mean.len() != model.config.input_dim || std.len() != mean.len() {
            return Err(TrainerError::Checkpoint("normalization width".into()));
        }
        let shapes = model.param_shapes();
        for ((dst, src), shape) in model.params_mut().into_iter().zip(&tensors).zip(shapes) {
            if src.shape() != shape {
                return Err(TrainerError::Checkpoint(format!("tensor shape {:?} vs {shape:?}", src.shape())));
            }
            dst.copy_from_slice(src.data());
        }
        Ok(Self {
            config,
            model,
            norm: Standardizer { mean, std },
        })
    }
}

/// Validation-set predictions of one model.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub frames: Vec<Frame>,
    pub pairs: Vec<MatchedPair>,
    pub report: EvalReport,
}

/// Box in camera coordinates from a decoded prediction.
pub fn prediction_box(p: &AttributePrediction, scene: &SceneConfig) -> Box3D {
    let k = &scene.camera;
    let z = p.depth.max(1e-3);
    let u = p.center[0] * scene.image_width;
    let v = p.center[1] * scene.image_height;
    Box3D::new([(u - k.cx) * z / k.f, (v - k.cy) * z / k.f, z], p.dims, p.yaw).expect("decoded box is valid")
}

fn object(class: usize, score: f64, box3d: Box3D) -> Object3D {
    Object3D { class, score, box3d }
}

/// Pairs and frames from already decoded predictions of a split.
fn collect(cfg: &ExperimentConfig, split: &Split, preds: &[AttributePrediction]) -> Result<(Vec<Frame>, Vec<MatchedPair>)> {
    let scene = &cfg.data.scene;
    let mut frames = Vec::with_capacity(split.scenes.len());
    let mut pairs = Vec::new();
    let mut offset = 0;
    for (si, sc) in split.scenes.iter().enumerate() {
        let gts: Vec<Object3D> = sc.iter().map(|s| object(s.class, 1.0, s.box3d)).collect();
        let heights = sc.iter().map(|s| s.box2d.v_max - s.box2d.v_min).collect();
        let dets = match cfg.trainer.mode {
            TrainMode::Single => {
                let scene_preds = &preds[offset..offset + sc.len()];
                offset += sc.len();
                for (p, s) in scene_preds.iter().zip(sc) {
                    pairs.push(MatchedPair {
                        pred: prediction_box(p, scene),
                        gt: s.box3d,
                    });
                }
                scene_preds.iter().map(|p| object(p.class, p.score, prediction_box(p, scene))).collect()
            }
            TrainMode::Set => {
                let k = cfg.trainer.queries;
                let scene_preds = &preds[si * k..(si + 1) * k];
                let a = hungarian(&build_cost_matrix(scene_preds, &split.gts[si], &cfg.cost))?;
                for &(p, g) in &a.pairs {
                    pairs.push(MatchedPair {
                        pred: prediction_box(&scene_preds[p], scene),
                        gt: sc[g].box3d,
                    });
                }
                scene_preds
                    .iter()
                    .filter(|p| !p.is_background())
                    .map(|p| object(p.class, p.score, prediction_box(p, scene)))
                    .collect()
            }
        };
        frames.push(Frame {
            dets,
            gts,
            gt_heights: heights,
        });
    }
    Ok((frames, pairs))
}

fn predict_split(model: &CopModel, norm: &Standardizer, split: &Split) -> Result<Vec<AttributePrediction>> {
    Ok(model.predict(&norm.apply(&split.x))?)
}

fn depth_mae(pairs: &[MatchedPair]) -> f64 {
    if pairs.is_empty() {
        return f64::INFINITY;
    }
    pairs.iter().map(|p| (p.pred.center[2] - p.gt.center[2]).abs()).sum::<f64>() / pairs.len() as f64
}

fn evaluate_split(cfg: &ExperimentConfig, model: &CopModel, norm: &Standardizer, split: &Split) -> Result<Evaluation> {
    let preds = predict_split(model, norm, split)?;
    let (frames, pairs) = collect(cfg, split, &preds)?;
    let report = EvalReport::build(&frames, &pairs, &cfg.distance_edges);
    Ok(Evaluation { frames, pairs, report })
}

/// Evaluates a trained model on the validation split of `dataset`.
pub fn evaluate_model(trained: &TrainedModel, dataset: &Dataset) -> Result<Evaluation> {
    let split = build_split(&trained.config, &dataset.val, &dataset.scene);
    evaluate_split(&trained.config, &trained.model, &trained.norm, &split)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub evaluation: Evaluation,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    /// `(epoch, val depth MAE)`; epoch 0 is the untrained model.
    pub val_curve: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub trained: TrainedModel,
    pub wall_clock: Duration,
}

impl RunResult {
    pub fn report(&self) -> &EvalReport {
        &self.evaluation.report
    }

    /// Headline metrics keyed by name; `None` when undefined.
    pub fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        let r = self.report();
        let ap = |class: usize| {
            r.ap40
                .iter()
                .find(|e| e.class == class && e.difficulty == Difficulty::Moderate)
                .and_then(|e| e.ap)
        };
        vec![
            ("depth_mae", r.mae.overall(ErrorKind::Depth)),
            ("size_mae", r.mae.overall(ErrorKind::Size)),
            ("angle_mae", r.mae.overall(ErrorKind::Angle)),
            ("ap40_car_moderate", ap(0)),
            ("ap40_pedestrian_moderate", ap(1)),
            ("ap40_cyclist_moderate", ap(2)),
            ("n_val", Some(self.n_val as f64)),
        ]
    }
}

pub const METRIC_NAMES: [&str; 7] = [
    "depth_mae",
    "size_mae",
    "angle_mae",
    "ap40_car_moderate",
    "ap40_pedestrian_moderate",
    "ap40_cyclist_moderate",
    "n_val",
];

fn loss_mask(cfg: &ExperimentConfig, epoch: usize) -> Result<LossMask> {
    Ok(if cfg.chain.variant == Variant::Htl {
        htl_stage_mask(epoch, &cfg.trainer.htl_stages)?
    } else {
        LossMask::ALL
    })
}

/// One optimization step on the given rows of `split`; returns the loss.
fn train_step(
    cfg: &ExperimentConfig,
    model: &mut CopModel,
    opt: &mut OptimizerState,
    x: &Matrix,
    split: &Split,
    batch: &[usize],
    mask: LossMask,
    rng: &mut Rng,
) -> Result<f64> {
    let (rows, gts, assignment) = match cfg.trainer.mode {
        TrainMode::Single => {
            let gts: Vec<GroundTruthObject> = batch.iter().map(|&i| split.gts[i][0].clone()).collect();
            (batch.to_vec(), gts, None)
        }
        TrainMode::Set => {
            let k = cfg.trainer.queries;
            let rows: Vec<usize> = batch.iter().flat_map(|&s| s * k..(s + 1) * k).collect();
            (rows, Vec::new(), Some(k))
        }
    };
    let xb = x.select_rows(&rows);
    let (raw, trace) = model.forward(&xb, true, rng)?;
    let decoder = &model.config.decoder;
    let out = match assignment {
        None => loss_total(&raw, decoder, &gts, &Assignment::identity(gts.len()), &cfg.loss, mask)?,
        Some(k) => {
            let preds = decoder.decode(&raw);
            let mut all_gts = Vec::new();
            let mut pairs = Vec::new();
            for (b, &s) in batch.iter().enumerate() {
                let scene_gts = &split.gts[s];
                let a = hungarian(&build_cost_matrix(&preds[b * k..(b + 1) * k], scene_gts, &cfg.cost))?;
                for (p, g) in a.pairs {
                    pairs.push((b * k + p, all_gts.len() + g));
                }
                all_gts.extend(scene_gts.iter().cloned());
            }
            pairs.sort();
            loss_total(&raw, decoder, &all_gts, &Assignment { pairs }, &cfg.loss, mask)?
        }
    };
    let grads = model.flatten_grads(&model.backward(&trace, &out.grad)?);
    adamw_step(&mut model.params_mut(), &grads, opt)?;
    Ok(out.total)
}

/// Generates the dataset for `cfg` (independent of the run seed).
pub fn dataset_for(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(make_dataset(&cfg.data.scene, &cfg.data.priors, cfg.data.n_scenes, cfg.data.seed)?)
}

/// Trains on `dataset` with the given seed and evaluates the best epoch.
pub fn run_on_dataset(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    cfg.validate()?;
    let train = build_split(cfg, &dataset.train, &dataset.scene);
    let val = build_split(cfg, &dataset.val, &dataset.scene);
    let norm = Standardizer::fit(&train.x);
    let train_x = norm.apply(&train.x);

    let mut rng = Rng::new(seed);
    let mut model = CopModel::new(model_config(cfg), &mut rng.fork())?;
    let mut train_rng = rng.fork();
    let t = &cfg.trainer;
    let lengths: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut opt = OptimizerState::new(
        AdamWConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            ..AdamWConfig::default()
        },
        &lengths,
    );

    let val_mae = |m: &CopModel| -> Result<f64> {
        let preds = predict_split(m, &norm, &val)?;
        Ok(depth_mae(&collect(cfg, &val, &preds)?.1))
    };
    let mut best = (0usize, val_mae(&model)?, model.clone());
    let mut val_curve = vec![(0, best.1)];
    let mut loss_curve = Vec::with_capacity(t.epochs);
    let n_units = train.gts.len();
    let mut order: Vec<usize> = (0..n_units).collect();
    for epoch in 0..t.epochs {
        opt.set_lr(step_decay_lr(t.lr, t.lr_decay_rate, &t.lr_decay_epochs, epoch));
        let mask = loss_mask(cfg, epoch)?;
        train_rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(t.batch_size) {
            let loss = train_step(cfg, &mut model, &mut opt, &train_x, &train, batch, mask, &mut train_rng)?;
            if !loss.is_finite() {
                return Err(TrainerError::Diverged(epoch + 1));
            }
            total += loss;
            batches += 1;
        }
        loss_curve.push(if batches > 0 { total / batches as f64 } else { 0.0 });
        let done = epoch + 1;
        if done % t.eval_every == 0 || done == t.epochs {
            let mae = val_mae(&model)?;
            val_curve.push((done, mae));
            if mae < best.1 {
                best = (done, mae, model.clone());
            }
        }
    }
    let (best_epoch, _, best_model) = best;
    let evaluation = evaluate_split(cfg, &best_model, &norm, &val)?;
    Ok(RunResult {
        seed,
        evaluation,
        loss_curve,
        val_curve,
        best_epoch,
        n_train: dataset.train.len(),
        n_val: dataset.val.len(),
        trained: TrainedModel {
            config: cfg.clone(),
            model: best_model,
            norm,
        },
        wall_clock: start.elapsed(),
    })
}

/// Data generation, training and evaluation for one seed.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let dataset = dataset_for(cfg)?;
    run_on_dataset(cfg, &dataset, seed)
}

#[derive(Debug, Clone)]
pub struct Battery {
    /// Sorted by seed.
    pub runs: Vec<RunResult>,
    /// Per metric, `None` when fewer than two seeds define it.
    pub stats: Vec<(&'static str, Option<crate::eval::SeedStats>)>,
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

fn aggregate(runs: &[RunResult]) -> Vec<(&'static str, Option<crate::eval::SeedStats>)> {
    METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let values: Option<Vec<f64>> = runs.iter().map(|r| r.metrics()[i].1).collect();
            (name, values.and_then(|v| seed_stats(&v).ok()))
        })
        .collect()
}

/// Trains every seed in `cfg.trainer.seeds` on `dataset`, up to `jobs`
/// concurrently. Results are sorted by seed.
pub fn run_seeds(cfg: &ExperimentConfig, dataset: &Dataset, jobs: usize) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let mut runs = pool(jobs).install(|| {
        cfg.trainer
            .seeds
            .par_iter()
            .map(|&s| run_on_dataset(cfg, dataset, s))
            .collect::<Result<Vec<_>>>()
    })?;
    runs.sort_by_key(|r| r.seed);
    Ok(runs)
}

/// Runs every seed in `cfg.trainer.seeds` (up to `jobs` concurrently) on one dataset.
pub fn run_seed_battery(cfg: &ExperimentConfig, jobs: usize) -> Result<Battery> {
    if cfg.trainer.seeds.len() < 2 {
        return Err(EvalError::TooFewSamples(cfg.trainer.seeds.len()).into());
    }
    cfg.validate()?;
    let runs = run_seeds(cfg, &dataset_for(cfg)?, jobs)?;
    let stats = aggregate(&runs);
    Ok(Battery { runs, stats })
}

impl Battery {
    pub fn stat(&self, name: &str) -> Option<crate::eval::SeedStats> {
        self.stats.iter().find(|(n, _)| *n == name).and_then(|(_, s)| *s)
    }
}

/// Header plus one row per seed, then mean, std and median rows.
pub fn seeds_csv(label: &str, runs: &[RunResult]) -> String {
    let mut s = format!("method,seed,best_epoch,{}\n", METRIC_NAMES.join(","));
    for r in runs {
        let _ = write!(s, "{label},{},{}", r.seed, r.best_epoch);
        for (_, v) in r.metrics() {
            let _ = write!(s, ",{}", fmt_opt(v));
        }
        s.push('\n');
    }
    let stats = aggregate(runs);
    for (row, pick) in [
        ("mean", (|st: crate::eval::SeedStats| st.mean) as fn(_) -> f64),
        ("std", |st| st.std),
        ("median", |st| st.median),
    ] {
        let _ = write!(s, "{label},{row},NA");
        for (_, st) in &stats {
            let _ = write!(s, ",{}", fmt_opt(st.map(pick)));
        }
        s.push('\n');
    }
    s
}

pub fn loss_curve_csv(r: &RunResult) -> String {
    let mut s = String::from("epoch,train_loss,val_depth_mae\n");
    let val: BTreeMap<usize, f64> = r.val_curve.iter().copied().collect();
    let _ = writeln!(s, "0,NA,{}", fmt_opt(val.get(&0).copied()));
    for (i, l) in r.loss_curve.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.9},{}", i + 1, fmt_opt(val.get(&(i + 1)).copied()));
    }
    s
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub level: Level,
    pub subset: Vec<crate::cop::Attribute>,
    pub order: Vec<crate::cop::Attribute>,
    pub variant: Variant,
    /// The chain configuration the cell trains.
    pub chain: ChainConfig,
}

/// Chain configuration for a cell. Levels refine the cop variant; the
/// alternative variants ignore the level except at baseline.
pub fn cell_chain(
    base: &ChainConfig,
    level: Level,
    subset: &[crate::cop::Attribute],
    order: &[crate::cop::Attribute],
    variant: Variant,
) -> ChainConfig {
    let attributes: Vec<_> = order.iter().copied().filter(|a| subset.contains(a)).collect();
    let (variant, residual) = match (level, variant) {
        (Level::Baseline, _) => (Variant::Baseline, base.residual),
        (Level::Fl, Variant::Cop) => (Variant::Parallel, base.residual),
        (Level::FlFp, Variant::Cop) => (Variant::Cop, false),
        (Level::FlFpFa, Variant::Cop) => (Variant::Cop, true),
        (_, v) => (v, base.residual),
    };
    ChainConfig {
        attributes,
        residual,
        variant,
        ..base.clone()
    }
}

pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<GridCell> {
    let a = &cfg.ablate;
    let mut cells = Vec::new();
    for &level in &a.levels {
        for subset in &a.subsets {
            for order in &a.orders {
                for &variant in &a.variants {
                    cells.push(GridCell {
                        level,
                        subset: subset.clone(),
                        order: order.clone(),
                        variant,
                        chain: cell_chain(&cfg.chain, level, subset, order, variant),
                    });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub cell: GridCell,
    pub runs: Vec<RunResult>,
}

/// Trains every distinct chain configuration in the grid once per seed.
/// Cells that reduce to the same configuration share results.
pub fn run_ablation_grid(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let cells = grid_cells(cfg);
    let mut unique: Vec<ChainConfig> = Vec::new();
    for c in &cells {
        if !unique.contains(&c.chain) {
            unique.push(c.chain.clone());
        }
    }
    let dataset = dataset_for(cfg)?;
    let jobs_list: Vec<(usize, u64)> = (0..unique.len())
        .flat_map(|u| cfg.trainer.seeds.iter().map(move |&s| (u, s)))
        .collect();
    let results = pool(jobs).install(|| {
        jobs_list
            .par_iter()
            .map(|&(u, seed)| {
                let mut c = cfg.clone();
                c.chain = unique[u].clone();
                run_on_dataset(&c, &dataset, seed)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n_seeds = cfg.trainer.seeds.len();
    Ok(cells
        .into_iter()
        .map(|cell| {
            let u = unique.iter().position(|c| *c == cell.chain).expect("cell chain registered");
            let mut runs = results[u * n_seeds..(u + 1) * n_seeds].to_vec();
            runs.sort_by_key(|r| r.seed);
            GridRow { cell, runs }
        })
        .collect())
}

pub fn ablation_csv(rows: &[GridRow]) -> String {
    let mut s = String::from(
        "level,subset,order,variant,model,n_seeds,depth_mae_mean,depth_mae_std,depth_mae_median,size_mae_mean,angle_mae_mean,ap40_car_moderate_mean\n",
    );
    for row in rows {
        let c = &row.cell;
        let metric = |i: usize| -> Vec<f64> { row.runs.iter().filter_map(|r| r.metrics()[i].1).collect() };
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let depth = metric(0);
        let st = seed_stats(&depth).ok();
        let median = st.map(|x| x.median).or_else(|| (depth.len() == 1).then(|| depth[0]));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.level.name(),
            format_attributes(&c.subset).replace(',', ""),
            format_attributes(&c.order).replace(',', ""),
            c.variant.name(),
            c.chain.label(),
            row.runs.len(),
            fmt_opt(mean(&depth)),
            fmt_opt(st.map(|x| x.std)),
            fmt_opt(median),
            fmt_opt(mean(&metric(1))),
            fmt_opt(mean(&metric(2))),
            fmt_opt(mean(&metric(3))),
        );
    }
    s
}

/// Scatter rows of signed errors for every matched validation object.
pub fn scatter_csv(pairs: &[MatchedPair], a: ErrorKind, b: ErrorKind) -> String {
    let mut s = format!("{}_error,{}_error,gt_depth\n", a.name(), b.name());
    for p in pairs {
        let _ = writeln!(
            s,
            "{:.6},{:.6},{:.6}",
            a.signed_error(&p.pred, &p.gt),
            b.signed_error(&p.pred, &p.gt),
            p.gt.center[2]
        );
    }
    s
}

/// KITTI type name of a class index.
pub fn class_name(class: usize) -> &'static str {
    CLASS_NAMES.get(class).copied().unwrap_or("DontCare")
}

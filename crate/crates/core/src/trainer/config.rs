//! Experiment configuration and its line-oriented text format.
//!
//! ```text
//! # comment
//! [trainer]
//! epochs = 40
//! seeds = 1,2,3
//! ```
//!
//! Every key has a default; unknown sections and keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::cop::{format_attributes, parse_attributes, Attribute, ChainConfig, Variant};
use crate::eval::DEFAULT_DISTANCE_EDGES;
use crate::geometry::{CameraIntrinsics, Dims};
use crate::matching::{CostWeights, LossWeights};
use crate::synth::{default_priors, ClassPrior, SceneConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {section}.{key}")]
    UnknownKey { section: String, key: String },
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
    #[error("invalid override {0:?}, expected section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// One sample per object, predictions aligned with ground truth.
    Single,
    /// A fixed number of queries per scene matched to objects.
    Set,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Single => "single",
            TrainMode::Set => "set",
        }
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(TrainMode::Single),
            "set" => Ok(TrainMode::Set),
            _ => Err(format!("expected single or set, got {s:?}")),
        }
    }
}

/// CoP component levels compared in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Baseline,
    /// Feature learning only.
    Fl,
    /// Feature learning and propagation.
    FlFp,
    /// Feature learning, propagation and aggregation.
    FlFpFa,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Baseline, Level::Fl, Level::FlFp, Level::FlFpFa];

    pub fn name(self) -> &'static str {
        match self {
            Level::Baseline => "baseline",
            Level::Fl => "fl",
            Level::FlFp => "fl_fp",
            Level::FlFpFa => "fl_fp_fa",
        }
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Level::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown level {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub priors: Vec<ClassPrior>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub trunk_hidden: usize,
    pub dropout: f64,
    pub bias: bool,
    pub depth_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    pub queries: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub htl_stages: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateConfig {
    pub levels: Vec<Level>,
    pub subsets: Vec<Vec<Attribute>>,
    pub orders: Vec<Vec<Attribute>>,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub chain: ChainConfig,
    pub model: ModelSpec,
    pub trainer: TrainerConfig,
    pub loss: LossWeights,
    pub cost: CostWeights,
    pub distance_edges: Vec<f64>,
    pub ablate: AblateConfig,
}

pub const ALL_ORDERS: [&str; 6] = ["S,A,D", "S,D,A", "A,S,D", "A,D,S", "D,S,A", "D,A,S"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        let priors = default_priors();
        Self {
            data: DataConfig {
                n_scenes: 3000,
                seed: 7,
                scene: SceneConfig::default(),
                priors,
            },
            chain: ChainConfig { query_dim: 16, hidden_dim: 16, ..ChainConfig::default() },
            model: ModelSpec {
                trunk_hidden: 16,
                dropout: 0.0,
                bias: true,
                depth_scale: 20.0,
            },
            trainer: TrainerConfig {
                mode: TrainMode::Single,
                queries: 8,
                epochs: 160,
                batch_size: 32,
                lr: 1e-3,
                weight_decay: 1e-4,
                lr_decay_rate: 0.5,
                lr_decay_epochs: vec![100, 130],
                seeds: vec![1, 2, 3, 4, 5],
                eval_every: 1,
                htl_stages: vec![10, 20],
            },
            loss: LossWeights::default(),
            cost: CostWeights::default(),
            distance_edges: DEFAULT_DISTANCE_EDGES.to_vec(),
            ablate: AblateConfig {
                levels: Level::ALL.to_vec(),
                subsets: ["D", "D,S", "D,S,A"].iter().map(|s| parse_attributes(s).unwrap()).collect(),
                orders: ALL_ORDERS.iter().map(|s| parse_attributes(s).unwrap()).collect(),
                variants: vec![Variant::Cop],
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.data.scene.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for p in &self.data.priors {
            p.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.data.n_scenes < 2 {
            return bad("data.n_scenes must be at least 2".into());
        }
        self.chain.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss.validate().map_err(ConfigError::Invalid)?;
        self.cost.validate().map_err(ConfigError::Invalid)?;
        let t = &self.trainer;
        if t.seeds.is_empty() {
            return bad("trainer.seeds is empty".into());
        }
        if t.batch_size == 0 || t.eval_every == 0 || t.queries == 0 {
            return bad("trainer.batch_size, eval_every and queries must be positive".into());
        }
        if t.mode == TrainMode::Set && t.queries < self.data.scene.max_objects {
            return bad(format!(
                "trainer.queries {} below data.max_objects {}",
                t.queries, self.data.scene.max_objects
            ));
        }
        if !(t.lr > 0.0 && t.weight_decay >= 0.0 && t.lr_decay_rate > 0.0) {
            return bad("learning rate, weight decay and decay rate must be positive".into());
        }
        if t.htl_stages.len() != 2 || t.htl_stages[0] >= t.htl_stages[1] {
            return bad(format!("trainer.htl_stages needs two increasing epochs, got {:?}", t.htl_stages));
        }
        if self.distance_edges.is_empty() || self.distance_edges.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eval.distance_edges must be increasing".into());
        }
        if self.model.trunk_hidden == 0 || !(0.0..1.0).contains(&self.model.dropout) || !(self.model.depth_scale > 0.0)
        {
            return bad("invalid model section".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (section, key, value, line) in tokenize(text)? {
            cfg.set(&section, &key, &value).map_err(|e| match e {
                ConfigError::BadValue { key, message } => ConfigError::BadValue {
                    key,
                    message: format!("{message} (line {line})"),
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides, then revalidates.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (path, value) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            let (section, key) = path.trim().rsplit_once('.').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            self.set(section, key, value.trim())?;
        }
        self.validate()
    }

    fn prior_mut(&mut self, name: &str) -> Option<&mut ClassPrior> {
        self.data.priors.iter_mut().find(|p| p.name.eq_ignore_ascii_case(name))
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let unknown = || ConfigError::UnknownKey {
            section: section.to_string(),
            key: key.to_string(),
        };
        macro_rules! put {
            ($field:expr) => {
                $field = parse_value(&full, value)?
            };
        }
        match section {
            "data" => {
                let s = &mut self.data.scene;
                match key {
                    "n_scenes" => put!(self.data.n_scenes),
                    "seed" => put!(self.data.seed),
                    "min_objects" => put!(s.min_objects),
                    "max_objects" => put!(s.max_objects),
                    "x_range" => put!(s.x_range),
                    "camera_height" => put!(s.camera_height),
                    "ground_sigma" => put!(s.ground_sigma),
                    "size_correlation" => put!(s.size_correlation),
                    "sigma_px" => put!(s.sigma_px),
                    "sigma_app" => put!(s.sigma_app),
                    "sigma_ori" => put!(s.sigma_ori),
                    _ => return Err(unknown()),
                }
            }
            "camera" => {
                let s = &mut self.data.scene;
                match key {
                    "f" => put!(s.camera.f),
                    "cx" => put!(s.camera.cx),
                    "cy" => put!(s.camera.cy),
                    "width" => put!(s.image_width),
                    "height" => put!(s.image_height),
                    _ => return Err(unknown()),
                }
            }
            _ if section.starts_with("prior.") => {
                let name = &section["prior.".len()..];
                let p = self
                    .prior_mut(name)
                    .ok_or_else(|| ConfigError::UnknownSection(section.to_string()))?;
                match key {
                    "w" => put!(p.mean.w),
                    "h" => put!(p.mean.h),
                    "l" => put!(p.mean.l),
                    "std_w" => put!(p.std.w),
                    "std_h" => put!(p.std.h),
                    "std_l" => put!(p.std.l),
                    "z_min" => put!(p.z_min),
                    "z_max" => put!(p.z_max),
                    _ => return Err(unknown()),
                }
            }
            "chain" => {
                let c = &mut self.chain;
                match key {
                    "variant" => c.variant = value.parse().map_err(|e: crate::cop::CopError| bad(&full, e))?,
                    "order" => c.attributes = parse_attributes(value).map_err(|e| bad(&full, e))?,
                    "residual" => put!(c.residual),
                    "chains" => put!(c.chain_count),
                    "query_dim" => put!(c.query_dim),
                    "hidden_dim" => put!(c.hidden_dim),
                    _ => return Err(unknown()),
                }
            }
            "model" => {
                let m = &mut self.model;
                match key {
                    "trunk_hidden" => put!(m.trunk_hidden),
                    "dropout" => put!(m.dropout),
                    "bias" => put!(m.bias),
                    "depth_scale" => put!(m.depth_scale),
                    _ => return Err(unknown()),
                }
            }
            "trainer" => {
                let t = &mut self.trainer;
                match key {
                    "mode" => t.mode = value.parse().map_err(|e: String| bad(&full, e))?,
                    "queries" => put!(t.queries),
                    "epochs" => put!(t.epochs),
                    "batch_size" => put!(t.batch_size),
                    "lr" => put!(t.lr),
                    "weight_decay" => put!(t.weight_decay),
                    "lr_decay_rate" => put!(t.lr_decay_rate),
                    "lr_decay_epochs" => t.lr_decay_epochs = parse_list(&full, value)?,
                    "seeds" => t.seeds = parse_list(&full, value)?,
                    "eval_every" => put!(t.eval_every),
                    "htl_stages" => t.htl_stages = parse_list(&full, value)?,
                    _ => return Err(unknown()),
                }
            }
            "loss" => {
                let l = &mut self.loss;
                match key {
                    "class" => put!(l.class),
                    "focal_alpha" => put!(l.focal_alpha),
                    "focal_gamma" => put!(l.focal_gamma),
                    "bbox" => put!(l.bbox),
                    "giou" => put!(l.giou),
                    "center3d" => put!(l.center3d),
                    "dims" => put!(l.dims),
                    "angle" => put!(l.angle),
                    "depth" => put!(l.depth),
                    _ => return Err(unknown()),
                }
            }
            "cost" => {
                let c = &mut self.cost;
                match key {
                    "class" => put!(c.class),
                    "bbox_l1" => put!(c.bbox_l1),
                    "giou" => put!(c.giou),
                    "center3d" => put!(c.center3d),
                    _ => return Err(unknown()),
                }
            }
            "eval" => match key {
                "distance_edges" => self.distance_edges = parse_list(&full, value)?,
                _ => return Err(unknown()),
            },
            "ablate" => {
                let a = &mut self.ablate;
                match key {
                    "levels" => {
                        a.levels = split_list(value).map(|s| s.parse().map_err(|e: String| bad(&full, e))).collect::<Result<_>>()?
                    }
                    "variants" => {
                        a.variants = split_list(value)
                            .map(|s| s.parse().map_err(|e: crate::cop::CopError| bad(&full, e)))
                            .collect::<Result<_>>()?
                    }
                    "subsets" => a.subsets = parse_attribute_sets(&full, value)?,
                    "orders" => a.orders = parse_attribute_sets(&full, value)?,
                    _ => return Err(unknown()),
                }
            }
            _ => return Err(ConfigError::UnknownSection(section.to_string())),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, entries: Vec<(&str, String)>| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        let sc = &self.data.scene;
        section(
            "data",
            vec![
                ("n_scenes", self.data.n_scenes.to_string()),
                ("seed", self.data.seed.to_string()),
                ("min_objects", sc.min_objects.to_string()),
                ("max_objects", sc.max_objects.to_string()),
                ("x_range", sc.x_range.to_string()),
                ("camera_height", sc.camera_height.to_string()),
                ("ground_sigma", sc.ground_sigma.to_string()),
                ("size_correlation", sc.size_correlation.to_string()),
                ("sigma_px", sc.sigma_px.to_string()),
                ("sigma_app", sc.sigma_app.to_string()),
                ("sigma_ori", sc.sigma_ori.to_string()),
            ],
        );
        section(
            "camera",
            vec![
                ("f", sc.camera.f.to_string()),
                ("cx", sc.camera.cx.to_string()),
                ("cy", sc.camera.cy.to_string()),
                ("width", sc.image_width.to_string()),
                ("height", sc.image_height.to_string()),
            ],
        );
        for p in &self.data.priors {
            section(
                &format!("prior.{}", p.name.to_ascii_lowercase()),
                vec![
                    ("w", p.mean.w.to_string()),
                    ("h", p.mean.h.to_string()),
                    ("l", p.mean.l.to_string()),
                    ("std_w", p.std.w.to_string()),
                    ("std_h", p.std.h.to_string()),
                    ("std_l", p.std.l.to_string()),
                    ("z_min", p.z_min.to_string()),
                    ("z_max", p.z_max.to_string()),
                ],
            );
        }
        let c = &self.chain;
        section(
            "chain",
            vec![
                ("variant", c.variant.to_string()),
                ("order", format_attributes(&c.attributes)),
                ("residual", c.residual.to_string()),
                ("chains", c.chain_count.to_string()),
                ("query_dim", c.query_dim.to_string()),
                ("hidden_dim", c.hidden_dim.to_string()),
            ],
        );
        let m = &self.model;
        section(
            "model",
            vec![
                ("trunk_hidden", m.trunk_hidden.to_string()),
                ("dropout", m.dropout.to_string()),
                ("bias", m.bias.to_string()),
                ("depth_scale", m.depth_scale.to_string()),
            ],
        );
        let t = &self.trainer;
        section(
            "trainer",
            vec![
                ("mode", t.mode.name().to_string()),
                ("queries", t.queries.to_string()),
                ("epochs", t.epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("lr", t.lr.to_string()),
                ("weight_decay", t.weight_decay.to_string()),
                ("lr_decay_rate", t.lr_decay_rate.to_string()),
                ("lr_decay_epochs", join(&t.lr_decay_epochs)),
                ("seeds", join(&t.seeds)),
                ("eval_every", t.eval_every.to_string()),
                ("htl_stages", join(&t.htl_stages)),
            ],
        );
        let l = &self.loss;
        section(
            "loss",
            vec![
                ("class", l.class.to_string()),
                ("focal_alpha", l.focal_alpha.to_string()),
                ("focal_gamma", l.focal_gamma.to_string()),
                ("bbox", l.bbox.to_string()),
                ("giou", l.giou.to_string()),
                ("center3d", l.center3d.to_string()),
                ("dims", l.dims.to_string()),
                ("angle", l.angle.to_string()),
                ("depth", l.depth.to_string()),
            ],
        );
        let w = &self.cost;
        section(
            "cost",
            vec![
                ("class", w.class.to_string()),
                ("bbox_l1", w.bbox_l1.to_string()),
                ("giou", w.giou.to_string()),
                ("center3d", w.center3d.to_string()),
            ],
        );
        section("eval", vec![("distance_edges", join(&self.distance_edges))]);
        let a = &self.ablate;
        let sets = |v: &[Vec<Attribute>]| v.iter().map(|s| format_attributes(s).replace(',', "")).collect::<Vec<_>>().join(",");
        section(
            "ablate",
            vec![
                ("levels", a.levels.iter().map(|l| l.name()).collect::<Vec<_>>().join(",")),
                ("subsets", sets(&a.subsets)),
                ("orders", sets(&a.orders)),
                ("variants", a.variants.iter().map(|v| v.name()).collect::<Vec<_>>().join(",")),
            ],
        );
        s.pop();
        s
    }
}

fn bad(key: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        message: e.to_string(),
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| bad(key, format!("{value:?}: {e}")))
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    split_list(value).map(|v| parse_value(key, v)).collect()
}

/// Comma-separated attribute strings written without inner commas, e.g. `D,DS,DSA`.
fn parse_attribute_sets(key: &str, value: &str) -> Result<Vec<Vec<Attribute>>> {
    split_list(value).map(|s| parse_attributes(s).map_err(|e| bad(key, e))).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

type Entry = (String, String, String, usize);

fn tokenize(text: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("unterminated section header {content:?}"),
            })?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected key = value, got {content:?}"),
        })?;
        let sec = section.clone().ok_or_else(|| ConfigError::Syntax {
            line,
            message: "key before any section header".into(),
        })?;
        let key = key.trim().to_string();
        if let Some(prev) = seen.insert((sec.clone(), key.clone()), line) {
            return Err(ConfigError::Syntax {
                line,
                message: format!("{sec}.{key} already set on line {prev}"),
            });
        }
        out.push((sec, key, value.trim().to_string(), line));
    }
    Ok(out)
}

/// The camera implied by a config, validated.
pub fn camera(cfg: &ExperimentConfig) -> std::result::Result<CameraIntrinsics, ConfigError> {
    let c = cfg.data.scene.camera;
    CameraIntrinsics::new(c.f, c.cx, c.cy).map_err(|e| ConfigError::Invalid(e.to_string()))
}

/// Mean dimensions per class, in class order.
pub fn prior_means(cfg: &ExperimentConfig) -> [Dims; 3] {
    std::array::from_fn(|i| cfg.data.priors.get(i).map_or(Dims::new(1.0, 1.0, 1.0), |p| p.mean))
}

//! Synthetic scene generation with class-overlapping size priors.
//!
//! Each object is observed through its projected 2D box (with pixel noise),
//! its class, a noisy appearance cue giving length and width relative to
//! the class mean, and a noisy cue of the viewing-relative heading. Height
//! is never observed directly, so 2D size alone does not pin down depth.

use std::fmt::Write as _;

use thiserror::Error;

use crate::eval::{pearson, EvalError};
use crate::geometry::{project_box2d, project_point, Box2D, Box3D, CameraIntrinsics, Dims, GeometryError};
use crate::micronet::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("scene {scene}: no valid object placement after {retries} retries")]
    GenerationExhausted { scene: usize, retries: usize },
    #[error("series has zero variance: {0}")]
    DegenerateVariance(&'static str),
    #[error("dataset file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const MAX_RETRIES: usize = 1000;
pub const FEATURE_DIM: usize = 11;
pub const DATASET_SCHEMA: &str = "cop3d-dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub name: String,
    pub mean: Dims,
    pub std: Dims,
    pub z_min: f64,
    pub z_max: f64,
}

impl ClassPrior {
    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("w", self.mean.w, self.std.w),
            ("h", self.mean.h, self.std.h),
            ("l", self.mean.l, self.std.l),
        ];
        for (axis, m, s) in pairs {
            if !(s >= 0.0 && m > 3.0 * s && m.is_finite()) {
                return Err(SynthError::InvalidConfig(format!(
                    "{}: mean {axis} {m} must exceed 3 sigma ({s})",
                    self.name
                )));
            }
        }
        if !(self.z_min > 0.0 && self.z_max > self.z_min) {
            return Err(SynthError::InvalidConfig(format!(
                "{}: depth range [{}, {}]",
                self.name, self.z_min, self.z_max
            )));
        }
        Ok(())
    }
}

/// Car, Pedestrian and Cyclist priors with deliberately wide, overlapping spreads.
pub fn default_priors() -> Vec<ClassPrior> {
    vec![
        ClassPrior {
            name: "Car".into(),
            mean: Dims::new(1.65, 1.55, 4.0),
            std: Dims::new(0.2, 0.4, 0.8),
            z_min: 8.0,
            z_max: 70.0,
        },
        ClassPrior {
            name: "Pedestrian".into(),
            mean: Dims::new(0.65, 1.75, 0.85),
            std: Dims::new(0.12, 0.4, 0.15),
            z_min: 8.0,
            z_max: 70.0,
        },
        ClassPrior {
            name: "Cyclist".into(),
            mean: Dims::new(0.6, 1.75, 1.75),
            std: Dims::new(0.12, 0.4, 0.3),
            z_min: 8.0,
            z_max: 70.0,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Lateral centers are drawn from `[-x_range, x_range]`, narrowed to the
    /// view frustum at the sampled depth.
    pub x_range: f64,
    pub camera_height: f64,
    /// Spread of each object's vertical offset from the flat ground plane,
    /// standing in for road slope and camera pitch.
    pub ground_sigma: f64,
    /// Correlation of the three dimension draws of one object.
    pub size_correlation: f64,
    pub sigma_px: f64,
    pub sigma_app: f64,
    /// Noise of the heading cue, radians.
    pub sigma_ori: f64,
    pub camera: CameraIntrinsics,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 5,
            x_range: 15.0,
            camera_height: 1.65,
            ground_sigma: 1.0,
            size_correlation: 0.5,
            sigma_px: 1.0,
            sigma_app: 0.05,
            sigma_ori: 0.1,
            camera: CameraIntrinsics {
                f: 700.0,
                cx: 621.0,
                cy: 187.5,
            },
            image_width: 1242.0,
            image_height: 375.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("objects per scene [{}, {}]", self.min_objects, self.max_objects));
        }
        if !(self.x_range >= 0.0) {
            return bad(format!("x_range {}", self.x_range));
        }
        if !(self.sigma_px >= 0.0 && self.sigma_app >= 0.0 && self.sigma_ori >= 0.0 && self.ground_sigma >= 0.0) {
            return bad(format!(
                "noise sigmas {} / {} / {}",
                self.sigma_px, self.sigma_app, self.sigma_ori
            ));
        }
        if !(0.0..=1.0).contains(&self.size_correlation) {
            return bad(format!("size_correlation {}", self.size_correlation));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return bad(format!("image size {}x{}", self.image_width, self.image_height));
        }
        CameraIntrinsics::new(self.camera.f, self.camera.cx, self.camera.cy)?;
        Ok(())
    }

    fn in_image(&self, b: &Box2D) -> bool {
        b.u_min >= 0.0 && b.v_min >= 0.0 && b.u_max <= self.image_width && b.v_max <= self.image_height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub box3d: Box3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub objects: Vec<SceneObject>,
}

fn sample_object(cfg: &SceneConfig, priors: &[ClassPrior], rng: &mut Rng) -> Result<SceneObject> {
    let class = rng.int_inclusive(0, priors.len() - 1);
    let p = &priors[class];
    let rho = cfg.size_correlation;
    let shared = rng.normal();
    let mut draw = |mean: f64, std: f64| {
        let z = (rho.sqrt() * shared + (1.0 - rho).sqrt() * rng.normal()).clamp(-3.0, 3.0);
        mean + std * z
    };
    let dims = Dims::new(draw(p.mean.w, p.std.w), draw(p.mean.h, p.std.h), draw(p.mean.l, p.std.l));
    let z = rng.range(p.z_min, p.z_max);
    let half_fov = 0.9 * z * cfg.camera.cx.min(cfg.image_width - cfg.camera.cx) / cfg.camera.f;
    let reach = cfg.x_range.min(half_fov);
    let x = rng.range(-reach, reach);
    let yaw = rng.range(-std::f64::consts::PI, std::f64::consts::PI);
    let y = cfg.camera_height - 0.5 * dims.h + cfg.ground_sigma * rng.normal();
    Ok(SceneObject {
        class,
        box3d: Box3D::new([x, y, z], dims, yaw)?,
    })
}

/// Draws one scene. Objects whose projection leaves the image are redrawn.
pub fn sample_scene(cfg: &SceneConfig, priors: &[ClassPrior], id: usize, rng: &mut Rng) -> Result<Scene> {
    let count = rng.int_inclusive(cfg.min_objects, cfg.max_objects);
    let mut objects = Vec::with_capacity(count);
    let mut retries = 0;
    while objects.len() < count {
        let obj = sample_object(cfg, priors, rng)?;
        let corners_in_front = crate::geometry::box_corners(&obj.box3d).iter().all(|c| c[2] > 0.1);
        if corners_in_front && cfg.in_image(&project_box2d(&cfg.camera, &obj.box3d)?) {
            objects.push(obj);
        } else {
            retries += 1;
            if retries >= MAX_RETRIES {
                return Err(SynthError::GenerationExhausted { scene: id, retries });
            }
        }
    }
    Ok(Scene { id, objects })
}

/// One object's network input and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSample {
    pub scene_id: usize,
    pub object_id: usize,
    /// Normalized observed 2D box (4), class one-hot (3), size cue (2),
    /// heading cue as (sin, cos) of the observation angle (2).
    pub features: [f64; FEATURE_DIM],
    pub class: usize,
    pub box3d: Box3D,
    /// Noiseless projected box in pixels.
    pub box2d: Box2D,
    /// Projected 3D center in pixels.
    pub center2d: [f64; 2],
}

impl ObservationSample {
    pub fn observed_box(&self, cfg: &SceneConfig) -> Box2D {
        let f = &self.features;
        Box2D::new(
            f[0] * cfg.image_width,
            f[1] * cfg.image_height,
            f[2] * cfg.image_width,
            f[3] * cfg.image_height,
        )
    }
}

pub fn render_observation(
    scene: &Scene,
    cfg: &SceneConfig,
    priors: &[ClassPrior],
    rng: &mut Rng,
) -> Result<Vec<ObservationSample>> {
    let mut out = Vec::with_capacity(scene.objects.len());
    for (object_id, obj) in scene.objects.iter().enumerate() {
        let exact = project_box2d(&cfg.camera, &obj.box3d)?;
        let mut u = [exact.u_min, exact.u_max].map(|v| v + cfg.sigma_px * rng.normal());
        let mut v = [exact.v_min, exact.v_max].map(|x| x + cfg.sigma_px * rng.normal());
        u.sort_by(f64::total_cmp);
        v.sort_by(f64::total_cmp);
        let prior = &priors[obj.class];
        let cue_l = obj.box3d.dims.l / prior.mean.l + cfg.sigma_app * rng.normal();
        let cue_w = obj.box3d.dims.w / prior.mean.w + cfg.sigma_app * rng.normal();
        let mut features = [0.0; FEATURE_DIM];
        features[0] = u[0] / cfg.image_width;
        features[1] = v[0] / cfg.image_height;
        features[2] = u[1] / cfg.image_width;
        features[3] = v[1] / cfg.image_height;
        features[4 + obj.class] = 1.0;
        features[7] = cue_l;
        features[8] = cue_w;
        let b = &obj.box3d;
        let alpha = b.yaw - b.center[0].atan2(b.center[2]) + cfg.sigma_ori * rng.normal();
        features[9] = alpha.sin();
        features[10] = alpha.cos();
        let (cu, cv) = project_point(&cfg.camera, &obj.box3d.center)?;
        out.push(ObservationSample {
            scene_id: scene.id,
            object_id,
            features,
            class: obj.class,
            box3d: obj.box3d,
            box2d: exact,
            center2d: [cu, cv],
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scene: SceneConfig,
    pub train: Vec<ObservationSample>,
    pub val: Vec<ObservationSample>,
}

impl Dataset {
    pub fn samples(&self) -> impl Iterator<Item = (bool, &ObservationSample)> {
        self.train.iter().map(|s| (false, s)).chain(self.val.iter().map(|s| (true, s)))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Val samples grouped by scene, in scene order.
    pub fn val_scenes(&self) -> Vec<Vec<&ObservationSample>> {
        group_by_scene(&self.val)
    }
}

pub fn group_by_scene(samples: &[ObservationSample]) -> Vec<Vec<&ObservationSample>> {
    let mut groups: Vec<Vec<&ObservationSample>> = Vec::new();
    for s in samples {
        match groups.last_mut() {
            Some(g) if g[0].scene_id == s.scene_id => g.push(s),
            _ => groups.push(vec![s]),
        }
    }
    groups
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Scene ids assigned to validation: the `round(n / 5)` ids with the
/// smallest hash.
pub fn val_scene_ids(n_scenes: usize, seed: u64) -> Vec<bool> {
    let mut ranked: Vec<(u64, usize)> = (0..n_scenes).map(|i| (splitmix(seed ^ splitmix(i as u64)), i)).collect();
    ranked.sort();
    let n_val = (n_scenes as f64 * 0.2).round() as usize;
    let mut is_val = vec![false; n_scenes];
    for &(_, id) in ranked.iter().take(n_val) {
        is_val[id] = true;
    }
    is_val
}

pub fn make_dataset(cfg: &SceneConfig, priors: &[ClassPrior], n_scenes: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if priors.is_empty() || priors.len() > crate::cop::NUM_CLASSES {
        return Err(SynthError::InvalidConfig(format!("need 1 to 3 class priors, got {}", priors.len())));
    }
    for p in priors {
        p.validate()?;
    }
    if n_scenes < 2 {
        return Err(SynthError::InvalidConfig(format!("need at least 2 scenes, got {n_scenes}")));
    }
    let mut rng = Rng::new(seed);
    let is_val = val_scene_ids(n_scenes, seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for id in 0..n_scenes {
        let scene = sample_scene(cfg, priors, id, &mut rng)?;
        let samples = render_observation(&scene, cfg, priors, &mut rng)?;
        if is_val[id] {
            val.extend(samples);
        } else {
            train.extend(samples);
        }
    }
    Ok(Dataset {
        scene: cfg.clone(),
        train,
        val,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityReport {
    /// Pearson r between observed normalized 2D height and inverse depth.
    pub height_inverse_depth: f64,
    /// `None` when the true size does not vary, as with zero-spread priors.
    pub cue_length: Option<f64>,
    pub cue_width: Option<f64>,
    pub ambiguous: bool,
}

pub const AMBIGUITY_THRESHOLD: f64 = 0.95;

fn corr(a: &[f64], b: &[f64], what: &'static str) -> Result<f64> {
    pearson(a, b).map_err(|e| match e {
        EvalError::DegenerateVariance => SynthError::DegenerateVariance(what),
        other => SynthError::InvalidConfig(other.to_string()),
    })
}

/// Cue correlations are taken against the true size relative to the class
/// mean, which is what the cue encodes.
pub fn ambiguity_report(dataset: &Dataset, priors: &[ClassPrior]) -> Result<AmbiguityReport> {
    let samples: Vec<&ObservationSample> = dataset.samples().map(|(_, s)| s).collect();
    if samples.len() < 2 {
        return Err(SynthError::InvalidConfig("dataset needs at least 2 samples".into()));
    }
    let h2d: Vec<f64> = samples.iter().map(|s| s.features[3] - s.features[1]).collect();
    let inv_z: Vec<f64> = samples.iter().map(|s| 1.0 / s.box3d.center[2]).collect();
    let cue_l: Vec<f64> = samples.iter().map(|s| s.features[7]).collect();
    let cue_w: Vec<f64> = samples.iter().map(|s| s.features[8]).collect();
    if let Some(s) = samples.iter().find(|s| s.class >= priors.len()) {
        return Err(SynthError::InvalidConfig(format!("no prior for class {}", s.class)));
    }
    let l: Vec<f64> = samples.iter().map(|s| s.box3d.dims.l / priors[s.class].mean.l).collect();
    let w: Vec<f64> = samples.iter().map(|s| s.box3d.dims.w / priors[s.class].mean.w).collect();
    let r = corr(&h2d, &inv_z, "inverse depth")?;
    Ok(AmbiguityReport {
        height_inverse_depth: r,
        cue_length: pearson(&cue_l, &l).ok(),
        cue_width: pearson(&cue_w, &w).ok(),
        ambiguous: r < AMBIGUITY_THRESHOLD,
    })
}

const COLUMNS: &str = "split\tscene\tobject\tclass\tf0\tf1\tf2\tf3\tf4\tf5\tf6\tf7\tf8\tf9\tf10\tx\ty\tz\tw\th\tl\tyaw\tu_min\tv_min\tu_max\tv_max\tcu\tcv";

/// Tab-separated dataset: a schema line, a camera line, a column header,
/// then one sample per line. Floats use shortest round-trip formatting so
/// reading back is exact.
pub fn write_dataset(d: &Dataset) -> String {
    let c = &d.scene;
    let mut s = format!(
        "# {DATASET_SCHEMA}\n# camera\t{}\t{}\t{}\t{}\t{}\n{COLUMNS}\n",
        c.camera.f, c.camera.cx, c.camera.cy, c.image_width, c.image_height
    );
    for (is_val, o) in d.samples() {
        let b = &o.box3d;
        let _ = write!(s, "{}\t{}\t{}\t{}", if is_val { "val" } else { "train" }, o.scene_id, o.object_id, o.class);
        for f in o.features {
            let _ = write!(s, "\t{f}");
        }
        let values = [
            b.center[0],
            b.center[1],
            b.center[2],
            b.dims.w,
            b.dims.h,
            b.dims.l,
            b.yaw,
            o.box2d.u_min,
            o.box2d.v_min,
            o.box2d.u_max,
            o.box2d.v_max,
            o.center2d[0],
            o.center2d[1],
        ];
        for v in values {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

pub fn read_dataset(text: &str) -> Result<Dataset> {
    let err = |line: usize, message: String| SynthError::Parse { line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == format!("# {DATASET_SCHEMA}") => {}
        _ => return Err(err(1, format!("expected schema header '# {DATASET_SCHEMA}'"))),
    }
    let (_, cam_line) = lines.next().ok_or_else(|| err(2, "missing camera line".into()))?;
    let cam: Vec<&str> = cam_line.split('\t').collect();
    if cam.len() != 6 || cam[0] != "# camera" {
        return Err(err(2, "malformed camera line".into()));
    }
    let num = |line: usize, s: &str| s.parse::<f64>().map_err(|e| err(line, format!("'{s}': {e}")));
    let scene = SceneConfig {
        camera: CameraIntrinsics::new(num(2, cam[1])?, num(2, cam[2])?, num(2, cam[3])?)?,
        image_width: num(2, cam[4])?,
        image_height: num(2, cam[5])?,
        ..SceneConfig::default()
    };
    match lines.next() {
        Some((_, l)) if l == COLUMNS => {}
        _ => return Err(err(3, "missing column header".into())),
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 28 {
            return Err(err(n, format!("expected 28 columns, got {}", cols.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(n, format!("'{s}': {e}")));
        let v: Vec<f64> = cols[4..].iter().map(|c| num(n, c)).collect::<Result<_>>()?;
        let class = int(cols[3])?;
        if class >= crate::cop::NUM_CLASSES {
            return Err(err(n, format!("class {class} out of range")));
        }
        let box3d = Box3D::new([v[11], v[12], v[13]], Dims::new(v[14], v[15], v[16]), v[17])?;
        let sample = ObservationSample {
            scene_id: int(cols[1])?,
            object_id: int(cols[2])?,
            features: std::array::from_fn(|k| v[k]),
            class,
            box3d,
            box2d: Box2D::new(v[18], v[19], v[20], v[21]),
            center2d: [v[22], v[23]],
        };
        match cols[0] {
            "train" => train.push(sample),
            "val" => val.push(sample),
            other => return Err(err(n, format!("unknown split '{other}'"))),
        }
    }
    Ok(Dataset { scene, train, val })
}

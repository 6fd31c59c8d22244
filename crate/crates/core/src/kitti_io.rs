//! KITTI object label and calibration files.
//!
//! Label lines follow the devkit field order:
//! `type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]`,
//! with the location at the bottom center of the box. Calibration files
//! carry the `P2` projection matrix used for the left color camera.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cop::decode::CLASS_NAMES;
use crate::eval::Object3D;
use crate::geometry::{wrap_angle, Box2D, Box3D, CameraIntrinsics, Dims, GeometryError};
use crate::synth::{Dataset, ObservationSample};

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("expected 15 or 16 fields, got {0}")]
    FieldCount(usize),
    #[error("column {column}: cannot parse {token:?} as a number")]
    NumericParse { column: usize, token: String },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("calibration has no P2 line")]
    MissingP2,
    #[error("invalid calibration: {0}")]
    InvalidCalib(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {source}")]
    InFile {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<KittiError>,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, KittiError>;

pub const DONT_CARE: &str = "DontCare";
pub const DEFAULT_PRECISION: usize = 2;
pub const LABEL_DIR: &str = "label_2";
pub const CALIB_DIR: &str = "calib";

#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: Box2D,
    /// Serialized as `h w l`.
    pub dims: Dims,
    /// Bottom center of the box in camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    /// Present for detections only.
    pub score: Option<f64>,
}

impl KittiLabel {
    /// Region to be ignored, with the devkit sentinels for unknown fields.
    pub fn dont_care(bbox: Box2D) -> Self {
        Self {
            kind: DONT_CARE.into(),
            truncated: -1.0,
            occluded: -1,
            alpha: -10.0,
            bbox,
            dims: Dims::new(-1.0, -1.0, -1.0),
            location: [-1000.0; 3],
            rotation_y: -10.0,
            score: None,
        }
    }

    /// Label for a box whose center is the geometric center.
    pub fn from_box(class: usize, box3d: &Box3D, bbox: Box2D, score: Option<f64>) -> Self {
        let [x, y, z] = box3d.center;
        Self {
            kind: CLASS_NAMES.get(class).copied().unwrap_or(DONT_CARE).into(),
            truncated: 0.0,
            occluded: 0,
            alpha: wrap_angle(box3d.yaw - x.atan2(z)),
            bbox,
            dims: box3d.dims,
            location: [x, y + box3d.dims.h / 2.0, z],
            rotation_y: box3d.yaw,
            score,
        }
    }

    pub fn is_dont_care(&self) -> bool {
        self.kind == DONT_CARE
    }

    /// Index into the synthetic class list, if the type is one of them.
    pub fn class(&self) -> Option<usize> {
        CLASS_NAMES.iter().position(|n| *n == self.kind)
    }

    /// Box with the geometric center restored from the bottom-center location.
    pub fn box3d(&self) -> Result<Box3D> {
        let [x, y, z] = self.location;
        Ok(Box3D::new([x, y - self.dims.h / 2.0, z], self.dims, self.rotation_y)?)
    }

    fn validate(&self) -> Result<()> {
        if self.kind.is_empty() || self.kind.contains(char::is_whitespace) {
            return Err(KittiError::InvalidLabel(format!("bad type {:?}", self.kind)));
        }
        if self.is_dont_care() {
            return Ok(());
        }
        let d = self.dims;
        if !(d.w > 0.0 && d.h > 0.0 && d.l > 0.0) {
            return Err(KittiError::InvalidLabel(format!("{} with non-positive dimensions", self.kind)));
        }
        if !(0..=3).contains(&self.occluded) {
            return Err(KittiError::InvalidLabel(format!("occluded {} not in 0..=3", self.occluded)));
        }
        Ok(())
    }
}

pub fn parse_label_line(line: &str) -> Result<KittiLabel> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 15 && tokens.len() != 16 {
        return Err(KittiError::FieldCount(tokens.len()));
    }
    let num = |column: usize| -> Result<f64> {
        let token = tokens[column];
        token
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| KittiError::NumericParse { column, token: token.into() })
    };
    let occluded = num(2)?;
    if occluded.fract() != 0.0 {
        return Err(KittiError::NumericParse { column: 2, token: tokens[2].into() });
    }
    let (left, top, right, bottom) = (num(4)?, num(5)?, num(6)?, num(7)?);
    if !(left <= right && top <= bottom) {
        return Err(KittiError::InvalidLabel(format!("inverted bbox {left} {top} {right} {bottom}")));
    }
    let label = KittiLabel {
        kind: tokens[0].into(),
        truncated: num(1)?,
        occluded: occluded as i32,
        alpha: num(3)?,
        bbox: Box2D::new(left, top, right, bottom),
        dims: Dims::new(num(9)?, num(8)?, num(10)?),
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if tokens.len() == 16 { Some(num(15)?) } else { None },
    };
    label.validate()?;
    Ok(label)
}

/// Fixed-precision devkit line with single spaces; the score is written iff present.
pub fn format_label_line(label: &KittiLabel, precision: usize) -> String {
    let p = precision;
    let b = &label.bbox;
    let d = &label.dims;
    let [x, y, z] = label.location;
    let mut s = format!(
        "{} {:.p$} {} {:.p$} {:.p$} {:.p$} {:.p$} {:.p$} {:.p$} {:.p$} {:.p$} {:.p$} {:.p$} {:.p$} {:.p$}",
        label.kind,
        label.truncated,
        label.occluded,
        label.alpha,
        b.u_min,
        b.v_min,
        b.u_max,
        b.v_max,
        d.h,
        d.w,
        d.l,
        x,
        y,
        z,
        label.rotation_y,
    );
    if let Some(score) = label.score {
        let _ = write!(s, " {score:.p$}");
    }
    s
}

pub fn parse_labels(text: &str) -> Result<Vec<KittiLabel>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(parse_label_line).collect()
}

pub fn format_labels(labels: &[KittiLabel], precision: usize) -> String {
    let mut s = String::new();
    for l in labels {
        s.push_str(&format_label_line(l, precision));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct KittiCalib {
    pub p2: [[f64; 4]; 3],
}

impl KittiCalib {
    pub fn from_intrinsics(k: &CameraIntrinsics) -> Self {
        Self {
            p2: [[k.f, 0.0, k.cx, 0.0], [0.0, k.f, k.cy, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    /// Pinhole intrinsics; the translation column is kept only in `p2`.
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        Ok(CameraIntrinsics::new(self.p2[0][0], self.p2[0][2], self.p2[1][2])?)
    }
}

pub fn parse_calib(text: &str) -> Result<(KittiCalib, CameraIntrinsics)> {
    let line = text
        .lines()
        .find_map(|l| l.trim_start().strip_prefix("P2:"))
        .ok_or(KittiError::MissingP2)?;
    let values = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| KittiError::InvalidCalib(format!("non-numeric P2 entry in {line:?}")))?;
    if values.len() != 12 {
        return Err(KittiError::InvalidCalib(format!("P2 has {} entries, expected 12", values.len())));
    }
    let p2: [[f64; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| values[4 * r + c]));
    if !(p2[0][0] > 0.0 && p2[1][1] > 0.0) {
        return Err(KittiError::InvalidCalib(format!("focal entries {} / {}", p2[0][0], p2[1][1])));
    }
    let calib = KittiCalib { p2 };
    let k = calib.intrinsics()?;
    Ok((calib, k))
}

/// Devkit calibration file. Every camera gets `P2` and the remaining
/// transforms are identities, which is all a synthetic scene needs.
pub fn format_calib(calib: &KittiCalib) -> String {
    let row = |vals: &[f64]| vals.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
    let p2: Vec<f64> = calib.p2.iter().flatten().copied().collect();
    let identity34 = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let identity33 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let mut s = String::new();
    for name in ["P0", "P1", "P2", "P3"] {
        let _ = writeln!(s, "{name}: {}", row(&p2));
    }
    let _ = writeln!(s, "R0_rect: {}", row(&identity33));
    let _ = writeln!(s, "Tr_velo_to_cam: {}", row(&identity34));
    let _ = writeln!(s, "Tr_imu_to_velo: {}", row(&identity34));
    s
}

pub fn frame_file_name(id: usize) -> String {
    format!("{id:06}.txt")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| KittiError::Io { path: path.into(), source })
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| KittiError::Io { path: path.into(), source })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| KittiError::Io { path: path.into(), source })
}

pub fn sample_label(s: &ObservationSample) -> KittiLabel {
    KittiLabel::from_box(s.class, &s.box3d, s.box2d, None)
}

/// Writes `label_2/NNNNNN.txt` and `calib/NNNNNN.txt` for every scene,
/// train and val alike, and returns the scene ids in file order.
pub fn export_dataset_kitti(dataset: &Dataset, out_dir: &Path, precision: usize) -> Result<Vec<usize>> {
    let mut scenes: BTreeMap<usize, Vec<&ObservationSample>> = BTreeMap::new();
    for (_, s) in dataset.samples() {
        scenes.entry(s.scene_id).or_default().push(s);
    }
    let frames: Vec<(usize, Vec<KittiLabel>)> = scenes
        .into_iter()
        .map(|(id, mut objs)| {
            objs.sort_by_key(|s| s.object_id);
            (id, objs.into_iter().map(sample_label).collect())
        })
        .collect();
    let calib = KittiCalib::from_intrinsics(&dataset.scene.camera);
    write_frames(&frames, Some(&calib), out_dir, precision)?;
    Ok(frames.into_iter().map(|(id, _)| id).collect())
}

/// Writes one label file per frame and, when given, a matching calib file.
pub fn write_frames(
    frames: &[(usize, Vec<KittiLabel>)],
    calib: Option<&KittiCalib>,
    out_dir: &Path,
    precision: usize,
) -> Result<()> {
    let labels = out_dir.join(LABEL_DIR);
    create_dir(&labels)?;
    let calib_text = calib.map(format_calib);
    if calib_text.is_some() {
        create_dir(&out_dir.join(CALIB_DIR))?;
    }
    for (id, frame) in frames {
        let name = frame_file_name(*id);
        write_file(&labels.join(&name), &format_labels(frame, precision))?;
        if let Some(text) = &calib_text {
            write_file(&out_dir.join(CALIB_DIR).join(&name), text)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KittiFrame {
    pub id: usize,
    pub labels: Vec<KittiLabel>,
    pub calib: Option<KittiCalib>,
}

impl KittiFrame {
    /// Known-class objects with their 2D box heights; DontCare and
    /// unrecognized types are dropped. Missing scores count as 1.
    pub fn objects(&self) -> Result<(Vec<Object3D>, Vec<f64>)> {
        let mut objs = Vec::new();
        let mut heights = Vec::new();
        for l in &self.labels {
            if let Some(class) = l.class() {
                objs.push(Object3D { class, score: l.score.unwrap_or(1.0), box3d: l.box3d()? });
                heights.push(l.bbox.v_max - l.bbox.v_min);
            }
        }
        Ok((objs, heights))
    }
}

fn frame_id(path: &Path) -> Option<usize> {
    let stem = path.file_stem()?.to_str()?;
    let is_txt = path.extension().is_some_and(|e| e == "txt");
    (is_txt && !stem.is_empty() && stem.bytes().all(|b| b.is_ascii_digit())).then(|| stem.parse().ok())?
}

fn parse_in_file<T>(path: &Path, text: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse(l).map_err(|e| KittiError::InFile { path: path.into(), line: i + 1, source: Box::new(e) })
        })
        .collect()
}

/// Reads every `label_2/NNNNNN.txt` under `dir` in id order, with the
/// matching calib file when one exists.
pub fn import_kitti(dir: &Path) -> Result<Vec<KittiFrame>> {
    let label_dir = dir.join(LABEL_DIR);
    let entries = fs::read_dir(&label_dir).map_err(|source| KittiError::Io { path: label_dir.clone(), source })?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|source| KittiError::Io { path: label_dir.clone(), source })?;
        if let Some(id) = frame_id(&e.path()) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let name = frame_file_name(id);
            let path = label_dir.join(&name);
            let labels = parse_in_file(&path, &read_file(&path)?, parse_label_line)?;
            let calib_path = dir.join(CALIB_DIR).join(&name);
            let calib = if calib_path.is_file() {
                let (c, _) = parse_calib(&read_file(&calib_path)?).map_err(|e| KittiError::InFile {
                    path: calib_path.clone(),
                    line: 0,
                    source: Box::new(e),
                })?;
                Some(c)
            } else {
                None
            };
            Ok(KittiFrame { id, labels, calib })
        })
        .collect()
}

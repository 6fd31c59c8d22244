//! Measurement: error correlation, MAE by distance, greedy detection
//! matching, AP40 and multi-seed statistics.

use std::fmt::Write as _;

use thiserror::Error;

use crate::cop::decode::CLASS_NAMES;
use crate::geometry::{iou3d, wrap_angle, Box3D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("series has zero variance")]
    DegenerateVariance,
    #[error("series lengths differ or are below 2 ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("no ground truth objects")]
    NoGroundTruth,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Pearson correlation coefficient between two error series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // relative guard so that constant series which picked up rounding
    // noise in the mean still count as constant
    let scale_a = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale_b = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if saa <= (1e-14 * scale_a).powi(2) * n || sbb <= (1e-14 * scale_b).powi(2) * n {
        return Err(EvalError::DegenerateVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// The three attributes whose errors are tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorKind {
    Size,
    Angle,
    Depth,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 3] = [ErrorKind::Size, ErrorKind::Angle, ErrorKind::Depth];

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Size => "size",
            ErrorKind::Angle => "angle",
            ErrorKind::Depth => "depth",
        }
    }

    /// Signed error of `pred` against `gt`. Size uses the mean of the three
    /// dimension differences; angle is wrapped into `[-pi, pi)`.
    pub fn signed_error(self, pred: &Box3D, gt: &Box3D) -> f64 {
        match self {
            ErrorKind::Size => {
                let (p, g) = (pred.dims, gt.dims);
                ((p.w - g.w) + (p.h - g.h) + (p.l - g.l)) / 3.0
            }
            ErrorKind::Angle => wrap_angle(pred.yaw - gt.yaw),
            ErrorKind::Depth => pred.center[2] - gt.center[2],
        }
    }

    /// Absolute error; size averages the absolute dimension differences.
    pub fn abs_error(self, pred: &Box3D, gt: &Box3D) -> f64 {
        match self {
            ErrorKind::Size => {
                let (p, g) = (pred.dims, gt.dims);
                ((p.w - g.w).abs() + (p.h - g.h).abs() + (p.l - g.l).abs()) / 3.0
            }
            _ => self.signed_error(pred, gt).abs(),
        }
    }
}

/// A prediction paired with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub pred: Box3D,
    pub gt: Box3D,
}

pub const DEFAULT_DISTANCE_EDGES: [f64; 3] = [0.0, 30.0, 50.0];

#[derive(Debug, Clone, PartialEq)]
pub struct MaeTable {
    /// Bin lower edges; the last bin is open-ended.
    pub edges: Vec<f64>,
    /// `counts[bin]` matched objects whose ground-truth depth falls in the bin.
    pub counts: Vec<usize>,
    /// `mae[kind][bin]`, `None` for an empty bin.
    pub mae: [Vec<Option<f64>>; 3],
    /// Overall MAE per kind, `None` without pairs.
    pub overall: [Option<f64>; 3],
}

impl MaeTable {
    /// Half-open range label such as `30-50` or `50-inf`, safe inside CSV.
    pub fn bin_label(&self, bin: usize) -> String {
        match self.edges.get(bin + 1) {
            Some(hi) => format!("{}-{}", self.edges[bin], hi),
            None => format!("{}-inf", self.edges[bin]),
        }
    }

    pub fn overall(&self, kind: ErrorKind) -> Option<f64> {
        self.overall[kind as usize]
    }
}

fn bin_of(edges: &[f64], depth: f64) -> Option<usize> {
    (0..edges.len()).rev().find(|&i| depth >= edges[i])
}

/// MAE per attribute and ground-truth depth bin. `edges` must be increasing.
pub fn mae_by_range(pairs: &[MatchedPair], edges: &[f64]) -> MaeTable {
    let nb = edges.len();
    let mut sums = [vec![0.0; nb], vec![0.0; nb], vec![0.0; nb]];
    let mut counts = vec![0usize; nb];
    let mut totals = [0.0; 3];
    let mut total_n = 0usize;
    for p in pairs {
        let Some(b) = bin_of(edges, p.gt.center[2]) else { continue };
        counts[b] += 1;
        total_n += 1;
        for kind in ErrorKind::ALL {
            let e = kind.abs_error(&p.pred, &p.gt);
            sums[kind as usize][b] += e;
            totals[kind as usize] += e;
        }
    }
    let mae = sums.map(|s| {
        s.iter()
            .zip(&counts)
            .map(|(&v, &c)| (c > 0).then(|| v / c as f64))
            .collect()
    });
    let overall = totals.map(|t| (total_n > 0).then(|| t / total_n as f64));
    MaeTable {
        edges: edges.to_vec(),
        counts,
        mae,
        overall,
    }
}

/// A scored detection or a ground-truth object (score ignored).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object3D {
    pub class: usize,
    pub score: f64,
    pub box3d: Box3D,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GreedyMatch {
    /// Per detection, in input order.
    pub tp: Vec<bool>,
    /// `(detection, ground truth)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Descending confidence, ties by input order.
fn confidence_order(dets: &[Object3D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Confidence-ordered one-to-one matching with class gating.
pub fn match_detections_greedy(dets: &[Object3D], gts: &[Object3D], iou_threshold: f64) -> GreedyMatch {
    let mut taken = vec![false; gts.len()];
    let mut out = GreedyMatch {
        tp: vec![false; dets.len()],
        pairs: Vec::new(),
    };
    for d in confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class != dets[d].class {
                continue;
            }
            let iou = iou3d(&dets[d].box3d, &gt.box3d);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out.tp[d] = true;
            out.pairs.push((d, g));
        }
    }
    out
}

pub const RECALL_POINTS: usize = 40;

/// AP over the 40 recall points `1/40..=1` from `(score, is_tp)` flags.
pub fn ap40_from_flags(flags: &[(f64, bool)], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut sorted: Vec<(usize, (f64, bool))> = flags.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then(a.0.cmp(&b.0)));
    let mut curve = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, (_, hit)) in &sorted {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp, tp as f64 / (tp + fp) as f64));
    }
    // running max of precision from the right
    let mut best = 0.0f64;
    for point in curve.iter_mut().rev() {
        best = best.max(point.1);
        point.1 = best;
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for k in 1..=RECALL_POINTS {
        // recall tp / n_gt >= k / 40, compared in integers
        while idx < curve.len() && curve[idx].0 * RECALL_POINTS < k * n_gt {
            idx += 1;
        }
        if idx < curve.len() {
            sum += curve[idx].1;
        }
    }
    Ok(100.0 * sum / RECALL_POINTS as f64)
}

/// AP40 of detections against ground truth in a single frame.
pub fn ap40(dets: &[Object3D], gts: &[Object3D], iou_threshold: f64) -> Result<f64> {
    let m = match_detections_greedy(dets, gts, iou_threshold);
    let flags: Vec<(f64, bool)> = dets.iter().zip(&m.tp).map(|(d, &t)| (d.score, t)).collect();
    ap40_from_flags(&flags, gts.len())
}

/// One image worth of detections and ground truth, with each ground
/// truth's projected 2D height in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub dets: Vec<Object3D>,
    pub gts: Vec<Object3D>,
    pub gt_heights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    /// Minimum projected height in pixels; Hard admits everything.
    pub fn min_height(self) -> f64 {
        match self {
            Difficulty::Easy => 40.0,
            Difficulty::Moderate => 25.0,
            Difficulty::Hard => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

/// Dataset-level AP40 for one class. Ground truths below the difficulty's
/// height are ignored, and detections matched to them count neither way.
pub fn ap40_frames(frames: &[Frame], class: usize, iou_threshold: f64, difficulty: Difficulty) -> Result<f64> {
    let mut flags = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let dets: Vec<Object3D> = f.dets.iter().filter(|d| d.class == class).copied().collect();
        let gts: Vec<Object3D> = f.gts.iter().filter(|g| g.class == class).copied().collect();
        let heights: Vec<f64> = f
            .gts
            .iter()
            .zip(&f.gt_heights)
            .filter(|(g, _)| g.class == class)
            .map(|(_, &h)| h)
            .collect();
        let ignored: Vec<bool> = heights.iter().map(|&h| h < difficulty.min_height()).collect();
        n_gt += ignored.iter().filter(|&&i| !i).count();
        let m = match_detections_greedy(&dets, &gts, iou_threshold);
        let mut skip = vec![false; dets.len()];
        for &(d, g) in &m.pairs {
            skip[d] = ignored[g];
        }
        for (i, d) in dets.iter().enumerate() {
            if !skip[i] {
                flags.push((d.score, m.tp[i]));
            }
        }
    }
    ap40_from_flags(&flags, n_gt)
}

/// Evaluation IoU threshold per class: 0.7 for cars, 0.5 otherwise.
pub fn default_iou_threshold(class: usize) -> f64 {
    if class == 0 {
        0.7
    } else {
        0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator).
    pub std: f64,
    pub median: f64,
}

pub fn seed_stats(values: &[f64]) -> Result<SeedStats> {
    if values.len() < 2 {
        return Err(EvalError::TooFewSamples(values.len()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(SeedStats {
        n,
        mean,
        std: var.sqrt(),
        median,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApEntry {
    pub class: usize,
    pub iou_threshold: f64,
    pub difficulty: Difficulty,
    /// `None` when no ground truth of this class and difficulty exists.
    pub ap: Option<f64>,
}

/// Pearson r over signed errors for one attribute pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PearsonEntry {
    pub a: ErrorKind,
    pub b: ErrorKind,
    /// `None` if either series is constant.
    pub r: Option<f64>,
    pub n: usize,
}

pub const ERROR_PAIRS: [(ErrorKind, ErrorKind); 3] = [
    (ErrorKind::Size, ErrorKind::Depth),
    (ErrorKind::Angle, ErrorKind::Depth),
    (ErrorKind::Size, ErrorKind::Angle),
];

pub fn pearson_matrix(pairs: &[MatchedPair]) -> Vec<PearsonEntry> {
    ERROR_PAIRS
        .iter()
        .map(|&(a, b)| {
            let ea: Vec<f64> = pairs.iter().map(|p| a.signed_error(&p.pred, &p.gt)).collect();
            let eb: Vec<f64> = pairs.iter().map(|p| b.signed_error(&p.pred, &p.gt)).collect();
            PearsonEntry {
                a,
                b,
                r: pearson(&ea, &eb).ok(),
                n: pairs.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap40: Vec<ApEntry>,
    pub mae: MaeTable,
    pub pearson: Vec<PearsonEntry>,
    pub matched: usize,
}

impl EvalReport {
    /// Full evaluation of frames whose detections are aligned one-to-one
    /// with ground truth for the attribute metrics (`pairs`).
    pub fn build(frames: &[Frame], pairs: &[MatchedPair], edges: &[f64]) -> Self {
        let mut ap = Vec::new();
        for class in 0..CLASS_NAMES.len() {
            let thr = default_iou_threshold(class);
            for difficulty in Difficulty::ALL {
                ap.push(ApEntry {
                    class,
                    iou_threshold: thr,
                    difficulty,
                    ap: ap40_frames(frames, class, thr, difficulty).ok(),
                });
            }
        }
        Self {
            ap40: ap,
            mae: mae_by_range(pairs, edges),
            pearson: pearson_matrix(pairs),
            matched: pairs.len(),
        }
    }

    pub fn depth_mae(&self) -> f64 {
        self.mae.overall(ErrorKind::Depth).unwrap_or(f64::INFINITY)
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub fn ap40_csv(report: &EvalReport) -> String {
    let mut s = String::from("class,iou_threshold,difficulty,ap40\n");
    for e in &report.ap40 {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            CLASS_NAMES[e.class],
            e.iou_threshold,
            e.difficulty.name(),
            fmt_opt(e.ap)
        );
    }
    s
}

pub fn mae_csv(report: &EvalReport) -> String {
    let t = &report.mae;
    let mut s = String::from("attribute,bin,count,mae\n");
    for kind in ErrorKind::ALL {
        for b in 0..t.edges.len() {
            // empty bins are absent rather than zero
            if let Some(v) = t.mae[kind as usize][b] {
                let _ = writeln!(s, "{},{},{},{v:.6}", kind.name(), t.bin_label(b), t.counts[b]);
            }
        }
        if let Some(v) = t.overall[kind as usize] {
            let _ = writeln!(s, "{},all,{},{v:.6}", kind.name(), report.matched);
        }
    }
    s
}

pub fn pearson_csv(entries: &[PearsonEntry]) -> String {
    let mut s = String::from("pair,r,n\n");
    for e in entries {
        let _ = writeln!(s, "{}-{},{},{}", e.a.name(), e.b.name(), fmt_opt(e.r), e.n);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Dims;
    use std::f64::consts::PI;

    fn cube(x: f64, z: f64, yaw: f64) -> Box3D {
        Box3D::new([x, 1.0, z], Dims::new(1.6, 1.5, 4.0), yaw).unwrap()
    }

    fn obj(class: usize, score: f64, b: Box3D) -> Object3D {
        Object3D { class, score, box3d: b }
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(pearson(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(EvalError::DegenerateVariance));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mae_single_bin_and_wrap() {
        let gt = cube(0.0, 35.0, PI - 0.1);
        let pred = Box3D::new([0.0, 1.0, 37.0], gt.dims, -PI + 0.1).unwrap();
        let t = mae_by_range(&[MatchedPair { pred, gt }], &DEFAULT_DISTANCE_EDGES);
        assert_eq!(t.mae[ErrorKind::Depth as usize], vec![None, Some(2.0), None]);
        let angle = t.mae[ErrorKind::Angle as usize][1].unwrap();
        assert!((angle - 0.2).abs() < 1e-12);
        assert_eq!(t.mae[ErrorKind::Size as usize][1], Some(0.0));
    }

    #[test]
    fn greedy_rules() {
        let g = cube(0.0, 20.0, 0.3);
        let gts = [obj(0, 1.0, g)];
        let m = match_detections_greedy(&[obj(0, 0.6, g), obj(0, 0.9, g)], &gts, 0.7);
        assert_eq!(m.tp, vec![false, true]);
        assert_eq!(m.pairs, vec![(1, 0)]);
        let m = match_detections_greedy(&[obj(1, 0.9, g)], &gts, 0.5);
        assert_eq!(m.tp, vec![false]);
    }

    #[test]
    fn ap40_extremes() {
        let gts: Vec<_> = (0..3).map(|i| obj(0, 1.0, cube(3.0 * i as f64, 20.0, 0.0))).collect();
        assert!((ap40(&gts, &gts, 0.7).unwrap() - 100.0).abs() < 1e-12);
        let far: Vec<_> = (0..3).map(|i| obj(0, 0.5, cube(3.0 * i as f64, 40.0, 0.0))).collect();
        assert_eq!(ap40(&far, &gts, 0.7).unwrap(), 0.0);
        assert_eq!(ap40(&far, &[], 0.7), Err(EvalError::NoGroundTruth));
    }

    #[test]
    fn ap40_tp_fp_tp() {
        // recall reaches 0.5 at precision 1, then 1.0 at precision 2/3
        let ap = ap40_from_flags(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        let expected = 100.0 * (20.0 * 1.0 + 20.0 * (2.0 / 3.0)) / 40.0;
        assert!((ap - expected).abs() < 1e-12);
    }

    #[test]
    fn seed_stats_examples() {
        let s = seed_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.median), (2.0, 1.0, 2.0));
        assert_eq!(seed_stats(&[4.0, 4.0, 4.0]).unwrap().std, 0.0);
        assert_eq!(seed_stats(&[3.0, 1.0, 2.0]).unwrap(), s);
        assert_eq!(seed_stats(&[1.0]), Err(EvalError::TooFewSamples(1)));
    }

    #[test]
    fn ignored_ground_truth_does_not_count() {
        let near = cube(0.0, 10.0, 0.0);
        let far = cube(2.0, 60.0, 0.0);
        let frame = Frame {
            dets: vec![obj(0, 0.9, near), obj(0, 0.8, far)],
            gts: vec![obj(0, 1.0, near), obj(0, 1.0, far)],
            gt_heights: vec![100.0, 18.0],
        };
        let easy = ap40_frames(std::slice::from_ref(&frame), 0, 0.7, Difficulty::Easy).unwrap();
        let hard = ap40_frames(&[frame], 0, 0.7, Difficulty::Hard).unwrap();
        assert!((easy - 100.0).abs() < 1e-12);
        assert!((hard - 100.0).abs() < 1e-12);
    }
}

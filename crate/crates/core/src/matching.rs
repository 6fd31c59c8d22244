//! Set matching between predictions and ground truth, and the training loss
//! assembled over a matching.

use thiserror::Error;

use crate::cop::decode::{box_from_cxcywh, sigmoid, softplus, AttributePrediction, Decoder, RawOutputs, BACKGROUND};
use crate::cop::LossMask;
use crate::geometry::{giou2d, giou2d_with_grad, Box2D, Dims};
use crate::micronet::loss::{focal_loss, l1, smooth_l1};
use crate::micronet::{Matrix, MicronetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("cost matrix is empty")]
    EmptyMatrix,
    #[error("cost matrix contains a non-finite entry at ({0}, {1})")]
    NonFiniteCost(usize, usize),
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
    #[error(transparent)]
    Net(#[from] MicronetError),
}

pub type Result<T> = std::result::Result<T, MatchingError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub bbox_l1: f64,
    pub giou: f64,
    pub center3d: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bbox_l1: 5.0,
            giou: 2.0,
            center3d: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub bbox: f64,
    pub giou: f64,
    pub center3d: f64,
    pub dims: f64,
    pub angle: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            bbox: 5.0,
            giou: 2.0,
            center3d: 10.0,
            dims: 1.0,
            angle: 1.0,
            depth: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        check_nonnegative(&[
            ("class", self.class),
            ("bbox_l1", self.bbox_l1),
            ("giou", self.giou),
            ("center3d", self.center3d),
        ])
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        check_nonnegative(&[
            ("class", self.class),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
            ("bbox", self.bbox),
            ("giou", self.giou),
            ("center3d", self.center3d),
            ("dims", self.dims),
            ("angle", self.angle),
            ("depth", self.depth),
        ])
    }
}

fn check_nonnegative(values: &[(&str, f64)]) -> std::result::Result<(), String> {
    for (name, v) in values {
        if !(*v >= 0.0 && v.is_finite()) {
            return Err(format!("weight {name} must be a finite non-negative number, got {v}"));
        }
    }
    Ok(())
}

/// Ground truth for one object, in the same normalized units the heads decode to.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub class: usize,
    pub box2d: Box2D,
    pub center: [f64; 2],
    pub dims: Dims,
    pub yaw: f64,
    pub depth: f64,
}

/// `(prediction, ground truth)` pairs, sorted by prediction index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// The identity matching `(i, i)` for `i < n`.
    pub fn identity(n: usize) -> Self {
        Self {
            pairs: (0..n).map(|i| (i, i)).collect(),
        }
    }

    pub fn cost(&self, cost: &Matrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
    }

    /// Checks uniqueness and that exactly `min(k, n)` pairs are present.
    pub fn validate(&self, k: usize, n: usize) -> Result<()> {
        if self.pairs.len() != k.min(n) {
            return Err(MatchingError::InvalidAssignment(format!(
                "{} pairs for {k} predictions and {n} ground truths",
                self.pairs.len()
            )));
        }
        let mut rows = vec![false; k];
        let mut cols = vec![false; n];
        for &(r, c) in &self.pairs {
            if r >= k || c >= n {
                return Err(MatchingError::InvalidAssignment(format!("pair ({r}, {c}) out of range")));
            }
            if std::mem::replace(&mut rows[r], true) || std::mem::replace(&mut cols[c], true) {
                return Err(MatchingError::InvalidAssignment(format!("pair ({r}, {c}) reuses an index")));
            }
        }
        Ok(())
    }
}

/// Optimal assignment for `a` with `rows <= cols`; `result[r]` is the column of row `r`.
fn solve_wide(a: &[Vec<f64>]) -> Vec<usize> {
    let n = a.len();
    let m = a[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            result[p[j] - 1] = j - 1;
        }
    }
    result
}

/// Minimum cost of matching `min(rows, cols)` pairs among the given indices.
fn optimal_cost(cost: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        let a: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&c| cost.get(r, c)).collect()).collect();
        solve_wide(&a)
            .iter()
            .enumerate()
            .map(|(i, &j)| a[i][j])
            .sum()
    } else {
        let a: Vec<Vec<f64>> = cols.iter().map(|&c| rows.iter().map(|&r| cost.get(r, c)).collect()).collect();
        solve_wide(&a)
            .iter()
            .enumerate()
            .map(|(i, &j)| a[i][j])
            .sum()
    }
}

/// Globally optimal assignment of `min(K, N)` pairs for a `K x N` cost matrix.
///
/// Among optimal assignments (costs equal up to a relative `1e-9`), the one
/// that is lexicographically smallest by row and then column is returned,
/// with "row assigned" preferred over "row left unmatched".
pub fn hungarian(cost: &Matrix) -> Result<Assignment> {
    let (k, n) = cost.shape();
    if k == 0 || n == 0 {
        return Err(MatchingError::EmptyMatrix);
    }
    for r in 0..k {
        for c in 0..n {
            if !cost.get(r, c).is_finite() {
                return Err(MatchingError::NonFiniteCost(r, c));
            }
        }
    }
    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let best = optimal_cost(cost, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut pairs = Vec::new();
    let mut fixed = 0.0;
    let mut free_cols = all_cols;
    let target = k.min(n);
    for r in 0..k {
        if pairs.len() == target {
            break;
        }
        let later: Vec<usize> = (r + 1..k).collect();
        let mut chosen = None;
        for (idx, &c) in free_cols.iter().enumerate() {
            let rest: Vec<usize> = free_cols.iter().copied().filter(|&x| x != c).collect();
            // remaining rows must still be able to fill the remaining pairs
            if later.len().min(rest.len()) < target - pairs.len() - 1 {
                continue;
            }
            let total = fixed + cost.get(r, c) + optimal_cost(cost, &later, &rest);
            if total <= best + tol {
                chosen = Some(idx);
                break;
            }
        }
        if let Some(idx) = chosen {
            let c = free_cols.remove(idx);
            fixed += cost.get(r, c);
            pairs.push((r, c));
        }
    }
    let assignment = Assignment { pairs };
    assignment.validate(k, n)?;
    Ok(assignment)
}

/// `K x N` matching cost between decoded predictions and ground truth.
pub fn build_cost_matrix(preds: &[AttributePrediction], gts: &[GroundTruthObject], w: &CostWeights) -> Matrix {
    let mut cost = Matrix::zeros(preds.len(), gts.len());
    for (r, p) in preds.iter().enumerate() {
        for (c, g) in gts.iter().enumerate() {
            let class = 1.0 - p.class_probs[g.class];
            let bbox = mean_abs(&p.box2d.as_array(), &g.box2d.as_array());
            let giou = 1.0 - giou2d(&p.box2d, &g.box2d);
            let center = mean_abs(&p.center, &g.center);
            cost.set(
                r,
                c,
                w.class * class + w.bbox_l1 * bbox + w.giou * giou + w.center3d * center,
            );
        }
    }
    cost
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Weighted, normalized loss terms. `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub class: f64,
    pub bbox: f64,
    pub giou: f64,
    pub center3d: f64,
    pub dims: f64,
    pub angle: f64,
    pub depth: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.class + self.bbox + self.giou + self.center3d + self.dims + self.angle + self.depth
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub breakdown: LossBreakdown,
    /// Gradient of `total` w.r.t. every raw head output.
    pub grad: RawOutputs,
}

/// Training loss over a matching, normalized by the number of ground truths.
///
/// Matched predictions pay the focal class term plus box, GIoU, projected
/// center, dimension, orientation and depth terms; unmatched ones pay a
/// focal term toward background only. Dimensions decode against the prior
/// of the ground-truth class.
pub fn loss_total(
    raw: &RawOutputs,
    decoder: &Decoder,
    gts: &[GroundTruthObject],
    assignment: &Assignment,
    w: &LossWeights,
    mask: LossMask,
) -> Result<LossOutput> {
    let k = raw.rows();
    assignment.validate(k, gts.len())?;
    let norm = 1.0 / gts.len().max(1) as f64;
    let mut b = LossBreakdown::default();
    let mut grad = RawOutputs::zeros(k);
    let mut matched = vec![None; k];
    for &(p, g) in &assignment.pairs {
        matched[p] = Some(g);
    }

    for (p, m) in matched.iter().enumerate() {
        let row = raw.row(p);
        let class_target = m.map_or(BACKGROUND, |g| gts[g].class);
        if mask.two_d {
            let f = focal_loss(row.class, class_target, w.focal_alpha, w.focal_gamma)?;
            b.class += w.class * norm * f.loss;
            add_scaled(grad.class.row_mut(p), &f.grad, w.class * norm);
        }
        let Some(g) = *m else { continue };
        let gt = &gts[g];

        if mask.two_d {
            let s: [f64; 4] = std::array::from_fn(|i| sigmoid(row.box2d[i]));
            let pred_box = box_from_cxcywh(s);
            let corners = pred_box.as_array();
            let lb = l1(&corners, &gt.box2d.as_array())?;
            let (giou, giou_grad) = giou2d_with_grad(&pred_box, &gt.box2d);
            b.bbox += w.bbox * norm * lb.loss;
            b.giou += w.giou * norm * (1.0 - giou);
            let d_corner: [f64; 4] =
                std::array::from_fn(|i| w.bbox * norm * lb.grad[i] - w.giou * norm * giou_grad[i]);
            // corners = (cu - w/2, cv - h/2, cu + w/2, cv + h/2)
            let d_s = [
                d_corner[0] + d_corner[2],
                d_corner[1] + d_corner[3],
                0.5 * (d_corner[2] - d_corner[0]),
                0.5 * (d_corner[3] - d_corner[1]),
            ];
            let out = grad.box2d.row_mut(p);
            for i in 0..4 {
                out[i] += d_s[i] * s[i] * (1.0 - s[i]);
            }

            let c: [f64; 2] = std::array::from_fn(|i| sigmoid(row.center[i]));
            let lc = l1(&c, &gt.center)?;
            b.center3d += w.center3d * norm * lc.loss;
            let out = grad.center.row_mut(p);
            for i in 0..2 {
                out[i] += w.center3d * norm * lc.grad[i] * c[i] * (1.0 - c[i]);
            }
        }

        if mask.size_angle {
            let prior = decoder.prior_dims[gt.class];
            let dims = [prior.w * row.size[0].exp(), prior.h * row.size[1].exp(), prior.l * row.size[2].exp()];
            let ld = smooth_l1(&dims, &[gt.dims.w, gt.dims.h, gt.dims.l], 1.0)?;
            b.dims += w.dims * norm * ld.loss;
            let out = grad.size.row_mut(p);
            for i in 0..3 {
                out[i] += w.dims * norm * ld.grad[i] * dims[i];
            }

            let (sin, cos) = gt.yaw.sin_cos();
            let la = smooth_l1(row.angle, &[sin, cos], 1.0)?;
            b.angle += w.angle * norm * la.loss;
            add_scaled(grad.angle.row_mut(p), &la.grad, w.angle * norm);
        }

        if mask.depth {
            let z = decoder.depth_scale * softplus(row.depth);
            let lz = smooth_l1(&[z], &[gt.depth], 1.0)?;
            b.depth += w.depth * norm * lz.loss;
            let dz = decoder.depth_scale * sigmoid(row.depth);
            grad.depth.row_mut(p)[0] += w.depth * norm * lz.grad[0] * dz;
        }
    }
    Ok(LossOutput {
        total: b.total(),
        breakdown: b,
        grad,
    })
}

fn add_scaled(out: &mut [f64], g: &[f64], scale: f64) {
    for (o, v) in out.iter_mut().zip(g) {
        *o += scale * v;
    }
}

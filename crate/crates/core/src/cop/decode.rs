//! Head output encodings.
//!
//! | head   | width | decoding                                          |
//! |--------|-------|---------------------------------------------------|
//! | class  | 4     | softmax over Car, Pedestrian, Cyclist, background |
//! | box2d  | 4     | sigmoid -> normalized (center u, center v, w, h)  |
//! | center | 2     | sigmoid -> normalized projected 3D center (u, v)  |
//! | size   | 3     | `prior * exp(raw)` for (w, h, l)                  |
//! | angle  | 2     | yaw = `atan2(raw_sin, raw_cos)`                   |
//! | depth  | 1     | `depth_scale * softplus(raw)`                     |

use crate::geometry::{Box2D, Dims};
use crate::micronet::loss::softmax;
use crate::micronet::Matrix;

pub const NUM_CLASSES: usize = 3;
pub const BACKGROUND: usize = NUM_CLASSES;
pub const CLASS_LOGITS: usize = NUM_CLASSES + 1;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["Car", "Pedestrian", "Cyclist"];

/// Raw head outputs for a batch, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub class: Matrix,
    pub box2d: Matrix,
    pub center: Matrix,
    pub size: Matrix,
    pub angle: Matrix,
    pub depth: Matrix,
}

impl RawOutputs {
    pub fn zeros(rows: usize) -> Self {
        Self {
            class: Matrix::zeros(rows, CLASS_LOGITS),
            box2d: Matrix::zeros(rows, 4),
            center: Matrix::zeros(rows, 2),
            size: Matrix::zeros(rows, 3),
            angle: Matrix::zeros(rows, 2),
            depth: Matrix::zeros(rows, 1),
        }
    }

    pub fn rows(&self) -> usize {
        self.class.rows()
    }

    pub fn row(&self, r: usize) -> RawRow<'_> {
        RawRow {
            class: self.class.row(r),
            box2d: self.box2d.row(r),
            center: self.center.row(r),
            size: self.size.row(r),
            angle: self.angle.row(r),
            depth: self.depth.get(r, 0),
        }
    }

    pub fn matrices(&self) -> [&Matrix; 6] {
        [&self.class, &self.box2d, &self.center, &self.size, &self.angle, &self.depth]
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RawRow<'a> {
    pub class: &'a [f64],
    pub box2d: &'a [f64],
    pub center: &'a [f64],
    pub size: &'a [f64],
    pub angle: &'a [f64],
    pub depth: f64,
}

/// Parameters needed to turn raw outputs into physical quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    /// Mean dimensions per object class.
    pub prior_dims: [Dims; NUM_CLASSES],
    pub depth_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributePrediction {
    pub class_probs: [f64; CLASS_LOGITS],
    /// Most probable object class (background excluded).
    pub class: usize,
    /// Probability of `class`.
    pub score: f64,
    /// Normalized image coordinates.
    pub box2d: Box2D,
    /// Normalized projected 3D center.
    pub center: [f64; 2],
    pub dims: Dims,
    pub yaw: f64,
    pub depth: f64,
}

impl AttributePrediction {
    /// True when background outscores every object class.
    pub fn is_background(&self) -> bool {
        self.class_probs[BACKGROUND] > self.score
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Object class with the highest probability, ignoring background.
pub fn object_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    best
}

/// Box from normalized `(center u, center v, width, height)`.
pub fn box_from_cxcywh(c: [f64; 4]) -> Box2D {
    Box2D::new(
        c[0] - 0.5 * c[2],
        c[1] - 0.5 * c[3],
        c[0] + 0.5 * c[2],
        c[1] + 0.5 * c[3],
    )
}

impl Decoder {
    pub fn decode_row(&self, raw: RawRow<'_>) -> AttributePrediction {
        let probs = softmax(raw.class);
        let class_probs: [f64; CLASS_LOGITS] = std::array::from_fn(|i| probs[i]);
        let class = object_class(&class_probs);
        let cxcywh: [f64; 4] = std::array::from_fn(|i| sigmoid(raw.box2d[i]));
        let prior = self.prior_dims[class];
        AttributePrediction {
            class_probs,
            class,
            score: class_probs[class],
            box2d: box_from_cxcywh(cxcywh),
            center: [sigmoid(raw.center[0]), sigmoid(raw.center[1])],
            dims: Dims::new(
                prior.w * raw.size[0].exp(),
                prior.h * raw.size[1].exp(),
                prior.l * raw.size[2].exp(),
            ),
            yaw: raw.angle[0].atan2(raw.angle[1]),
            depth: self.depth_scale * softplus(raw.depth),
        }
    }

    pub fn decode(&self, raw: &RawOutputs) -> Vec<AttributePrediction> {
        (0..raw.rows()).map(|r| self.decode_row(raw.row(r))).collect()
    }

    /// Raw depth output that decodes to `depth` (inverse softplus).
    pub fn encode_depth(&self, depth: f64) -> f64 {
        let y = depth / self.depth_scale;
        if y > 30.0 {
            y
        } else {
            y.exp_m1().ln()
        }
    }
}

//! Pinhole projection, box corners, the u-coordinate projection constraint
//! and its derivatives, plus 2D / bird's-eye / 3D overlap measures.
//!
//! Axis convention (camera frame): `x` to the right, `y` down, `z` forward.
//! A box's length runs along its local `x`, height along `y` and width along
//! `z`; yaw rotates about `y`.

use std::f64::consts::PI;

use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at depth {0} is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("effective corner depth {0} is not positive")]
    DegenerateDepth(f64),
    #[error("depth/yaw coupling undefined: |dF/dz| = {0:e} below tolerance")]
    UndefinedCoupling(f64),
    #[error("no root of the projection constraint in [{lo}, {hi}]")]
    NoRootInBracket { lo: f64, hi: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(f > 0.0 && f.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!("focal length {f}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({cx}, {cy})"
            )));
        }
        Ok(Self { f, cx, cy })
    }
}

/// Box extent in meters: `w` along local z, `h` along y, `l` along x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dims {
    pub w: f64,
    pub h: f64,
    pub l: f64,
}

impl Dims {
    pub fn new(w: f64, h: f64, l: f64) -> Self {
        Self { w, h, l }
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.l
    }
}

/// Oriented 3D box. `center` is the geometric center in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vec3,
    pub dims: Dims,
    pub yaw: f64,
}

impl Box3D {
    /// Validating constructor. Yaw is wrapped into `[-pi, pi)`.
    pub fn new(center: Vec3, dims: Dims, yaw: f64) -> Result<Self> {
        if !(dims.w > 0.0 && dims.h > 0.0 && dims.l > 0.0) {
            return Err(GeometryError::InvalidBox(format!(
                "dimensions must be positive, got {dims:?}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::InvalidBox("non-finite pose".into()));
        }
        if center[2] <= 0.0 {
            return Err(GeometryError::InvalidBox(format!(
                "center depth {} must be positive",
                center[2]
            )));
        }
        Ok(Self {
            center,
            dims,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn volume(&self) -> f64 {
        self.dims.volume()
    }

    /// Vertical extent `(top, bottom)` along the camera y axis.
    pub fn y_extent(&self) -> (f64, f64) {
        let half = 0.5 * self.dims.h;
        (self.center[1] - half, self.center[1] + half)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl Box2D {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        debug_assert!(u_min <= u_max && v_min <= v_max);
        Self {
            u_min,
            v_min,
            u_max,
            v_max,
        }
    }

    pub fn width(&self) -> f64 {
        (self.u_max - self.u_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.v_max - self.v_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.u_min, self.v_min, self.u_max, self.v_max]
    }
}

/// Local offset of one box corner from the box center, before rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerOffset {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl CornerOffset {
    pub const ZERO: CornerOffset = CornerOffset {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
    };

    /// Corner `index` in `0..8`: bit 0 selects the sign along length (x),
    /// bit 1 along height (y), bit 2 along width (z). A set bit means `+`.
    pub fn corner(dims: &Dims, index: usize) -> Self {
        assert!(index < 8, "corner index {index} out of range");
        let sign = |bit: usize| if index & (1 << bit) != 0 { 1.0 } else { -1.0 };
        Self {
            dx: sign(0) * 0.5 * dims.l,
            dy: sign(1) * 0.5 * dims.h,
            dz: sign(2) * 0.5 * dims.w,
        }
    }

    pub fn all(dims: &Dims) -> [CornerOffset; 8] {
        std::array::from_fn(|i| Self::corner(dims, i))
    }

    fn as_vec(&self) -> Vec3 {
        [self.dx, self.dy, self.dz]
    }
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let wrapped = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

/// Rotation about the camera's vertical axis:
/// `[[cos, 0, sin], [0, 1, 0], [-sin, 0, cos]]`.
pub fn rotation_y(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn mat_vec(m: &Mat3, v: &Vec3) -> Vec3 {
    std::array::from_fn(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

/// The eight corners `c + R(yaw) * offset`, ordered as [`CornerOffset::corner`].
pub fn box_corners(b: &Box3D) -> [Vec3; 8] {
    let rot = rotation_y(b.yaw);
    let offsets = CornerOffset::all(&b.dims);
    std::array::from_fn(|i| {
        let r = mat_vec(&rot, &offsets[i].as_vec());
        [b.center[0] + r[0], b.center[1] + r[1], b.center[2] + r[2]]
    })
}

pub fn project_point(k: &CameraIntrinsics, p: &Vec3) -> Result<(f64, f64)> {
    let z = p[2];
    if !(z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok((k.f * p[0] / z + k.cx, k.f * p[1] / z + k.cy))
}

/// Horizontal displacement `alpha` and effective depth contribution `beta` of a
/// rotated corner offset.
pub fn alpha_beta(corner: &CornerOffset, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * corner.dx + s * corner.dz, -s * corner.dx + c * corner.dz)
}

/// Analytic yaw derivatives of [`alpha_beta`]: `alpha' = beta`, `beta' = -alpha`.
pub fn alpha_beta_dtheta(corner: &CornerOffset, theta: f64) -> (f64, f64) {
    let (alpha, beta) = alpha_beta(corner, theta);
    (beta, -alpha)
}

/// u-coordinate of a corner as a function of lateral center, depth and yaw.
pub fn projection_u(
    k: &CameraIntrinsics,
    x_c: f64,
    z_c: f64,
    corner: &CornerOffset,
    theta: f64,
) -> Result<f64> {
    let (alpha, beta) = alpha_beta(corner, theta);
    let depth = z_c + beta;
    if !(depth > 0.0) {
        return Err(GeometryError::DegenerateDepth(depth));
    }
    Ok(k.f * (x_c + alpha) / depth + k.cx)
}

/// `(dF/dtheta, dF/dz_c)` of [`projection_u`].
pub fn projection_partials(
    k: &CameraIntrinsics,
    x_c: f64,
    z_c: f64,
    corner: &CornerOffset,
    theta: f64,
) -> Result<(f64, f64)> {
    let (alpha, beta) = alpha_beta(corner, theta);
    let (d_alpha, d_beta) = alpha_beta_dtheta(corner, theta);
    let depth = z_c + beta;
    if !(depth > 0.0) {
        return Err(GeometryError::DegenerateDepth(depth));
    }
    let lateral = x_c + alpha;
    let denom = depth * depth;
    let d_theta = k.f * (d_alpha * depth - lateral * d_beta) / denom;
    let d_z = -k.f * lateral / denom;
    Ok((d_theta, d_z))
}

pub const DEFAULT_COUPLING_TOLERANCE: f64 = 1e-12;

/// Rate `dz_c/dtheta` at which depth must move to keep the corner's
/// u-coordinate fixed as yaw changes.
pub fn coupling_dz_dtheta(
    k: &CameraIntrinsics,
    x_c: f64,
    z_c: f64,
    corner: &CornerOffset,
    theta: f64,
    tolerance: f64,
) -> Result<f64> {
    let (d_theta, d_z) = projection_partials(k, x_c, z_c, corner, theta)?;
    if d_z.abs() < tolerance {
        return Err(GeometryError::UndefinedCoupling(d_z.abs()));
    }
    Ok(-d_theta / d_z)
}

/// Bisection for the depth `z_c` at which the corner projects to `u0`.
pub fn solve_depth_for_u(
    k: &CameraIntrinsics,
    corner: &CornerOffset,
    theta: f64,
    x_c: f64,
    u0: f64,
    bracket: (f64, f64),
) -> Result<f64> {
    const PIXEL_TOLERANCE: f64 = 1e-9;
    let (mut lo, mut hi) = if bracket.0 <= bracket.1 {
        bracket
    } else {
        (bracket.1, bracket.0)
    };
    let residual = |z: f64| projection_u(k, x_c, z, corner, theta).map(|u| u - u0);
    let mut r_lo = residual(lo)?;
    let r_hi = residual(hi)?;
    if r_lo == 0.0 {
        return Ok(lo);
    }
    if r_hi == 0.0 {
        return Ok(hi);
    }
    if r_lo.signum() == r_hi.signum() {
        return Err(GeometryError::NoRootInBracket { lo, hi });
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..400 {
        mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let r_mid = residual(mid)?;
        let width = hi - lo;
        if r_mid.abs() <= PIXEL_TOLERANCE && width <= 1e-13 * mid.abs().max(1.0) {
            break;
        }
        if r_mid.signum() == r_lo.signum() {
            lo = mid;
            r_lo = r_mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Axis-aligned hull of the projected corners.
pub fn project_box2d(k: &CameraIntrinsics, b: &Box3D) -> Result<Box2D> {
    let mut out = Box2D {
        u_min: f64::INFINITY,
        v_min: f64::INFINITY,
        u_max: f64::NEG_INFINITY,
        v_max: f64::NEG_INFINITY,
    };
    for p in box_corners(b).iter() {
        let (u, v) = project_point(k, p)?;
        out.u_min = out.u_min.min(u);
        out.v_min = out.v_min.min(v);
        out.u_max = out.u_max.max(u);
        out.v_max = out.v_max.max(v);
    }
    Ok(out)
}

fn intersection_area(a: &Box2D, b: &Box2D) -> f64 {
    let w = (a.u_max.min(b.u_max) - a.u_min.max(b.u_min)).max(0.0);
    let h = (a.v_max.min(b.v_max) - a.v_min.max(b.v_min)).max(0.0);
    w * h
}

pub fn iou2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (hull - union) / hull`.
pub fn giou2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull = (a.u_max.max(b.u_max) - a.u_min.min(b.u_min))
        * (a.v_max.max(b.v_max) - a.v_min.min(b.v_min));
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

/// [`giou2d`] together with its gradient w.r.t. `a`'s
/// `(u_min, v_min, u_max, v_max)`. At exact ties between edges the
/// subgradient of the `a`-side branch is taken.
pub fn giou2d_with_grad(a: &Box2D, b: &Box2D) -> (f64, [f64; 4]) {
    let aw = a.u_max - a.u_min;
    let ah = a.v_max - a.v_min;
    let area_a = aw * ah;
    let area_b = b.area();
    let iw_raw = a.u_max.min(b.u_max) - a.u_min.max(b.u_min);
    let ih_raw = a.v_max.min(b.v_max) - a.v_min.max(b.v_min);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let hw = a.u_max.max(b.u_max) - a.u_min.min(b.u_min);
    let hh = a.v_max.max(b.v_max) - a.v_min.min(b.v_min);
    let hull = hw * hh;
    if union <= 0.0 || hull <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union - (hull - union) / hull;

    let d_area = [-ah, -aw, ah, aw];
    // d(iw)/d(u_min), d(ih)/d(v_min), d(iw)/d(u_max), d(ih)/d(v_max)
    let d_iw_umin = if iw_raw > 0.0 && a.u_min >= b.u_min { -1.0 } else { 0.0 };
    let d_iw_umax = if iw_raw > 0.0 && a.u_max <= b.u_max { 1.0 } else { 0.0 };
    let d_ih_vmin = if ih_raw > 0.0 && a.v_min >= b.v_min { -1.0 } else { 0.0 };
    let d_ih_vmax = if ih_raw > 0.0 && a.v_max <= b.v_max { 1.0 } else { 0.0 };
    let d_inter = [ih * d_iw_umin, iw * d_ih_vmin, ih * d_iw_umax, iw * d_ih_vmax];
    let d_hw_umin = if a.u_min <= b.u_min { -1.0 } else { 0.0 };
    let d_hw_umax = if a.u_max >= b.u_max { 1.0 } else { 0.0 };
    let d_hh_vmin = if a.v_min <= b.v_min { -1.0 } else { 0.0 };
    let d_hh_vmax = if a.v_max >= b.v_max { 1.0 } else { 0.0 };
    let d_hull = [hh * d_hw_umin, hw * d_hh_vmin, hh * d_hw_umax, hw * d_hh_vmax];

    // value = inter/union - 1 + union/hull
    let grad = std::array::from_fn(|i| {
        let d_union = d_area[i] - d_inter[i];
        d_inter[i] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[i] / (hull * hull)
    });
    (value, grad)
}

/// A 2D point in the bird's-eye (x, z) plane.
pub type Point2 = [f64; 2];

/// Footprint of the box on the ground plane, counter-clockwise in (x, z).
pub fn bev_polygon(b: &Box3D) -> Vec<Point2> {
    let offsets = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let (s, c) = b.yaw.sin_cos();
    let mut poly: Vec<Point2> = offsets
        .iter()
        .map(|&(sx, sz)| {
            let dx = sx * 0.5 * b.dims.l;
            let dz = sz * 0.5 * b.dims.w;
            [b.center[0] + c * dx + s * dz, b.center[2] - s * dx + c * dz]
        })
        .collect();
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let p = poly[i];
            let q = poly[(i + 1) % n];
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    0.5 * twice
}

fn cross(o: &Point2, a: &Point2, b: &Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(s: &Point2, e: &Point2, a: &Point2, b: &Point2) -> Point2 {
    let d_se = [e[0] - s[0], e[1] - s[1]];
    let d_ab = [b[0] - a[0], b[1] - a[1]];
    let denom = d_se[0] * d_ab[1] - d_se[1] * d_ab[0];
    if denom.abs() < 1e-300 {
        return *e;
    }
    let t = ((a[0] - s[0]) * d_ab[1] - (a[1] - s[1]) * d_ab[0]) / denom;
    [s[0] + t * d_se[0], s[1] + t * d_se[1]]
}

/// Sutherland-Hodgman clipping of `subject` against a convex,
/// counter-clockwise `clip` polygon.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output: Vec<Point2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        for cur in input.iter() {
            let cur_in = cross(&a, &b, cur) >= 0.0;
            let prev_in = cross(&a, &b, &prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(&prev, cur, &a, &b));
                }
                output.push(*cur);
            } else if prev_in {
                output.push(line_intersection(&prev, cur, &a, &b));
            }
            prev = *cur;
        }
    }
    output
}

/// Intersection area of the two footprints on the ground plane.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let pa = bev_polygon(a);
    let pb = bev_polygon(b);
    signed_area(&clip_convex(&pa, &pb)).abs()
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.dims.l * a.dims.w + b.dims.l * b.dims.w - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a_top, a_bottom) = a.y_extent();
    let (b_top, b_bottom) = b.y_extent();
    let overlap_y = (a_bottom.min(b_bottom) - a_top.max(b_top)).max(0.0);
    if overlap_y == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * overlap_y;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

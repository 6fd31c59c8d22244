//! Independent reference implementations shared by the integration tests
//! and the acceptance suite. None of them call the code they check.

#![allow(dead_code)]

use std::f64::consts::PI;

use cop3d::geometry::{
    coupling_dz_dtheta, mat_vec, projection_partials, rotation_y, Box3D, CameraIntrinsics, CornerOffset, Dims, Vec3,
    DEFAULT_COUPLING_TOLERANCE,
};
use cop3d::micronet::{Matrix, Rng};

pub fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new(700.0, 621.0, 187.5).unwrap()
}

/// u of a corner computed the long way: rotate the offset, translate, project.
pub fn corner_u(k: &CameraIntrinsics, x: f64, z: f64, corner: &CornerOffset, theta: f64) -> f64 {
    let r = rotation_y(theta);
    let p = mat_vec(&r, &[corner.dx, corner.dy, corner.dz]);
    let world = [x + p[0], 0.0, z + p[2]];
    k.f * world[0] / world[2] + k.cx
}

/// Depth keeping a corner at `u0` for yaw `theta`, by plain bisection.
pub fn depth_for_u(k: &CameraIntrinsics, x: f64, corner: &CornerOffset, theta: f64, u0: f64, lo: f64, hi: f64) -> f64 {
    let f = |z: f64| corner_u(k, x, z, corner, theta) - u0;
    let (mut lo, mut hi) = (lo, hi);
    let f_lo = f(lo);
    assert!(f_lo.signum() != f(hi).signum(), "bracket does not straddle the root");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid).signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub struct CornerConfig {
    pub x: f64,
    pub z: f64,
    pub corner: CornerOffset,
    pub theta: f64,
}

pub fn random_corner_config(rng: &mut Rng) -> CornerConfig {
    let dims = Dims::new(rng.range(0.5, 2.5), rng.range(0.5, 2.5), rng.range(0.5, 6.0));
    CornerConfig {
        x: rng.range(-15.0, 15.0),
        z: rng.range(8.0, 60.0),
        corner: CornerOffset::corner(&dims, rng.int_inclusive(0, 7)),
        theta: rng.range(-PI, PI),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CouplingCheck {
    /// Configurations compared against the finite-difference oracle.
    pub checked: usize,
    pub max_rel_error: f64,
    /// Random configurations drawn, and how many of them couple.
    pub trials: usize,
    pub nonzero: usize,
}

/// Compares the closed-form coupling derivative with a central difference
/// of the bisection root on `n` well-conditioned random configurations.
pub fn check_coupling(n: usize, seed: u64) -> CouplingCheck {
    let k = cam();
    let mut rng = Rng::new(seed);
    let mut out = CouplingCheck { checked: 0, max_rel_error: 0.0, trials: 0, nonzero: 0 };
    while out.checked < n {
        out.trials += 1;
        let c = random_corner_config(&mut rng);
        let Ok(analytic) = coupling_dz_dtheta(&k, c.x, c.z, &c.corner, c.theta, DEFAULT_COUPLING_TOLERANCE) else {
            continue;
        };
        if analytic.abs() > 1e-9 {
            out.nonzero += 1;
        }
        // Skip near-singular configurations where the root moves too fast.
        let (_, d_z) = projection_partials(&k, c.x, c.z, &c.corner, c.theta).unwrap();
        if d_z.abs() < 1e-2 || analytic.abs() < 1e-3 || analytic.abs() > 1e3 {
            continue;
        }
        let u0 = corner_u(&k, c.x, c.z, &c.corner, c.theta);
        let h = 1e-5;
        let z_at = |t: f64| {
            let lo = (0.5 * c.z).max(c.z - 10.0 * h * analytic.abs() - 1e-3);
            let hi = (2.0 * c.z).min(c.z + 10.0 * h * analytic.abs() + 1e-3);
            depth_for_u(&k, c.x, &c.corner, t, u0, lo, hi)
        };
        let fd = (z_at(c.theta + h) - z_at(c.theta - h)) / (2.0 * h);
        out.max_rel_error = out.max_rel_error.max((fd - analytic).abs() / analytic.abs());
        out.checked += 1;
    }
    out
}

/// Whether `p` lies inside box `b`, tested in the box's own frame.
pub fn inside(b: &Box3D, p: &Vec3) -> bool {
    let d = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
    let (s, c) = b.yaw.sin_cos();
    // Inverse of rotation_y: transpose.
    let lx = c * d[0] - s * d[2];
    let lz = s * d[0] + c * d[2];
    lx.abs() <= 0.5 * b.dims.l && d[1].abs() <= 0.5 * b.dims.h && lz.abs() <= 0.5 * b.dims.w
}

/// Monte-Carlo IoU: uniform samples in `a` estimate the intersection volume.
pub fn iou_monte_carlo(a: &Box3D, b: &Box3D, samples: usize, rng: &mut Rng) -> f64 {
    let point_in_a = |u: f64, v: f64, w: f64| -> Vec3 {
        let (s, c) = a.yaw.sin_cos();
        let lx = (u - 0.5) * a.dims.l;
        let ly = (v - 0.5) * a.dims.h;
        let lz = (w - 0.5) * a.dims.w;
        [a.center[0] + c * lx + s * lz, a.center[1] + ly, a.center[2] - s * lx + c * lz]
    };
    let hits = (0..samples)
        .filter(|_| inside(b, &point_in_a(rng.uniform(), rng.uniform(), rng.uniform())))
        .count();
    let inter = a.volume() * hits as f64 / samples as f64;
    inter / (a.volume() + b.volume() - inter)
}

pub fn random_overlapping_pair(rng: &mut Rng) -> (Box3D, Box3D) {
    let a = Box3D::new(
        [rng.range(-5.0, 5.0), rng.range(-1.0, 1.0), rng.range(10.0, 40.0)],
        Dims::new(rng.range(0.5, 2.5), rng.range(0.5, 2.5), rng.range(0.5, 5.0)),
        rng.range(-PI, PI),
    )
    .unwrap();
    let b = Box3D::new(
        [a.center[0] + rng.range(-1.5, 1.5), a.center[1] + rng.range(-0.8, 0.8), a.center[2] + rng.range(-1.5, 1.5)],
        Dims::new(rng.range(0.5, 2.5), rng.range(0.5, 2.5), rng.range(0.5, 5.0)),
        rng.range(-PI, PI),
    )
    .unwrap();
    (a, b)
}

/// Largest gap between `iou3d` and the Monte-Carlo estimate over random pairs.
pub fn iou_monte_carlo_gap(pairs: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut mc_rng = Rng::new(seed.wrapping_add(1));
    (0..pairs)
        .map(|_| {
            let (a, b) = random_overlapping_pair(&mut rng);
            (cop3d::geometry::iou3d(&a, &b) - iou_monte_carlo(&a, &b, samples, &mut mc_rng)).abs()
        })
        .fold(0.0, f64::max)
}

/// Exhaustive minimum over all injections of the smaller side into the larger.
pub fn assignment_brute_force(cost: &Matrix) -> f64 {
    let (k, n) = cost.shape();
    let (small, large, transposed) = if k <= n { (k, n, false) } else { (n, k, true) };
    let mut best = f64::INFINITY;
    let mut used = vec![false; large];
    fn rec(
        i: usize,
        small: usize,
        used: &mut [bool],
        acc: f64,
        best: &mut f64,
        get: &dyn Fn(usize, usize) -> f64,
    ) {
        if i == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                rec(i + 1, small, used, acc + get(i, j), best, get);
                used[j] = false;
            }
        }
    }
    let get = |i: usize, j: usize| if transposed { cost.get(j, i) } else { cost.get(i, j) };
    rec(0, small, &mut used, 0.0, &mut best, &get);
    best
}

pub fn random_cost(rng: &mut Rng, k: usize, n: usize, integer: bool) -> Matrix {
    let data = (0..k * n)
        .map(|_| if integer { rng.int_inclusive(0, 4) as f64 } else { rng.range(-2.0, 10.0) })
        .collect();
    Matrix::from_vec(k, n, data).unwrap()
}

/// Random cost matrices with `min(K, N) <= 7`, alternating wide and tall.
pub fn random_assignment_problem(rng: &mut Rng, trial: usize) -> Matrix {
    let small = rng.int_inclusive(1, 7);
    let extra = rng.int_inclusive(0, 2);
    let (k, n) = if trial % 2 == 0 { (small, small + extra) } else { (small + extra, small) };
    random_cost(rng, k, n, trial % 3 == 0)
}

/// Sample covariance over the product of sample standard deviations, each
/// computed in its own pass.
pub fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
    let sa = (a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / (n - 1.0)).sqrt();
    let sb = (b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / (n - 1.0)).sqrt();
    cov / (sa * sb)
}

pub fn random_series(rng: &mut Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let a: Vec<f64> = (0..n).map(|_| rng.normal() * 3.0 + 1.0).collect();
    let mix = rng.range(-1.0, 1.0);
    let b: Vec<f64> = a.iter().map(|x| mix * x + rng.normal()).collect();
    (a, b)
}

/// Interpolated AP by scanning every prefix of the ranked list for each
/// recall threshold.
pub fn ap40_oracle(flags: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut ranked = flags.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut total = 0.0;
    for k in 1..=40 {
        let mut best = 0.0f64;
        for cut in 1..=ranked.len() {
            let tp = ranked[..cut].iter().filter(|f| f.1).count();
            if tp * 40 >= k * n_gt {
                best = best.max(tp as f64 / cut as f64);
            }
        }
        total += best;
    }
    100.0 * total / 40.0
}

/// Up to 10 scored hit/miss flags and a ground-truth count covering the hits.
pub fn random_flags(rng: &mut Rng) -> (Vec<(f64, bool)>, usize) {
    let n = rng.int_inclusive(0, 10);
    let flags: Vec<(f64, bool)> = (0..n).map(|_| (rng.uniform(), rng.uniform() < 0.6)).collect();
    let tp = flags.iter().filter(|f| f.1).count();
    (flags, rng.int_inclusive(tp.max(1), tp + 4))
}

pub fn random_label(rng: &mut Rng) -> cop3d::kitti_io::KittiLabel {
    use cop3d::geometry::Box2D;
    use cop3d::kitti_io::KittiLabel;
    if rng.uniform() < 0.1 {
        let u = rng.range(0.0, 1000.0);
        let v = rng.range(0.0, 300.0);
        return KittiLabel::dont_care(Box2D::new(u, v, u + rng.range(0.0, 200.0), v + rng.range(0.0, 70.0)));
    }
    let kinds = ["Car", "Pedestrian", "Cyclist", "Van", "Truck"];
    let u = rng.range(-50.0, 1200.0);
    let v = rng.range(-20.0, 360.0);
    KittiLabel {
        kind: kinds[rng.int_inclusive(0, kinds.len() - 1)].into(),
        truncated: rng.uniform(),
        occluded: rng.int_inclusive(0, 3) as i32,
        alpha: rng.range(-3.14, 3.14),
        bbox: Box2D::new(u, v, u + rng.range(0.0, 300.0), v + rng.range(0.0, 150.0)),
        dims: Dims::new(rng.range(0.1, 3.0), rng.range(0.1, 4.0), rng.range(0.1, 12.0)),
        location: [rng.range(-40.0, 40.0), rng.range(-3.0, 3.0), rng.range(0.5, 90.0)],
        rotation_y: rng.range(-3.14, 3.14),
        score: (rng.uniform() < 0.5).then(|| rng.uniform()),
    }
}

/// Describes the first field where `parsed` differs from `original`
/// rounded to two decimals.
pub fn quantized_mismatch(parsed: &cop3d::kitti_io::KittiLabel, original: &cop3d::kitti_io::KittiLabel) -> Option<String> {
    let q = |v: f64| (v * 100.0).round() / 100.0;
    let pairs = [
        ("truncated", parsed.truncated, original.truncated),
        ("alpha", parsed.alpha, original.alpha),
        ("u_min", parsed.bbox.u_min, original.bbox.u_min),
        ("v_min", parsed.bbox.v_min, original.bbox.v_min),
        ("u_max", parsed.bbox.u_max, original.bbox.u_max),
        ("v_max", parsed.bbox.v_max, original.bbox.v_max),
        ("h", parsed.dims.h, original.dims.h),
        ("w", parsed.dims.w, original.dims.w),
        ("l", parsed.dims.l, original.dims.l),
        ("x", parsed.location[0], original.location[0]),
        ("y", parsed.location[1], original.location[1]),
        ("z", parsed.location[2], original.location[2]),
        ("rotation_y", parsed.rotation_y, original.rotation_y),
    ];
    for (name, p, o) in pairs {
        if (p - q(o)).abs() >= 1e-9 {
            return Some(format!("{name}: {p} vs {o}"));
        }
    }
    if parsed.kind != original.kind || parsed.occluded != original.occluded {
        return Some("type or occlusion changed".into());
    }
    if parsed.score.is_some() != original.score.is_some() {
        return Some("score presence changed".into());
    }
    None
}

/// Exports `dataset` to `dir`, imports it back and returns the largest
/// deviation over every Box3D field and the number of objects compared.
pub fn kitti_round_trip_error(dataset: &cop3d::synth::Dataset, dir: &std::path::Path) -> (f64, usize) {
    use cop3d::kitti_io::{export_dataset_kitti, import_kitti, DEFAULT_PRECISION};
    export_dataset_kitti(dataset, dir, DEFAULT_PRECISION).unwrap();
    let frames = import_kitti(dir).unwrap();
    let (mut worst, mut count) = (0.0f64, 0);
    for frame in &frames {
        let mut truth: Vec<_> = dataset.samples().map(|(_, s)| s).filter(|s| s.scene_id == frame.id).collect();
        truth.sort_by_key(|s| s.object_id);
        let (objects, _) = frame.objects().unwrap();
        assert_eq!(objects.len(), truth.len(), "frame {}", frame.id);
        for (o, s) in objects.iter().zip(&truth) {
            assert_eq!(o.class, s.class);
            let (a, b) = (&o.box3d, &s.box3d);
            let diffs = [
                a.center[0] - b.center[0],
                a.center[1] - b.center[1],
                a.center[2] - b.center[2],
                a.dims.w - b.dims.w,
                a.dims.h - b.dims.h,
                a.dims.l - b.dims.l,
                a.yaw - b.yaw,
            ];
            worst = diffs.iter().fold(worst, |m, d| m.max(d.abs()));
            count += 1;
        }
    }
    (worst, count)
}

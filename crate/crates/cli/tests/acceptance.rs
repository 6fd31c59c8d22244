//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. A name filter may be passed as the
//! first non-flag argument.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_4;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cop3d::cop::{parse_attributes, CopModel, Variant};
use cop3d::eval::{ap40, ap40_from_flags, pearson, seed_stats, Object3D};
use cop3d::geometry::{bev_iou, iou3d, Box3D, Dims};
use cop3d::kitti_io::{format_label_line, parse_label_line, DEFAULT_PRECISION};
use cop3d::matching::{build_cost_matrix, hungarian, loss_total, CostWeights, LossWeights};
use cop3d::micronet::gradcheck::compare_with_finite_differences;
use cop3d::micronet::{Matrix, Rng};
use cop3d::synth::{default_priors, make_dataset, SceneConfig};
use cop3d::trainer::{
    ablation_csv, dataset_for, ground_truth, grid_cells, model_config, run_ablation_grid, run_seeds, ExperimentConfig,
    Standardizer,
};

#[path = "../../core/tests/support/mod.rs"]
mod support;

/// Fresh training-seed batteries for the headline comparison.
const BATTERIES: usize = 5;
const SEEDS_PER_BATTERY: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn tiny_config(extra: &[&str]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let mut o: Vec<String> = ["data.n_scenes=20", "trainer.epochs=2", "trainer.lr_decay_epochs=1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    o.extend(["chain.query_dim=8".into(), "chain.hidden_dim=8".into(), "model.trunk_hidden=16".into()]);
    cfg.apply_overrides(&o).unwrap();
    cfg
}

fn coupling() -> Outcome {
    let start = Instant::now();
    let c = support::check_coupling(500, 1);
    let secs = start.elapsed().as_secs_f64();
    let share = c.nonzero as f64 / c.trials as f64;
    outcome(
        c.max_rel_error < 1e-5 && share >= 0.99 && secs < 5.0,
        format!(
            "max relative error {:.2e} over {} configurations, {:.2}% of {} draws couple, {secs:.2}s",
            c.max_rel_error,
            c.checked,
            100.0 * share,
            c.trials
        ),
    )
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config(&["chain.hidden_dim=10"]);
    let dataset = dataset_for(&cfg).unwrap();
    let scene = &dataset.scene;
    let queries: Vec<Vec<f64>> = dataset.train[..6].iter().map(|s| s.features.to_vec()).collect();
    let raw_x = Matrix::from_rows(&queries).unwrap();
    let x = Standardizer::fit(&raw_x).apply(&raw_x);
    let gts: Vec<_> = dataset.train[6..10].iter().map(|s| ground_truth(s, scene)).collect();
    let model = CopModel::new(model_config(&cfg), &mut Rng::new(3)).unwrap();
    let decoder = model.config.decoder.clone();
    let preds = decoder.decode(&model.predict_raw(&x).unwrap());
    let assignment = hungarian(&build_cost_matrix(&preds, &gts, &CostWeights::default())).unwrap();
    let w = LossWeights::default();
    let mask = cop3d::cop::LossMask::ALL;
    let (raw, trace) = model.forward(&x, false, &mut Rng::new(0)).unwrap();
    let out = loss_total(&raw, &decoder, &gts, &assignment, &w, mask).unwrap();
    let analytic = model.flatten_grads(&model.backward(&trace, &out.grad).unwrap());
    let report = compare_with_finite_differences(
        &model,
        &analytic,
        1e-6,
        |m| m.params_mut(),
        |m| loss_total(&m.predict_raw(&x).unwrap(), &decoder, &gts, &assignment, &w, mask).unwrap().total,
    );
    let secs = start.elapsed().as_secs_f64();
    outcome(
        report.passes(1e-4) && secs < 30.0,
        format!(
            "max relative error {:.2e} over {} parameters, {secs:.2}s",
            report.max_relative_error, report.checked
        ),
    )
}

fn residual_identity() -> Outcome {
    let cfg = tiny_config(&["chain.variant=cop", "chain.residual=true", "chain.order=S,A,D"]);
    let mut model = CopModel::new(model_config(&cfg), &mut Rng::new(9)).unwrap();
    for chain in model.chains.iter_mut() {
        for net in chain.iter_mut() {
            net.zero_output();
        }
    }
    let mut rng = Rng::new(10);
    let x = Matrix::from_vec(7, model.config.input_dim, (0..7 * model.config.input_dim).map(|_| rng.normal()).collect())
        .unwrap();
    let q = model.query(&x).unwrap();
    let t = model.chain_forward(0, &q).unwrap();
    let bitwise = t.features.iter().all(|f| {
        f.shape() == q.shape() && f.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    outcome(bitwise, format!("size, angle and depth features equal the query bitwise: {bitwise}"))
}

fn hungarian_optimal() -> Outcome {
    let mut rng = Rng::new(2024);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let cost = support::random_assignment_problem(&mut rng, trial);
        let a = hungarian(&cost).unwrap();
        let (k, n) = cost.shape();
        if a.validate(k, n).is_err() {
            return outcome(false, format!("trial {trial}: assignment is not one-to-one"));
        }
        worst = worst.max((a.cost(&cost) - support::assignment_brute_force(&cost)).abs());
    }
    outcome(worst < 1e-9, format!("largest gap to brute force {worst:.2e} over 200 matrices"))
}

fn iou() -> Outcome {
    let gap = support::iou_monte_carlo_gap(200, 1_000_000, 5);
    let cube = |c: [f64; 3], yaw: f64| Box3D::new(c, Dims::new(1.0, 1.0, 1.0), yaw).unwrap();
    let a = cube([0.0, 0.0, 10.0], 0.0);
    let analytic = [
        (iou3d(&a, &a), 1.0),
        (iou3d(&a, &cube([0.5, 0.0, 10.0], 0.0)), 1.0 / 3.0),
        (bev_iou(&a, &cube([0.0, 0.0, 10.0], FRAC_PI_4)), 1.0 / 2f64.sqrt()),
    ];
    let exact_err = analytic.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    outcome(
        gap < 0.01 && exact_err < 1e-6,
        format!("largest Monte-Carlo gap {gap:.4} over 200 pairs, analytic error {exact_err:.1e}"),
    )
}

fn ap() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (flags, n_gt) = support::random_flags(&mut rng);
        worst = worst.max((ap40_from_flags(&flags, n_gt).unwrap() - support::ap40_oracle(&flags, n_gt)).abs());
    }
    let gts: Vec<Object3D> = (0..5)
        .map(|i| Object3D {
            class: 0,
            score: 1.0,
            box3d: Box3D::new([4.0 * i as f64 - 8.0, 1.0, 15.0 + 5.0 * i as f64], Dims::new(1.6, 1.5, 4.0), 0.3)
                .unwrap(),
        })
        .collect();
    let perfect = ap40(&gts, &gts, 0.7).unwrap();
    outcome(
        worst < 1e-9 && (perfect - 100.0).abs() < 1e-12,
        format!("largest gap to the PR-curve reference {worst:.1e} over 100 sets, perfect detector {perfect}"),
    )
}

struct Comparison {
    cop: (f64, f64),
    parallel: (f64, f64),
}

fn compare(cfg: &ExperimentConfig, dataset: &cop3d::synth::Dataset, seeds: Vec<u64>) -> Comparison {
    let stats = |variant: Variant| {
        let mut c = cfg.clone();
        c.chain.variant = variant;
        c.chain.attributes = parse_attributes("S,A,D").unwrap();
        c.chain.residual = true;
        c.trainer.seeds = seeds.clone();
        let depth: Vec<f64> =
            run_seeds(&c, dataset, jobs()).unwrap().iter().map(|r| r.metrics()[0].1.unwrap()).collect();
        let s = seed_stats(&depth).unwrap();
        (s.mean, s.std)
    };
    Comparison { cop: stats(Variant::Cop), parallel: stats(Variant::Parallel) }
}

fn headline() -> Outcome {
    let cfg = ExperimentConfig::default();
    let dataset = dataset_for(&cfg).unwrap();
    let mut lines = Vec::new();
    let (mut mean_wins, mut std_fails, mut slowest) = (0, 0, Duration::ZERO);
    for b in 0..BATTERIES as u64 {
        let start = Instant::now();
        let seeds: Vec<u64> = (1..=SEEDS_PER_BATTERY).map(|s| b * SEEDS_PER_BATTERY + s).collect();
        let c = compare(&cfg, &dataset, seeds.clone());
        slowest = slowest.max(start.elapsed());
        let a = c.cop.0 < c.parallel.0;
        let s = c.cop.1 <= c.parallel.1;
        mean_wins += a as usize;
        std_fails += (!s) as usize;
        lines.push(format!(
            "seeds {}-{}: cop {:.3} (std {:.3}) vs parallel {:.3} (std {:.3}){}{}",
            seeds[0],
            seeds[seeds.len() - 1],
            c.cop.0,
            c.cop.1,
            c.parallel.0,
            c.parallel.1,
            if a { "" } else { " [mean not lower]" },
            if s { "" } else { " [std larger]" },
        ));
    }
    let pass = mean_wins == BATTERIES && std_fails <= 1 && slowest < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "cop mean lower in {mean_wins}/{BATTERIES} batteries, std larger in {std_fails}/{BATTERIES} (at most 1 allowed), slowest battery {:.0}s\n    {}",
            slowest.as_secs_f64(),
            lines.join("\n    ")
        ),
    )
}

fn ablation() -> Outcome {
    let cfg = tiny_config(&[
        "trainer.seeds=1",
        "ablate.levels=baseline,fl,fl_fp,fl_fp_fa",
        "ablate.subsets=D,DS,DSA",
        "ablate.orders=SAD,SDA,ASD,ADS,DSA,DAS",
        "ablate.variants=cop",
    ]);
    let first = ablation_csv(&run_ablation_grid(&cfg, jobs()).unwrap());
    let second = ablation_csv(&run_ablation_grid(&cfg, 1).unwrap());
    let rows: Vec<String> =
        first.lines().skip(1).map(|l| l.split(',').take(4).collect::<Vec<_>>().join(",")).collect();
    let got: BTreeSet<&String> = rows.iter().collect();
    let want: BTreeSet<String> = grid_cells(&cfg)
        .iter()
        .map(|c| {
            let letters = |a: &[cop3d::cop::Attribute]| a.iter().map(|x| x.letter()).collect::<String>();
            format!("{},{},{},{}", c.level.name(), letters(&c.subset), letters(&c.order), c.variant.name())
        })
        .collect();
    let matches = got.len() == rows.len() && got.into_iter().cloned().collect::<BTreeSet<_>>() == want;
    outcome(
        matches && first == second && rows.len() == 4 * 3 * 6,
        format!(
            "{} rows for 4 levels x 3 subsets x 6 orders, row set matches: {matches}, repeat identical: {}",
            rows.len(),
            first == second
        ),
    )
}

fn kitti() -> Outcome {
    let mut rng = Rng::new(11);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let label = support::random_label(&mut rng);
        let line = format_label_line(&label, DEFAULT_PRECISION);
        let parsed = match parse_label_line(&line) {
            Ok(p) => p,
            Err(e) => {
                failures.push(format!("label {i}: {e}"));
                continue;
            }
        };
        if let Some(m) = support::quantized_mismatch(&parsed, &label) {
            failures.push(format!("label {i}: {m}"));
        }
        if parse_label_line(&format_label_line(&parsed, DEFAULT_PRECISION)).ok().as_ref() != Some(&parsed) {
            failures.push(format!("label {i}: second parse differs"));
        }
    }
    let dataset = make_dataset(&SceneConfig::default(), &default_priors(), 60, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (worst, count) = support::kitti_round_trip_error(&dataset, dir.path());
    outcome(
        failures.is_empty() && worst <= 1e-2 && count == dataset.len(),
        format!(
            "{} of 1000 fuzzed labels fail the round trip{}, export/import of {count} objects deviates at most {worst:.4}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn correlation() -> Outcome {
    let mut rng = Rng::new(1);
    let (mut worst, mut affine) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.int_inclusive(3, 200);
        let (a, b) = support::random_series(&mut rng, n);
        let r = pearson(&a, &b).unwrap();
        worst = worst.max((r - support::pearson_oracle(&a, &b)).abs());
        let (scale, shift) = (rng.range(0.1, 10.0), rng.range(-50.0, 50.0));
        let up: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
        let down: Vec<f64> = a.iter().map(|v| -scale * v + shift).collect();
        affine = affine.max((pearson(&up, &b).unwrap() - r).abs()).max((pearson(&down, &b).unwrap() + r).abs());
    }
    outcome(
        worst < 1e-12 && affine < 1e-9,
        format!("largest gap to the two-pass oracle {worst:.1e} over 100 series, affine drift {affine:.1e}"),
    )
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_cop3d");
    let root = tempfile::tempdir().unwrap();
    let small = [
        "--set", "data.n_scenes=24", "--set", "trainer.epochs=3", "--set", "trainer.lr_decay_epochs=2",
        "--set", "chain.query_dim=8", "--set", "chain.hidden_dim=8",
    ];
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).env("COP3D_NO_COLOR", "1").output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for (cmd, extra) in [("gen", vec![]), ("train", vec!["--seed-list", "4"]), ("battery", vec!["--seed-list", "1,2"])] {
        let first = root.path().join(format!("{cmd}_a"));
        let second = root.path().join(format!("{cmd}_b"));
        let mut args = vec![cmd, "--out", first.to_str().unwrap()];
        args.extend(&extra);
        args.extend(small);
        run(&args);
        let cfg = first.join("resolved_config.txt");
        run(&[cmd, "--config", cfg.to_str().unwrap(), "--out", second.to_str().unwrap()]);
        let (a, b) = (files(&first), files(&second));
        if a.len() != b.len() {
            mismatches.push(format!("{cmd}: {} vs {} files", a.len(), b.len()));
            continue;
        }
        for (x, y) in a.iter().zip(&b) {
            checked += 1;
            if x.strip_prefix(&first).unwrap() != y.strip_prefix(&second).unwrap()
                || std::fs::read(x).unwrap() != std::fs::read(y).unwrap()
            {
                mismatches.push(format!("{cmd}: {}", x.display()));
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        format!(
            "{checked} output files of gen, train and battery re-run from resolved_config.txt, {} differ{}",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("coupling derivative", coupling),
        ("gradient fidelity", gradient),
        ("residual identity", residual_identity),
        ("hungarian optimality", hungarian_optimal),
        ("iou3d", iou),
        ("ap40", ap),
        ("cop vs parallel", headline),
        ("ablation grid", ablation),
        ("kitti io", kitti),
        ("pearson", correlation),
        ("determinism", determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        println!(
            "criterion {:>2} {} {name} [{:.1}s]: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        failed += (!o.pass) as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

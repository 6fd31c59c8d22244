use super::*;
use crate::geometry::Dims;
use crate::micronet::gradcheck::compare_with_finite_differences;
use crate::micronet::loss::squared_error;

fn decoder() -> Decoder {
    Decoder {
        prior_dims: [
            Dims::new(1.6, 1.5, 3.9),
            Dims::new(0.6, 1.75, 0.8),
            Dims::new(0.6, 1.7, 1.8),
        ],
        depth_scale: 20.0,
    }
}

fn config(variant: Variant, order: &str, residual: bool, chains: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 9,
        trunk_hidden: 16,
        dropout: 0.0,
        bias: true,
        chain: ChainConfig {
            attributes: parse_attributes(order).unwrap(),
            residual,
            chain_count: chains,
            variant,
            query_dim: 8,
            hidden_dim: 12,
        },
        decoder: decoder(),
    }
}

fn model(variant: Variant, order: &str, residual: bool, chains: usize, seed: u64) -> CopModel {
    CopModel::new(config(variant, order, residual, chains), &mut Rng::new(seed)).unwrap()
}

fn inputs(rows: usize, seed: u64) -> Matrix {
    let mut rng = Rng::new(seed);
    Matrix::from_vec(rows, 9, (0..rows * 9).map(|_| rng.normal()).collect()).unwrap()
}

fn zero_all_nets(m: &mut CopModel) {
    for chain in m.chains.iter_mut() {
        for net in chain.iter_mut() {
            net.zero_output();
        }
    }
}

#[test]
fn attribute_net_identity_weights() {
    let mut first = LinearLayer::zeros(2, 2, true);
    first.weight = Matrix::identity(2);
    let mut second = LinearLayer::zeros(2, 2, true);
    second.weight = Matrix::identity(2);
    let an = AttributeNet::from_weights(first, second);
    let out = an.forward(&Matrix::row_vector(&[1.0, -1.0])).unwrap();
    assert_eq!(out.data(), &[1.0, 0.0]);
}

#[test]
fn attribute_net_zero_output_weights() {
    let mut an = AttributeNet::new(5, 7, true, &mut Rng::new(3));
    an.zero_output();
    let q = Matrix::row_vector(&[0.3, -2.0, 1.0, 4.0, -0.1]);
    assert!(an.forward(&q).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn attribute_net_matches_hand_composition() {
    let mut rng = Rng::new(17);
    let mut an = AttributeNet::new(6, 10, true, &mut rng);
    an.first_mut().bias.iter_mut().for_each(|b| *b = rng.normal());
    an.second_mut().bias.iter_mut().for_each(|b| *b = rng.normal());
    let q = Matrix::row_vector(&(0..6).map(|_| rng.normal()).collect::<Vec<_>>());
    let hidden = an.first_mut().forward(&q).unwrap().map(|v| v.max(0.0));
    let expected = an.second_mut().forward(&hidden).unwrap();
    assert_eq!(an.forward(&q).unwrap(), expected);
}

#[test]
fn residual_identity_with_zero_nets() {
    let mut m = model(Variant::Cop, "S,A,D", true, 1, 5);
    zero_all_nets(&mut m);
    let q = m.query(&inputs(4, 1)).unwrap();
    let t = m.chain_forward(0, &q).unwrap();
    for f in &t.features {
        assert_eq!(f, &q);
    }
}

#[test]
fn no_residual_zero_nets_give_zero_features() {
    let mut m = model(Variant::Cop, "S,A,D", false, 1, 5);
    zero_all_nets(&mut m);
    let q = m.query(&inputs(4, 1)).unwrap();
    let t = m.chain_forward(0, &q).unwrap();
    for f in &t.features {
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn identical_chains_average_to_single_chain() {
    let single = model(Variant::Cop, "S,A,D", true, 1, 8);
    let mut double = model(Variant::Cop, "S,A,D", true, 2, 8);
    double.chains[1] = double.chains[0].clone();
    let x = inputs(5, 2);
    assert_eq!(single.trunk, double.trunk);
    assert_eq!(single.predict_raw(&x).unwrap(), double.predict_raw(&x).unwrap());
}

#[test]
fn chain_order_changes_depth_input() {
    let forward = model(Variant::Cop, "S,A,D", true, 1, 21);
    let reverse = model(Variant::Cop, "D,A,S", true, 1, 21);
    let q = forward.query(&inputs(3, 4)).unwrap();
    let a = forward.chain_forward(0, &q).unwrap();
    let b = reverse.chain_forward(0, &q).unwrap();
    let d = Attribute::Depth.index();
    assert!(a.features[d]
        .data()
        .iter()
        .zip(b.features[d].data())
        .any(|(x, y)| x != y));
}

#[test]
fn all_six_orders_constructible() {
    let orders = ["S,A,D", "S,D,A", "A,S,D", "A,D,S", "D,S,A", "D,A,S"];
    let x = inputs(2, 9);
    for order in orders {
        let m = model(Variant::Cop, order, true, 1, 1);
        assert_eq!(format_attributes(&m.config.chain.attributes), order);
        let raw = m.predict_raw(&x).unwrap();
        assert!(raw.is_finite());
    }
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = config(Variant::Cop, "S,A,D", true, 1);
    cfg.chain.attributes.clear();
    assert!(matches!(CopModel::new(cfg, &mut Rng::new(0)), Err(CopError::InvalidConfig(_))));
    let mut cfg = config(Variant::Cop, "S,A,D", true, 1);
    cfg.chain.attributes.push(Attribute::Size);
    assert!(CopModel::new(cfg, &mut Rng::new(0)).is_err());
    let cfg = config(Variant::Cop, "S,A,D", true, 4);
    assert!(CopModel::new(cfg, &mut Rng::new(0)).is_err());
    assert!(parse_attributes("S,X").is_err());
}

/// Depth output after perturbing one net's first-layer weights.
fn depth_after_perturbing(order: &str, target: Attribute) -> (Matrix, Matrix) {
    let base = model(Variant::Cop, order, true, 1, 33);
    let mut perturbed = base.clone();
    perturbed.chains[0][target.index()]
        .first_mut()
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|w| *w += 0.05);
    let x = inputs(6, 12);
    (base.predict_raw(&x).unwrap().depth, perturbed.predict_raw(&x).unwrap().depth)
}

#[test]
fn depth_conditioned_only_on_earlier_attributes() {
    for target in [Attribute::Size, Attribute::Angle] {
        let (a, b) = depth_after_perturbing("S,A,D", target);
        assert_ne!(a, b, "{target:?} precedes depth and must influence it");
        let (a, b) = depth_after_perturbing("D,S,A", target);
        assert_eq!(a, b, "{target:?} follows depth and must not influence it");
    }
}

#[test]
fn variants_coincide_when_nets_and_embeddings_are_zero() {
    let x = inputs(4, 6);
    let mut outputs = Vec::new();
    for variant in [Variant::Baseline, Variant::Parallel, Variant::Cop, Variant::CoopEmbed] {
        let mut m = model(variant, "S,A,D", true, 1, 44);
        zero_all_nets(&mut m);
        outputs.push(m.predict_raw(&x).unwrap());
    }
    for o in &outputs[1..] {
        assert_eq!(o, &outputs[0]);
    }
}

#[test]
fn propagation_changes_depth_relative_to_parallel() {
    let cop = model(Variant::Cop, "S,A,D", true, 1, 50);
    let parallel = model(Variant::Parallel, "S,A,D", true, 1, 50);
    let x = inputs(4, 7);
    let angle_out = cop.chains[0][Attribute::Angle.index()]
        .forward(&cop.query(&x).unwrap())
        .unwrap();
    assert!(angle_out.data().iter().any(|&v| v != 0.0));
    assert_ne!(cop.predict_raw(&x).unwrap().depth, parallel.predict_raw(&x).unwrap().depth);
}

#[test]
fn coop_zero_embeddings_equal_baseline() {
    let x = inputs(3, 3);
    let base = model(Variant::Baseline, "S,A,D", true, 1, 2);
    let coop = model(Variant::CoopEmbed, "S,A,D", true, 1, 2);
    assert_eq!(base.predict_raw(&x).unwrap(), coop.predict_raw(&x).unwrap());
}

#[test]
fn param_layout_consistent() {
    for variant in [Variant::Baseline, Variant::Parallel, Variant::Cop, Variant::CoopEmbed, Variant::Htl] {
        let mut m = model(variant, "S,D", true, 2, 1);
        let shapes = m.param_shapes();
        let lens: Vec<usize> = m.params().iter().map(|p| p.len()).collect();
        assert_eq!(lens, shapes.iter().map(|(r, c)| r * c).collect::<Vec<_>>());
        assert_eq!(m.params_mut().len(), shapes.len());
    }
}

fn squared_loss(raw: &RawOutputs, target: &RawOutputs) -> (f64, RawOutputs) {
    let pieces: Vec<(f64, Matrix)> = raw
        .matrices()
        .iter()
        .zip(target.matrices())
        .map(|(p, t)| {
            let lg = squared_error(p.data(), t.data()).unwrap();
            (lg.loss, Matrix::from_vec(p.rows(), p.cols(), lg.grad).unwrap())
        })
        .collect();
    let total = pieces.iter().map(|p| p.0).sum();
    let mut it = pieces.into_iter().map(|p| p.1);
    let grad = RawOutputs {
        class: it.next().unwrap(),
        box2d: it.next().unwrap(),
        center: it.next().unwrap(),
        size: it.next().unwrap(),
        angle: it.next().unwrap(),
        depth: it.next().unwrap(),
    };
    (total, grad)
}

#[test]
fn model_gradients_match_finite_differences() {
    let cases = [
        (Variant::Cop, "S,A,D", true, 1),
        (Variant::Cop, "A,D", false, 2),
        (Variant::Parallel, "S,A,D", true, 1),
        (Variant::CoopEmbed, "D,S", true, 1),
        (Variant::Baseline, "S,A,D", true, 1),
    ];
    for (i, (variant, order, residual, chains)) in cases.into_iter().enumerate() {
        let mut m = model(variant, order, residual, chains, 100 + i as u64);
        if variant == Variant::CoopEmbed {
            let mut rng = Rng::new(7);
            for e in m.embeddings.iter_mut() {
                e.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
            }
        }
        let x = inputs(3, 200 + i as u64);
        let mut target = m.predict_raw(&x).unwrap();
        let mut rng = Rng::new(300);
        for mat in [&mut target.class, &mut target.size, &mut target.depth, &mut target.angle] {
            mat.data_mut().iter_mut().for_each(|v| *v += rng.normal());
        }
        let (raw, trace) = m.forward(&x, false, &mut Rng::new(0)).unwrap();
        let (_, grad) = squared_loss(&raw, &target);
        let analytic = m.flatten_grads(&m.backward(&trace, &grad).unwrap());
        assert_eq!(analytic.len(), m.params().len());
        let report = compare_with_finite_differences(
            &m,
            &analytic,
            1e-5,
            |m| m.params_mut(),
            |m| squared_loss(&m.predict_raw(&x).unwrap(), &target).0,
        );
        assert!(report.passes(1e-4), "{variant:?} {order}: {report}");
    }
}

use super::*;
use crate::network::{Layer, NetworkGraph};
use crate::tensor::Rng;

fn identity_model(d: usize) -> SimilarityModel {
    SimilarityModel::new(NetworkGraph::new(vec![d], vec![]).unwrap())
}

fn dense_relu_model(rng: &mut Rng, dims: &[usize]) -> SimilarityModel {
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        layers.push(Layer::Dense {
            weight: rng.normal_tensor(&[w[0], w[1]]).scale(1.0 / (w[0] as f64).sqrt()),
            bias: None,
        });
        layers.push(Layer::ReLU);
    }
    layers.pop(); // linear top layer
    SimilarityModel::new(NetworkGraph::new(vec![dims[0]], layers).unwrap())
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn bilrp_identity_network() {
    let model = identity_model(2);
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let xp = Tensor::from_vec(vec![3.0, 4.0]);
    let r = bilrp(&model, &x, &xp, &GammaSchedule::uniform(0.0)).unwrap();
    let dense = r.values();
    assert_eq!(dense.data(), &[3.0, 0.0, 0.0, 8.0]);
    assert_eq!(r.total(), 11.0);
    assert_eq!(r.meta().similarity, Some(11.0));
}

#[test]
fn bilrp_zero_branch_gives_zero_explanation() {
    let net = NetworkGraph::new(
        vec![2],
        vec![
            Layer::Dense {
                weight: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                bias: None,
            },
            Layer::ReLU,
        ],
    )
    .unwrap();
    let model = SimilarityModel::new(net);
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let xp = Tensor::from_vec(vec![-1.0, -2.0]); // phi(xp) = 0
    let r = bilrp(&model, &x, &xp, &GammaSchedule::uniform(0.1)).unwrap();
    assert!(r.values().data().iter().all(|&v| v == 0.0));
}

#[test]
fn bilrp_is_symmetric_under_argument_swap() {
    let mut rng = Rng::new(21);
    let model = dense_relu_model(&mut rng, &[3, 5, 4]);
    let x = rng.normal_tensor(&[3]);
    let xp = rng.normal_tensor(&[3]);
    let sched = GammaSchedule::uniform(0.09);
    let fwd = bilrp(&model, &x, &xp, &sched).unwrap().values();
    let swapped = bilrp(&model, &xp, &x, &sched).unwrap().values();
    assert_eq!(fwd, swapped.transpose().unwrap());
}

#[test]
fn direct_matches_factored_on_identity() {
    let model = identity_model(3);
    let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
    let xp = Tensor::from_vec(vec![0.0, 1.0, 2.0]);
    let sched = GammaSchedule::uniform(0.0);
    let a = bilrp(&model, &x, &xp, &sched).unwrap().values();
    let b = bilrp_direct(&model, &x, &xp, &sched).unwrap().values();
    assert_eq!(a, b);
}

#[test]
fn direct_matches_factored_on_small_mlp() {
    let mut rng = Rng::new(77);
    let model = dense_relu_model(&mut rng, &[3, 4, 2]);
    for gamma in [0.0, 0.09, 0.5] {
        let sched = GammaSchedule::uniform(gamma);
        for trial in 0..20 {
            let x = rng.normal_tensor(&[3]);
            let xp = rng.normal_tensor(&[3]);
            let a = bilrp(&model, &x, &xp, &sched).unwrap().values();
            let b = bilrp_direct(&model, &x, &xp, &sched).unwrap().values();
            let diff = max_abs_diff(&a, &b);
            assert!(diff < 1e-8, "gamma {gamma} trial {trial}: diff {diff}");
        }
    }
}

#[test]
fn direct_single_layer_matches_hand_evaluation() {
    // Dense 2->2 with ReLU; second output deactivates for x.
    let weight = Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap();
    let net = NetworkGraph::new(
        vec![2],
        vec![
            Layer::Dense {
                weight,
                bias: None,
            },
            Layer::ReLU,
        ],
    )
    .unwrap();
    let model = SimilarityModel::new(net);
    let x = Tensor::from_vec(vec![1.0, 1.0]);
    let xp = Tensor::from_vec(vec![1.0, 2.0]);
    // activations: a = (2, 0), a' = (3, 1); only unit 0 carries pair relevance
    // R_00 = 6, redistributed as outer((x_j w_j0)/2, (x'_j w_j0)/3) * 6.
    let expect = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    let sched = GammaSchedule::uniform(0.0);
    let direct = bilrp_direct(&model, &x, &xp, &sched).unwrap().values();
    assert!(max_abs_diff(&direct, &expect) < 1e-12);
    let factored = bilrp(&model, &x, &xp, &sched).unwrap().values();
    assert!(max_abs_diff(&factored, &expect) < 1e-12);
}

#[test]
fn direct_cap_is_enforced() {
    let mut rng = Rng::new(5);
    let model = dense_relu_model(&mut rng, &[4, 65, 2]);
    let x = rng.normal_tensor(&[4]);
    let xp = rng.normal_tensor(&[4]);
    match bilrp_direct(&model, &x, &xp, &GammaSchedule::uniform(0.0)) {
        Err(Error::SizeCapExceeded { units: 65, cap }) => assert_eq!(cap, DIRECT_UNIT_CAP),
        other => panic!("expected size cap error, got {other:?}"),
    }
}

#[test]
fn hp_on_linear_model_matches_closed_form() {
    // phi_k = sum_j x_j w_jk, so Hessian = W W^T in the (j, j') indexing.
    let weight = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let net = NetworkGraph::new(
        vec![2],
        vec![Layer::Dense {
            weight: weight.clone(),
            bias: None,
        }],
    )
    .unwrap();
    let model = SimilarityModel::new(net);
    let x = Tensor::from_vec(vec![0.5, -1.5]);
    let xp = Tensor::from_vec(vec![2.0, 1.0]);
    let hp = hessian_product(&model, &x, &xp).unwrap().values();
    let gram = crate::tensor::matmul(&weight, &weight.transpose().unwrap()).unwrap();
    for i in 0..2 {
        for ip in 0..2 {
            let expect = gram.data()[i * 2 + ip] * x.data()[i] * xp.data()[ip];
            assert!((hp.data()[i * 2 + ip] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn hp_is_conservative_on_zero_bias_relu_net() {
    let mut rng = Rng::new(31);
    let model = dense_relu_model(&mut rng, &[4, 6, 3]);
    for _ in 0..10 {
        let x = rng.normal_tensor(&[4]);
        let xp = rng.normal_tensor(&[4]);
        let hp = hessian_product(&model, &x, &xp).unwrap();
        let y = model.similarity(&x, &xp).unwrap();
        assert!((hp.total() - y).abs() < 1e-8, "{} vs {}", hp.total(), y);
    }
}

#[test]
fn hp_requires_zero_bias() {
    let net = NetworkGraph::new(
        vec![1],
        vec![Layer::Dense {
            weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            bias: Some(Tensor::from_vec(vec![0.5])),
        }],
    )
    .unwrap();
    let model = SimilarityModel::new(net);
    let x = Tensor::from_vec(vec![1.0]);
    assert!(hessian_product(&model, &x, &x).is_err());
    assert!(curvature(&model, &x, &x).is_err());
}

#[test]
fn saliency_hand_case() {
    let x = Tensor::from_vec(vec![1.0, 0.0]);
    let xp = Tensor::from_vec(vec![0.0, 2.0]);
    let r = saliency(&x, &xp).values();
    assert_eq!(r.data(), &[0.0, 4.0, 0.0, 0.0]);
}

#[test]
fn saliency_is_nonnegative_and_zero_on_zero_input() {
    let mut rng = Rng::new(8);
    let x = rng.normal_tensor(&[5]);
    let xp = rng.normal_tensor(&[4]);
    let r = saliency(&x, &xp).values();
    assert!(r.data().iter().all(|&v| v >= 0.0));
    let z = saliency(&Tensor::zeros(&[5]), &xp).values();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn curvature_on_linear_model_is_squared_gram() {
    let weight = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let net = NetworkGraph::new(
        vec![2],
        vec![Layer::Dense {
            weight: weight.clone(),
            bias: None,
        }],
    )
    .unwrap();
    let model = SimilarityModel::new(net);
    let x = Tensor::from_vec(vec![0.5, -1.5]);
    let xp = Tensor::from_vec(vec![2.0, 1.0]);
    let c = curvature(&model, &x, &xp).unwrap().values();
    let gram = crate::tensor::matmul(&weight, &weight.transpose().unwrap()).unwrap();
    for i in 0..4 {
        let expect = gram.data()[i] * gram.data()[i];
        assert!((c.data()[i] - expect).abs() < 1e-12);
        assert!(c.data()[i] >= 0.0);
    }
}

#[test]
fn coarse_grain_singletons_is_identity() {
    let mut rng = Rng::new(3);
    let values = rng.normal_tensor(&[3, 4]);
    let meta = saliency(&Tensor::zeros(&[3]), &Tensor::zeros(&[4]))
        .meta()
        .clone();
    let r = PairwiseExplanation::from_dense(values.clone(), meta).unwrap();
    let pooled = coarse_grain(&r, &Partition::singletons(3), &Partition::singletons(4)).unwrap();
    assert_eq!(pooled.values(), values);
}

#[test]
fn coarse_grain_single_group_sums_everything() {
    let values = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let meta = saliency(&Tensor::zeros(&[2]), &Tensor::zeros(&[2]))
        .meta()
        .clone();
    let r = PairwiseExplanation::from_dense(values, meta).unwrap();
    let one = Partition::new(vec![vec![0, 1]]).unwrap();
    let pooled = coarse_grain(&r, &one, &one).unwrap();
    assert_eq!(pooled.values().data(), &[10.0]);
}

#[test]
fn invalid_partitions_are_rejected() {
    assert!(Partition::new(vec![vec![0], vec![0]]).is_err());
    assert!(Partition::new(vec![vec![]]).is_err());
    let p = Partition::new(vec![vec![0, 1]]).unwrap();
    assert!(p.validate_for(3).is_err()); // not exhaustive
    let q = Partition::new(vec![vec![0, 5]]).unwrap();
    assert!(q.validate_for(2).is_err()); // out of range
}

#[test]
fn acs_reference_values() {
    let gt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let meta = saliency(&Tensor::zeros(&[2]), &Tensor::zeros(&[2]))
        .meta()
        .clone();
    let same = PairwiseExplanation::from_dense(gt.clone(), meta.clone()).unwrap();
    assert!((acs(&[same.clone()], &[gt.clone()]).unwrap() - 1.0).abs() < 1e-12);

    let negated = PairwiseExplanation::from_dense(gt.scale(-1.0), meta.clone()).unwrap();
    assert!((acs(&[negated], &[gt.clone()]).unwrap() + 1.0).abs() < 1e-12);

    let ortho = PairwiseExplanation::from_dense(
        Tensor::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap(),
        meta.clone(),
    )
    .unwrap();
    assert!(acs(&[ortho], &[gt.clone()]).unwrap().abs() < 1e-12);

    let zero = PairwiseExplanation::from_dense(Tensor::zeros(&[2, 2]), meta.clone()).unwrap();
    let half = acs(&[zero, same], &[gt.clone(), gt.clone()]).unwrap();
    assert!((half - 0.5).abs() < 1e-12);

    assert!(acs(&[], &[]).is_err());
    let bad_gt = Tensor::zeros(&[2, 2]);
    let expl = PairwiseExplanation::from_dense(gt.clone(), meta).unwrap();
    assert!(acs(&[expl], &[bad_gt]).is_err());
}

#[test]
fn linear_model_explanation_scales_with_input() {
    let mut rng = Rng::new(12);
    let weight = rng.normal_tensor(&[3, 4]);
    let net = NetworkGraph::new(vec![3], vec![Layer::Dense { weight, bias: None }]).unwrap();
    let model = SimilarityModel::new(net);
    let x = rng.normal_tensor(&[3]);
    let xp = rng.normal_tensor(&[3]);
    let sched = GammaSchedule::uniform(0.0);
    let base = bilrp(&model, &x, &xp, &sched).unwrap().values();
    for s in [2.0, 0.5] {
        let scaled = bilrp(&model, &x.scale(s), &xp, &sched).unwrap().values();
        assert_eq!(scaled, base.scale(s)); // powers of two scale exactly
    }
    let scaled3 = bilrp(&model, &x.scale(3.0), &xp, &sched).unwrap().values();
    for (a, b) in scaled3.data().iter().zip(base.scale(3.0).data()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn explanation_file_roundtrip() {
    let mut rng = Rng::new(44);
    let model = dense_relu_model(&mut rng, &[3, 4, 2]);
    let x = rng.normal_tensor(&[3]);
    let xp = rng.normal_tensor(&[3]);
    let sched = GammaSchedule::uniform(0.09).with_layer(0, 0.5);
    let expl = bilrp(&model, &x, &xp, &sched).unwrap();
    let bytes = save_explanation(&expl);
    let back = load_explanation(&bytes).unwrap();
    assert!(back.is_factored());
    assert_eq!(back.values(), expl.values());
    assert_eq!(back.meta().method, Method::BiLrp);
    assert_eq!(back.meta().similarity, expl.meta().similarity);
    assert_eq!(back.meta().gamma.as_ref().unwrap(), &sched);

    let hp = hessian_product(&model, &x, &xp).unwrap();
    let back = load_explanation(&save_explanation(&hp)).unwrap();
    assert!(!back.is_factored());
    assert_eq!(back.values(), hp.values());
}

#[test]
fn explanation_file_rejects_unknown_method_and_version() {
    let doc = r#"{"format_version": 1, "method": "shapley", "shape_x": [1], "shape_xprime": [1],
        "gamma_schedule": null, "factors": null,
        "dense": {"shape": [1, 1], "data": "AAAAAAAA8D8="},
        "similarity_value": null, "model_hash": null}"#;
    assert!(matches!(
        load_explanation(doc.as_bytes()),
        Err(Error::UnsupportedKind(_))
    ));
    let doc2 = doc.replace("\"format_version\": 1", "\"format_version\": 7");
    assert!(matches!(
        load_explanation(doc2.as_bytes()),
        Err(Error::UnsupportedVersion(7))
    ));
}

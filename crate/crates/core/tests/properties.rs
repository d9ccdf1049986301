//! Cross-module properties on randomized small architectures.

mod common;

use bilrp::explain::{bilrp, bilrp_direct};
use bilrp::lrp::{lrp_explain, GammaSchedule, InputRule};
use bilrp::network::{gradient, load_model, save_model};
use bilrp::{Rng, SimilarityModel, Tensor};
use common::*;

#[test]
fn reverse_mode_gradient_matches_finite_differences() {
    let mut rng = Rng::new(1001);
    for idx in 0..TEMPLATE_COUNT {
        let net = model_from_menu(&mut rng, idx);
        for _ in 0..3 {
            let x = input_off_hinges(&mut rng, &net, 1e-2);
            let h = net.output_len();
            for m in [0, h / 2, h - 1] {
                let g = gradient(&net, &x, m).unwrap();
                let fd = fd_gradient(&net, &x, m, 1e-5);
                let diff = max_abs_diff(&g, &fd);
                assert!(diff < 1e-5, "template {idx}, unit {m}: diff {diff}");
            }
        }
    }
}

#[test]
fn euler_identity_on_zero_bias_nets() {
    let mut rng = Rng::new(1002);
    for idx in 0..TEMPLATE_COUNT {
        let net = model_from_menu(&mut rng, idx);
        for _ in 0..5 {
            let x = random_input(&mut rng, net.input_shape());
            let phi = net.features(&x).unwrap();
            for m in 0..net.output_len() {
                let g = gradient(&net, &x, m).unwrap();
                let euler: f64 = x.dot(&g).unwrap();
                assert!(
                    (euler - phi.at(m)).abs() < 1e-8,
                    "template {idx} unit {m}: {euler} vs {}",
                    phi.at(m)
                );
            }
        }
    }
}

#[test]
fn positive_homogeneity_of_zero_bias_graphs() {
    let mut rng = Rng::new(1003);
    for idx in 0..TEMPLATE_COUNT {
        let net = model_from_menu(&mut rng, idx);
        let x = random_input(&mut rng, net.input_shape());
        let phi = net.features(&x).unwrap();
        for t in [0.5, 2.0, 3.0] {
            let scaled = net.features(&x.scale(t)).unwrap();
            for (s, p) in scaled.data().iter().zip(phi.data()) {
                let want = t * p;
                let rel = (s - want).abs() / want.abs().max(1e-12);
                assert!(
                    rel < 1e-9 || (s - want).abs() < 1e-12,
                    "template {idx}, t = {t}: {s} vs {want}"
                );
            }
        }
    }
}

#[test]
fn relevance_columns_conserve_their_unit_activation() {
    let mut rng = Rng::new(1004);
    for idx in 0..TEMPLATE_COUNT {
        let net = model_from_menu(&mut rng, idx);
        let x = random_input(&mut rng, net.input_shape());
        let phi = net.features(&x).unwrap();
        for gamma in [0.0, 0.1, 0.5] {
            let f = lrp_explain(&net, &x, &GammaSchedule::uniform(gamma)).unwrap();
            if f.diagnostics().zero_denominator_drops > 0 {
                continue; // dropped relevance is reported, not conserved
            }
            for m in 0..net.output_len() {
                let got = f.column_sum(m);
                assert!(
                    (got - phi.at(m)).abs() < 1e-8,
                    "template {idx}, gamma {gamma}, unit {m}: {got} vs {}",
                    phi.at(m)
                );
            }
        }
    }
}

#[test]
fn relevance_factors_scale_covariantly() {
    let mut rng = Rng::new(1005);
    for idx in 0..TEMPLATE_COUNT {
        let net = model_from_menu(&mut rng, idx);
        let x = random_input(&mut rng, net.input_shape());
        let sched = GammaSchedule::uniform(0.09);
        let base = lrp_explain(&net, &x, &sched).unwrap();
        for t in [0.5, 2.0] {
            let scaled = lrp_explain(&net, &x.scale(t), &sched).unwrap();
            let want = base.values().scale(t);
            let rel = scaled
                .values()
                .data()
                .iter()
                .zip(want.data())
                .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
                .fold(0.0, f64::max);
            assert!(rel < 1e-9, "template {idx}, t = {t}: rel {rel}");
        }
    }
}

#[test]
fn gamma_zero_factors_equal_gradient_times_input() {
    let mut rng = Rng::new(1006);
    for idx in 0..TEMPLATE_COUNT {
        let net = model_from_menu(&mut rng, idx);
        let x = random_input(&mut rng, net.input_shape());
        let f = lrp_explain(&net, &x, &GammaSchedule::uniform(0.0)).unwrap();
        let h = net.output_len();
        for m in 0..h {
            let g = gradient(&net, &x, m).unwrap();
            for i in 0..x.len() {
                let gi = g.data()[i] * x.data()[i];
                let got = f.values().data()[i * h + m];
                assert!(
                    (got - gi).abs() < 1e-8,
                    "template {idx}, ({i},{m}): {got} vs {gi}"
                );
            }
        }
    }
}

#[test]
fn factored_and_direct_agree_with_box_input_rule() {
    let mut rng = Rng::new(1007);
    // template 0 starts with a dense layer, as the box rule requires
    let net = model_from_menu(&mut rng, 0);
    let model = SimilarityModel::new(net.clone());
    for _ in 0..10 {
        let x = random_input(&mut rng, net.input_shape()).map(|v| 0.5 + 0.4 * v.tanh());
        let xp = random_input(&mut rng, net.input_shape()).map(|v| 0.5 + 0.4 * v.tanh());
        let rule = InputRule::ZB {
            lower: Tensor::zeros(&[5]),
            upper: Tensor::new(vec![5], vec![1.0; 5]).unwrap(),
        };
        let sched = GammaSchedule::uniform(0.25).with_input_rule(rule);
        let fac = bilrp(&model, &x, &xp, &sched).unwrap().values();
        let dir = bilrp_direct(&model, &x, &xp, &sched).unwrap().values();
        let diff = max_abs_diff(&fac, &dir);
        assert!(diff < 1e-8, "diff {diff}");
    }
}

#[test]
fn model_files_roundtrip_across_the_menu() {
    let mut rng = Rng::new(1008);
    for idx in 0..TEMPLATE_COUNT {
        let net = model_from_menu(&mut rng, idx);
        let back = load_model(&save_model(&net)).unwrap();
        assert_eq!(back, net, "template {idx}");
        let x = random_input(&mut rng, net.input_shape());
        assert_eq!(
            net.features(&x).unwrap(),
            back.features(&x).unwrap(),
            "template {idx} forward drift"
        );
    }
}

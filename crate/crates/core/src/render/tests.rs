use super::*;
use crate::explain::{ExplanationMeta, Method, PairwiseExplanation};
use crate::tensor::Rng;

fn dense_expl(values: Tensor) -> PairwiseExplanation {
    let (d, dp) = (values.shape()[0], values.shape()[1]);
    let meta = ExplanationMeta {
        method: Method::BiLrp,
        shape_x: vec![d],
        shape_xp: vec![dp],
        model_hash: None,
        gamma: None,
        input_ids: None,
        similarity: None,
    };
    PairwiseExplanation::from_dense(values, meta).unwrap()
}

#[test]
fn worked_single_cell_example() {
    // R = [[0.5]], l = 0, h = 1, p = 1: normalization brings it to 1.0 and
    // the single connection is red at full opacity.
    let r = dense_expl(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let params = RenderParams::new(1, 0.0, 1.0, 1.0).unwrap();
    let list = render(&r, &params, (1, 1), (1, 1)).unwrap();
    assert_eq!(list.entries.len(), 1);
    let c = list.entries[0];
    assert_eq!(c.color, ConnectionColor::Red);
    assert_eq!(c.opacity, 1.0);
    assert_eq!((c.group_a, c.group_b), (0, 0));
}

#[test]
fn all_zero_explanation_renders_empty() {
    let r = dense_expl(Tensor::zeros(&[4, 4]));
    let params = RenderParams::new(2, 0.25, 13.0, 2.0).unwrap();
    let list = render(&r, &params, (2, 2), (2, 2)).unwrap();
    assert!(list.entries.is_empty());
}

#[test]
fn sign_maps_to_color() {
    let mut values = Tensor::zeros(&[2, 2]);
    values.data_mut()[0] = 5.0;
    values.data_mut()[3] = -5.0;
    let r = dense_expl(values);
    let params = RenderParams::new(1, 0.1, 2.0, 2.0).unwrap();
    let list = render(&r, &params, (1, 2), (1, 2)).unwrap();
    assert_eq!(list.entries.len(), 2);
    assert_eq!(list.entries[0].color, ConnectionColor::Red);
    assert_eq!(list.entries[1].color, ConnectionColor::Blue);
    // sorted by (group_a, group_b)
    assert!(list.entries[0].group_a <= list.entries[1].group_a);
}

#[test]
fn dyadic_scaling_leaves_connections_unchanged() {
    let mut rng = Rng::new(40);
    let values = rng.normal_tensor(&[6, 6]);
    let params = RenderParams::new(2, 0.25, 4.0, 2.0).unwrap();
    let base = render(&dense_expl(values.clone()), &params, (2, 3), (2, 3)).unwrap();
    for c in [2.0, 0.5, 4.0] {
        let scaled = render(&dense_expl(values.scale(c)), &params, (2, 3), (2, 3)).unwrap();
        assert_eq!(scaled, base, "scale {c}");
    }
    // non-dyadic scales agree up to rounding
    let scaled = render(&dense_expl(values.scale(3.0)), &params, (2, 3), (2, 3)).unwrap();
    assert_eq!(scaled.entries.len(), base.entries.len());
    for (a, b) in scaled.entries.iter().zip(&base.entries) {
        assert_eq!((a.group_a, a.group_b, a.color), (b.group_a, b.group_b, b.color));
        assert!((a.opacity - b.opacity).abs() < 1e-12);
    }
}

#[test]
fn opacity_is_monotone_in_shrunk_magnitude() {
    // recompute the pipeline by hand up to the opacity step and check that
    // larger surviving magnitudes never get smaller opacities
    let mut rng = Rng::new(41);
    let values = rng.normal_tensor(&[4, 4]).scale(3.0);
    let params = RenderParams::new(1, 0.25, 4.0, 2.0).unwrap();
    let list = render(&dense_expl(values.clone()), &params, (2, 2), (2, 2)).unwrap();

    let e4 = values.data().iter().map(|v| v.powi(4)).sum::<f64>() / 16.0;
    let norm = e4.sqrt().sqrt();
    let delta = params.h - params.l;
    let mut expected: Vec<(usize, f64)> = Vec::new();
    for (i, &v) in values.data().iter().enumerate() {
        let n = v / norm;
        let shrunk = n - n.clamp(-params.l, params.l);
        let scaled = (shrunk.clamp(-delta, delta) / delta).abs();
        if scaled != 0.0 {
            expected.push((i, scaled));
        }
    }
    assert_eq!(expected.len(), list.entries.len());
    for ((_, mag), conn) in expected.iter().zip(&list.entries) {
        assert!((conn.opacity - mag * mag).abs() < 1e-15);
    }
    let mut sorted = list.entries.clone();
    sorted.sort_by(|a, b| a.opacity.total_cmp(&b.opacity));
    for w in sorted.windows(2) {
        assert!(w[0].opacity <= w[1].opacity);
        assert!(w[1].opacity <= 1.0 && w[0].opacity > 0.0);
    }
}

#[test]
fn saturated_parameter_row_keeps_opacities_in_unit_interval() {
    // (pool 20, l = 0.01, h = 4, p = 2) on an aggressive explanation
    let mut rng = Rng::new(42);
    let values = rng.normal_tensor(&[40 * 40, 40 * 40]).scale(50.0);
    let r = dense_expl(values);
    let params = RenderParams::new(20, 0.01, 4.0, 2.0).unwrap();
    let list = render(&r, &params, (40, 40), (40, 40)).unwrap();
    assert!(!list.entries.is_empty());
    for c in &list.entries {
        assert!(c.opacity > 0.0 && c.opacity <= 1.0);
    }
}

#[test]
fn partial_trailing_blocks_are_allowed() {
    let values = Tensor::new(vec![6, 6], (0..36).map(|i| i as f64).collect()).unwrap();
    let r = dense_expl(values);
    let params = RenderParams::new(4, 0.0, 2.0, 1.0).unwrap();
    // 2x3 rasters with pool 4: a single partial block each
    let list = render(&r, &params, (2, 3), (2, 3)).unwrap();
    assert_eq!(list.entries.len(), 1);
}

#[test]
fn params_validation_and_parsing() {
    assert!(RenderParams::new(0, 0.0, 1.0, 1.0).is_err());
    assert!(RenderParams::new(1, 0.5, 0.5, 1.0).is_err());
    assert!(RenderParams::new(1, 0.0, 1.0, 0.5).is_err());
    let p = RenderParams::parse_tuple("8,0.25,13,2").unwrap();
    assert_eq!(p, RenderParams::new(8, 0.25, 13.0, 2.0).unwrap());
    assert!(RenderParams::parse_tuple("8,0.25,13").is_err());
    assert!(RenderParams::parse_tuple("a,b,c,d").is_err());
}

#[test]
fn svg_with_empty_connection_list_has_images_but_no_lines() {
    let a = Raster::Gray(Tensor::zeros(&[4, 4]));
    let b = Raster::Gray(Tensor::zeros(&[4, 4]));
    let layout = RenderLayout {
        shape_a: (4, 4),
        shape_b: (4, 4),
        pool: 2,
    };
    let svg = emit_svg(&ConnectionList::default(), &a, &b, &layout).unwrap();
    assert_eq!(svg.matches("<image").count(), 2);
    assert_eq!(svg.matches("<line").count(), 0);
}

#[test]
fn svg_single_red_full_opacity_stroke() {
    let list = ConnectionList {
        entries: vec![Connection {
            group_a: 0,
            group_b: 0,
            color: ConnectionColor::Red,
            opacity: 1.0,
        }],
    };
    let a = Raster::Gray(Tensor::zeros(&[2, 2]));
    let b = Raster::Gray(Tensor::zeros(&[2, 2]));
    let layout = RenderLayout {
        shape_a: (2, 2),
        shape_b: (2, 2),
        pool: 2,
    };
    let svg = emit_svg(&list, &a, &b, &layout).unwrap();
    assert_eq!(svg.matches("<line").count(), 1);
    assert!(svg.contains(r#"stroke="red" stroke-opacity="1""#));
}

#[test]
fn svg_is_byte_identical_for_identical_inputs() {
    let mut rng = Rng::new(50);
    let values = rng.normal_tensor(&[16, 16]);
    let r = dense_expl(values);
    let params = RenderParams::new(2, 0.1, 3.0, 2.0).unwrap();
    let list = render(&r, &params, (4, 4), (4, 4)).unwrap();
    let img = Raster::Gray(rng.normal_tensor(&[4, 4]));
    let layout = RenderLayout {
        shape_a: (4, 4),
        shape_b: (4, 4),
        pool: 2,
    };
    let one = emit_svg(&list, &img, &img, &layout).unwrap();
    let two = emit_svg(&list, &img, &img, &layout).unwrap();
    assert_eq!(one.as_bytes(), two.as_bytes());
}

#[test]
fn svg_rejects_layout_mismatch() {
    let a = Raster::Gray(Tensor::zeros(&[4, 4]));
    let b = Raster::Gray(Tensor::zeros(&[2, 2]));
    let layout = RenderLayout {
        shape_a: (4, 4),
        shape_b: (4, 4),
        pool: 2,
    };
    assert!(emit_svg(&ConnectionList::default(), &a, &b, &layout).is_err());

    let list = ConnectionList {
        entries: vec![Connection {
            group_a: 99,
            group_b: 0,
            color: ConnectionColor::Red,
            opacity: 0.5,
        }],
    };
    let b_ok = Raster::Gray(Tensor::zeros(&[4, 4]));
    assert!(emit_svg(&list, &a, &b_ok, &layout).is_err());
}

#[test]
fn png_raster_roundtrip_dims() {
    let gray = Raster::Gray(Tensor::new(vec![2, 3], vec![0.0, 0.5, 1.0, 0.2, 0.8, 0.4]).unwrap());
    let png_bytes = gray.png_bytes().unwrap();
    let png = Raster::Png(png_bytes);
    assert_eq!(png.dims().unwrap(), (2, 3));
}

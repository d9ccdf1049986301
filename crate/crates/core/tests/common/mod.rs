//! Shared helpers for the property and acceptance suites: a menu of small
//! zero-bias architectures covering every layer kind, and finite-difference
//! oracles independent of the library's reverse-mode code.

use bilrp::network::Layer;
use bilrp::{NetworkGraph, Rng, SimilarityModel, Tensor};

pub const TEMPLATE_COUNT: usize = 9;

/// Builds template `idx % TEMPLATE_COUNT` with weights drawn from `rng`.
/// Every template is zero-bias, at most five compute layers deep, and at
/// most 64 units wide (direct-propagation compatible).
pub fn model_from_menu(rng: &mut Rng, idx: usize) -> NetworkGraph {
    let dense = |rng: &mut Rng, i: usize, o: usize| Layer::Dense {
        weight: rng.normal_tensor(&[i, o]).scale(1.0 / (i as f64).sqrt()),
        bias: None,
    };
    let conv = |rng: &mut Rng, co: usize, ci: usize, k: usize| Layer::Conv2D {
        weight: rng
            .normal_tensor(&[co, ci, k, k])
            .scale(1.0 / (ci as f64 * (k * k) as f64).sqrt()),
        bias: None,
        stride: (1, 1),
    };
    let proj = |rng: &mut Rng, i: usize, o: usize| Layer::LinearProjection {
        weight: rng.normal_tensor(&[i, o]).scale(1.0 / (i as f64).sqrt()),
    };
    match idx % TEMPLATE_COUNT {
        0 => NetworkGraph::new(
            vec![5],
            vec![dense(rng, 5, 12), Layer::ReLU, dense(rng, 12, 8)],
        ),
        1 => NetworkGraph::new(
            vec![6],
            vec![
                dense(rng, 6, 16),
                Layer::ReLU,
                dense(rng, 16, 16),
                Layer::ReLU,
                dense(rng, 16, 4),
            ],
        ),
        2 => NetworkGraph::new(
            vec![1, 6, 6],
            vec![
                conv(rng, 2, 1, 3),
                Layer::ReLU,
                Layer::MaxPool {
                    window: vec![1, 2, 2],
                    stride: vec![1, 2, 2],
                },
                proj(rng, 8, 4),
            ],
        ),
        3 => NetworkGraph::new(
            vec![1, 5, 5],
            vec![
                conv(rng, 2, 1, 2),
                Layer::ReLU,
                Layer::MinPool {
                    window: vec![1, 2, 2],
                    stride: vec![1, 2, 2],
                },
                proj(rng, 8, 5),
            ],
        ),
        4 => NetworkGraph::new(
            vec![1, 6, 6],
            vec![
                conv(rng, 1, 1, 2),
                Layer::ReLU,
                Layer::Shift {
                    offset: vec![0, 1, -1],
                },
                Layer::SumPool {
                    window: vec![1, 2, 2],
                    stride: vec![1, 1, 1],
                },
                proj(rng, 16, 4),
            ],
        ),
        5 => NetworkGraph::new(
            vec![4, 3, 3],
            vec![
                Layer::BranchMax { branches: 2 },
                conv(rng, 2, 2, 2),
                Layer::ReLU,
                proj(rng, 8, 4),
            ],
        ),
        6 => NetworkGraph::new(
            vec![2, 4, 4],
            vec![
                conv(rng, 4, 2, 2),
                Layer::ReLU,
                Layer::BranchMax { branches: 2 },
                Layer::MaxPool {
                    window: vec![1, 2, 2],
                    stride: vec![1, 1, 1],
                },
                proj(rng, 8, 3),
            ],
        ),
        7 => NetworkGraph::new(
            vec![8],
            vec![
                dense(rng, 8, 12),
                Layer::ReLU,
                Layer::MinPool {
                    window: vec![3],
                    stride: vec![3],
                },
                dense(rng, 4, 4),
            ],
        ),
        _ => NetworkGraph::new(
            vec![6],
            vec![
                dense(rng, 6, 10),
                Layer::ReLU,
                Layer::Shift { offset: vec![2] },
                Layer::SumPool {
                    window: vec![2],
                    stride: vec![2],
                },
                dense(rng, 5, 3),
            ],
        ),
    }
    .expect("menu templates are well-formed")
}

pub fn random_input(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape)
}

/// Smallest distance to a non-differentiable point along the forward pass:
/// |pre-activation| at ReLUs, winner gaps at max/min pools and branch-max.
pub fn hinge_margin(net: &NetworkGraph, x: &Tensor) -> f64 {
    let acts = net.forward(x).expect("forward");
    let mut margin = f64::INFINITY;
    for (l, layer) in net.layers().iter().enumerate() {
        let a_in = &acts[l];
        match layer {
            Layer::ReLU => {
                for &v in a_in.data() {
                    margin = margin.min(v.abs());
                }
            }
            Layer::MaxPool { window, stride } | Layer::MinPool { window, stride } => {
                let out = layer.eval(a_in).expect("eval");
                pool_gaps(a_in, window, stride, &out, &mut margin);
            }
            Layer::BranchMax { branches } => {
                let block: usize = a_in.shape()[1..].iter().product();
                let groups = a_in.shape()[0] / branches;
                for q in 0..groups {
                    for r in 0..block {
                        let mut best = f64::NEG_INFINITY;
                        let mut second = f64::NEG_INFINITY;
                        for t in 0..*branches {
                            let v = a_in.data()[(q * branches + t) * block + r];
                            if v > best {
                                second = best;
                                best = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                        // exact ties come from jointly dead ReLU paths that
                        // stay constant under small perturbations; only a
                        // strictly separated runner-up marks a nearby kink
                        if second.is_finite() && second != best {
                            margin = margin.min(best - second);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

fn pool_gaps(a_in: &Tensor, window: &[usize], stride: &[usize], out: &Tensor, margin: &mut f64) {
    let mut k = 0usize;
    let mut cells = Vec::new();
    visit_pool_windows(a_in.shape(), window, stride, &mut cells, |win_cells| {
        let winner = out.data()[k];
        for &j in win_cells {
            let v = a_in.data()[j];
            if v != winner {
                *margin = margin.min((v - winner).abs());
            }
        }
        k += 1;
    });
}

/// Minimal re-implementation of pooling-window iteration for the oracles
/// (kept separate from the library's own traversal); windows are visited in
/// row-major output order, cells in row-major window order.
fn visit_pool_windows(
    in_shape: &[usize],
    window: &[usize],
    stride: &[usize],
    cells: &mut Vec<usize>,
    mut f: impl FnMut(&[usize]),
) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = (0..rank)
        .map(|d| (in_shape[d] - window[d]) / stride[d] + 1)
        .collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let decode = |mut flat: usize, dims: &[usize], scale: &dyn Fn(usize, usize) -> usize| {
        let mut acc = 0usize;
        for d in (0..rank).rev() {
            let v = flat % dims[d];
            flat /= dims[d];
            acc += scale(d, v);
        }
        acc
    };
    let out_total: usize = out_shape.iter().product();
    let win_total: usize = window.iter().product();
    for of in 0..out_total {
        let base = decode(of, &out_shape, &|d, v| v * stride[d] * in_strides[d]);
        cells.clear();
        for wf in 0..win_total {
            cells.push(base + decode(wf, window, &|d, v| v * in_strides[d]));
        }
        f(cells);
    }
}

/// Draws an input whose forward pass stays at least `margin` away from every
/// ReLU hinge and pooling tie. Panics after too many rejections.
pub fn input_off_hinges(rng: &mut Rng, net: &NetworkGraph, margin: f64) -> Tensor {
    for _ in 0..200 {
        let x = random_input(rng, net.input_shape());
        if hinge_margin(net, &x) > margin {
            return x;
        }
    }
    panic!("could not sample an input {margin} away from hinges");
}

/// Central-difference gradient of output unit `m`.
pub fn fd_gradient(net: &NetworkGraph, x: &Tensor, m: usize, step: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut hi = x.clone();
        hi.data_mut()[i] += step;
        let mut lo = x.clone();
        lo.data_mut()[i] -= step;
        let fhi = net.features(&hi).unwrap().at(m);
        let flo = net.features(&lo).unwrap().at(m);
        g.data_mut()[i] = (fhi - flo) / (2.0 * step);
    }
    g
}

/// Central-difference mixed partials of the similarity, `d^2 y / dx_i dx'_j`.
pub fn fd_mixed_hessian(model: &SimilarityModel, x: &Tensor, xp: &Tensor, step: f64) -> Tensor {
    let (d, dp) = (x.len(), xp.len());
    let mut out = Tensor::zeros(&[d, dp]);
    let y = |a: &Tensor, b: &Tensor| model.similarity(a, b).unwrap();
    for i in 0..d {
        for j in 0..dp {
            let mut xpp = x.clone();
            xpp.data_mut()[i] += step;
            let mut xpm = x.clone();
            xpm.data_mut()[i] -= step;
            let mut xqp = xp.clone();
            xqp.data_mut()[j] += step;
            let mut xqm = xp.clone();
            xqm.data_mut()[j] -= step;
            let v = y(&xpp, &xqp) - y(&xpp, &xqm) - y(&xpm, &xqp) + y(&xpm, &xqm);
            out.data_mut()[i * dp + j] = v / (4.0 * step * step);
        }
    }
    out
}

/// Maximum elementwise absolute difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.len());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

//! Reverse-mode differentiation through the layer chain.
//!
//! Two entry points: [`vjp`] pulls a single output cotangent back to the
//! input while accumulating parameter gradients (used by the trainer), and
//! [`input_jacobian`] propagates one cotangent column per output unit in a
//! single batched sweep, yielding the full `(d x h)` input Jacobian.
//!
//! ReLU uses the subgradient convention `d relu(0) = 0`; max/min pools and
//! branch-max route the cotangent to the lowest-flat-index winner on ties,
//! matching the forward pass and the relevance rules.

use crate::error::{Error, Result};
use crate::network::{
    conv_spatial, extreme_cell, for_each_pool_window, for_each_shift_pair, Layer, NetworkGraph,
};
use crate::tensor::{matmul, Tensor};

/// Gradients for one layer's parameters.
#[derive(Clone, Debug)]
pub(crate) struct LayerGrads {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Gradient of output unit `m` (flattened index) with respect to the input.
pub fn gradient(net: &NetworkGraph, x: &Tensor, m: usize) -> Result<Tensor> {
    let h = net.output_len();
    if m >= h {
        return Err(Error::IndexOutOfRange { index: m, len: h });
    }
    let acts = net.forward(x)?;
    let mut cot = Tensor::zeros(net.output_shape());
    cot.data_mut()[m] = 1.0;
    let (gin, _) = vjp(net, &acts, &cot, false)?;
    Ok(gin)
}

/// Pulls `cot_out` (shaped like the network output) back to the input.
/// When `want_params` is set, parameter gradients are accumulated per layer.
pub(crate) fn vjp(
    net: &NetworkGraph,
    acts: &[Tensor],
    cot_out: &Tensor,
    want_params: bool,
) -> Result<(Tensor, Vec<Option<LayerGrads>>)> {
    if cot_out.shape() != net.output_shape() {
        return Err(Error::ShapeMismatch {
            context: "vjp cotangent",
            expected: net.output_shape().to_vec(),
            found: cot_out.shape().to_vec(),
        });
    }
    let mut grads: Vec<Option<LayerGrads>> = vec![None; net.layers().len()];
    let mut cot = cot_out.clone();
    for (l, layer) in net.layers().iter().enumerate().rev() {
        let a_in = &acts[l];
        let mut next = Tensor::zeros(a_in.shape());
        match layer {
            Layer::Dense { weight, bias } => {
                dense_pullback(weight, cot.data(), next.data_mut());
                if want_params {
                    grads[l] = Some(dense_param_grads(
                        weight,
                        bias.is_some(),
                        a_in.data(),
                        cot.data(),
                    ));
                }
            }
            Layer::LinearProjection { weight } => {
                dense_pullback(weight, cot.data(), next.data_mut());
                if want_params {
                    grads[l] = Some(dense_param_grads(weight, false, a_in.data(), cot.data()));
                }
            }
            Layer::Conv2D { weight, bias, stride } => {
                let mut wgrad = want_params.then(|| Tensor::zeros(weight.shape()));
                conv_pullback(weight, a_in, &cot, &mut next, *stride, wgrad.as_mut());
                if want_params {
                    let bgrad = bias.as_ref().map(|_| {
                        let c_out = weight.shape()[0];
                        let sp = cot.len() / c_out;
                        let mut b = Tensor::zeros(&[c_out]);
                        for co in 0..c_out {
                            b.data_mut()[co] = cot.data()[co * sp..(co + 1) * sp].iter().sum();
                        }
                        b
                    });
                    grads[l] = Some(LayerGrads {
                        weight: wgrad.unwrap(),
                        bias: bgrad,
                    });
                }
            }
            Layer::ReLU => {
                for ((n, &g), &a) in next.data_mut().iter_mut().zip(cot.data()).zip(a_in.data()) {
                    *n = if a > 0.0 { g } else { 0.0 };
                }
            }
            Layer::MaxPool { window, stride } | Layer::MinPool { window, stride } => {
                let max = matches!(layer, Layer::MaxPool { .. });
                let mut scratch = Vec::new();
                for_each_pool_window(a_in.shape(), window, stride, &mut scratch, |k, cells| {
                    let j = extreme_cell(a_in.data(), cells, max);
                    next.data_mut()[j] += cot.data()[k];
                });
            }
            Layer::SumPool { window, stride } => {
                let mut scratch = Vec::new();
                for_each_pool_window(a_in.shape(), window, stride, &mut scratch, |k, cells| {
                    let g = cot.data()[k];
                    for &j in cells {
                        next.data_mut()[j] += g;
                    }
                });
            }
            Layer::Shift { offset } => {
                for_each_shift_pair(a_in.shape(), offset, |dst, src| {
                    next.data_mut()[src] += cot.data()[dst];
                });
            }
            Layer::BranchMax { branches } => {
                let block: usize = a_in.shape()[1..].iter().product();
                let groups = a_in.shape()[0] / branches;
                for q in 0..groups {
                    for r in 0..block {
                        let mut win = 0usize;
                        for t in 1..*branches {
                            if a_in.data()[(q * branches + t) * block + r]
                                > a_in.data()[(q * branches + win) * block + r]
                            {
                                win = t;
                            }
                        }
                        next.data_mut()[(q * branches + win) * block + r] +=
                            cot.data()[q * block + r];
                    }
                }
            }
        }
        cot = next;
    }
    Ok((cot, grads))
}

fn dense_pullback(weight: &Tensor, cot: &[f64], next: &mut [f64]) {
    let d_out = weight.shape()[1];
    for (j, n) in next.iter_mut().enumerate() {
        let row = &weight.data()[j * d_out..(j + 1) * d_out];
        *n = row.iter().zip(cot).map(|(&w, &g)| w * g).sum();
    }
}

fn dense_param_grads(weight: &Tensor, has_bias: bool, a_in: &[f64], cot: &[f64]) -> LayerGrads {
    let d_out = weight.shape()[1];
    let mut wgrad = Tensor::zeros(weight.shape());
    for (j, &a) in a_in.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &mut wgrad.data_mut()[j * d_out..(j + 1) * d_out];
        for (g, &c) in row.iter_mut().zip(cot) {
            *g = a * c;
        }
    }
    let bias = has_bias.then(|| Tensor::new(vec![d_out], cot.to_vec()).unwrap());
    LayerGrads {
        weight: wgrad,
        bias,
    }
}

fn conv_pullback(
    weight: &Tensor,
    a_in: &Tensor,
    cot: &Tensor,
    next: &mut Tensor,
    stride: (usize, usize),
    mut wgrad: Option<&mut Tensor>,
) {
    let ws = weight.shape();
    let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (h, w) = (a_in.shape()[1], a_in.shape()[2]);
    let (oh, ow) = (cot.shape()[1], cot.shape()[2]);
    let want_wgrad = wgrad.is_some();
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                    let wv = weight.data()[widx];
                    if wv == 0.0 && !want_wgrad {
                        continue;
                    }
                    let mut wacc = 0.0;
                    conv_spatial((h, w), (oh, ow), stride, (ky, kx), |osp, isp| {
                        let g = cot.data()[co * oh * ow + osp];
                        if wv != 0.0 {
                            next.data_mut()[ci * h * w + isp] += wv * g;
                        }
                        if want_wgrad {
                            wacc += a_in.data()[ci * h * w + isp] * g;
                        }
                    });
                    if let Some(wg) = wgrad.as_deref_mut() {
                        wg.data_mut()[widx] = wacc;
                    }
                }
            }
        }
    }
}

/// Full input Jacobian, one column per (flattened) output unit: entry
/// `(i, m)` is `d phi_m / d x_i`. Columns are propagated simultaneously.
pub(crate) fn input_jacobian(net: &NetworkGraph, acts: &[Tensor]) -> Result<Tensor> {
    let h = net.output_len();
    let mut cols = Tensor::zeros(&[h, h]);
    for m in 0..h {
        cols.data_mut()[m * h + m] = 1.0;
    }
    for (l, layer) in net.layers().iter().enumerate().rev() {
        cols = jacobian_step(layer, &acts[l], &cols, h)?;
    }
    Ok(cols)
}

/// One batched backward step: `cols` has one row per output unit of `layer`
/// and `ncols` columns; the result has one row per input unit.
fn jacobian_step(layer: &Layer, a_in: &Tensor, cols: &Tensor, ncols: usize) -> Result<Tensor> {
    if let Layer::Dense { weight, .. } | Layer::LinearProjection { weight } = layer {
        return matmul(weight, cols);
    }
    let n_in = a_in.len();
    let mut next = Tensor::zeros(&[n_in, ncols]);
    match layer {
        Layer::Dense { .. } | Layer::LinearProjection { .. } => unreachable!(),
        Layer::Conv2D { weight, stride, .. } => {
            let ws = weight.shape();
            let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let (h, w) = (a_in.shape()[1], a_in.shape()[2]);
            let oh = (h - kh) / stride.0 + 1;
            let ow = (w - kw) / stride.1 + 1;
            for co in 0..c_out {
                for ci in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = weight.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            conv_spatial((h, w), (oh, ow), *stride, (ky, kx), |osp, isp| {
                                axpy_row(
                                    next.data_mut(),
                                    ci * h * w + isp,
                                    cols.data(),
                                    co * oh * ow + osp,
                                    wv,
                                    ncols,
                                );
                            });
                        }
                    }
                }
            }
        }
        Layer::ReLU => {
            for j in 0..n_in {
                if a_in.data()[j] > 0.0 {
                    next.data_mut()[j * ncols..(j + 1) * ncols]
                        .copy_from_slice(&cols.data()[j * ncols..(j + 1) * ncols]);
                }
            }
        }
        Layer::MaxPool { window, stride } | Layer::MinPool { window, stride } => {
            let max = matches!(layer, Layer::MaxPool { .. });
            let mut scratch = Vec::new();
            for_each_pool_window(a_in.shape(), window, stride, &mut scratch, |k, cells| {
                let j = extreme_cell(a_in.data(), cells, max);
                axpy_row(next.data_mut(), j, cols.data(), k, 1.0, ncols);
            });
        }
        Layer::SumPool { window, stride } => {
            let mut scratch = Vec::new();
            for_each_pool_window(a_in.shape(), window, stride, &mut scratch, |k, cells| {
                for &j in cells {
                    axpy_row(next.data_mut(), j, cols.data(), k, 1.0, ncols);
                }
            });
        }
        Layer::Shift { offset } => {
            for_each_shift_pair(a_in.shape(), offset, |dst, src| {
                axpy_row(next.data_mut(), src, cols.data(), dst, 1.0, ncols);
            });
        }
        Layer::BranchMax { branches } => {
            let block: usize = a_in.shape()[1..].iter().product();
            let groups = a_in.shape()[0] / branches;
            for q in 0..groups {
                for r in 0..block {
                    let mut win = 0usize;
                    for t in 1..*branches {
                        if a_in.data()[(q * branches + t) * block + r]
                            > a_in.data()[(q * branches + win) * block + r]
                        {
                            win = t;
                        }
                    }
                    axpy_row(
                        next.data_mut(),
                        (q * branches + win) * block + r,
                        cols.data(),
                        q * block + r,
                        1.0,
                        ncols,
                    );
                }
            }
        }
    }
    Ok(next)
}

#[inline]
pub(crate) fn axpy_row(
    dst: &mut [f64],
    dst_row: usize,
    src: &[f64],
    src_row: usize,
    w: f64,
    ncols: usize,
) {
    let d = &mut dst[dst_row * ncols..(dst_row + 1) * ncols];
    let s = &src[src_row * ncols..(src_row + 1) * ncols];
    for (dv, &sv) in d.iter_mut().zip(s) {
        *dv += w * sv;
    }
}

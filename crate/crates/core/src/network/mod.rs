//! Typed layer chain realizing a feature map `phi = phi_L o ... o phi_1`,
//! with forward evaluation, reverse-mode gradients, SGD training, and a
//! JSON model file format.
//!
//! A [`NetworkGraph`] is a plain sequence of layers; shapes are checked once
//! at construction. Pools and shifts are rank-generic: their window, stride
//! and offset vectors have one entry per tensor axis, so the same kinds cover
//! 1-D vectors, channel axes and spatial maps. [`Layer::BranchMax`] collapses
//! groups of consecutive leading-axis slices with an elementwise max, which is
//! how parallel branches of a computation are merged while keeping the graph
//! a single chain.

mod format;
mod grad;
mod train;

pub use format::{
    load_model, load_model_with_meta, model_hash, save_model, save_model_with_meta, FORMAT_VERSION,
};
pub use grad::gradient;
pub(crate) use grad::{axpy_row, input_jacobian, vjp, LayerGrads};
pub use train::{train_mse, TrainConfig, TrainPair};

use crate::error::{Error, Result};
use crate::tensor::{rng_gaussian, strides_of, Rng, Tensor};

/// One layer of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Fully connected map; weight shape is `(d_in, d_out)`.
    Dense { weight: Tensor, bias: Option<Tensor> },
    /// 2-D convolution, valid padding; weight shape is `(c_out, c_in, kh, kw)`,
    /// input shape `(c_in, h, w)`.
    Conv2D {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: (usize, usize),
    },
    ReLU,
    /// Max over windows; `window`/`stride` have one entry per input axis.
    MaxPool { window: Vec<usize>, stride: Vec<usize> },
    /// Min over windows.
    MinPool { window: Vec<usize>, stride: Vec<usize> },
    /// Sum over windows.
    SumPool { window: Vec<usize>, stride: Vec<usize> },
    /// Translation by an integer offset per axis; vacated cells are zero-filled.
    Shift { offset: Vec<isize> },
    /// Elementwise max over `branches` consecutive slices of the leading axis:
    /// input `(B*c, ...)` becomes `(c, ...)` with `out[q] = max_t in[q*B + t]`.
    BranchMax { branches: usize },
    /// Bias-free linear map on the flattened input; weight shape `(d_in, d_out)`.
    LinearProjection { weight: Tensor },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2D { .. } => "conv2d",
            Layer::ReLU => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::MinPool { .. } => "min_pool",
            Layer::SumPool { .. } => "sum_pool",
            Layer::Shift { .. } => "shift",
            Layer::BranchMax { .. } => "branch_max",
            Layer::LinearProjection { .. } => "linear_projection",
        }
    }

    /// Layers propagated with the weighted (gamma) relevance rule.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            Layer::Dense { .. } | Layer::Conv2D { .. } | Layer::LinearProjection { .. }
        )
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2D { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    /// Output shape for a given input shape, validating all layer parameters.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { weight, bias } => {
                if weight.rank() != 2 {
                    return Err(Error::InvalidArgument(
                        "dense weight must be rank-2 (d_in, d_out)".into(),
                    ));
                }
                let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
                if input != [d_in] {
                    return Err(Error::ShapeMismatch {
                        context: "dense input",
                        expected: vec![d_in],
                        found: input.to_vec(),
                    });
                }
                if let Some(b) = bias {
                    if b.shape() != [d_out] {
                        return Err(Error::ShapeMismatch {
                            context: "dense bias",
                            expected: vec![d_out],
                            found: b.shape().to_vec(),
                        });
                    }
                }
                Ok(vec![d_out])
            }
            Layer::Conv2D { weight, bias, stride } => {
                if weight.rank() != 4 {
                    return Err(Error::InvalidArgument(
                        "conv weight must be rank-4 (c_out, c_in, kh, kw)".into(),
                    ));
                }
                let ws = weight.shape();
                let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                if input.len() != 3 || input[0] != c_in {
                    return Err(Error::ShapeMismatch {
                        context: "conv input",
                        expected: vec![c_in, kh, kw],
                        found: input.to_vec(),
                    });
                }
                let (h, w) = (input[1], input[2]);
                let (sh, sw) = *stride;
                if sh == 0 || sw == 0 {
                    return Err(Error::InvalidArgument("conv stride must be positive".into()));
                }
                if kh > h || kw > w {
                    return Err(Error::InvalidArgument(format!(
                        "conv kernel ({kh}, {kw}) exceeds input ({h}, {w})"
                    )));
                }
                if let Some(b) = bias {
                    if b.shape() != [c_out] {
                        return Err(Error::ShapeMismatch {
                            context: "conv bias",
                            expected: vec![c_out],
                            found: b.shape().to_vec(),
                        });
                    }
                }
                Ok(vec![c_out, (h - kh) / sh + 1, (w - kw) / sw + 1])
            }
            Layer::ReLU => Ok(input.to_vec()),
            Layer::MaxPool { window, stride }
            | Layer::MinPool { window, stride }
            | Layer::SumPool { window, stride } => pool_output_shape(input, window, stride),
            Layer::Shift { offset } => {
                if offset.len() != input.len() {
                    return Err(Error::InvalidArgument(format!(
                        "shift offset rank {} does not match input rank {}",
                        offset.len(),
                        input.len()
                    )));
                }
                for (d, &o) in offset.iter().enumerate() {
                    if o.unsigned_abs() >= input[d] {
                        return Err(Error::InvalidArgument(format!(
                            "shift offset {} exceeds extent {} on axis {}",
                            o, input[d], d
                        )));
                    }
                }
                Ok(input.to_vec())
            }
            Layer::BranchMax { branches } => {
                let b = *branches;
                if b == 0 {
                    return Err(Error::InvalidArgument("branch count must be positive".into()));
                }
                if input.is_empty() || input[0] % b != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "leading extent {:?} not divisible by branch count {}",
                        input.first(),
                        b
                    )));
                }
                let mut out = input.to_vec();
                out[0] /= b;
                Ok(out)
            }
            Layer::LinearProjection { weight } => {
                if weight.rank() != 2 {
                    return Err(Error::InvalidArgument(
                        "projection weight must be rank-2 (d_in, d_out)".into(),
                    ));
                }
                let flat: usize = input.iter().product();
                if flat != weight.shape()[0] {
                    return Err(Error::ShapeMismatch {
                        context: "projection input",
                        expected: vec![weight.shape()[0]],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![weight.shape()[1]])
            }
        }
    }

    /// Evaluates the layer on one input tensor.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(input.shape())?;
        let mut out = Tensor::zeros(&out_shape);
        match self {
            Layer::Dense { weight, bias } => {
                dense_forward(weight, bias.as_ref(), input.data(), out.data_mut());
            }
            Layer::Conv2D { weight, bias, stride } => {
                conv_forward(weight, bias.as_ref(), input, &mut out, *stride);
            }
            Layer::ReLU => {
                for (o, &v) in out.data_mut().iter_mut().zip(input.data()) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Layer::MaxPool { window, stride } => {
                let mut scratch = Vec::new();
                for_each_pool_window(input.shape(), window, stride, &mut scratch, |k, cells| {
                    out.data_mut()[k] = input.data()[extreme_cell(input.data(), cells, true)];
                });
            }
            Layer::MinPool { window, stride } => {
                let mut scratch = Vec::new();
                for_each_pool_window(input.shape(), window, stride, &mut scratch, |k, cells| {
                    out.data_mut()[k] = input.data()[extreme_cell(input.data(), cells, false)];
                });
            }
            Layer::SumPool { window, stride } => {
                let mut scratch = Vec::new();
                for_each_pool_window(input.shape(), window, stride, &mut scratch, |k, cells| {
                    out.data_mut()[k] = cells.iter().map(|&j| input.data()[j]).sum();
                });
            }
            Layer::Shift { offset } => {
                for_each_shift_pair(input.shape(), offset, |dst, src| {
                    out.data_mut()[dst] = input.data()[src];
                });
            }
            Layer::BranchMax { branches } => {
                let block: usize = input.shape()[1..].iter().product();
                let groups = input.shape()[0] / branches;
                for q in 0..groups {
                    for r in 0..block {
                        let mut best = input.data()[q * branches * block + r];
                        for t in 1..*branches {
                            let v = input.data()[(q * branches + t) * block + r];
                            if v > best {
                                best = v;
                            }
                        }
                        out.data_mut()[q * block + r] = best;
                    }
                }
            }
            Layer::LinearProjection { weight } => {
                dense_forward(weight, None, input.data(), out.data_mut());
            }
        }
        Ok(out)
    }
}

pub(crate) fn dense_forward(weight: &Tensor, bias: Option<&Tensor>, x: &[f64], out: &mut [f64]) {
    let d_out = weight.shape()[1];
    if let Some(b) = bias {
        out.copy_from_slice(b.data());
    }
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let row = &weight.data()[j * d_out..(j + 1) * d_out];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xj * w;
        }
    }
}

fn conv_forward(
    weight: &Tensor,
    bias: Option<&Tensor>,
    input: &Tensor,
    out: &mut Tensor,
    stride: (usize, usize),
) {
    let ws = weight.shape();
    let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (out.shape()[1], out.shape()[2]);
    if let Some(b) = bias {
        for co in 0..c_out {
            let bv = b.data()[co];
            for v in &mut out.data_mut()[co * oh * ow..(co + 1) * oh * ow] {
                *v = bv;
            }
        }
    }
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    conv_spatial((h, w), (oh, ow), stride, (ky, kx), |osp, isp| {
                        out.data_mut()[co * oh * ow + osp] += wv * input.data()[ci * h * w + isp];
                    });
                }
            }
        }
    }
}

/// Visits every (output spatial cell, input spatial cell) pair touched by one
/// kernel tap at offset `(ky, kx)`.
pub(crate) fn conv_spatial(
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    stride: (usize, usize),
    tap: (usize, usize),
    mut f: impl FnMut(usize, usize),
) {
    let (_, w) = in_hw;
    let (oh, ow) = out_hw;
    let (sh, sw) = stride;
    let (ky, kx) = tap;
    for oy in 0..oh {
        let iy = oy * sh + ky;
        for ox in 0..ow {
            let ix = ox * sw + kx;
            f(oy * ow + ox, iy * w + ix);
        }
    }
}

fn pool_output_shape(input: &[usize], window: &[usize], stride: &[usize]) -> Result<Vec<usize>> {
    if window.len() != input.len() || stride.len() != input.len() {
        return Err(Error::InvalidArgument(format!(
            "pool window/stride rank must match input rank {}",
            input.len()
        )));
    }
    let mut out = Vec::with_capacity(input.len());
    for d in 0..input.len() {
        if window[d] == 0 || stride[d] == 0 {
            return Err(Error::InvalidArgument(
                "pool window and stride must be positive".into(),
            ));
        }
        if window[d] > input[d] {
            return Err(Error::InvalidArgument(format!(
                "pool window {} exceeds extent {} on axis {}",
                window[d], input[d], d
            )));
        }
        out.push((input[d] - window[d]) / stride[d] + 1);
    }
    Ok(out)
}

/// Calls `f(out_flat, window_cells)` for every pooling window; `window_cells`
/// are input flat indices in ascending order, so "lowest flat index wins"
/// tie-breaking falls out of picking the first extremum.
pub(crate) fn for_each_pool_window(
    in_shape: &[usize],
    window: &[usize],
    stride: &[usize],
    scratch: &mut Vec<usize>,
    mut f: impl FnMut(usize, &[usize]),
) {
    let out_shape = pool_output_shape(in_shape, window, stride).expect("validated pool");
    let in_strides = strides_of(in_shape);
    let mut out_flat = 0;
    for_each_index(&out_shape, |o| {
        scratch.clear();
        let base: usize = o
            .iter()
            .enumerate()
            .map(|(d, &od)| od * stride[d] * in_strides[d])
            .sum();
        for_each_index(window, |wi| {
            let off: usize = wi
                .iter()
                .enumerate()
                .map(|(d, &wd)| wd * in_strides[d])
                .sum();
            scratch.push(base + off);
        });
        f(out_flat, scratch);
        out_flat += 1;
    });
}

/// First index achieving the max (or min) of `data` over `cells`.
pub(crate) fn extreme_cell(data: &[f64], cells: &[usize], max: bool) -> usize {
    let mut best = cells[0];
    for &j in &cells[1..] {
        let better = if max {
            data[j] > data[best]
        } else {
            data[j] < data[best]
        };
        if better {
            best = j;
        }
    }
    best
}

/// Calls `f(dst_flat, src_flat)` for every cell of a translated tensor whose
/// source lies in bounds. Cells without a source stay zero-filled.
pub(crate) fn for_each_shift_pair(
    shape: &[usize],
    offset: &[isize],
    mut f: impl FnMut(usize, usize),
) {
    let strides = strides_of(shape);
    for_each_index(shape, |dst| {
        let mut src_flat = 0usize;
        for (d, &i) in dst.iter().enumerate() {
            let s = i as isize - offset[d];
            if s < 0 || s >= shape[d] as isize {
                return;
            }
            src_flat += s as usize * strides[d];
        }
        let dst_flat: usize = dst.iter().zip(&strides).map(|(&i, &s)| i * s).sum();
        f(dst_flat, src_flat);
    });
}

/// Row-major odometer over all multi-indices of `shape`.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.iter().any(|&e| e == 0) {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut d = shape.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// An ordered chain of layers with a fixed input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; `shapes[layers.len()]` is
    /// the output shape.
    shapes: Vec<Vec<usize>>,
}

impl NetworkGraph {
    /// Builds the graph, checking that consecutive layer shapes compose.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut shapes = vec![input_shape.clone()];
        for layer in &layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(NetworkGraph {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Input shape of layer `i` (`i = len` gives the output shape).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Number of output units (flattened).
    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// True when no layer carries a bias, or every bias is identically zero.
    pub fn zero_bias(&self) -> bool {
        self.layers
            .iter()
            .filter_map(|l| l.bias())
            .all(|b| b.data().iter().all(|&v| v == 0.0))
    }

    /// Runs the feature map, returning `[x, a_1, ..., a_L]` (the input plus
    /// one activation per layer; the last entry is `phi(x)`).
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.shape() != self.input_shape {
            return Err(Error::ShapeMismatch {
                context: "forward input",
                expected: self.input_shape.clone(),
                found: x.shape().to_vec(),
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = layer.eval(acts.last().unwrap())?;
            acts.push(next);
        }
        Ok(acts)
    }

    /// Final feature vector, flattened.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let acts = self.forward(x)?;
        let last = acts.into_iter().next_back().unwrap();
        let len = last.len();
        last.reshape(&[len])
    }

    /// Mutable access to layer parameters, used by the trainer.
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// A dot-product similarity model `y(x, x') = <phi(x), phi(x')>`, where `phi`
/// is a [`NetworkGraph`] optionally followed by a random projection.
#[derive(Clone, Debug)]
pub struct SimilarityModel {
    graph: NetworkGraph,
    projected: bool,
}

impl SimilarityModel {
    pub fn new(net: NetworkGraph) -> Self {
        SimilarityModel {
            graph: net,
            projected: false,
        }
    }

    /// Appends a bias-free linear projection with the given weight.
    pub fn with_projection(net: NetworkGraph, weight: Tensor) -> Result<Self> {
        let mut layers = net.layers.clone();
        layers.push(Layer::LinearProjection { weight });
        let graph = NetworkGraph::new(net.input_shape.clone(), layers)?;
        Ok(SimilarityModel {
            graph,
            projected: true,
        })
    }

    /// Appends a seeded Gaussian random projection to `dims` output units.
    pub fn with_random_projection(net: NetworkGraph, dims: usize, seed: u64) -> Result<Self> {
        let d_feat = net.output_len();
        let mut rng = Rng::new(seed);
        let weight = rng_gaussian(&mut rng, &[d_feat, dims]);
        Self::with_projection(net, weight)
    }

    /// The full feature map, including the projection when present.
    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn has_projection(&self) -> bool {
        self.projected
    }

    /// Output dimension `h` of the feature map.
    pub fn feature_dim(&self) -> usize {
        self.graph.output_len()
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.graph.features(x)
    }

    /// The predicted similarity `<phi(x), phi(x')>`.
    pub fn similarity(&self, x: &Tensor, xp: &Tensor) -> Result<f64> {
        let fx = self.features(x)?;
        let fxp = self.features(xp)?;
        fx.dot(&fxp)
    }
}

/// Convenience free function mirroring [`SimilarityModel::similarity`].
pub fn similarity(model: &SimilarityModel, x: &Tensor, xp: &Tensor) -> Result<f64> {
    model.similarity(x, xp)
}
